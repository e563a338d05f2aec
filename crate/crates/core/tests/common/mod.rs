#![allow(dead_code)]

use std::fmt::Write as _;

use etmfuzz::sim::{assemble, Device, ProgramImage};
use rand::Rng;

/// Bitmap index for an LCSAJ block, evaluated step by step in 64-bit
/// arithmetic with explicit 32-bit truncation. `bits` is a string of `1`
/// (E) and `0` (N).
pub fn oracle_hash(base: u32, bits: &str, map_size: u64) -> u64 {
    const M: u64 = 0xFFFF_FFFF;
    let mut t: u64 = 0;
    for chunk in bits.as_bytes().chunks(5) {
        let mut c = 0;
        for (j, &b) in chunk.iter().enumerate() {
            if b == b'1' {
                c += 1 << j;
            }
        }
        t ^= c;
    }
    let shl = |x: u64, n: u64| if n >= 32 { 0 } else { (x << n) & M };
    let shr = |x: u64, n: u64| if n >= 32 { 0 } else { x >> n };
    let base = (base as u64 + t) & M;
    let left = shl(base, 32 - t) | shr(base, t);
    let right = shl(base, t) | shr(base, 32 - t);
    let mut id = left | right;
    id ^= id >> 16;
    id = (id * 0x85eb_ca6b) & M;
    id ^= id >> 13;
    id = (id * 0xc2b2_ae35) & M;
    id ^= id >> 16;
    id = ((id >> 4) ^ (id << 8)) & M;
    id % map_size
}

pub const TWO_PATH_SHORT_ID: u64 = 0x56AD;
pub const TWO_PATH_LONG_ID: u64 = 0x46A5;

pub fn device(source: &str) -> Device {
    Device::new(assemble(source).expect("program assembles"))
}

pub fn image(source: &str) -> ProgramImage {
    assemble(source).expect("program assembles")
}

/// Random program of at most 64 instructions: direct and indirect branches,
/// short loops, calls into a subroutine, RAM traffic at aligned addresses.
/// Starts with an input-dependent conditional and ends in the success
/// breakpoint. With `irq`, a handler is installed on vector 15.
pub fn random_program(rng: &mut impl Rng, irq: bool) -> String {
    let body_len = rng.gen_range(4..=42);
    let mut lines: Vec<String> = vec![
        "LDTC r0".into(),
        format!("CMPI r0, {}", rng.gen_range(0..4u8)),
        format!("{} +{}", if rng.gen() { "BEQ" } else { "BNE" }, rng.gen_range(2..=4)),
    ];
    while lines.len() < body_len {
        let remaining = body_len - lines.len();
        // r5 holds the subroutine address, r7 the RAM pointer.
        let r = rng.gen_range(0..5u8);
        let s = rng.gen_range(0..7u8);
        let line = match rng.gen_range(0..15u8) {
            0 => "NOP".to_string(),
            1 => format!("MOVI r{r}, {}", rng.gen_range(0..8u32)),
            2 => format!("ADD r{r}, r{s}"),
            3 => format!("XOR r{r}, r{s}"),
            4 => format!("SHR r{r}, {}", rng.gen_range(0..4u8)),
            5 => format!("CMPI r{r}, {}", rng.gen_range(0..4u8)),
            6 | 7 => format!("LDTC r{r}"),
            8 => format!(
                "{} {:+}",
                if rng.gen() { "BEQ" } else { "BNE" },
                jump(rng, remaining)
            ),
            9 => format!("B +{}", rng.gen_range(1..=remaining.clamp(1, 6))),
            10 => {
                lines.push(format!("MOVI r7, 0x{:08X}", 0x2000_0000u32 + 4 * rng.gen_range(0..16u32)));
                if rng.gen() {
                    format!("ST r{r}, [r7]")
                } else {
                    format!("LD r{r}, [r7]")
                }
            }
            11 => format!("DIV r{r}, r{s}"),
            12 => "BL sub".into(),
            13 => "BX r5".into(),
            _ => "LDTC r0\nCMPI r0, 1\nBEQ +2".into(),
        };
        lines.extend(line.lines().map(String::from));
    }
    let mut src = String::from(".base 0x08000000\n");
    if irq {
        src.push_str(".vector 15 handler\n");
    }
    // Entered through a call so `lr` always holds an image address.
    src.push_str("        MOVI r5, sub\n        BL body\n        BKPT 0xA5\nbody:\n");
    for line in &lines {
        writeln!(src, "        {line}").unwrap();
    }
    // Branches may overshoot the body; the pad absorbs them.
    for _ in 0..6 {
        src.push_str("        BKPT 0xA5\n");
    }
    src.push_str("sub:    ADD r1, r0\n        CMPI r1, 2\n        BNE +2\n        NOP\n        BX lr\n");
    if irq {
        src.push_str("handler: MOVI r6, 3\n        CMPI r6, 3\n        BEQ +2\n        NOP\n        ERET\n");
    }
    src
}

/// Mostly forward offsets, occasionally a short backward loop. Never `+1`:
/// a conditional branch onto its own fall-through executes the same
/// instructions either way.
fn jump(rng: &mut impl Rng, remaining: usize) -> i32 {
    if rng.gen_ratio(1, 5) {
        -rng.gen_range(0..=3)
    } else {
        rng.gen_range(2..=remaining.clamp(2, 6) as i32)
    }
}

pub fn random_input(rng: &mut impl Rng) -> Vec<u8> {
    let len = rng.gen_range(0..=6);
    (0..len).map(|_| rng.gen_range(0..4u8)).collect()
}
