use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Largest magnitude used by the arithmetic stage.
pub const ARITH_MAX: u8 = 35;
/// Upper bound on stacked havoc edits (`1 << HAVOC_STACK_POW2`).
pub const HAVOC_STACK_POW2: u32 = 6;
const HAVOC_BLOCK_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// The `n`-th mutant of the deterministic walk.
    Deterministic(usize),
    Havoc,
}

/// Mutants in the deterministic walk over an input of `len` bytes:
/// 1-, 2- and 4-bit flips at every bit position, byte flips, then ±1..=35 at
/// every byte.
pub fn deterministic_count(len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    let bits = 8 * len;
    bits + (bits - 1) + (bits - 3) + len + 2 * ARITH_MAX as usize * len
}

fn flip_bit(data: &mut [u8], bit: usize) {
    data[bit / 8] ^= 0x80 >> (bit % 8);
}

/// The `index`-th deterministic mutant, or `None` past the end of the walk.
/// Bits are numbered MSB-first within each byte.
pub fn deterministic(input: &[u8], index: usize) -> Option<Vec<u8>> {
    let len = input.len();
    if index >= deterministic_count(len) {
        return None;
    }
    let mut out = input.to_vec();
    let bits = 8 * len;
    let mut i = index;
    for width in [1, 2, 4] {
        let positions = bits + 1 - width;
        if i < positions {
            for b in i..i + width {
                flip_bit(&mut out, b);
            }
            return Some(out);
        }
        i -= positions;
    }
    if i < len {
        out[i] ^= 0xFF;
        return Some(out);
    }
    i -= len;
    let per_byte = 2 * ARITH_MAX as usize;
    let (pos, k) = (i / per_byte, i % per_byte);
    let delta = (k / 2 + 1) as u8;
    out[pos] = if k % 2 == 0 {
        out[pos].wrapping_add(delta)
    } else {
        out[pos].wrapping_sub(delta)
    };
    Some(out)
}

/// Applies 1..=64 random stacked edits: bit flip, random byte, insert,
/// block delete, block duplicate. Never grows past `capacity`.
pub fn havoc(input: &[u8], rng: &mut ChaCha8Rng, capacity: usize) -> Vec<u8> {
    let mut out = input.to_vec();
    out.truncate(capacity);
    let edits = 1usize << rng.gen_range(0..=HAVOC_STACK_POW2);
    for _ in 0..edits {
        match rng.gen_range(0..5u8) {
            0 if !out.is_empty() => {
                let bit = rng.gen_range(0..out.len() * 8);
                flip_bit(&mut out, bit);
            }
            1 if !out.is_empty() => {
                let pos = rng.gen_range(0..out.len());
                out[pos] = rng.gen();
            }
            2 if out.len() < capacity => {
                let pos = rng.gen_range(0..=out.len());
                out.insert(pos, rng.gen());
            }
            3 if !out.is_empty() => {
                let n = rng.gen_range(1..=out.len().min(HAVOC_BLOCK_MAX));
                let pos = rng.gen_range(0..=out.len() - n);
                out.drain(pos..pos + n);
            }
            4 if !out.is_empty() && out.len() < capacity => {
                let n = rng.gen_range(1..=out.len().min(HAVOC_BLOCK_MAX).min(capacity - out.len()));
                let src = rng.gen_range(0..=out.len() - n);
                let dst = rng.gen_range(0..=out.len());
                let block: Vec<u8> = out[src..src + n].to_vec();
                out.splice(dst..dst, block);
            }
            _ => {}
        }
    }
    out
}

/// Produces one mutant. Deterministic indices past the end of the walk (and
/// any index on an empty input) fall back to havoc.
pub fn mutate(input: &[u8], rng: &mut ChaCha8Rng, stage: Stage, capacity: usize) -> Vec<u8> {
    match stage {
        Stage::Deterministic(i) => match deterministic(input, i) {
            Some(m) => m,
            None => havoc(input, rng, capacity),
        },
        Stage::Havoc => havoc(input, rng, capacity),
    }
}
