//! Full instruction-flow reconstruction, the expensive baseline.
//!
//! Walks the program image alongside the packet stream, one atom per
//! instruction, to recover the exact sequence of basic blocks. The resulting
//! block trace feeds a QEMU-mode style edge bitmap and serves as the reference
//! against which block extraction straight from packets is checked.

use thiserror::Error;

use crate::coverage::{extract_lcsaj, CoverageState, ExceptionFilterMode, LcsajBB, LcsajExtractor, MapSize};
use crate::sim::{Instruction, ProgramImage, INSTRUCTION_WIDTH};
use crate::trace::{decode_prefix, Atom, DecodeError, MarkerKind, PacketReader, PacketRef, TracePacket};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    /// `offset` is the index of the offending packet.
    #[error("trace/image desync at packet {offset}: {reason}")]
    Desync { offset: usize, reason: String },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

fn desync(offset: usize, reason: impl Into<String>) -> OracleError {
    OracleError::Desync {
        offset,
        reason: reason.into(),
    }
}

/// Executed basic-block start addresses, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockTrace {
    pub blocks: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Nothing,
    Direct(u32),
    Indirect,
    ExceptionReturn,
}

/// Incremental reconstruction; reports each block together with the index of
/// the packet that revealed it.
struct Walker<'a> {
    image: &'a ProgramImage,
    leaders: Vec<bool>,
    mode: ExceptionFilterMode,
    pc: Option<u32>,
    expect: Expect,
    returns: Vec<Option<u32>>,
    depth: u32,
}

impl<'a> Walker<'a> {
    fn new(image: &'a ProgramImage, mode: ExceptionFilterMode) -> Self {
        Self {
            image,
            leaders: image.leaders(),
            mode,
            pc: None,
            expect: Expect::Nothing,
            returns: Vec::new(),
            depth: 0,
        }
    }

    fn check_target(&self, offset: usize, target: u32) -> Result<(), OracleError> {
        if self.image.contains(target) {
            Ok(())
        } else {
            Err(desync(offset, format!("branch target 0x{target:08X} is not in the image")))
        }
    }

    fn step(&mut self, offset: usize, atom: Atom, emit: &mut impl FnMut(u32)) -> Result<(), OracleError> {
        if self.expect != Expect::Nothing {
            return Err(desync(offset, "atom where a branch packet was due"));
        }
        let Some(pc) = self.pc else {
            return Ok(());
        };
        let Some(index) = self.image.index_of(pc) else {
            return Err(desync(offset, format!("execution left the image at 0x{pc:08X}")));
        };
        let insn = self.image.instructions[index];
        let fall_through = |this: &mut Self, emit: &mut dyn FnMut(u32)| {
            let next = pc.wrapping_add(INSTRUCTION_WIDTH);
            this.pc = Some(next);
            if this.leaders.get(index + 1).copied().unwrap_or(false) {
                emit(next);
            }
        };
        match insn {
            Instruction::Beq { .. } | Instruction::Bne { .. } => {
                if atom.is_e() {
                    self.expect = Expect::Direct(self.image.direct_target(index).expect("direct"));
                } else {
                    fall_through(self, emit);
                }
            }
            _ if !atom.is_e() => {
                return Err(desync(offset, format!("N atom on unconditional `{insn}` at 0x{pc:08X}")));
            }
            Instruction::B { .. } | Instruction::Bl { .. } => {
                self.expect = Expect::Direct(self.image.direct_target(index).expect("direct"));
            }
            Instruction::Bx { .. } => self.expect = Expect::Indirect,
            Instruction::Eret => self.expect = Expect::ExceptionReturn,
            Instruction::Bkpt { .. } => {
                return Err(desync(offset, format!("atom for breakpoint at 0x{pc:08X}")));
            }
            _ => fall_through(self, emit),
        }
        Ok(())
    }

    fn feed(&mut self, offset: usize, packet: &TracePacket, emit: &mut impl FnMut(u32)) -> Result<(), OracleError> {
        match packet {
            TracePacket::AtomGroup(group) => {
                if self.skipping() {
                    return Ok(());
                }
                for &atom in group {
                    self.step(offset, atom, emit)?;
                }
                Ok(())
            }
            TracePacket::Branch { target, exception } => self.feed_ref(
                offset,
                PacketRef::Branch {
                    target: *target,
                    exception: *exception,
                },
                emit,
            ),
            TracePacket::ExceptionReturn => self.feed_ref(offset, PacketRef::ExceptionReturn, emit),
            TracePacket::TraceMarker(m) => self.feed_ref(offset, PacketRef::TraceMarker(*m), emit),
        }
    }

    fn skipping(&self) -> bool {
        self.mode == ExceptionFilterMode::Discard && self.depth > 0
    }

    fn feed_ref(&mut self, offset: usize, packet: PacketRef, emit: &mut impl FnMut(u32)) -> Result<(), OracleError> {
        if self.skipping() {
            match packet {
                PacketRef::Branch { exception: Some(_), .. } => self.depth += 1,
                PacketRef::ExceptionReturn => self.depth -= 1,
                _ => {}
            }
            return Ok(());
        }
        match packet {
            PacketRef::Atoms { bits, count } => {
                for i in 0..count {
                    self.step(offset, Atom(bits >> i & 1 == 1), emit)?;
                }
            }
            PacketRef::Branch { target, exception: None } => {
                self.check_target(offset, target)?;
                match self.expect {
                    Expect::Direct(t) if t != target => {
                        return Err(desync(
                            offset,
                            format!("branch packet to 0x{target:08X}, image branches to 0x{t:08X}"),
                        ))
                    }
                    Expect::Direct(_) | Expect::Indirect => {}
                    Expect::Nothing if self.pc.is_none() => {}
                    Expect::Nothing => {
                        return Err(desync(offset, "branch packet where the image has no taken branch"))
                    }
                    Expect::ExceptionReturn => {
                        return Err(desync(offset, "branch packet where an exception return was due"))
                    }
                }
                self.expect = Expect::Nothing;
                self.pc = Some(target);
                emit(target);
            }
            PacketRef::Branch { target, exception: Some(_) } => {
                self.check_target(offset, target)?;
                if self.expect != Expect::Nothing {
                    return Err(desync(offset, "exception entry while a branch packet was due"));
                }
                if self.mode == ExceptionFilterMode::Discard {
                    self.depth = 1;
                } else {
                    self.returns.push(self.pc);
                    self.pc = Some(target);
                    emit(target);
                }
            }
            PacketRef::ExceptionReturn => {
                if self.pc.is_some() && self.expect != Expect::ExceptionReturn {
                    return Err(desync(offset, "exception return without ERET"));
                }
                self.expect = Expect::Nothing;
                self.pc = self.returns.pop().flatten();
                if let Some(ret) = self.pc {
                    emit(ret);
                }
            }
            PacketRef::TraceMarker(MarkerKind::Stop) => {
                self.pc = None;
                self.expect = Expect::Nothing;
            }
            PacketRef::TraceMarker(MarkerKind::Start) => {}
        }
        Ok(())
    }
}

/// Rebuilds the executed block sequence by aligning packets with the image.
/// Requires a trace recorded with direct-branch packets enabled.
pub fn reconstruct_flow(
    image: &ProgramImage,
    packets: &[TracePacket],
    mode: ExceptionFilterMode,
) -> Result<BlockTrace, OracleError> {
    let mut walker = Walker::new(image, mode);
    let mut blocks = Vec::new();
    for (offset, packet) in packets.iter().enumerate() {
        walker.feed(offset, packet, &mut |addr| blocks.push(addr))?;
    }
    Ok(BlockTrace { blocks })
}

/// `(addr >> 4) ^ (addr << 8)` in 32-bit arithmetic, before masking.
pub fn qemu_style_location(block_address: u32) -> u32 {
    (block_address >> 4) ^ (block_address << 8)
}

pub fn block_trace_to_bitmap(trace: &BlockTrace, map_size: MapSize) -> Vec<u8> {
    let mut state = CoverageState::new(map_size);
    for &addr in &trace.blocks {
        state.update(qemu_style_location(addr) & map_size.mask());
    }
    state.into_bitmap()
}

/// Decode + reconstruct + bitmap, the full baseline pipeline on raw bytes.
pub fn raw_trace_to_block_bitmap(
    image: &ProgramImage,
    raw: &[u8],
    mode: ExceptionFilterMode,
    map_size: MapSize,
) -> Result<Vec<u8>, OracleError> {
    let mut walker = Walker::new(image, mode);
    let mut state = CoverageState::new(map_size);
    let mut reader = PacketReader::new(raw);
    let mut offset = 0;
    while let Some(packet) = reader.next_ref() {
        walker.feed_ref(offset, packet?, &mut |addr| {
            state.update(qemu_style_location(addr) & map_size.mask())
        })?;
        offset += 1;
    }
    Ok(state.into_bitmap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Discrimination {
    Agree,
    Disagree(DisagreeDetail),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisagreeDetail {
    pub blocks_equal: bool,
    pub lcsaj_equal: bool,
    /// First index where the block traces differ (`None` if equal).
    pub first_block_divergence: Option<usize>,
    /// First index where the block sequences from packets differ.
    pub first_lcsaj_divergence: Option<usize>,
}

fn first_divergence<T: PartialEq>(a: &[T], b: &[T]) -> Option<usize> {
    let common = a.iter().zip(b).position(|(x, y)| x != y);
    match common {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

/// [`reconstruct_flow`] restricted to the stretches of execution that a
/// branch packet closes. Blocks after the last closing branch, and before a
/// Stop marker, belong to no complete LCSAJ and are left out.
pub fn closed_flow(
    image: &ProgramImage,
    packets: &[TracePacket],
    mode: ExceptionFilterMode,
) -> Result<BlockTrace, OracleError> {
    let mut walker = Walker::new(image, mode);
    let (mut closed, mut open) = (Vec::new(), Vec::new());
    for (offset, packet) in packets.iter().enumerate() {
        if !walker.skipping() {
            match packet {
                TracePacket::Branch { exception, .. }
                    if exception.is_none() || mode == ExceptionFilterMode::Keep =>
                {
                    closed.append(&mut open)
                }
                TracePacket::TraceMarker(MarkerKind::Stop) => open.clear(),
                _ => {}
            }
        }
        walker.feed(offset, packet, &mut |addr| open.push(addr))?;
    }
    Ok(BlockTrace { blocks: closed })
}

/// Checks that packet-level block extraction tells two traces apart exactly
/// when full reconstruction does, over the branch-closed part of each run
/// (see [`closed_flow`]).
pub fn discrimination_check(
    image: &ProgramImage,
    raw_a: &[u8],
    raw_b: &[u8],
    mode: ExceptionFilterMode,
) -> Result<Discrimination, OracleError> {
    let pa = crate::trace::decode_packets(raw_a)?;
    let pb = crate::trace::decode_packets(raw_b)?;
    let ba = closed_flow(image, &pa, mode)?;
    let bb = closed_flow(image, &pb, mode)?;
    let la: Vec<LcsajBB> = extract_lcsaj(&pa, mode).blocks;
    let lb: Vec<LcsajBB> = extract_lcsaj(&pb, mode).blocks;
    let blocks_equal = ba == bb;
    let lcsaj_equal = la == lb;
    if blocks_equal == lcsaj_equal {
        Ok(Discrimination::Agree)
    } else {
        Ok(Discrimination::Disagree(DisagreeDetail {
            blocks_equal,
            lcsaj_equal,
            first_block_divergence: first_divergence(&ba.blocks, &bb.blocks),
            first_lcsaj_divergence: first_divergence(&la, &lb),
        }))
    }
}

/// Human-readable event listing of a trace: `BLOCK 0x…`, `LCSAJ 0x… bits=…`,
/// `EXC n`, `ERET`, in stream order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodeReport {
    pub lines: Vec<String>,
    /// First failure; `lines` covers everything before it.
    pub error: Option<OracleError>,
}

impl DecodeReport {
    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

pub fn decode_report(
    image: &ProgramImage,
    raw: &[u8],
    mode: ExceptionFilterMode,
    lcsaj_only: bool,
) -> DecodeReport {
    const LCSAJ: u8 = 0;
    const EXC: u8 = 1;
    const ERET: u8 = 2;
    const BLOCK: u8 = 3;

    let (packets, decode_error) = decode_prefix(raw);
    let mut events: Vec<(usize, u8, String)> = Vec::new();
    let mut extractor = LcsajExtractor::new(mode);
    let mut walker = Walker::new(image, mode);
    let mut error = decode_error.map(OracleError::from);

    for (offset, packet) in packets.iter().enumerate() {
        if let Some(bb) = extractor.feed(packet) {
            events.push((offset, LCSAJ, format!("LCSAJ 0x{:08X} bits={}", bb.base, bb.bits())));
        }
        match packet {
            TracePacket::Branch { exception: Some(info), .. } => {
                events.push((offset, EXC, format!("EXC {}", info.number)))
            }
            TracePacket::ExceptionReturn => events.push((offset, ERET, "ERET".to_string())),
            _ => {}
        }
        if !lcsaj_only {
            let mut blocks = Vec::new();
            if let Err(e) = walker.feed(offset, packet, &mut |addr| blocks.push(addr)) {
                error = Some(e);
                break;
            }
            events.extend(blocks.into_iter().map(|a| (offset, BLOCK, format!("BLOCK 0x{a:08X}"))));
        }
    }
    events.sort_by_key(|(offset, kind, _)| (*offset, *kind));
    DecodeReport {
        lines: events.into_iter().map(|(_, _, line)| line).collect(),
        error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::programs;
    use crate::sim::assemble;
    use crate::trace::{atoms, group_atoms};

    fn two_path() -> ProgramImage {
        assemble(programs::TWO_PATH).unwrap()
    }

    fn packets(path: &str) -> Vec<TracePacket> {
        let mut p = vec![TracePacket::branch(programs::TWO_PATH_A)];
        p.extend(group_atoms(&atoms(path)));
        p.push(TracePacket::branch(programs::TWO_PATH_C));
        p
    }

    #[test]
    fn reconstruct_two_path() {
        let image = two_path();
        let abc = reconstruct_flow(&image, &packets("EEENEEEE"), ExceptionFilterMode::Discard).unwrap();
        assert_eq!(abc.blocks, vec![0x0800_0546, 0x0800_054E, 0x0800_0584]);
        let ac = reconstruct_flow(&image, &packets("EEEE"), ExceptionFilterMode::Discard).unwrap();
        assert_eq!(ac.blocks, vec![0x0800_0546, 0x0800_0584]);
    }

    #[test]
    fn branch_outside_image_desyncs() {
        let image = two_path();
        let err = reconstruct_flow(
            &image,
            &[TracePacket::branch(0x0900_0000)],
            ExceptionFilterMode::Keep,
        )
        .unwrap_err();
        assert!(matches!(err, OracleError::Desync { offset: 0, .. }));
    }

    #[test]
    fn branch_without_image_branch_desyncs() {
        let image = two_path();
        let p = [
            TracePacket::branch(programs::TWO_PATH_A),
            TracePacket::atom_group("E"),
            TracePacket::branch(programs::TWO_PATH_C),
        ];
        assert!(matches!(
            reconstruct_flow(&image, &p, ExceptionFilterMode::Keep),
            Err(OracleError::Desync { offset: 2, .. })
        ));
        // wrong direct target
        let p = [
            TracePacket::branch(programs::TWO_PATH_A),
            TracePacket::atom_group("EEEE"),
            TracePacket::branch(0x0800_054E),
        ];
        assert!(matches!(
            reconstruct_flow(&image, &p, ExceptionFilterMode::Keep),
            Err(OracleError::Desync { offset: 2, .. })
        ));
        // N atom on a NOP
        let p = [TracePacket::branch(programs::TWO_PATH_A), TracePacket::atom_group("N")];
        assert!(reconstruct_flow(&image, &p, ExceptionFilterMode::Keep).is_err());
    }

    #[test]
    fn qemu_location_examples() {
        assert_eq!(qemu_style_location(0), 0);
        assert_eq!(qemu_style_location(0x0800_0584), 0x0085_8458);
    }

    #[test]
    fn block_bitmaps() {
        let ms = MapSize::default();
        assert!(block_trace_to_bitmap(&BlockTrace::default(), ms).iter().all(|&b| b == 0));
        let single = block_trace_to_bitmap(&BlockTrace { blocks: vec![0x0800_0546] }, ms);
        assert_eq!(single.iter().filter(|&&b| b != 0).count(), 1);

        let image = two_path();
        let abc = reconstruct_flow(&image, &packets("EEENEEEE"), ExceptionFilterMode::Discard).unwrap();
        let ac = reconstruct_flow(&image, &packets("EEEE"), ExceptionFilterMode::Discard).unwrap();
        assert_ne!(block_trace_to_bitmap(&abc, ms), block_trace_to_bitmap(&ac, ms));
    }

    #[test]
    fn report_lines() {
        let image = two_path();
        let raw = crate::trace::encode_packets(&packets("EEENEEEE")).unwrap();
        let report = decode_report(&image, &raw.0, ExceptionFilterMode::Discard, false);
        assert_eq!(report.error, None);
        assert_eq!(
            report.lines,
            vec![
                "BLOCK 0x08000546",
                "BLOCK 0x0800054E",
                "LCSAJ 0x08000546 bits=11101111",
                "BLOCK 0x08000584",
            ]
        );
        let only = decode_report(&image, &raw.0, ExceptionFilterMode::Discard, true);
        assert_eq!(only.lines, vec!["LCSAJ 0x08000546 bits=11101111"]);
    }

    #[test]
    fn two_path_runs_agree() {
        let image = two_path();
        let abc = crate::trace::encode_packets(&packets("EEENEEEE")).unwrap();
        let ac = crate::trace::encode_packets(&packets("EEEE")).unwrap();
        for (a, b) in [(&abc, &ac), (&abc, &abc), (&ac, &ac)] {
            assert_eq!(
                discrimination_check(&image, &a.0, &b.0, ExceptionFilterMode::Discard).unwrap(),
                Discrimination::Agree
            );
        }
    }

    #[test]
    fn closed_flow_drops_open_tail() {
        let image = two_path();
        let mut p = vec![TracePacket::branch(programs::TWO_PATH_A)];
        p.extend(group_atoms(&atoms("EEENE")));
        let mode = ExceptionFilterMode::Discard;
        assert_eq!(reconstruct_flow(&image, &p, mode).unwrap().blocks, vec![0x0800_0546, 0x0800_054E]);
        assert!(closed_flow(&image, &p, mode).unwrap().blocks.is_empty());
        assert_eq!(
            closed_flow(&image, &packets("EEENEEEE"), mode).unwrap().blocks,
            vec![0x0800_0546, 0x0800_054E]
        );
        p.push(TracePacket::TraceMarker(MarkerKind::Stop));
        assert!(closed_flow(&image, &p, mode).unwrap().blocks.is_empty());
    }

    #[test]
    fn branch_onto_fall_through_splits_only_lcsaj() {
        use crate::sim::{Device, Slot};
        let image = assemble("LDTC r0\nCMPI r0, 1\nBEQ +1\nB +1\nBKPT 0xA5\n").unwrap();
        let mut d = Device::new(image.clone());
        let mut trace = |input: &[u8]| {
            d.reset();
            d.load_testcase(input, Slot::Current).unwrap();
            d.run(100).trace
        };
        let (taken, not_taken) = (trace(&[1]), trace(&[0]));
        let verdict = discrimination_check(&image, &taken.0, &not_taken.0, ExceptionFilterMode::Discard).unwrap();
        let Discrimination::Disagree(detail) = verdict else {
            panic!("expected the known disagreement");
        };
        assert!(detail.blocks_equal && !detail.lcsaj_equal);
    }

    #[test]
    fn first_divergence_positions() {
        assert_eq!(first_divergence(&[1, 2, 3], &[1, 2, 3]), None);
        assert_eq!(first_divergence(&[1, 2, 3], &[1, 5, 3]), Some(1));
        assert_eq!(first_divergence(&[1, 2], &[1, 2, 3]), Some(2));
    }
}
