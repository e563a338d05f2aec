//! Trace packet vocabulary and the byte-level codec for the ETM-like stream.
//!
//! Wire format, one packet after another with no framing between them:
//!
//! | packet            | bytes                                                          |
//! |-------------------|----------------------------------------------------------------|
//! | atom group        | `0b0nnn_aaaa`: count `n` in 1..=7 in bits 6..4, atom `i` in bit `i` |
//! | branch            | `0x80`, 4-byte LE target, info octet (bit0 = exception entry), [exception number] |
//! | exception return  | `0xC0`                                                         |
//! | trace start/stop  | `0xE1` / `0xE0`                                                |
//!
//! Atom 0 is the first executed instruction of the group. For groups of five
//! or more atoms, atom bits 4..=6 share the byte with the count field, so such
//! a group is only encodable when atom `i` (for `i >= 4`) equals bit `i - 4` of
//! the count. Emitters flush the longest encodable prefix, which is at least
//! four atoms long. A header with a zero count is rejected on decode.

use std::fmt;

use thiserror::Error;

/// Maximum number of atoms carried by one atom-group header.
pub const MAX_ATOMS_PER_GROUP: usize = 7;

const BRANCH_HEADER: u8 = 0x80;
const EXCEPTION_RETURN_HEADER: u8 = 0xC0;
const MARKER_START: u8 = 0xE1;
const MARKER_STOP: u8 = 0xE0;
const BRANCH_INFO_EXCEPTION: u8 = 0x01;
const BRANCH_LEN: usize = 6;

/// Outcome of one executed instruction: `E` (condition held) or `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Atom(pub bool);

impl Atom {
    pub const E: Atom = Atom(true);
    pub const N: Atom = Atom(false);

    pub fn is_e(self) -> bool {
        self.0
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0 { "E" } else { "N" })
    }
}

/// Parses a string of `E`/`N` (or `1`/`0`) characters. Handy in tests.
pub fn atoms(s: &str) -> Vec<Atom> {
    s.chars()
        .filter_map(|c| match c {
            'E' | 'e' | '1' => Some(Atom::E),
            'N' | 'n' | '0' => Some(Atom::N),
            _ => None,
        })
        .collect()
}

/// Exception number attached to a branch caused by exception entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExceptionInfo {
    pub number: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MarkerKind {
    Start,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TracePacket {
    /// 1..=7 atoms, first executed first.
    AtomGroup(Vec<Atom>),
    Branch {
        target: u32,
        exception: Option<ExceptionInfo>,
    },
    ExceptionReturn,
    TraceMarker(MarkerKind),
}

impl TracePacket {
    pub fn branch(target: u32) -> Self {
        TracePacket::Branch {
            target,
            exception: None,
        }
    }

    pub fn exception_entry(target: u32, number: u8) -> Self {
        TracePacket::Branch {
            target,
            exception: Some(ExceptionInfo { number }),
        }
    }

    pub fn atom_group(s: &str) -> Self {
        TracePacket::AtomGroup(atoms(s))
    }
}

/// Splits an atom sequence into groups the way an emitter flushes them: the
/// longest encodable prefix each time.
pub fn group_atoms(mut seq: &[Atom]) -> Vec<TracePacket> {
    let mut out = Vec::new();
    while !seq.is_empty() {
        let n = encodable_prefix_len(seq);
        out.push(TracePacket::AtomGroup(seq[..n].to_vec()));
        seq = &seq[n..];
    }
    out
}

/// Raw trace bytes as captured from the device.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct RawTrace(pub Vec<u8>);

impl RawTrace {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn packets(&self) -> PacketReader<'_> {
        PacketReader::new(&self.0)
    }
}

impl From<Vec<u8>> for RawTrace {
    fn from(bytes: Vec<u8>) -> Self {
        RawTrace(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("invalid packet #{index}: atom group of length {len} does not fit one header octet")]
    InvalidPacket { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated packet at offset {offset}")]
    TruncatedPacket { offset: usize },
    #[error("unknown header 0x{byte:02X} at offset {offset}")]
    UnknownHeader { offset: usize, byte: u8 },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match *self {
            DecodeError::TruncatedPacket { offset } | DecodeError::UnknownHeader { offset, .. } => {
                offset
            }
        }
    }
}

/// Appends the encoding of a single packet.
pub fn encode_packet_into(packet: &TracePacket, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    match packet {
        TracePacket::AtomGroup(group) => {
            if !atom_group_encodable(group) {
                return Err(EncodeError::InvalidPacket {
                    index: 0,
                    len: group.len(),
                });
            }
            let mut header = (group.len() as u8) << 4;
            for (i, atom) in group.iter().enumerate() {
                if atom.is_e() {
                    header |= 1 << i;
                }
            }
            out.push(header);
        }
        TracePacket::Branch { target, exception } => {
            out.push(BRANCH_HEADER);
            out.extend_from_slice(&target.to_le_bytes());
            match exception {
                Some(info) => {
                    out.push(BRANCH_INFO_EXCEPTION);
                    out.push(info.number);
                }
                None => out.push(0),
            }
        }
        TracePacket::ExceptionReturn => out.push(EXCEPTION_RETURN_HEADER),
        TracePacket::TraceMarker(MarkerKind::Start) => out.push(MARKER_START),
        TracePacket::TraceMarker(MarkerKind::Stop) => out.push(MARKER_STOP),
    }
    Ok(())
}

pub fn encode_packets(packets: &[TracePacket]) -> Result<RawTrace, EncodeError> {
    let mut out = Vec::with_capacity(packets.len() * 2);
    for (index, p) in packets.iter().enumerate() {
        encode_packet_into(p, &mut out).map_err(|e| match e {
            EncodeError::InvalidPacket { len, .. } => EncodeError::InvalidPacket { index, len },
        })?;
    }
    Ok(RawTrace(out))
}

/// Streaming packet decoder. Yields packets in stream order; after the first
/// error it yields that error once and then stops.
#[derive(Debug, Clone)]
pub struct PacketReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    failed: bool,
}

impl<'a> PacketReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            failed: false,
        }
    }

    /// Byte offset of the next packet.
    pub fn offset(&self) -> usize {
        self.pos
    }

    /// Decodes the next packet without allocating.
    pub fn next_ref(&mut self) -> Option<Result<PacketRef, DecodeError>> {
        if self.failed || self.pos >= self.bytes.len() {
            return None;
        }
        let r = self.decode_ref();
        if r.is_err() {
            self.failed = true;
        }
        Some(r)
    }

    fn decode_ref(&mut self) -> Result<PacketRef, DecodeError> {
        let start = self.pos;
        let header = self.bytes[start];
        match header {
            0x00..=0x7F => {
                let count = (header >> 4) & 0x7;
                if count == 0 || !atom_header_well_formed(header, count as usize) {
                    return Err(DecodeError::UnknownHeader {
                        offset: start,
                        byte: header,
                    });
                }
                self.pos += 1;
                Ok(PacketRef::Atoms {
                    bits: header & (((1u16 << count) - 1) as u8),
                    count,
                })
            }
            BRANCH_HEADER => {
                if self.bytes.len() < start + BRANCH_LEN {
                    return Err(DecodeError::TruncatedPacket { offset: start });
                }
                let target = u32::from_le_bytes(
                    self.bytes[start + 1..start + 5]
                        .try_into()
                        .expect("slice of length 4"),
                );
                let info = self.bytes[start + 5];
                let exception = match info {
                    0 => {
                        self.pos = start + BRANCH_LEN;
                        None
                    }
                    BRANCH_INFO_EXCEPTION => {
                        if self.bytes.len() < start + BRANCH_LEN + 1 {
                            return Err(DecodeError::TruncatedPacket { offset: start });
                        }
                        self.pos = start + BRANCH_LEN + 1;
                        Some(ExceptionInfo {
                            number: self.bytes[start + BRANCH_LEN],
                        })
                    }
                    byte => {
                        return Err(DecodeError::UnknownHeader {
                            offset: start + 5,
                            byte,
                        })
                    }
                };
                Ok(PacketRef::Branch { target, exception })
            }
            EXCEPTION_RETURN_HEADER => {
                self.pos += 1;
                Ok(PacketRef::ExceptionReturn)
            }
            MARKER_START => {
                self.pos += 1;
                Ok(PacketRef::TraceMarker(MarkerKind::Start))
            }
            MARKER_STOP => {
                self.pos += 1;
                Ok(PacketRef::TraceMarker(MarkerKind::Stop))
            }
            byte => Err(DecodeError::UnknownHeader {
                offset: start,
                byte,
            }),
        }
    }
}

/// Allocation-free view of a decoded packet. Atom `i` of a group is bit `i`
/// of `bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketRef {
    Atoms { bits: u8, count: u8 },
    Branch {
        target: u32,
        exception: Option<ExceptionInfo>,
    },
    ExceptionReturn,
    TraceMarker(MarkerKind),
}

impl From<PacketRef> for TracePacket {
    fn from(p: PacketRef) -> Self {
        match p {
            PacketRef::Atoms { bits, count } => {
                TracePacket::AtomGroup((0..count).map(|i| Atom(bits >> i & 1 == 1)).collect())
            }
            PacketRef::Branch { target, exception } => TracePacket::Branch { target, exception },
            PacketRef::ExceptionReturn => TracePacket::ExceptionReturn,
            PacketRef::TraceMarker(m) => TracePacket::TraceMarker(m),
        }
    }
}

fn atom_header_well_formed(header: u8, count: usize) -> bool {
    let atom_mask = ((1u16 << count) - 1) as u8;
    let rebuilt = ((count as u8) << 4) | (header & atom_mask);
    rebuilt == header
}

/// Whether a group fits the one-octet header.
///
/// Atom `i` sits in bit `i` and the count sits in bits 6..4, so for groups of
/// five or more atoms, atoms 4.. share bits with the count. Such a group is
/// representable only when those atoms equal the corresponding count bits
/// (e.g. `EEENEEE` is `0x77`). Groups of up to four atoms always fit.
pub fn atom_group_encodable(group: &[Atom]) -> bool {
    let n = group.len();
    if n == 0 || n > MAX_ATOMS_PER_GROUP {
        return false;
    }
    group
        .iter()
        .enumerate()
        .skip(4)
        .all(|(i, a)| a.is_e() == ((n >> (i - 4)) & 1 == 1))
}

/// Length of the longest encodable prefix of `pending` (at least 1 when
/// `pending` is non-empty).
pub fn encodable_prefix_len(pending: &[Atom]) -> usize {
    (1..=pending.len().min(MAX_ATOMS_PER_GROUP))
        .rev()
        .find(|&n| atom_group_encodable(&pending[..n]))
        .unwrap_or(0)
}

/// Header octet for the first `count` atoms of `bits` (atom `i` in bit `i`),
/// if that group is encodable.
pub fn atom_header(bits: u8, count: u8) -> Option<u8> {
    if count == 0 || count as usize > MAX_ATOMS_PER_GROUP {
        return None;
    }
    let mask = ((1u16 << count) - 1) as u8;
    let header = (count << 4) | (bits & mask);
    (bits & mask & 0x70 == (count << 4) & mask).then_some(header)
}

/// Bit-level [`encodable_prefix_len`].
pub fn encodable_prefix_bits(bits: u8, count: u8) -> u8 {
    (1..=count.min(MAX_ATOMS_PER_GROUP as u8))
        .rev()
        .find(|&n| atom_header(bits, n).is_some())
        .unwrap_or(0)
}

impl Iterator for PacketReader<'_> {
    type Item = Result<TracePacket, DecodeError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_ref().map(|r| r.map(TracePacket::from))
    }
}

/// Decodes a whole stream, failing on the first malformed packet.
pub fn decode_packets(raw: &[u8]) -> Result<Vec<TracePacket>, DecodeError> {
    PacketReader::new(raw).collect()
}

/// Decodes as far as possible: every packet before the fault, plus the fault.
pub fn decode_prefix(raw: &[u8]) -> (Vec<TracePacket>, Option<DecodeError>) {
    let mut packets = Vec::new();
    for item in PacketReader::new(raw) {
        match item {
            Ok(p) => packets.push(p),
            Err(e) => return (packets, Some(e)),
        }
    }
    (packets, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_four_e_atoms() {
        let raw = encode_packets(&[TracePacket::atom_group("EEEE")]).unwrap();
        assert_eq!(raw.0, vec![0x4F]);
    }

    #[test]
    fn encode_branch() {
        let raw = encode_packets(&[TracePacket::branch(0x0800_0584)]).unwrap();
        assert_eq!(raw.0, vec![0x80, 0x84, 0x05, 0x00, 0x08, 0x00]);
    }

    #[test]
    fn encode_eret_and_start() {
        let raw = encode_packets(&[
            TracePacket::ExceptionReturn,
            TracePacket::TraceMarker(MarkerKind::Start),
        ])
        .unwrap();
        assert_eq!(raw.0, vec![0xC0, 0xE1]);
    }

    #[test]
    fn encode_exception_entry() {
        let raw = encode_packets(&[TracePacket::exception_entry(0x0800_0100, 15)]).unwrap();
        assert_eq!(raw.0, vec![0x80, 0x00, 0x01, 0x00, 0x08, 0x01, 15]);
    }

    #[test]
    fn encode_rejects_bad_groups() {
        assert_eq!(
            encode_packets(&[TracePacket::branch(0), TracePacket::AtomGroup(vec![])]),
            Err(EncodeError::InvalidPacket { index: 1, len: 0 })
        );
        assert!(encode_packets(&[TracePacket::AtomGroup(vec![Atom::E; 8])]).is_err());
        // atoms 4..6 collide with count bits 111
        assert!(encode_packets(&[TracePacket::atom_group("EEEENNN")]).is_err());
    }

    #[test]
    fn encodable_groups() {
        assert!(atom_group_encodable(&atoms("NNNN")));
        assert!(atom_group_encodable(&atoms("NNNNE")));
        assert!(!atom_group_encodable(&atoms("NNNNN")));
        assert!(atom_group_encodable(&atoms("NNNNNE")));
        assert!(atom_group_encodable(&atoms("NNNNEEE")));
        assert_eq!(encodable_prefix_len(&atoms("EEEENNNN")), 4);
        assert_eq!(encodable_prefix_len(&atoms("EEEEE")), 5);
    }

    #[test]
    fn decode_four_e_atoms() {
        assert_eq!(
            decode_packets(&[0x4F]).unwrap(),
            vec![TracePacket::atom_group("EEEE")]
        );
    }

    #[test]
    fn decode_seven_atom_group_uses_count_bits() {
        // count 7 occupies bits 6..4, atoms overlap them; EEENEEE
        let p = TracePacket::atom_group("EEENEEE");
        let raw = encode_packets(std::slice::from_ref(&p)).unwrap();
        assert_eq!(raw.0, vec![0x77]);
        assert_eq!(decode_packets(&raw.0).unwrap(), vec![p]);
    }

    #[test]
    fn decode_truncated_branch() {
        assert_eq!(
            decode_packets(&[0x80, 0x84]),
            Err(DecodeError::TruncatedPacket { offset: 0 })
        );
        // exception number missing
        assert_eq!(
            decode_packets(&[0xC0, 0x80, 0, 0, 0, 0, 1]),
            Err(DecodeError::TruncatedPacket { offset: 1 })
        );
    }

    #[test]
    fn decode_unknown_headers() {
        assert_eq!(
            decode_packets(&[0x4F, 0xA0]),
            Err(DecodeError::UnknownHeader {
                offset: 1,
                byte: 0xA0
            })
        );
        // count of zero
        assert_eq!(
            decode_packets(&[0x01]),
            Err(DecodeError::UnknownHeader {
                offset: 0,
                byte: 0x01
            })
        );
        // stray atom bit above a 2-atom count
        assert!(decode_packets(&[0x27]).is_err());
        // bad info octet
        assert_eq!(
            decode_packets(&[0x80, 0, 0, 0, 0, 0x02]),
            Err(DecodeError::UnknownHeader {
                offset: 5,
                byte: 0x02
            })
        );
    }

    #[test]
    fn two_path_stream_round_trips() {
        let packets = vec![
            TracePacket::branch(0x0800_0546),
            TracePacket::atom_group("EEENEEE"),
            TracePacket::atom_group("E"),
            TracePacket::branch(0x0800_0584),
        ];
        let raw = encode_packets(&packets).unwrap();
        assert_eq!(decode_packets(&raw.0).unwrap(), packets);
    }

    #[test]
    fn decode_prefix_keeps_good_packets() {
        let (packets, err) = decode_prefix(&[0x4F, 0xC0, 0x80, 0x01]);
        assert_eq!(
            packets,
            vec![TracePacket::atom_group("EEEE"), TracePacket::ExceptionReturn]
        );
        assert_eq!(err, Some(DecodeError::TruncatedPacket { offset: 2 }));
    }

    #[test]
    fn group_atoms_splits_on_collisions() {
        let groups = group_atoms(&atoms("NNNNNNNNN"));
        assert_eq!(
            groups,
            vec![
                TracePacket::atom_group("NNNN"),
                TracePacket::atom_group("NNNN"),
                TracePacket::atom_group("N")
            ]
        );
    }

    #[test]
    fn group_atoms_caps_at_seven() {
        let groups = group_atoms(&atoms("EEENEEEE"));
        assert_eq!(
            groups,
            vec![
                TracePacket::atom_group("EEENEEE"),
                TracePacket::atom_group("E")
            ]
        );
    }
}
