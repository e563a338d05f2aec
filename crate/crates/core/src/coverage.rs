//! Branch coverage computed straight from raw trace packets.
//!
//! A linear code sequence and jump block ([`LcsajBB`]) runs from the target of
//! one taken branch up to and including the next taken branch. It is
//! identified by that starting address plus the atoms seen on the way, so it
//! can be recovered from the packet stream alone: every branch packet closes
//! the block opened by the previous one. Blocks are hashed into bitmap
//! indices and folded into an AFL-style edge bitmap.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::trace::{Atom, DecodeError, MarkerKind, PacketReader, PacketRef, TracePacket};

pub const DEFAULT_MAP_SIZE: u32 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoverageError {
    #[error("map size {0} is not a power of two")]
    InvalidMapSize(u64),
    #[error("bitmap sizes differ: global {global}, local {local}")]
    SizeMismatch { global: usize, local: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Bitmap length in bytes; always a power of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MapSize(u32);

impl MapSize {
    pub fn new(size: u64) -> Result<Self, CoverageError> {
        if size == 0 || !size.is_power_of_two() || size > 1 << 31 {
            return Err(CoverageError::InvalidMapSize(size));
        }
        Ok(MapSize(size as u32))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn mask(self) -> u32 {
        self.0 - 1
    }

    /// Bitmap length in bytes.
    pub fn bytes(self) -> usize {
        self.0 as usize
    }
}

impl Default for MapSize {
    fn default() -> Self {
        MapSize(DEFAULT_MAP_SIZE)
    }
}

/// Whether trace recorded inside exception handlers is kept or dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ExceptionFilterMode {
    Keep,
    #[default]
    Discard,
}

impl FromStr for ExceptionFilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "keep" => Ok(Self::Keep),
            "discard" => Ok(Self::Discard),
            other => Err(format!("unknown exception mode `{other}` (keep|discard)")),
        }
    }
}

impl fmt::Display for ExceptionFilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Keep => "keep",
            Self::Discard => "discard",
        })
    }
}

/// `(BB_base, BB_bitstream)`: the block's starting address and its atoms,
/// first executed first, including the closing taken-branch `E`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LcsajBB {
    pub base: u32,
    pub bitstream: Vec<Atom>,
}

impl LcsajBB {
    pub fn new(base: u32, bitstream: Vec<Atom>) -> Self {
        Self { base, bitstream }
    }

    /// Bitstream as `1`/`0` characters.
    pub fn bits(&self) -> String {
        self.bitstream
            .iter()
            .map(|a| if a.is_e() { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Display for LcsajBB {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(0x{:08X}, {})", self.base, self.bits())
    }
}

/// What a packet does to the block under construction.
enum Step {
    Ignore,
    Accumulate,
    /// A branch: close the open block (if any) and start a new one.
    Close(Option<u32>),
    Clear,
}

/// Block-boundary state shared by the allocating extractor and the
/// streaming bitmap path.
#[derive(Debug, Clone)]
struct Boundaries {
    mode: ExceptionFilterMode,
    base: Option<u32>,
    /// Open exception entries being discarded.
    depth: u32,
    orphan_atoms: usize,
}

impl Boundaries {
    fn new(mode: ExceptionFilterMode) -> Self {
        Self {
            mode,
            base: None,
            depth: 0,
            orphan_atoms: 0,
        }
    }

    fn step(&mut self, packet: PacketRef) -> Step {
        let discard = self.mode == ExceptionFilterMode::Discard;
        match packet {
            PacketRef::Branch { exception: Some(_), .. } if discard => {
                self.depth += 1;
                Step::Ignore
            }
            PacketRef::ExceptionReturn => {
                if discard && self.depth > 0 {
                    self.depth -= 1;
                }
                Step::Ignore
            }
            _ if self.depth > 0 => Step::Ignore,
            PacketRef::Atoms { count, .. } => {
                if self.base.is_some() {
                    Step::Accumulate
                } else {
                    self.orphan_atoms += count as usize;
                    Step::Ignore
                }
            }
            PacketRef::Branch { target, .. } => Step::Close(self.base.replace(target)),
            PacketRef::TraceMarker(MarkerKind::Stop) => {
                self.base = None;
                Step::Clear
            }
            PacketRef::TraceMarker(MarkerKind::Start) => Step::Ignore,
        }
    }
}

fn packet_ref(packet: &TracePacket) -> PacketRef {
    match packet {
        // Only the count matters for boundary tracking.
        TracePacket::AtomGroup(g) => PacketRef::Atoms {
            bits: 0,
            count: g.len().min(u8::MAX as usize) as u8,
        },
        TracePacket::Branch { target, exception } => PacketRef::Branch {
            target: *target,
            exception: *exception,
        },
        TracePacket::ExceptionReturn => PacketRef::ExceptionReturn,
        TracePacket::TraceMarker(m) => PacketRef::TraceMarker(*m),
    }
}

/// Incremental block extraction over a packet stream.
#[derive(Debug, Clone)]
pub struct LcsajExtractor {
    state: Boundaries,
    bits: Vec<Atom>,
}

impl LcsajExtractor {
    pub fn new(mode: ExceptionFilterMode) -> Self {
        Self {
            state: Boundaries::new(mode),
            bits: Vec::new(),
        }
    }

    /// Atoms seen before any branch established a base. They are dropped.
    pub fn orphan_atoms(&self) -> usize {
        self.state.orphan_atoms
    }

    /// Feeds one packet; `emit` receives the base and bitstream of each block
    /// the packet closes. The bitstream borrow is only valid for the call.
    pub fn feed_with(&mut self, packet: &TracePacket, mut emit: impl FnMut(u32, &[Atom])) {
        match self.state.step(packet_ref(packet)) {
            Step::Ignore => {}
            Step::Accumulate => {
                if let TracePacket::AtomGroup(group) = packet {
                    self.bits.extend_from_slice(group);
                }
            }
            Step::Close(prev) => {
                if let Some(base) = prev {
                    emit(base, &self.bits);
                }
                self.bits.clear();
            }
            Step::Clear => self.bits.clear(),
        }
    }

    pub fn feed(&mut self, packet: &TracePacket) -> Option<LcsajBB> {
        let mut out = None;
        self.feed_with(packet, |base, bits| {
            out = Some(LcsajBB::new(base, bits.to_vec()));
        });
        out
    }
}

/// Running [`fold_and_xor`] of a bitstream fed a group at a time.
#[derive(Debug, Clone, Copy, Default)]
struct Fold {
    value: u32,
    /// Position within the current 5-atom chunk.
    pos: u32,
}

impl Fold {
    fn push(&mut self, bits: u8, count: u8) {
        for i in 0..count {
            self.value ^= (((bits >> i) & 1) as u32) << self.pos;
            self.pos = if self.pos == 4 { 0 } else { self.pos + 1 };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Extraction {
    pub blocks: Vec<LcsajBB>,
    pub orphan_atoms: usize,
}

pub fn extract_lcsaj(packets: &[TracePacket], mode: ExceptionFilterMode) -> Extraction {
    let mut extractor = LcsajExtractor::new(mode);
    let blocks = packets.iter().filter_map(|p| extractor.feed(p)).collect();
    Extraction {
        blocks,
        orphan_atoms: extractor.orphan_atoms(),
    }
}

/// Folds the bitstream into 5-bit chunks (atom `j` of a chunk is bit `j`,
/// the last chunk zero-padded) and XORs the chunks together.
pub fn fold_and_xor(bitstream: &[Atom]) -> u32 {
    bitstream
        .chunks(5)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u32, |acc, (j, a)| acc | ((a.is_e() as u32) << j))
        })
        .fold(0, |acc, c| acc ^ c)
}

fn shl(x: u32, n: u32) -> u32 {
    x.checked_shl(n).unwrap_or(0)
}

fn shr(x: u32, n: u32) -> u32 {
    x.checked_shr(n).unwrap_or(0)
}

/// Maps a block to its bitmap index. 32-bit wrapping arithmetic; shifts by 32
/// yield zero.
pub fn hash_parts(base: u32, bitstream: &[Atom], map_size: MapSize) -> u32 {
    hash_folded(base, fold_and_xor(bitstream), map_size)
}

/// [`hash_parts`] with the fold already computed.
pub fn hash_folded(base: u32, t: u32, map_size: MapSize) -> u32 {
    let base = base.wrapping_add(t);
    let left = shl(base, 32 - t) | shr(base, t);
    let right = shl(base, t) | shr(base, 32 - t);
    let mut id = left | right;
    id ^= id >> 16;
    id = id.wrapping_mul(0x85eb_ca6b);
    id ^= id >> 13;
    id = id.wrapping_mul(0xc2b2_ae35);
    id ^= id >> 16;
    id = (id >> 4) ^ (id << 8);
    id & map_size.mask()
}

pub fn hash_lcsaj(bb: &LcsajBB, map_size: MapSize) -> u32 {
    hash_parts(bb.base, &bb.bitstream, map_size)
}

/// Local bitmap plus the rolling previous-location state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageState {
    pub bitmap: Vec<u8>,
    pub prev_location: u32,
}

impl CoverageState {
    pub fn new(map_size: MapSize) -> Self {
        Self {
            bitmap: vec![0; map_size.bytes()],
            prev_location: 0,
        }
    }

    /// `bitmap[id ^ prev]` += 1 (saturating), then `prev = id >> 1`.
    pub fn update(&mut self, bb_id: u32) {
        let slot = &mut self.bitmap[(bb_id ^ self.prev_location) as usize];
        *slot = slot.saturating_add(1);
        self.prev_location = bb_id >> 1;
    }

    pub fn into_bitmap(self) -> Vec<u8> {
        self.bitmap
    }
}

pub fn update_bitmap(state: &mut CoverageState, bb_id: u32) {
    state.update(bb_id);
}

/// Decode, extract, hash and fold one run's trace into a fresh local bitmap.
/// Streams over the raw bytes without materializing packets or bitstreams.
pub fn trace_to_bitmap(
    raw: &[u8],
    mode: ExceptionFilterMode,
    map_size: MapSize,
) -> Result<Vec<u8>, DecodeError> {
    let mut state = CoverageState::new(map_size);
    let mut bounds = Boundaries::new(mode);
    let mut fold = Fold::default();
    let mut reader = PacketReader::new(raw);
    while let Some(packet) = reader.next_ref() {
        let packet = packet?;
        match bounds.step(packet) {
            Step::Ignore => {}
            Step::Accumulate => {
                if let PacketRef::Atoms { bits, count } = packet {
                    fold.push(bits, count);
                }
            }
            Step::Close(prev) => {
                if let Some(base) = prev {
                    state.update(hash_folded(base, fold.value, map_size));
                }
                fold = Fold::default();
            }
            Step::Clear => fold = Fold::default(),
        }
    }
    Ok(state.into_bitmap())
}

/// AFL hit-count bucket of a counter, as a single bit.
pub fn bucket(count: u8) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 4,
        4..=7 => 8,
        8..=15 => 16,
        16..=31 => 32,
        32..=127 => 64,
        128..=255 => 128,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NewBits {
    NoNew,
    NewHitCount,
    NewEdge,
}

/// Compares a local bitmap against the global one and merges it in.
pub fn has_new_bits(global: &mut [u8], local: &[u8]) -> Result<NewBits, CoverageError> {
    if global.len() != local.len() {
        return Err(CoverageError::SizeMismatch {
            global: global.len(),
            local: local.len(),
        });
    }
    let mut result = NewBits::NoNew;
    for (g, &l) in global.iter_mut().zip(local) {
        if l == 0 {
            continue;
        }
        let b = bucket(l);
        if *g == 0 {
            result = NewBits::NewEdge;
        } else if b & !*g != 0 && result == NewBits::NoNew {
            result = NewBits::NewHitCount;
        }
        *g |= b;
    }
    Ok(result)
}

/// Number of nonzero entries.
pub fn count_edges(bitmap: &[u8]) -> usize {
    bitmap.iter().filter(|&&b| b != 0).count()
}

/// Path of the text header written next to a bitmap file.
pub fn header_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".hdr");
    PathBuf::from(name)
}

/// Writes the raw bitmap plus a `key=value` sidecar header.
pub fn write_bitmap(path: &Path, bitmap: &[u8], mode: ExceptionFilterMode) -> io::Result<()> {
    fs::write(path, bitmap)?;
    fs::write(
        header_path(path),
        format!("map_size={}\nexc={}\n", bitmap.len(), mode),
    )
}

/// Reads a bitmap written by [`write_bitmap`], checking it against its header.
pub fn read_bitmap(path: &Path) -> io::Result<(Vec<u8>, MapSize, ExceptionFilterMode)> {
    let invalid = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let bitmap = fs::read(path)?;
    let header = fs::read_to_string(header_path(path))?;
    let mut map_size = None;
    let mut mode = None;
    for line in header.lines() {
        match line.split_once('=') {
            Some(("map_size", v)) => {
                let n: u64 = v.trim().parse().map_err(|_| invalid(format!("bad map_size `{v}`")))?;
                map_size = Some(MapSize::new(n).map_err(|e| invalid(e.to_string()))?);
            }
            Some(("exc", v)) => mode = Some(v.trim().parse().map_err(invalid)?),
            _ => {}
        }
    }
    let map_size = map_size.ok_or_else(|| invalid("header lacks map_size".into()))?;
    let mode = mode.ok_or_else(|| invalid("header lacks exc".into()))?;
    if bitmap.len() != map_size.bytes() {
        return Err(invalid(format!(
            "bitmap has {} bytes, header says {}",
            bitmap.len(),
            map_size.get()
        )));
    }
    Ok((bitmap, map_size, mode))
}
