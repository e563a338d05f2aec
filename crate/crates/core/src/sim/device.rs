use std::fmt;

use thiserror::Error;

use super::config::{ConfigError, Filter, TraceConfig};
use super::image::ProgramImage;
use super::isa::{BxSource, Instruction, Reg, BKPT_MAGIC, INSTRUCTION_WIDTH};
use crate::trace::{
    atom_header, encodable_prefix_bits, encode_packet_into, Atom, MarkerKind, RawTrace, TracePacket, MAX_ATOMS_PER_GROUP,
};

pub const RAM_BASE: u32 = 0x2000_0000;
pub const RAM_SIZE: u32 = 0x0002_0000;
/// Memory-mapped `fuzz_stop` word: reads as 0/1, any nonzero store sets it.
pub const FUZZ_STOP_ADDR: u32 = RAM_BASE + RAM_SIZE - 4;
pub const DEFAULT_SLOT_CAPACITY: usize = 4096;
pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("testcase of {len} bytes exceeds slot capacity {capacity}")]
    TestcaseTooLarge { len: usize, capacity: usize },
    #[error("no vector table entry for exception {0}")]
    UnknownException(u8),
    #[error("interrupt period must be at least 1")]
    ZeroPeriod,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Current,
    Next,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultKind {
    BusFault,
    UsageFault,
    UnexpectedBreakpoint,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::BusFault => "BusFault",
            FaultKind::UsageFault => "UsageFault",
            FaultKind::UnexpectedBreakpoint => "UnexpectedBreakpoint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunOutcome {
    Ok,
    Crash { kind: FaultKind, at: u32 },
    Hang { budget_used: u64 },
}

impl RunOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunOutcome::Ok)
    }
}

impl fmt::Display for RunOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunOutcome::Ok => f.write_str("Ok"),
            RunOutcome::Crash { kind, at } => write!(f, "Crash({kind}, 0x{at:08X})"),
            RunOutcome::Hang { budget_used } => write!(f, "Hang({budget_used})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterruptSchedule {
    pub period: u64,
    pub number: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub trace: RawTrace,
    /// Retired instructions, handlers included.
    pub executed: u64,
    /// Retired instructions outside exception handlers.
    pub thread_executed: u64,
    pub exceptions_taken: u64,
}

#[derive(Debug, Clone)]
struct SavedContext {
    regs: [u32; 8],
    lr: u32,
    z: bool,
    n: bool,
    return_pc: u32,
}

/// Accumulates atoms and packets into the wire format.
#[derive(Debug, Default)]
struct TraceSink {
    bytes: Vec<u8>,
    /// Pending atoms, atom `i` in bit `i`.
    bits: u8,
    count: u8,
}

impl TraceSink {
    fn atom(&mut self, atom: Atom) {
        self.bits |= (atom.is_e() as u8) << self.count;
        self.count += 1;
        if self.count as usize == MAX_ATOMS_PER_GROUP {
            self.emit_group();
        }
    }

    fn emit_group(&mut self) {
        let n = encodable_prefix_bits(self.bits, self.count);
        let header = atom_header(self.bits, n).expect("prefix is encodable");
        self.bytes.push(header);
        self.bits >>= n;
        self.count -= n;
    }

    fn flush(&mut self) {
        while self.count > 0 {
            self.emit_group();
        }
    }

    fn packet(&mut self, packet: TracePacket) {
        self.flush();
        encode_packet_into(&packet, &mut self.bytes).expect("non-atom packets always encode");
    }

    fn finish(mut self) -> RawTrace {
        self.flush();
        RawTrace(self.bytes)
    }
}

/// Deterministic micro-VM with ETM-like trace output. One run in flight per
/// device.
#[derive(Debug, Clone)]
pub struct Device {
    image: ProgramImage,
    regs: [u32; 8],
    lr: u32,
    pc: u32,
    z: bool,
    n: bool,
    /// RAM words; `dirty` lists the ones written since reset.
    ram: Vec<u32>,
    dirty: Vec<u32>,
    touched: Vec<u64>,
    slots: [Vec<u8>; 2],
    slot_capacity: usize,
    cursor: usize,
    fuzz_stop: bool,
    trace_config: TraceConfig,
    filter_latches: Vec<bool>,
    tracing_active: bool,
    schedule: Option<InterruptSchedule>,
    irq_pending: bool,
    exception_stack: Vec<SavedContext>,
}

impl Device {
    pub fn new(image: ProgramImage) -> Self {
        Self::with_slot_capacity(image, DEFAULT_SLOT_CAPACITY)
    }

    pub fn with_slot_capacity(image: ProgramImage, slot_capacity: usize) -> Self {
        let pc = image.entry();
        let mut device = Self {
            image,
            regs: [0; 8],
            lr: 0,
            pc,
            z: false,
            n: false,
            ram: vec![0; RAM_WORDS],
            dirty: Vec::new(),
            touched: vec![0; RAM_WORDS.div_ceil(64)],
            slots: [Vec::new(), Vec::new()],
            slot_capacity,
            cursor: 0,
            fuzz_stop: false,
            trace_config: TraceConfig::default(),
            filter_latches: Vec::new(),
            tracing_active: false,
            schedule: None,
            irq_pending: false,
            exception_stack: Vec::new(),
        };
        device.reset();
        device
    }

    pub fn image(&self) -> &ProgramImage {
        &self.image
    }

    pub fn pc(&self) -> u32 {
        self.pc
    }

    pub fn reg(&self, r: u8) -> u32 {
        self.regs[r as usize]
    }

    pub fn set_reg(&mut self, r: u8, value: u32) {
        self.regs[r as usize] = value;
    }

    pub fn fuzz_stop(&self) -> bool {
        self.fuzz_stop
    }

    pub fn tracing_active(&self) -> bool {
        self.tracing_active
    }

    pub fn slot_capacity(&self) -> usize {
        self.slot_capacity
    }

    pub fn slot(&self, slot: Slot) -> &[u8] {
        &self.slots[slot_index(slot)]
    }

    pub fn trace_config(&self) -> &TraceConfig {
        &self.trace_config
    }

    pub fn read_word(&self, addr: u32) -> Option<u32> {
        if addr == FUZZ_STOP_ADDR {
            Some(self.fuzz_stop as u32)
        } else {
            ram_index(addr).map(|i| self.ram[i])
        }
    }

    pub fn set_trace_config(&mut self, config: TraceConfig) -> Result<(), SimError> {
        config.validate()?;
        self.filter_latches = vec![false; config.filters.len()];
        self.trace_config = config;
        Ok(())
    }

    pub fn set_interrupt_schedule(&mut self, period: u64, number: u8) -> Result<(), SimError> {
        if period == 0 {
            return Err(SimError::ZeroPeriod);
        }
        if !self.image.vector_table.contains_key(&number) {
            return Err(SimError::UnknownException(number));
        }
        self.schedule = Some(InterruptSchedule { period, number });
        Ok(())
    }

    pub fn clear_interrupt_schedule(&mut self) {
        self.schedule = None;
    }

    /// Copies `data` into a testcase slot. Slots survive [`Device::reset`].
    pub fn load_testcase(&mut self, data: &[u8], slot: Slot) -> Result<(), SimError> {
        if data.len() > self.slot_capacity {
            return Err(SimError::TestcaseTooLarge {
                len: data.len(),
                capacity: self.slot_capacity,
            });
        }
        let buf = &mut self.slots[slot_index(slot)];
        buf.clear();
        buf.extend_from_slice(data);
        if slot == Slot::Current {
            self.cursor = 0;
        }
        Ok(())
    }

    /// Promotes the staged testcase to current.
    pub fn swap_slots(&mut self) {
        self.slots.swap(0, 1);
        self.cursor = 0;
    }

    pub fn reset(&mut self) {
        self.regs = [0; 8];
        self.lr = 0;
        self.z = false;
        self.n = false;
        self.pc = self.image.entry();
        for &i in &self.dirty {
            self.ram[i as usize] = 0;
            self.touched[i as usize / 64] = 0;
        }
        self.dirty.clear();
        self.cursor = 0;
        self.fuzz_stop = false;
        self.tracing_active = false;
        self.filter_latches.iter_mut().for_each(|l| *l = false);
        self.irq_pending = false;
        self.exception_stack.clear();
    }

    pub fn run(&mut self, budget: u64) -> RunReport {
        self.execute(budget, None)
    }

    /// Like [`Device::run`], also returning the address of every retired
    /// instruction.
    pub fn run_logged(&mut self, budget: u64) -> (RunReport, Vec<u32>) {
        let mut log = Vec::new();
        let report = self.execute(budget, Some(&mut log));
        (report, log)
    }

    /// New latch value and on/off state of one filter for the instruction at
    /// `pc`.
    fn filter_at(filter: &Filter, latch: bool, pc: u32) -> (bool, bool) {
        match *filter {
            Filter::AddressRange { start, end } => (latch, (start..end).contains(&pc)),
            Filter::InstrTrigger { start, stop } => {
                let latch = if pc == stop {
                    false
                } else {
                    latch || pc == start
                };
                (latch, latch)
            }
            Filter::DataTrigger { .. } => (latch, latch),
        }
    }

    /// Evaluates the filters for the instruction about to execute at `pc`,
    /// updating trigger latches.
    fn filters_allow(&mut self, pc: u32) -> bool {
        if self.trace_config.filters.is_empty() {
            return true;
        }
        let mut active = true;
        for (filter, latch) in self.trace_config.filters.iter().zip(self.filter_latches.iter_mut()) {
            let (next, on) = Self::filter_at(filter, *latch, pc);
            *latch = next;
            active &= on;
        }
        active
    }

    /// [`Self::filters_allow`] without touching the latches.
    fn filters_would_allow(&self, pc: u32) -> bool {
        self.trace_config
            .filters
            .iter()
            .zip(&self.filter_latches)
            .all(|(filter, &latch)| Self::filter_at(filter, latch, pc).1)
    }

    fn execute(&mut self, budget: u64, mut log: Option<&mut Vec<u32>>) -> RunReport {
        let mut sink = TraceSink::default();
        let mut executed = 0u64;
        let mut thread_executed = 0u64;
        let mut exceptions_taken = 0u64;
        let unfiltered = self.trace_config.filters.is_empty();
        let direct_packets = self.trace_config.direct_branch_packets;

        // Each capture starts with the trace unit idle.
        self.tracing_active = false;

        // A branch packet waits for the next instruction boundary so it is
        // dropped when its target is filtered out.
        let mut pending_branch: Option<u32> = None;

        let outcome = loop {
            if let Some(target) = pending_branch.take() {
                if self.filters_would_allow(target) {
                    sink.packet(TracePacket::branch(target));
                }
            }
            if executed >= budget {
                break RunOutcome::Hang { budget_used: executed };
            }

            let mut entered_exception = None;
            if self.irq_pending && self.exception_stack.is_empty() {
                if let Some(schedule) = self.schedule {
                    self.irq_pending = false;
                    self.exception_stack.push(SavedContext {
                        regs: self.regs,
                        lr: self.lr,
                        z: self.z,
                        n: self.n,
                        return_pc: self.pc,
                    });
                    self.pc = self.image.vector_table[&schedule.number];
                    entered_exception = Some(schedule.number);
                    exceptions_taken += 1;
                }
            }

            let pc = self.pc;
            let active = self.filters_allow(pc);
            match (self.tracing_active, active) {
                (false, true) => {
                    if !unfiltered {
                        sink.packet(TracePacket::TraceMarker(MarkerKind::Start));
                    }
                    sink.packet(match entered_exception {
                        Some(n) => TracePacket::exception_entry(pc, n),
                        None => TracePacket::branch(pc),
                    });
                }
                (true, false) => sink.packet(TracePacket::TraceMarker(MarkerKind::Stop)),
                (true, true) => {
                    if let Some(n) = entered_exception {
                        sink.packet(TracePacket::exception_entry(pc, n));
                    }
                }
                (false, false) => {}
            }
            self.tracing_active = active;

            let Some(insn) = self.image.instruction_at(pc).copied() else {
                break RunOutcome::Crash { kind: FaultKind::BusFault, at: pc };
            };

            let next = pc.wrapping_add(INSTRUCTION_WIDTH);
            let mut atom = Atom::E;
            // Some(target) when control transfers and a branch packet is due.
            let mut branch_packet = None;
            let mut exception_return = false;
            match insn {
                Instruction::Nop => self.pc = next,
                Instruction::Movi { rd, imm } => {
                    self.set(rd, imm);
                    self.pc = next;
                }
                Instruction::Add { rd, rs } => {
                    let v = self.get(rd).wrapping_add(self.get(rs));
                    self.set_flagged(rd, v);
                    self.pc = next;
                }
                Instruction::Xor { rd, rs } => {
                    let v = self.get(rd) ^ self.get(rs);
                    self.set_flagged(rd, v);
                    self.pc = next;
                }
                Instruction::Shr { rd, imm } => {
                    let v = self.get(rd) >> imm;
                    self.set_flagged(rd, v);
                    self.pc = next;
                }
                Instruction::Cmpi { rs, imm } => {
                    let a = self.get(rs);
                    self.z = a == imm as u32;
                    self.n = (a.wrapping_sub(imm as u32) as i32) < 0;
                    self.pc = next;
                }
                Instruction::Beq { .. } | Instruction::Bne { .. } => {
                    let taken = matches!(insn, Instruction::Beq { .. }) == self.z;
                    if taken {
                        let target = self.direct_target(pc);
                        self.pc = target;
                        if direct_packets {
                            branch_packet = Some(target);
                        }
                    } else {
                        atom = Atom::N;
                        self.pc = next;
                    }
                }
                Instruction::B { .. } => {
                    let target = self.direct_target(pc);
                    self.pc = target;
                    if direct_packets {
                        branch_packet = Some(target);
                    }
                }
                Instruction::Bl { .. } => {
                    let target = self.direct_target(pc);
                    self.lr = next;
                    self.pc = target;
                    if direct_packets {
                        branch_packet = Some(target);
                    }
                }
                Instruction::Bx { src } => {
                    let target = match src {
                        BxSource::Reg(r) => self.get(r),
                        BxSource::Lr => self.lr,
                    };
                    self.pc = target;
                    branch_packet = Some(target);
                }
                Instruction::Ldtc { rd } => {
                    let current = &self.slots[0];
                    let v = match current.get(self.cursor) {
                        Some(&b) => {
                            self.cursor += 1;
                            b as u32
                        }
                        None => {
                            self.fuzz_stop = true;
                            0
                        }
                    };
                    self.set_flagged(rd, v);
                    self.pc = next;
                }
                Instruction::Ld { rd, rs } => {
                    let addr = self.get(rs);
                    if !addr.is_multiple_of(4) {
                        break RunOutcome::Crash { kind: FaultKind::UsageFault, at: pc };
                    }
                    let Some(v) = self.read_word(addr) else {
                        break RunOutcome::Crash { kind: FaultKind::BusFault, at: pc };
                    };
                    self.set(rd, v);
                    self.pc = next;
                }
                Instruction::St { rs, rd } => {
                    let addr = self.get(rd);
                    let value = self.get(rs);
                    if !addr.is_multiple_of(4) {
                        break RunOutcome::Crash { kind: FaultKind::UsageFault, at: pc };
                    }
                    if addr == FUZZ_STOP_ADDR {
                        self.fuzz_stop = value != 0;
                    } else if let Some(i) = ram_index(addr) {
                        self.write_ram(i, value);
                    } else {
                        break RunOutcome::Crash { kind: FaultKind::BusFault, at: pc };
                    }
                    for (filter, latch) in self.trace_config.filters.iter().zip(self.filter_latches.iter_mut()) {
                        if let Filter::DataTrigger { watch, value: wanted } = *filter {
                            if watch == addr {
                                *latch = value == wanted;
                            }
                        }
                    }
                    self.pc = next;
                }
                Instruction::Div { rd, rs } => {
                    let divisor = self.get(rs);
                    if divisor == 0 {
                        break RunOutcome::Crash { kind: FaultKind::UsageFault, at: pc };
                    }
                    let v = self.get(rd) / divisor;
                    self.set_flagged(rd, v);
                    self.pc = next;
                }
                Instruction::Bkpt { imm } => {
                    // Halts into debug state without retiring.
                    break if imm == BKPT_MAGIC {
                        RunOutcome::Ok
                    } else {
                        RunOutcome::Crash { kind: FaultKind::UnexpectedBreakpoint, at: pc }
                    };
                }
                Instruction::Eret => {
                    let Some(ctx) = self.exception_stack.pop() else {
                        break RunOutcome::Crash { kind: FaultKind::UsageFault, at: pc };
                    };
                    self.regs = ctx.regs;
                    self.lr = ctx.lr;
                    self.z = ctx.z;
                    self.n = ctx.n;
                    self.pc = ctx.return_pc;
                    exception_return = true;
                }
            }

            let in_handler = !self.exception_stack.is_empty() || exception_return;
            if self.tracing_active {
                sink.atom(atom);
                pending_branch = branch_packet;
                if exception_return {
                    sink.packet(TracePacket::ExceptionReturn);
                }
            }
            if let Some(log) = log.as_deref_mut() {
                log.push(pc);
            }
            executed += 1;
            if !in_handler {
                thread_executed += 1;
                if let Some(schedule) = self.schedule {
                    if thread_executed.is_multiple_of(schedule.period) {
                        self.irq_pending = true;
                    }
                }
            }
        };

        RunReport {
            outcome,
            trace: sink.finish(),
            executed,
            thread_executed,
            exceptions_taken,
        }
    }

    fn direct_target(&self, pc: u32) -> u32 {
        let index = self.image.index_of(pc).expect("pc was just fetched");
        self.image.direct_target(index).expect("direct branch")
    }

    fn write_ram(&mut self, i: usize, value: u32) {
        let (word, bit) = (i / 64, 1u64 << (i % 64));
        if self.touched[word] & bit == 0 {
            self.touched[word] |= bit;
            self.dirty.push(i as u32);
        }
        self.ram[i] = value;
    }

    fn get(&self, r: Reg) -> u32 {
        self.regs[r.0 as usize]
    }

    fn set(&mut self, r: Reg, v: u32) {
        self.regs[r.0 as usize] = v;
    }

    fn set_flagged(&mut self, r: Reg, v: u32) {
        self.set(r, v);
        self.z = v == 0;
        self.n = (v as i32) < 0;
    }
}

fn slot_index(slot: Slot) -> usize {
    match slot {
        Slot::Current => 0,
        Slot::Next => 1,
    }
}

const RAM_WORDS: usize = (RAM_SIZE / 4) as usize;

/// Word index of an aligned RAM address.
fn ram_index(addr: u32) -> Option<usize> {
    let off = addr.wrapping_sub(RAM_BASE);
    (off < RAM_SIZE && off.is_multiple_of(4)).then_some((off / 4) as usize)
}
