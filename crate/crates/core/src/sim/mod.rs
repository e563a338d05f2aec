//! Deterministic micro-VM standing in for an MCU board: executes assembled
//! programs and produces the trace stream, with DWT-style filters, testcase
//! slots, vector-catch fault detection and BKPT run termination.

mod asm;
mod config;
mod device;
mod image;
mod isa;

pub use asm::{assemble, parse_number, AsmError, AsmErrorKind, DEFAULT_BASE};
pub use config::{ConfigError, Filter, TraceConfig, COMPARATORS_PER_FILTER, COMPARATOR_BUDGET};
pub use device::{
    Device, FaultKind, InterruptSchedule, RunOutcome, RunReport, SimError, Slot, DEFAULT_BUDGET,
    DEFAULT_SLOT_CAPACITY, FUZZ_STOP_ADDR, RAM_BASE, RAM_SIZE,
};
pub use image::ProgramImage;
pub use isa::{BxSource, Instruction, Reg, BKPT_MAGIC, INSTRUCTION_WIDTH};
