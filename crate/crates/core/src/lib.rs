//! Coverage-guided fuzzing driven by raw branch-trace packets.
//!
//! The pipeline: a [`sim::Device`] executes a program image and emits an
//! ETM-like packet stream; [`coverage`] turns that stream into an AFL-style
//! edge bitmap without consulting the program image; [`fuzz`] runs the
//! campaign. [`oracle`] provides the full-reconstruction baseline.

pub mod cli;
pub mod coverage;
pub mod fuzz;
pub mod oracle;
pub mod programs;
pub mod sim;
pub mod trace;

pub use coverage::{
    fold_and_xor, has_new_bits, hash_lcsaj, trace_to_bitmap, ExceptionFilterMode, LcsajBB, MapSize, NewBits,
};
pub use sim::{Device, FaultKind, Filter, ProgramImage, RunOutcome, Slot, TraceConfig};
pub use trace::{Atom, RawTrace, TracePacket};
