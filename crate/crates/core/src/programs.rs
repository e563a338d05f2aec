//! Fixture programs shipped with the crate.

/// Blocks A at 0x08000546, B at 0x0800054E, C at 0x08000584. Input `A`
/// drives A→C, input `B` drives A→B→C.
pub const TWO_PATH: &str = include_str!("../programs/two_path.s");
/// Two paths, split on `input[0] == 0x42`.
pub const BRANCH_DEMO: &str = include_str!("../programs/branch_demo.s");
/// Crashes iff the input starts with `BUG!`.
pub const BUG: &str = include_str!("../programs/bug.s");
pub const UNMAPPED_STORE: &str = include_str!("../programs/unmapped_store.s");
pub const DIV_ZERO: &str = include_str!("../programs/div_zero.s");
pub const INFINITE_LOOP: &str = include_str!("../programs/infinite_loop.s");
/// Immediately hits the success breakpoint.
pub const UNCONDITIONAL: &str = include_str!("../programs/unconditional.s");
/// Long boot sequence, application code in `[app, app_end)`.
pub const BOOT_HEAVY: &str = include_str!("../programs/boot_heavy.s");
/// Two tasks switched through the current-task word at 0x20000100.
pub const RTOS: &str = include_str!("../programs/rtos.s");
/// Input loop with a vector-15 handler for interrupt experiments.
pub const IRQ_DEMO: &str = include_str!("../programs/irq_demo.s");

/// Current-task word of [`RTOS`].
pub const RTOS_CURRENT_TASK: u32 = 0x2000_0100;
pub const RTOS_TCB_A: u32 = 0x2000_0200;
pub const RTOS_TCB_B: u32 = 0x2000_0300;

pub const TWO_PATH_A: u32 = 0x0800_0546;
pub const TWO_PATH_B: u32 = 0x0800_054E;
pub const TWO_PATH_C: u32 = 0x0800_0584;

/// Every bundled program by name.
pub const ALL: &[(&str, &str)] = &[
    ("two_path", TWO_PATH),
    ("branch_demo", BRANCH_DEMO),
    ("bug", BUG),
    ("unmapped_store", UNMAPPED_STORE),
    ("div_zero", DIV_ZERO),
    ("infinite_loop", INFINITE_LOOP),
    ("unconditional", UNCONDITIONAL),
    ("boot_heavy", BOOT_HEAVY),
    ("rtos", RTOS),
    ("irq_demo", IRQ_DEMO),
];
