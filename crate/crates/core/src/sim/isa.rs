use std::fmt;

/// Fixed width of every instruction, in address units.
pub const INSTRUCTION_WIDTH: u32 = 2;

/// Argument of the breakpoint that marks a successful end of run.
pub const BKPT_MAGIC: u8 = 0xA5;

/// General-purpose register index, 0..=7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Reg(pub u8);

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Source of an indirect branch target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BxSource {
    Reg(Reg),
    Lr,
}

/// Branch offsets are counted in instructions, relative to the branch itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Nop,
    Movi { rd: Reg, imm: u32 },
    Add { rd: Reg, rs: Reg },
    Xor { rd: Reg, rs: Reg },
    Shr { rd: Reg, imm: u8 },
    Cmpi { rs: Reg, imm: u8 },
    Beq { off: i32 },
    Bne { off: i32 },
    B { off: i32 },
    Bl { off: i32 },
    Bx { src: BxSource },
    Ldtc { rd: Reg },
    Ld { rd: Reg, rs: Reg },
    St { rs: Reg, rd: Reg },
    Div { rd: Reg, rs: Reg },
    Bkpt { imm: u8 },
    Eret,
}

impl Instruction {
    /// Direct-branch offset, if this instruction is a direct branch.
    pub fn direct_offset(&self) -> Option<i32> {
        match *self {
            Instruction::Beq { off }
            | Instruction::Bne { off }
            | Instruction::B { off }
            | Instruction::Bl { off } => Some(off),
            _ => None,
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, Instruction::Beq { .. } | Instruction::Bne { .. })
    }

    /// Whether the instruction can end a basic block.
    pub fn ends_block(&self) -> bool {
        matches!(
            self,
            Instruction::Beq { .. }
                | Instruction::Bne { .. }
                | Instruction::B { .. }
                | Instruction::Bl { .. }
                | Instruction::Bx { .. }
                | Instruction::Eret
                | Instruction::Bkpt { .. }
        )
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Instruction::Nop => write!(f, "NOP"),
            Instruction::Movi { rd, imm } => write!(f, "MOVI {rd}, 0x{imm:X}"),
            Instruction::Add { rd, rs } => write!(f, "ADD {rd}, {rs}"),
            Instruction::Xor { rd, rs } => write!(f, "XOR {rd}, {rs}"),
            Instruction::Shr { rd, imm } => write!(f, "SHR {rd}, {imm}"),
            Instruction::Cmpi { rs, imm } => write!(f, "CMPI {rs}, 0x{imm:X}"),
            Instruction::Beq { off } => write!(f, "BEQ {off:+}"),
            Instruction::Bne { off } => write!(f, "BNE {off:+}"),
            Instruction::B { off } => write!(f, "B {off:+}"),
            Instruction::Bl { off } => write!(f, "BL {off:+}"),
            Instruction::Bx { src: BxSource::Reg(r) } => write!(f, "BX {r}"),
            Instruction::Bx { src: BxSource::Lr } => write!(f, "BX lr"),
            Instruction::Ldtc { rd } => write!(f, "LDTC {rd}"),
            Instruction::Ld { rd, rs } => write!(f, "LD {rd}, [{rs}]"),
            Instruction::St { rs, rd } => write!(f, "ST {rs}, [{rd}]"),
            Instruction::Div { rd, rs } => write!(f, "DIV {rd}, {rs}"),
            Instruction::Bkpt { imm } => write!(f, "BKPT 0x{imm:02X}"),
            Instruction::Eret => write!(f, "ERET"),
        }
    }
}
