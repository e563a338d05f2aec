use std::collections::BTreeMap;

use super::isa::{Instruction, INSTRUCTION_WIDTH};

/// An assembled program: instruction `i` lives at `base_address + 2 * i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramImage {
    pub base_address: u32,
    pub instructions: Vec<Instruction>,
    /// Exception number to handler address.
    pub vector_table: BTreeMap<u8, u32>,
    pub symbols: BTreeMap<String, u32>,
}

impl ProgramImage {
    pub fn entry(&self) -> u32 {
        self.base_address
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn address_of(&self, index: usize) -> u32 {
        self.base_address
            .wrapping_add(index as u32 * INSTRUCTION_WIDTH)
    }

    /// Address one past the last instruction.
    pub fn end_address(&self) -> u32 {
        self.address_of(self.instructions.len())
    }

    pub fn index_of(&self, addr: u32) -> Option<usize> {
        let delta = addr.checked_sub(self.base_address)?;
        if delta % INSTRUCTION_WIDTH != 0 {
            return None;
        }
        let index = (delta / INSTRUCTION_WIDTH) as usize;
        (index < self.instructions.len()).then_some(index)
    }

    pub fn contains(&self, addr: u32) -> bool {
        self.index_of(addr).is_some()
    }

    pub fn instruction_at(&self, addr: u32) -> Option<&Instruction> {
        self.index_of(addr).map(|i| &self.instructions[i])
    }

    /// Target address of the direct branch at `index`, if any.
    pub fn direct_target(&self, index: usize) -> Option<u32> {
        let off = self.instructions.get(index)?.direct_offset()?;
        let target = index as i64 + off as i64;
        Some(
            self.base_address
                .wrapping_add((target as u32).wrapping_mul(INSTRUCTION_WIDTH)),
        )
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    /// Static basic-block leaders, one flag per instruction: the entry, every
    /// direct branch target, every instruction following a block-ending
    /// instruction, and every vector entry.
    pub fn leaders(&self) -> Vec<bool> {
        let mut leaders = vec![false; self.instructions.len()];
        if leaders.is_empty() {
            return leaders;
        }
        leaders[0] = true;
        for (i, insn) in self.instructions.iter().enumerate() {
            if let Some(t) = self.direct_target(i).and_then(|a| self.index_of(a)) {
                leaders[t] = true;
            }
            if insn.ends_block() && i + 1 < leaders.len() {
                leaders[i + 1] = true;
            }
        }
        for &handler in self.vector_table.values() {
            if let Some(i) = self.index_of(handler) {
                leaders[i] = true;
            }
        }
        leaders
    }
}
