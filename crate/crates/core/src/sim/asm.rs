//! Text assembler for the micro-VM.
//!
//! One instruction per line, optional `label:` prefixes, `;` comments,
//! decimal / `0x` / `'c'` literals, and the directives `.base ADDR` and
//! `.vector N label`. Branch operands are labels or signed instruction
//! offsets (`+3`, `-1`). `MOVI` accepts a label, which loads its address.

use std::collections::BTreeMap;

use thiserror::Error;

use super::image::ProgramImage;
use super::isa::{BxSource, Instruction, Reg, INSTRUCTION_WIDTH};

pub const DEFAULT_BASE: u32 = 0x0800_0000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("bad operand: {0}")]
    BadOperand(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("bad directive: {0}")]
    BadDirective(String),
    #[error("program has no instructions")]
    EmptyProgram,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

impl AsmError {
    fn new(line: usize, kind: AsmErrorKind) -> Self {
        Self { line, kind }
    }
}

struct PendingInsn<'a> {
    line: usize,
    mnemonic: String,
    operands: Vec<&'a str>,
}

pub fn assemble(source: &str) -> Result<ProgramImage, AsmError> {
    let mut base = DEFAULT_BASE;
    let mut base_locked = false;
    let mut labels: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut vectors: Vec<(usize, u8, String)> = Vec::new();
    let mut pending: Vec<PendingInsn> = Vec::new();

    for (lineno, raw) in source.lines().enumerate() {
        let line = lineno + 1;
        let mut text = raw.split(';').next().unwrap_or("").trim();

        while let Some((head, rest)) = split_label(text) {
            if labels.insert(head.to_string(), (pending.len(), line)).is_some() {
                return Err(AsmError::new(line, AsmErrorKind::DuplicateLabel(head.into())));
            }
            text = rest.trim();
        }
        if text.is_empty() {
            continue;
        }

        if let Some(directive) = text.strip_prefix('.') {
            let mut parts = directive.split_whitespace();
            match parts.next().map(str::to_ascii_lowercase).as_deref() {
                Some("base") => {
                    if base_locked || !pending.is_empty() {
                        return Err(AsmError::new(
                            line,
                            AsmErrorKind::BadDirective(".base must precede all instructions".into()),
                        ));
                    }
                    let value = parts.next().ok_or_else(|| {
                        AsmError::new(line, AsmErrorKind::BadDirective(".base needs an address".into()))
                    })?;
                    base = parse_number(value)
                        .filter(|v| v % INSTRUCTION_WIDTH as i64 == 0 && (0..=u32::MAX as i64).contains(v))
                        .ok_or_else(|| {
                            AsmError::new(line, AsmErrorKind::BadDirective(format!("bad base `{value}`")))
                        })? as u32;
                    base_locked = true;
                }
                Some("vector") => {
                    let n = parts
                        .next()
                        .and_then(parse_number)
                        .filter(|n| (0..=255).contains(n))
                        .ok_or_else(|| {
                            AsmError::new(
                                line,
                                AsmErrorKind::BadDirective(".vector needs an exception number 0..=255".into()),
                            )
                        })?;
                    let label = parts.next().ok_or_else(|| {
                        AsmError::new(line, AsmErrorKind::BadDirective(".vector needs a label".into()))
                    })?;
                    vectors.push((line, n as u8, label.to_string()));
                }
                _ => {
                    return Err(AsmError::new(
                        line,
                        AsmErrorKind::BadDirective(format!("unknown directive `.{directive}`")),
                    ))
                }
            }
            continue;
        }

        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(pos) => (&text[..pos], text[pos..].trim()),
            None => (text, ""),
        };
        let operands = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        pending.push(PendingInsn {
            line,
            mnemonic: mnemonic.to_ascii_uppercase(),
            operands,
        });
    }

    if pending.is_empty() {
        return Err(AsmError::new(0, AsmErrorKind::EmptyProgram));
    }
    let count = pending.len();
    let addr_of = |index: usize| base.wrapping_add(index as u32 * INSTRUCTION_WIDTH);

    let resolve_label = |name: &str, line: usize| -> Result<usize, AsmError> {
        match labels.get(name) {
            Some(&(index, _)) if index < count => Ok(index),
            Some(_) => Err(AsmError::new(
                line,
                AsmErrorKind::BadOperand(format!("label `{name}` does not precede an instruction")),
            )),
            None => Err(AsmError::new(line, AsmErrorKind::UndefinedLabel(name.into()))),
        }
    };

    let mut instructions = Vec::with_capacity(count);
    for (index, p) in pending.iter().enumerate() {
        let line = p.line;
        let ops = &p.operands;
        let want = |n: usize| -> Result<(), AsmError> {
            if ops.len() == n {
                Ok(())
            } else {
                Err(AsmError::new(
                    line,
                    AsmErrorKind::BadOperand(format!(
                        "{} takes {n} operand(s), got {}",
                        p.mnemonic,
                        ops.len()
                    )),
                ))
            }
        };
        let reg = |s: &str| parse_reg(s).ok_or_else(|| bad(line, format!("expected register r0..r7, got `{s}`")));
        let mem = |s: &str| {
            s.strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .and_then(|s| parse_reg(s.trim()))
                .ok_or_else(|| bad(line, format!("expected [rN], got `{s}`")))
        };
        let branch = |s: &str| -> Result<i32, AsmError> {
            let target = if s.starts_with('+') || s.starts_with('-') {
                let off = parse_number(s).ok_or_else(|| bad(line, format!("bad offset `{s}`")))?;
                let t = index as i64 + off;
                if t < 0 || t >= count as i64 {
                    return Err(bad(line, format!("offset `{s}` leaves the program")));
                }
                t as usize
            } else {
                resolve_label(s, line)?
            };
            Ok(target as i32 - index as i32)
        };
        let insn = match p.mnemonic.as_str() {
            "NOP" => {
                want(0)?;
                Instruction::Nop
            }
            "MOVI" => {
                want(2)?;
                let imm = match parse_number(ops[1]) {
                    Some(v) if (i32::MIN as i64..=u32::MAX as i64).contains(&v) => v as u32,
                    Some(_) => return Err(bad(line, format!("immediate `{}` out of range", ops[1]))),
                    None if is_identifier(ops[1]) => addr_of(resolve_label(ops[1], line)?),
                    None => return Err(bad(line, format!("bad immediate `{}`", ops[1]))),
                };
                Instruction::Movi { rd: reg(ops[0])?, imm }
            }
            "ADD" => {
                want(2)?;
                Instruction::Add { rd: reg(ops[0])?, rs: reg(ops[1])? }
            }
            "XOR" => {
                want(2)?;
                Instruction::Xor { rd: reg(ops[0])?, rs: reg(ops[1])? }
            }
            "SHR" => {
                want(2)?;
                let imm = parse_number(ops[1])
                    .filter(|v| (0..32).contains(v))
                    .ok_or_else(|| bad(line, format!("shift `{}` not in 0..=31", ops[1])))?;
                Instruction::Shr { rd: reg(ops[0])?, imm: imm as u8 }
            }
            "CMPI" => {
                want(2)?;
                let imm = parse_number(ops[1])
                    .filter(|v| (0..=255).contains(v))
                    .ok_or_else(|| bad(line, format!("immediate `{}` not in 0..=255", ops[1])))?;
                Instruction::Cmpi { rs: reg(ops[0])?, imm: imm as u8 }
            }
            "BEQ" => {
                want(1)?;
                Instruction::Beq { off: branch(ops[0])? }
            }
            "BNE" => {
                want(1)?;
                Instruction::Bne { off: branch(ops[0])? }
            }
            "B" => {
                want(1)?;
                Instruction::B { off: branch(ops[0])? }
            }
            "BL" => {
                want(1)?;
                Instruction::Bl { off: branch(ops[0])? }
            }
            "BX" => {
                want(1)?;
                let src = if ops[0].eq_ignore_ascii_case("lr") {
                    BxSource::Lr
                } else {
                    BxSource::Reg(reg(ops[0])?)
                };
                Instruction::Bx { src }
            }
            "LDTC" => {
                want(1)?;
                Instruction::Ldtc { rd: reg(ops[0])? }
            }
            "LD" => {
                want(2)?;
                Instruction::Ld { rd: reg(ops[0])?, rs: mem(ops[1])? }
            }
            "ST" => {
                want(2)?;
                Instruction::St { rs: reg(ops[0])?, rd: mem(ops[1])? }
            }
            "DIV" => {
                want(2)?;
                Instruction::Div { rd: reg(ops[0])?, rs: reg(ops[1])? }
            }
            "BKPT" => {
                want(1)?;
                let imm = parse_number(ops[0])
                    .filter(|v| (0..=255).contains(v))
                    .ok_or_else(|| bad(line, format!("BKPT argument `{}` not in 0..=255", ops[0])))?;
                Instruction::Bkpt { imm: imm as u8 }
            }
            "ERET" => {
                want(0)?;
                Instruction::Eret
            }
            other => return Err(AsmError::new(line, AsmErrorKind::UnknownMnemonic(other.into()))),
        };
        instructions.push(insn);
    }

    let mut vector_table = BTreeMap::new();
    for (line, n, label) in vectors {
        let index = resolve_label(&label, line)?;
        vector_table.insert(n, addr_of(index));
    }

    let symbols = labels
        .into_iter()
        .filter(|(_, (index, _))| *index < count)
        .map(|(name, (index, _))| (name, addr_of(index)))
        .collect();

    Ok(ProgramImage {
        base_address: base,
        instructions,
        vector_table,
        symbols,
    })
}

fn bad(line: usize, msg: String) -> AsmError {
    AsmError::new(line, AsmErrorKind::BadOperand(msg))
}

fn split_label(text: &str) -> Option<(&str, &str)> {
    let colon = text.find(':')?;
    let head = text[..colon].trim();
    is_identifier(head).then(|| (head, &text[colon + 1..]))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_reg(s: &str) -> Option<Reg> {
    let digits = s.strip_prefix('r').or_else(|| s.strip_prefix('R'))?;
    match digits.parse::<u8>() {
        Ok(n) if n < 8 && digits.len() == 1 => Some(Reg(n)),
        _ => None,
    }
}

/// Parses decimal, `0x` hex, `'c'` character literals, with optional sign.
pub fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Some(inner) = s.strip_prefix('\'').and_then(|s| s.strip_suffix('\'')) {
        let mut chars = inner.chars();
        let c = chars.next()?;
        return (chars.next().is_none() && c.is_ascii()).then_some(c as i64);
    }
    let (neg, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { -value } else { value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_instructions_at_default_base() {
        let image = assemble("start: NOP\n BKPT 0xA5").unwrap();
        assert_eq!(image.len(), 2);
        assert_eq!(image.address_of(0), 0x0800_0000);
        assert_eq!(image.address_of(1), 0x0800_0002);
        assert_eq!(image.symbol("start"), Some(0x0800_0000));
        assert_eq!(image.instructions[1], Instruction::Bkpt { imm: 0xA5 });
    }

    #[test]
    fn undefined_label() {
        let err = assemble("NOP\nB start").unwrap_err();
        assert_eq!(err.line, 2);
        assert_eq!(err.kind, AsmErrorKind::UndefinedLabel("start".into()));
    }

    #[test]
    fn bad_operands_carry_line_numbers() {
        let err = assemble("NOP\n\nMOVI r9, 1").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(matches!(err.kind, AsmErrorKind::BadOperand(_)));
        assert!(matches!(
            assemble("CMPI r0, 256").unwrap_err().kind,
            AsmErrorKind::BadOperand(_)
        ));
        assert!(matches!(
            assemble("FROB r0").unwrap_err().kind,
            AsmErrorKind::UnknownMnemonic(_)
        ));
        assert!(matches!(
            assemble("B +5\nNOP").unwrap_err().kind,
            AsmErrorKind::BadOperand(_)
        ));
    }

    #[test]
    fn directives_comments_and_labels() {
        let src = "
            ; boot
            .base 0x08000100
            .vector 15 tick
            main:   MOVI r1, 'A'      ; load
                    BEQ main
            tick:
                    ERET
        ";
        let image = assemble(src).unwrap();
        assert_eq!(image.base_address, 0x0800_0100);
        assert_eq!(image.vector_table.get(&15), Some(&0x0800_0104));
        assert_eq!(image.instructions[0], Instruction::Movi { rd: Reg(1), imm: 0x41 });
        assert_eq!(image.instructions[1], Instruction::Beq { off: -1 });
        assert_eq!(image.direct_target(1), Some(0x0800_0100));
    }

    #[test]
    fn movi_label_and_wide_immediates() {
        let image = assemble("MOVI r0, there\nMOVI r1, 0xFFFFFFF0\nthere: BX r0").unwrap();
        assert_eq!(image.instructions[0], Instruction::Movi { rd: Reg(0), imm: 0x0800_0004 });
        assert_eq!(image.instructions[1], Instruction::Movi { rd: Reg(1), imm: 0xFFFF_FFF0 });
    }

    #[test]
    fn base_after_code_is_rejected() {
        assert!(matches!(
            assemble("NOP\n.base 0x100").unwrap_err().kind,
            AsmErrorKind::BadDirective(_)
        ));
        assert!(matches!(
            assemble(".base 0x101\nNOP").unwrap_err().kind,
            AsmErrorKind::BadDirective(_)
        ));
    }

    #[test]
    fn trailing_label_is_not_a_target() {
        let err = assemble("B end\nend:").unwrap_err();
        assert!(matches!(err.kind, AsmErrorKind::BadOperand(_)));
        assert_eq!(assemble("; nothing").unwrap_err().kind, AsmErrorKind::EmptyProgram);
    }

    #[test]
    fn duplicate_label() {
        assert_eq!(
            assemble("a: NOP\na: NOP").unwrap_err(),
            AsmError::new(2, AsmErrorKind::DuplicateLabel("a".into()))
        );
    }
}
