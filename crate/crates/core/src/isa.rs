//! eBPF instruction set: decoding, encoding and a disassembly listing.
//!
//! Bytecode is the fixed-width little-endian eBPF encoding: eight bytes per
//! slot, with `lddw` occupying two consecutive slots.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use thiserror::Error;

/// Width of one instruction slot in bytes.
pub const INSN_SIZE: usize = 8;
/// Number of architectural registers (r0 through r10).
pub const REG_COUNT: usize = 11;
/// Read-only frame pointer register.
pub const FRAME_REG: u8 = 10;

// Instruction classes.
pub const BPF_LD: u8 = 0x00;
pub const BPF_LDX: u8 = 0x01;
pub const BPF_ST: u8 = 0x02;
pub const BPF_STX: u8 = 0x03;
pub const BPF_ALU: u8 = 0x04;
pub const BPF_JMP: u8 = 0x05;
pub const BPF_JMP32: u8 = 0x06;
pub const BPF_ALU64: u8 = 0x07;

// Size modifiers.
pub const BPF_W: u8 = 0x00;
pub const BPF_H: u8 = 0x08;
pub const BPF_B: u8 = 0x10;
pub const BPF_DW: u8 = 0x18;

// Mode modifiers.
pub const BPF_IMM: u8 = 0x00;
pub const BPF_ABS: u8 = 0x20;
pub const BPF_IND: u8 = 0x40;
pub const BPF_MEM: u8 = 0x60;
pub const BPF_MEMSX: u8 = 0x80;
pub const BPF_ATOMIC: u8 = 0xc0;

// Operand source.
pub const BPF_K: u8 = 0x00;
pub const BPF_X: u8 = 0x08;

// ALU operations.
pub const BPF_ADD: u8 = 0x00;
pub const BPF_SUB: u8 = 0x10;
pub const BPF_MUL: u8 = 0x20;
pub const BPF_DIV: u8 = 0x30;
pub const BPF_OR: u8 = 0x40;
pub const BPF_AND: u8 = 0x50;
pub const BPF_LSH: u8 = 0x60;
pub const BPF_RSH: u8 = 0x70;
pub const BPF_NEG: u8 = 0x80;
pub const BPF_MOD: u8 = 0x90;
pub const BPF_XOR: u8 = 0xa0;
pub const BPF_MOV: u8 = 0xb0;
pub const BPF_ARSH: u8 = 0xc0;
pub const BPF_END: u8 = 0xd0;

// Jump operations.
pub const BPF_JA: u8 = 0x00;
pub const BPF_JEQ: u8 = 0x10;
pub const BPF_JGT: u8 = 0x20;
pub const BPF_JGE: u8 = 0x30;
pub const BPF_JSET: u8 = 0x40;
pub const BPF_JNE: u8 = 0x50;
pub const BPF_JSGT: u8 = 0x60;
pub const BPF_JSGE: u8 = 0x70;
pub const BPF_CALL: u8 = 0x80;
pub const BPF_EXIT: u8 = 0x90;
pub const BPF_JLT: u8 = 0xa0;
pub const BPF_JLE: u8 = 0xb0;
pub const BPF_JSLT: u8 = 0xc0;
pub const BPF_JSLE: u8 = 0xd0;

// Atomic operation immediates.
pub const BPF_FETCH: i32 = 0x01;
pub const BPF_XCHG: i32 = 0xe0 | BPF_FETCH;
pub const BPF_CMPXCHG: i32 = 0xf0 | BPF_FETCH;

/// Opcode of the 64-bit immediate load (first of two slots).
pub const LDDW: u8 = BPF_LD | BPF_IMM | BPF_DW;

/// `lddw` source-register values with special meaning.
pub const PSEUDO_MAP_FD: u8 = 1;
pub const PSEUDO_MAP_VALUE: u8 = 2;
/// `call` source-register value marking a local (bpf-to-bpf) call.
pub const PSEUDO_CALL: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("TruncatedProgram: {len} bytes is not a positive multiple of 8")]
    TruncatedProgram { len: usize },
    #[error("DanglingWideLoad: lddw at slot {index} has no second slot")]
    DanglingWideLoad { index: usize },
    #[error("MalformedWideLoad: second slot of lddw at {index} has nonzero opcode or registers")]
    MalformedWideLoad { index: usize },
    #[error("MalformedRegister: slot {index} names register {reg}")]
    MalformedRegister { index: usize, reg: u8 },
    #[error("UnsupportedOpcode: {opcode:#04x} at slot {index}")]
    UnsupportedOpcode { index: usize, opcode: u8 },
    #[error("UnknownOpcode: {opcode:#04x} at slot {index}")]
    UnknownOpcode { index: usize, opcode: u8 },
}

/// One eBPF instruction slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Instruction {
    pub opcode: u8,
    pub dst: u8,
    pub src: u8,
    pub offset: i16,
    pub imm: i32,
}

impl Instruction {
    pub const fn new(opcode: u8, dst: u8, src: u8, offset: i16, imm: i32) -> Self {
        Self { opcode, dst, src, offset, imm }
    }

    pub fn class(&self) -> u8 {
        self.opcode & 0x07
    }

    /// Operation bits for ALU and jump classes.
    pub fn op(&self) -> u8 {
        self.opcode & 0xf0
    }

    /// Size bits for load/store classes.
    pub fn size(&self) -> u8 {
        self.opcode & 0x18
    }

    pub fn mode(&self) -> u8 {
        self.opcode & 0xe0
    }

    pub fn uses_src_reg(&self) -> bool {
        self.opcode & BPF_X != 0
    }

    pub fn is_wide_load(&self) -> bool {
        self.opcode == LDDW
    }

    pub fn to_bytes(&self) -> [u8; INSN_SIZE] {
        let mut out = [0u8; INSN_SIZE];
        out[0] = self.opcode;
        out[1] = (self.src << 4) | (self.dst & 0x0f);
        out[2..4].copy_from_slice(&self.offset.to_le_bytes());
        out[4..8].copy_from_slice(&self.imm.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; INSN_SIZE]) -> Self {
        Self {
            opcode: bytes[0],
            dst: bytes[1] & 0x0f,
            src: bytes[1] >> 4,
            offset: i16::from_le_bytes([bytes[2], bytes[3]]),
            imm: i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        }
    }
}

/// Access width in bytes for a load/store size field.
pub fn size_bytes(size: u8) -> usize {
    match size {
        BPF_B => 1,
        BPF_H => 2,
        BPF_W => 4,
        _ => 8,
    }
}

/// A decoded program. Slot indices are preserved, so jump offsets can be
/// applied directly to `instructions`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub instructions: Vec<Instruction>,
    /// Indices of `lddw` first slots; index + 1 is the pseudo slot.
    pub wide_imm_map: BTreeSet<usize>,
}

impl Program {
    /// Builds a program from already-validated slots, recomputing the
    /// wide-load index set.
    pub fn new(name: impl Into<String>, instructions: Vec<Instruction>) -> Self {
        let mut wide = BTreeSet::new();
        let mut i = 0;
        while i < instructions.len() {
            if instructions[i].is_wide_load() {
                wide.insert(i);
                i += 2;
            } else {
                i += 1;
            }
        }
        Self { name: name.into(), instructions, wide_imm_map: wide }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// True when `index` is the second slot of an `lddw`.
    pub fn is_wide_tail(&self, index: usize) -> bool {
        index > 0 && self.wide_imm_map.contains(&(index - 1))
    }

    /// Full 64-bit immediate of the `lddw` starting at `index`.
    pub fn wide_imm(&self, index: usize) -> u64 {
        let lo = self.instructions[index].imm as u32 as u64;
        let hi = self.instructions[index + 1].imm as u32 as u64;
        (hi << 32) | lo
    }
}

fn check_opcode(index: usize, insn: &Instruction) -> Result<(), DecodeError> {
    let unknown = Err(DecodeError::UnknownOpcode { index, opcode: insn.opcode });
    let unsupported = Err(DecodeError::UnsupportedOpcode { index, opcode: insn.opcode });
    match insn.class() {
        BPF_LD => match insn.mode() {
            BPF_IMM if insn.size() == BPF_DW => Ok(()),
            BPF_ABS | BPF_IND => unsupported,
            _ => unknown,
        },
        BPF_LDX => match insn.mode() {
            BPF_MEM => Ok(()),
            BPF_MEMSX => unsupported,
            _ => unknown,
        },
        BPF_ST => match insn.mode() {
            BPF_MEM => Ok(()),
            _ => unknown,
        },
        BPF_STX => match insn.mode() {
            BPF_MEM => Ok(()),
            BPF_ATOMIC if matches!(insn.size(), BPF_W | BPF_DW) => {
                const OPS: [i32; 6] = [
                    BPF_ADD as i32,
                    BPF_OR as i32,
                    BPF_AND as i32,
                    BPF_XOR as i32,
                    BPF_XCHG,
                    BPF_CMPXCHG,
                ];
                let plain = insn.imm & !BPF_FETCH;
                if OPS.contains(&insn.imm) || OPS[..4].contains(&plain) {
                    Ok(())
                } else {
                    unknown
                }
            }
            _ => unknown,
        },
        BPF_ALU | BPF_ALU64 => {
            let op = insn.op();
            if op > BPF_END {
                return unknown;
            }
            // Signed division, sign-extending moves and 64-bit byte swaps
            // belong to a later ISA revision.
            let sdiv = matches!(op, BPF_DIV | BPF_MOD) && insn.offset != 0;
            let movsx = op == BPF_MOV && insn.offset != 0;
            let bswap = op == BPF_END && insn.class() == BPF_ALU64;
            if sdiv || movsx || bswap {
                return unsupported;
            }
            if op == BPF_END && !matches!(insn.imm, 16 | 32 | 64) {
                return unknown;
            }
            Ok(())
        }
        BPF_JMP | BPF_JMP32 => {
            let op = insn.op();
            if op > BPF_JSLE {
                return unknown;
            }
            let jmp32 = insn.class() == BPF_JMP32;
            match op {
                BPF_CALL | BPF_EXIT if jmp32 => unknown,
                BPF_CALL | BPF_EXIT if insn.uses_src_reg() => unknown,
                BPF_JA if jmp32 => unsupported,
                BPF_JA if insn.uses_src_reg() => unknown,
                _ => Ok(()),
            }
        }
        _ => unknown,
    }
}

/// Decodes raw little-endian bytecode into a [`Program`].
pub fn decode(name: &str, bytes: &[u8]) -> Result<Program, DecodeError> {
    if bytes.is_empty() || bytes.len() % INSN_SIZE != 0 {
        return Err(DecodeError::TruncatedProgram { len: bytes.len() });
    }
    let count = bytes.len() / INSN_SIZE;
    let mut instructions = Vec::with_capacity(count);
    let mut wide = BTreeSet::new();
    let mut index = 0;
    while index < count {
        let raw: &[u8; INSN_SIZE] = bytes[index * INSN_SIZE..(index + 1) * INSN_SIZE]
            .try_into()
            .expect("slot width");
        let insn = Instruction::from_bytes(raw);
        for reg in [insn.dst, insn.src] {
            if reg as usize >= REG_COUNT {
                return Err(DecodeError::MalformedRegister { index, reg });
            }
        }
        check_opcode(index, &insn)?;
        instructions.push(insn);
        if insn.is_wide_load() {
            if index + 1 >= count {
                return Err(DecodeError::DanglingWideLoad { index });
            }
            let raw: &[u8; INSN_SIZE] = bytes[(index + 1) * INSN_SIZE..(index + 2) * INSN_SIZE]
                .try_into()
                .expect("slot width");
            let tail = Instruction::from_bytes(raw);
            if tail.opcode != 0 || tail.dst != 0 || tail.src != 0 || tail.offset != 0 {
                return Err(DecodeError::MalformedWideLoad { index });
            }
            instructions.push(tail);
            wide.insert(index);
            index += 2;
        } else {
            index += 1;
        }
    }
    Ok(Program { name: name.to_string(), instructions, wide_imm_map: wide })
}

/// Encodes a program back to bytecode. Byte-exact inverse of [`decode`].
pub fn encode(program: &Program) -> Vec<u8> {
    let mut out = Vec::with_capacity(program.len() * INSN_SIZE);
    for insn in &program.instructions {
        out.extend_from_slice(&insn.to_bytes());
    }
    out
}

/// Result of a binary or unary ALU operation (`NEG` ignores `src`).
/// 32-bit forms operate on the low halves and zero-extend. Shift counts
/// are masked to the operand width; division by zero yields 0 and modulo
/// by zero leaves the destination unchanged.
pub fn eval_alu(op: u8, alu64: bool, dst: u64, src: u64) -> u64 {
    if alu64 {
        match op {
            BPF_ADD => dst.wrapping_add(src),
            BPF_SUB => dst.wrapping_sub(src),
            BPF_MUL => dst.wrapping_mul(src),
            BPF_DIV => dst.checked_div(src).unwrap_or(0),
            BPF_OR => dst | src,
            BPF_AND => dst & src,
            BPF_LSH => dst << (src & 63),
            BPF_RSH => dst >> (src & 63),
            BPF_NEG => (dst as i64).wrapping_neg() as u64,
            BPF_MOD => dst.checked_rem(src).unwrap_or(dst),
            BPF_XOR => dst ^ src,
            BPF_MOV => src,
            BPF_ARSH => ((dst as i64) >> (src & 63)) as u64,
            _ => dst,
        }
    } else {
        let (d, s) = (dst as u32, src as u32);
        let r = match op {
            BPF_ADD => d.wrapping_add(s),
            BPF_SUB => d.wrapping_sub(s),
            BPF_MUL => d.wrapping_mul(s),
            BPF_DIV => d.checked_div(s).unwrap_or(0),
            BPF_OR => d | s,
            BPF_AND => d & s,
            BPF_LSH => d << (s & 31),
            BPF_RSH => d >> (s & 31),
            BPF_NEG => (d as i32).wrapping_neg() as u32,
            BPF_MOD => d.checked_rem(s).unwrap_or(d),
            BPF_XOR => d ^ s,
            BPF_MOV => s,
            BPF_ARSH => ((d as i32) >> (s & 31)) as u32,
            _ => d,
        };
        r as u64
    }
}

/// Byte-order conversion (`le16`/`be32`...). The host is little-endian,
/// so `to_le` only truncates.
pub fn eval_end(to_be: bool, width: i32, dst: u64) -> u64 {
    match (to_be, width) {
        (false, 16) => dst as u16 as u64,
        (false, 32) => dst as u32 as u64,
        (false, _) => dst,
        (true, 16) => (dst as u16).swap_bytes() as u64,
        (true, 32) => (dst as u32).swap_bytes() as u64,
        (true, _) => dst.swap_bytes(),
    }
}

/// Outcome of a conditional jump. `jmp32` compares the low halves.
pub fn eval_cond(op: u8, jmp32: bool, a: u64, b: u64) -> bool {
    let (a, b, sa, sb) = if jmp32 {
        let (a, b) = (a as u32, b as u32);
        (a as u64, b as u64, a as i32 as i64, b as i32 as i64)
    } else {
        (a, b, a as i64, b as i64)
    };
    match op {
        BPF_JA => true,
        BPF_JEQ => a == b,
        BPF_JGT => a > b,
        BPF_JGE => a >= b,
        BPF_JSET => a & b != 0,
        BPF_JNE => a != b,
        BPF_JSGT => sa > sb,
        BPF_JSGE => sa >= sb,
        BPF_JLT => a < b,
        BPF_JLE => a <= b,
        BPF_JSLT => sa < sb,
        BPF_JSLE => sa <= sb,
        _ => false,
    }
}

fn alu_mnemonic(op: u8) -> &'static str {
    match op {
        BPF_ADD => "add",
        BPF_SUB => "sub",
        BPF_MUL => "mul",
        BPF_DIV => "div",
        BPF_OR => "or",
        BPF_AND => "and",
        BPF_LSH => "lsh",
        BPF_RSH => "rsh",
        BPF_NEG => "neg",
        BPF_MOD => "mod",
        BPF_XOR => "xor",
        BPF_MOV => "mov",
        BPF_ARSH => "arsh",
        _ => "alu?",
    }
}

fn jmp_mnemonic(op: u8) -> &'static str {
    match op {
        BPF_JA => "ja",
        BPF_JEQ => "jeq",
        BPF_JGT => "jgt",
        BPF_JGE => "jge",
        BPF_JSET => "jset",
        BPF_JNE => "jne",
        BPF_JSGT => "jsgt",
        BPF_JSGE => "jsge",
        BPF_JLT => "jlt",
        BPF_JLE => "jle",
        BPF_JSLT => "jslt",
        BPF_JSLE => "jsle",
        _ => "jmp?",
    }
}

fn size_suffix(size: u8) -> &'static str {
    match size {
        BPF_B => "b",
        BPF_H => "h",
        BPF_W => "w",
        _ => "dw",
    }
}

fn mem_operand(reg: u8, offset: i16) -> String {
    match offset {
        0 => format!("[r{reg}]"),
        o if o < 0 => format!("[r{reg}-{}]", -(o as i32)),
        o => format!("[r{reg}+{o}]"),
    }
}

fn format_insn(program: &Program, index: usize, out: &mut String) -> fmt::Result {
    let insn = &program.instructions[index];
    let (dst, src, imm) = (insn.dst, insn.src, insn.imm);
    match insn.class() {
        BPF_LD => {
            let value = program.wide_imm(index);
            match src {
                PSEUDO_MAP_FD => write!(out, "lddw r{dst}, map[{imm}]"),
                PSEUDO_MAP_VALUE => {
                    let off = program.instructions[index + 1].imm;
                    write!(out, "lddw r{dst}, map[{imm}]+{off}")
                }
                _ => write!(out, "lddw r{dst}, {value:#x}"),
            }
        }
        BPF_LDX => write!(
            out,
            "ldx{} r{dst}, {}",
            size_suffix(insn.size()),
            mem_operand(src, insn.offset)
        ),
        BPF_ST => write!(
            out,
            "st{} {}, {imm}",
            size_suffix(insn.size()),
            mem_operand(dst, insn.offset)
        ),
        BPF_STX if insn.mode() == BPF_ATOMIC => {
            let width = if insn.size() == BPF_DW { 64 } else { 32 };
            let op = match imm {
                BPF_XCHG => "xchg".to_string(),
                BPF_CMPXCHG => "cmpxchg".to_string(),
                _ => {
                    let base = alu_mnemonic((imm & !BPF_FETCH) as u8);
                    if imm & BPF_FETCH != 0 {
                        format!("fetch_{base}")
                    } else {
                        base.to_string()
                    }
                }
            };
            write!(out, "atomic{width} {op} {}, r{src}", mem_operand(dst, insn.offset))
        }
        BPF_STX => write!(
            out,
            "stx{} {}, r{src}",
            size_suffix(insn.size()),
            mem_operand(dst, insn.offset)
        ),
        BPF_ALU | BPF_ALU64 => {
            let width = if insn.class() == BPF_ALU64 { "64" } else { "32" };
            match insn.op() {
                BPF_NEG => write!(out, "neg{width} r{dst}"),
                BPF_END => {
                    let order = if insn.uses_src_reg() { "be" } else { "le" };
                    write!(out, "{order}{imm} r{dst}")
                }
                op if insn.uses_src_reg() => {
                    write!(out, "{}{width} r{dst}, r{src}", alu_mnemonic(op))
                }
                op => write!(out, "{}{width} r{dst}, {imm}", alu_mnemonic(op)),
            }
        }
        BPF_JMP | BPF_JMP32 => {
            let suffix = if insn.class() == BPF_JMP32 { "32" } else { "" };
            let off = insn.offset;
            match insn.op() {
                BPF_EXIT => write!(out, "exit"),
                BPF_CALL if src == PSEUDO_CALL => write!(out, "call local {:+}", imm),
                BPF_CALL => write!(out, "call {imm}"),
                BPF_JA => write!(out, "ja {off:+}"),
                op if insn.uses_src_reg() => {
                    write!(out, "{}{suffix} r{dst}, r{src}, {off:+}", jmp_mnemonic(op))
                }
                op => write!(out, "{}{suffix} r{dst}, {imm}, {off:+}", jmp_mnemonic(op)),
            }
        }
        _ => write!(out, "unknown {:#04x}", insn.opcode),
    }
}

/// Renders a listing, one line per instruction as `idx: mnemonic operands`.
/// An `lddw` occupies a single line; the index of the next line skips its
/// pseudo slot.
pub fn disassemble(program: &Program) -> String {
    let mut out = String::new();
    let mut index = 0;
    while index < program.len() {
        let _ = write!(out, "{index}: ");
        let _ = format_insn(program, index, &mut out);
        out.push('\n');
        index += if program.instructions[index].is_wide_load() { 2 } else { 1 };
    }
    out
}

/// Instruction constructors, mostly used by tests and generated programs.
pub mod asm {
    use super::*;

    pub fn mov64_imm(dst: u8, imm: i32) -> Instruction {
        Instruction::new(BPF_ALU64 | BPF_MOV | BPF_K, dst, 0, 0, imm)
    }

    pub fn mov64_reg(dst: u8, src: u8) -> Instruction {
        Instruction::new(BPF_ALU64 | BPF_MOV | BPF_X, dst, src, 0, 0)
    }

    pub fn mov32_imm(dst: u8, imm: i32) -> Instruction {
        Instruction::new(BPF_ALU | BPF_MOV | BPF_K, dst, 0, 0, imm)
    }

    pub fn alu64_imm(op: u8, dst: u8, imm: i32) -> Instruction {
        Instruction::new(BPF_ALU64 | op | BPF_K, dst, 0, 0, imm)
    }

    pub fn alu64_reg(op: u8, dst: u8, src: u8) -> Instruction {
        Instruction::new(BPF_ALU64 | op | BPF_X, dst, src, 0, 0)
    }

    pub fn alu32_imm(op: u8, dst: u8, imm: i32) -> Instruction {
        Instruction::new(BPF_ALU | op | BPF_K, dst, 0, 0, imm)
    }

    pub fn alu32_reg(op: u8, dst: u8, src: u8) -> Instruction {
        Instruction::new(BPF_ALU | op | BPF_X, dst, src, 0, 0)
    }

    /// Both slots of a 64-bit immediate load.
    pub fn lddw(dst: u8, value: u64) -> [Instruction; 2] {
        [
            Instruction::new(LDDW, dst, 0, 0, value as u32 as i32),
            Instruction::new(0, 0, 0, 0, (value >> 32) as u32 as i32),
        ]
    }

    /// Map reference load, patched with a map handle.
    pub fn ld_map(dst: u8, handle: u32) -> [Instruction; 2] {
        [
            Instruction::new(LDDW, dst, PSEUDO_MAP_FD, 0, handle as i32),
            Instruction::new(0, 0, 0, 0, 0),
        ]
    }

    /// Address of `offset` inside the value of a single-entry map.
    pub fn ld_map_value(dst: u8, handle: u32, offset: u32) -> [Instruction; 2] {
        [
            Instruction::new(LDDW, dst, PSEUDO_MAP_VALUE, 0, handle as i32),
            Instruction::new(0, 0, 0, 0, offset as i32),
        ]
    }

    pub fn ldx(size: u8, dst: u8, src: u8, off: i16) -> Instruction {
        Instruction::new(BPF_LDX | BPF_MEM | size, dst, src, off, 0)
    }

    pub fn stx(size: u8, dst: u8, off: i16, src: u8) -> Instruction {
        Instruction::new(BPF_STX | BPF_MEM | size, dst, src, off, 0)
    }

    pub fn st(size: u8, dst: u8, off: i16, imm: i32) -> Instruction {
        Instruction::new(BPF_ST | BPF_MEM | size, dst, 0, off, imm)
    }

    pub fn atomic(size: u8, op: i32, dst: u8, off: i16, src: u8) -> Instruction {
        Instruction::new(BPF_STX | BPF_ATOMIC | size, dst, src, off, op)
    }

    pub fn jmp_imm(op: u8, dst: u8, imm: i32, off: i16) -> Instruction {
        Instruction::new(BPF_JMP | op | BPF_K, dst, 0, off, imm)
    }

    pub fn jmp_reg(op: u8, dst: u8, src: u8, off: i16) -> Instruction {
        Instruction::new(BPF_JMP | op | BPF_X, dst, src, off, 0)
    }

    pub fn jmp32_imm(op: u8, dst: u8, imm: i32, off: i16) -> Instruction {
        Instruction::new(BPF_JMP32 | op | BPF_K, dst, 0, off, imm)
    }

    pub fn ja(off: i16) -> Instruction {
        Instruction::new(BPF_JMP | BPF_JA, 0, 0, off, 0)
    }

    pub fn call(helper: i32) -> Instruction {
        Instruction::new(BPF_JMP | BPF_CALL, 0, 0, 0, helper)
    }

    pub fn call_local(rel: i32) -> Instruction {
        Instruction::new(BPF_JMP | BPF_CALL, 0, PSEUDO_CALL, 0, rel)
    }

    pub fn exit() -> Instruction {
        Instruction::new(BPF_JMP | BPF_EXIT, 0, 0, 0, 0)
    }

    /// Flattens a mix of single instructions and `lddw` pairs.
    pub fn program(name: &str, parts: &[&[Instruction]]) -> Program {
        Program::new(name, parts.iter().flat_map(|p| p.iter().copied()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::asm::*;
    use super::*;

    fn hex(s: &str) -> Vec<u8> {
        s.split_whitespace().map(|b| u8::from_str_radix(b, 16).unwrap()).collect()
    }

    #[test]
    fn decodes_mov_imm() {
        let p = decode("t", &hex("b7 01 00 00 2a 00 00 00")).unwrap();
        assert_eq!(p.instructions, vec![mov64_imm(1, 42)]);
        assert_eq!(disassemble(&p), "0: mov64 r1, 42\n");
    }

    #[test]
    fn decodes_exit() {
        let p = decode("t", &hex("95 00 00 00 00 00 00 00")).unwrap();
        assert_eq!(p.instructions[0].opcode, BPF_JMP | BPF_EXIT);
        assert_eq!(disassemble(&p), "0: exit\n");
    }

    #[test]
    fn dangling_wide_load() {
        let bytes = hex("b7 00 00 00 00 00 00 00 18 01 00 00 00 00 00 00");
        assert_eq!(decode("t", &bytes), Err(DecodeError::DanglingWideLoad { index: 1 }));
    }

    #[test]
    fn truncated_and_register_errors() {
        assert_eq!(decode("t", &[]), Err(DecodeError::TruncatedProgram { len: 0 }));
        assert_eq!(decode("t", &[0x95; 7]), Err(DecodeError::TruncatedProgram { len: 7 }));
        let bad = hex("b7 0b 00 00 00 00 00 00");
        assert_eq!(decode("t", &bad), Err(DecodeError::MalformedRegister { index: 0, reg: 11 }));
        let bad = hex("bf c1 00 00 00 00 00 00");
        assert_eq!(decode("t", &bad), Err(DecodeError::MalformedRegister { index: 0, reg: 12 }));
    }

    #[test]
    fn legacy_packet_loads_are_unsupported() {
        // ldabsw / ldindb
        for op in [0x20u8, 0x50] {
            let bytes = [op, 0, 0, 0, 0, 0, 0, 0];
            assert!(matches!(
                decode("t", &bytes),
                Err(DecodeError::UnsupportedOpcode { index: 0, .. })
            ));
        }
    }

    #[test]
    fn unknown_opcode() {
        assert!(matches!(
            decode("t", &[0xff, 0, 0, 0, 0, 0, 0, 0]),
            Err(DecodeError::UnknownOpcode { .. })
        ));
    }

    #[test]
    fn encode_minimal_program() {
        let p = program("t", &[&[mov64_imm(0, 0), exit()]]);
        assert_eq!(
            encode(&p),
            hex("b7 00 00 00 00 00 00 00 95 00 00 00 00 00 00 00")
        );
    }

    #[test]
    fn wide_load_lists_on_one_line() {
        let p = program("t", &[&lddw(2, 0x1122334455667788), &[exit()]]);
        let bytes = encode(&p);
        assert_eq!(&bytes[..16], &hex("18 02 00 00 88 77 66 55 00 00 00 00 44 33 22 11")[..]);
        let back = decode("t", &bytes).unwrap();
        assert_eq!(back.wide_imm(0), 0x1122334455667788);
        assert!(back.is_wide_tail(1));
        assert_eq!(disassemble(&back), "0: lddw r2, 0x1122334455667788\n2: exit\n");
    }

    #[test]
    fn atomics_decode() {
        let p = program("t", &[&[atomic(BPF_DW, BPF_ADD as i32, 0, 0, 1), exit()]]);
        let back = decode("t", &encode(&p)).unwrap();
        assert_eq!(back, p);
        assert!(disassemble(&back).starts_with("0: atomic64 add [r0], r1"));
    }

    #[test]
    fn listing_formats() {
        let p = program(
            "t",
            &[&[
                ldx(BPF_DW, 0, 1, 0x70),
                stx(BPF_W, 10, -4, 0),
                jmp_imm(BPF_JEQ, 0, 0, 3),
                alu32_reg(BPF_ADD, 1, 2),
                call(14),
                exit(),
            ]],
        );
        let text = disassemble(&p);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "0: ldxdw r0, [r1+112]");
        assert_eq!(lines[1], "1: stxw [r10-4], r0");
        assert_eq!(lines[2], "2: jeq r0, 0, +3");
        assert_eq!(lines[3], "3: add32 r1, r2");
        assert_eq!(lines[4], "4: call 14");
    }
}
