//! Reference interpreter.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use super::{Engine, ExecError, ExecutionContext, Executable, HelperRegistry, MemoryRegion};
use crate::helpers;
use crate::isa::*;
use crate::verifier::{MAX_CALL_FRAMES, STACK_SIZE};

/// The interpreter as an [`Engine`] variant.
#[derive(Debug, Clone, Copy, Default)]
pub struct Interpreter;

impl Engine for Interpreter {
    fn name(&self) -> &'static str {
        "interpreter"
    }

    fn execute(&self, exe: &Executable, ctx: &mut ExecutionContext, helpers: &HelperRegistry) -> Result<u64, ExecError> {
        run(exe, ctx, helpers)
    }
}

/// Largest buffer a standard helper may be handed.
const MAX_HELPER_BUF: u64 = 1 << 20;

struct Sfi<'a> {
    on: bool,
    stack_top: u64,
    ctx_regions: &'a [MemoryRegion],
    map_regions: &'a [MemoryRegion],
}

impl Sfi<'_> {
    #[inline]
    fn check(&self, pc: usize, addr: u64, len: usize, write: bool, depth: usize) -> Result<(), ExecError> {
        if !self.on {
            return Ok(());
        }
        let n = len as u64;
        // Frames below the current one are dead; frames above may be
        // reached through pointers passed down by callers.
        let stack_lo = self.stack_top - ((depth + 1) * STACK_SIZE) as u64;
        let in_stack = addr >= stack_lo && addr <= self.stack_top && self.stack_top - addr >= n;
        if in_stack
            || self.ctx_regions.iter().any(|r| r.permits(addr, n, write))
            || self.map_regions.iter().any(|r| r.permits(addr, n, write))
        {
            Ok(())
        } else {
            Err(ExecError::SfiViolation { pc, addr, len, write })
        }
    }
}

#[inline]
unsafe fn load(addr: u64, size: u8) -> u64 {
    match size {
        BPF_B => (addr as *const u8).read() as u64,
        BPF_H => (addr as *const u16).read_unaligned() as u64,
        BPF_W => (addr as *const u32).read_unaligned() as u64,
        _ => (addr as *const u64).read_unaligned(),
    }
}

#[inline]
unsafe fn store(addr: u64, size: u8, v: u64) {
    match size {
        BPF_B => (addr as *mut u8).write(v as u8),
        BPF_H => (addr as *mut u16).write_unaligned(v as u16),
        BPF_W => (addr as *mut u32).write_unaligned(v as u32),
        _ => (addr as *mut u64).write_unaligned(v),
    }
}

/// Executes an atomic read-modify-write; returns the previous value.
unsafe fn atomic(addr: u64, wide: bool, op: i32, operand: u64, expected: u64) -> (u64, bool) {
    let plain = op & !BPF_FETCH;
    if wide {
        let a = &*(addr as *const AtomicU64);
        let seq = Ordering::SeqCst;
        match op {
            BPF_XCHG => (a.swap(operand, seq), true),
            BPF_CMPXCHG => (a.compare_exchange(expected, operand, seq, seq).unwrap_or_else(|v| v), true),
            _ => match plain as u8 {
                BPF_ADD => (a.fetch_add(operand, seq), false),
                BPF_OR => (a.fetch_or(operand, seq), false),
                BPF_AND => (a.fetch_and(operand, seq), false),
                _ => (a.fetch_xor(operand, seq), false),
            },
        }
    } else {
        let a = &*(addr as *const AtomicU32);
        let (operand, expected) = (operand as u32, expected as u32);
        let seq = Ordering::SeqCst;
        let (old, exchanged) = match op {
            BPF_XCHG => (a.swap(operand, seq), true),
            BPF_CMPXCHG => (a.compare_exchange(expected, operand, seq, seq).unwrap_or_else(|v| v), true),
            _ => match plain as u8 {
                BPF_ADD => (a.fetch_add(operand, seq), false),
                BPF_OR => (a.fetch_or(operand, seq), false),
                BPF_AND => (a.fetch_and(operand, seq), false),
                _ => (a.fetch_xor(operand, seq), false),
            },
        };
        (old as u64, exchanged)
    }
}

/// Checks the pointer arguments of standard helpers, which the verifier
/// could not prove for permissive programs.
fn check_helper_args(
    exe: &Executable,
    sfi: &Sfi<'_>,
    pc: usize,
    id: u32,
    regs: &[u64; REG_COUNT],
    depth: usize,
) -> Result<(), ExecError> {
    let buf = |addr: u64, len: u64, write: bool| -> Result<(), ExecError> {
        if len > MAX_HELPER_BUF {
            return Err(ExecError::SfiViolation { pc, addr, len: len as usize, write });
        }
        if len == 0 {
            return Ok(());
        }
        sfi.check(pc, addr, len as usize, write, depth)
    };
    match id {
        helpers::MAP_LOOKUP_ELEM | helpers::MAP_UPDATE_ELEM | helpers::MAP_DELETE_ELEM => {
            let info = exe
                .map_info(regs[1])
                .ok_or(ExecError::SfiViolation { pc, addr: regs[1], len: 0, write: false })?;
            buf(regs[2], info.key_size as u64, false)?;
            if id == helpers::MAP_UPDATE_ELEM {
                buf(regs[3], info.value_size as u64, false)?;
            }
            Ok(())
        }
        helpers::TRACE_PRINTK => buf(regs[1], regs[2], false),
        helpers::PROBE_READ_USER => buf(regs[1], regs[2], true),
        _ => Ok(()),
    }
}

pub(super) fn run(exe: &Executable, ctx: &mut ExecutionContext, helpers: &HelperRegistry) -> Result<u64, ExecError> {
    let code = exe.code();
    let top = ctx.stack_top();
    debug_assert_eq!(top - ctx.stack_base(), super::STACK_AREA as u64);
    let sfi = Sfi {
        on: ctx.sfi || exe.requires_sfi(),
        stack_top: top,
        ctx_regions: &ctx.regions,
        map_regions: exe.map_regions(),
    };
    let mut regs = [0u64; REG_COUNT];
    regs[1..6].copy_from_slice(&ctx.args);
    regs[10] = top;
    // Saved r6..r9, r10 and return pc per active caller.
    let mut frames = [[0u64; 6]; MAX_CALL_FRAMES];
    let mut depth = 0usize;
    let mut pc = 0usize;
    let budget = ctx.budget;
    let mut left = budget;

    loop {
        if left == 0 {
            return Err(ExecError::BudgetExhausted { budget });
        }
        left -= 1;
        let Some(&s) = code.get(pc) else {
            return Err(ExecError::InvalidInstruction { pc, opcode: 0 });
        };
        let at = pc;
        pc += 1;
        let (dst, src) = (s.dst as usize, s.src as usize);
        if dst >= REG_COUNT || src >= REG_COUNT {
            return Err(ExecError::InvalidInstruction { pc: at, opcode: s.opcode });
        }
        let invalid = ExecError::InvalidInstruction { pc: at, opcode: s.opcode };
        match s.opcode & 0x07 {
            class @ (BPF_ALU | BPF_ALU64) => {
                let alu64 = class == BPF_ALU64;
                let op = s.opcode & 0xf0;
                let x = s.opcode & BPF_X != 0;
                if op == BPF_END {
                    regs[dst] = eval_end(x, s.imm as i32, regs[dst]);
                } else {
                    let operand = if x { regs[src] } else { s.imm as u64 };
                    regs[dst] = eval_alu(op, alu64, regs[dst], operand);
                }
            }
            class @ (BPF_JMP | BPF_JMP32) => match s.opcode & 0xf0 {
                BPF_JA if class == BPF_JMP => pc = (pc as isize + s.off as isize) as usize,
                BPF_CALL if class == BPF_JMP => {
                    if s.src == PSEUDO_CALL {
                        if depth + 1 >= MAX_CALL_FRAMES {
                            return Err(ExecError::CallDepthExceeded { pc: at });
                        }
                        frames[depth] = [regs[6], regs[7], regs[8], regs[9], regs[10], pc as u64];
                        depth += 1;
                        regs[10] -= STACK_SIZE as u64;
                        pc = (pc as i64 + s.imm) as usize;
                    } else {
                        let id = s.imm as u32;
                        let f = helpers.get(id).ok_or(ExecError::UnregisteredHelper { pc: at, id })?;
                        if sfi.on {
                            check_helper_args(exe, &sfi, at, id, &regs, depth)?;
                        }
                        regs[0] = f(regs[1], regs[2], regs[3], regs[4], regs[5]);
                    }
                }
                BPF_EXIT if class == BPF_JMP => {
                    if depth == 0 {
                        return Ok(regs[0]);
                    }
                    depth -= 1;
                    let f = frames[depth];
                    regs[6..11].copy_from_slice(&f[..5]);
                    pc = f[5] as usize;
                }
                op => {
                    let b = if s.opcode & BPF_X != 0 { regs[src] } else { s.imm as u64 };
                    if eval_cond(op, class == BPF_JMP32, regs[dst], b) {
                        pc = (pc as isize + s.off as isize) as usize;
                    }
                }
            },
            BPF_LDX => {
                if s.opcode & 0xe0 != BPF_MEM {
                    return Err(invalid);
                }
                let addr = regs[src].wrapping_add(s.off as i64 as u64);
                let size = s.opcode & 0x18;
                sfi.check(at, addr, size_bytes(size), false, depth)?;
                regs[dst] = unsafe { load(addr, size) };
            }
            BPF_ST => {
                let addr = regs[dst].wrapping_add(s.off as i64 as u64);
                let size = s.opcode & 0x18;
                sfi.check(at, addr, size_bytes(size), true, depth)?;
                unsafe { store(addr, size, s.imm as u64) };
            }
            BPF_STX => {
                let addr = regs[dst].wrapping_add(s.off as i64 as u64);
                let size = s.opcode & 0x18;
                let n = size_bytes(size);
                match s.opcode & 0xe0 {
                    BPF_MEM => {
                        sfi.check(at, addr, n, true, depth)?;
                        unsafe { store(addr, size, regs[src]) };
                    }
                    BPF_ATOMIC if n >= 4 => {
                        sfi.check(at, addr, n, true, depth)?;
                        if addr % n as u64 != 0 {
                            return Err(ExecError::SfiViolation { pc: at, addr, len: n, write: true });
                        }
                        let op = s.imm as i32;
                        let (old, exchanged) = unsafe { atomic(addr, n == 8, op, regs[src], regs[0]) };
                        if op == BPF_CMPXCHG {
                            regs[0] = old;
                        } else if exchanged || op & BPF_FETCH != 0 {
                            regs[src] = old;
                        }
                    }
                    _ => return Err(invalid),
                }
            }
            BPF_LD if s.opcode == LDDW => {
                regs[dst] = s.imm as u64;
                pc += 1;
            }
            _ => return Err(invalid),
        }
    }
}
