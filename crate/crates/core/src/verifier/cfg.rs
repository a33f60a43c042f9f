//! Structural checks: jump targets, call targets, helper ids, immediate
//! operands and reachable fall-through off the end of a function.

use std::collections::{BTreeSet, VecDeque};

use super::{Rejection, Rule, VerifyConfig, MAX_CALL_FRAMES};
use crate::isa::*;

/// Function boundaries of a program with local calls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionLayout {
    /// Sorted entry points; the first is always 0.
    pub entries: Vec<usize>,
    len: usize,
}

impl FunctionLayout {
    pub fn function_of(&self, pc: usize) -> usize {
        match self.entries.binary_search(&pc) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Half-open slot range of function `f`.
    pub fn range(&self, f: usize) -> std::ops::Range<usize> {
        let end = self.entries.get(f + 1).copied().unwrap_or(self.len);
        self.entries[f]..end
    }
}

pub(crate) fn jump_target(pc: usize, offset: i64) -> Option<usize> {
    let target = pc as i64 + offset + 1;
    (target >= 0).then_some(target as usize)
}

/// Successor slots of a non-call instruction (ignores the callee of a local call).
pub(crate) fn successors(program: &Program, pc: usize) -> Vec<usize> {
    let insn = &program.instructions[pc];
    match insn.class() {
        BPF_LD if insn.is_wide_load() => vec![pc + 2],
        BPF_JMP | BPF_JMP32 => match insn.op() {
            BPF_EXIT => vec![],
            BPF_CALL => vec![pc + 1],
            BPF_JA => jump_target(pc, insn.offset as i64).into_iter().collect(),
            _ => {
                let mut v = vec![pc + 1];
                if let Some(t) = jump_target(pc, insn.offset as i64) {
                    if t != pc + 1 {
                        v.push(t);
                    }
                }
                v
            }
        },
        _ => vec![pc + 1],
    }
}

pub(crate) fn check_structure(
    program: &Program,
    config: &VerifyConfig,
) -> Result<FunctionLayout, Vec<Rejection>> {
    let n = program.len();
    if n == 0 {
        return Err(vec![Rejection::new(0, Rule::EmptyProgram, "program has no instructions")]);
    }
    if n > config.max_instructions {
        return Err(vec![Rejection::new(
            0,
            Rule::TooLarge,
            format!("{n} instructions exceed the limit of {}", config.max_instructions),
        )]);
    }
    let mut errors = Vec::new();
    let mut entries = BTreeSet::from([0usize]);
    let valid_slot = |t: usize| t < n && !program.is_wide_tail(t);

    let mut pc = 0;
    while pc < n {
        let insn = program.instructions[pc];
        let step = if insn.is_wide_load() { 2 } else { 1 };
        match insn.class() {
            BPF_LD => {
                if insn.dst == FRAME_REG {
                    errors.push(Rejection::new(pc, Rule::FrameWrite, "lddw into r10"));
                }
                match insn.src {
                    0 => {}
                    PSEUDO_MAP_FD => {
                        if !config.maps.contains_key(&(insn.imm as u32)) {
                            errors.push(Rejection::new(
                                pc,
                                Rule::BadMapRef,
                                format!("map handle {} is not relocated", insn.imm),
                            ));
                        }
                    }
                    PSEUDO_MAP_VALUE => {
                        let off = program.instructions[pc + 1].imm as u32;
                        match config.maps.get(&(insn.imm as u32)) {
                            Some(m) if m.max_entries == 1 && off < m.value_size => {}
                            _ => errors.push(Rejection::new(
                                pc,
                                Rule::BadMapRef,
                                format!("map value reference {}+{off} is invalid", insn.imm),
                            )),
                        }
                    }
                    other => errors.push(Rejection::new(
                        pc,
                        Rule::BadMapRef,
                        format!("unsupported lddw source {other}"),
                    )),
                }
            }
            BPF_LDX => {
                if insn.dst == FRAME_REG {
                    errors.push(Rejection::new(pc, Rule::FrameWrite, "load into r10"));
                }
            }
            BPF_ALU | BPF_ALU64 => {
                if insn.dst == FRAME_REG {
                    errors.push(Rejection::new(pc, Rule::FrameWrite, "arithmetic on r10"));
                }
                if matches!(insn.op(), BPF_DIV | BPF_MOD) && !insn.uses_src_reg() && insn.imm == 0
                {
                    errors.push(Rejection::new(pc, Rule::DivByZero, "division by literal zero"));
                }
            }
            BPF_JMP | BPF_JMP32 => match insn.op() {
                BPF_EXIT => {}
                BPF_CALL if insn.src == PSEUDO_CALL => {
                    match jump_target(pc, insn.imm as i64) {
                        Some(t) if valid_slot(t) => {
                            entries.insert(t);
                        }
                        _ => errors.push(Rejection::new(
                            pc,
                            Rule::BadCall,
                            format!("local call target {:+} is not an instruction", insn.imm),
                        )),
                    }
                }
                BPF_CALL => {
                    if insn.src != 0 || !config.allow_helper_ids.contains(&(insn.imm as u32)) {
                        errors.push(Rejection::new(
                            pc,
                            Rule::UnknownHelper,
                            format!("helper {} is not allowed", insn.imm),
                        ));
                    }
                }
                _ => match jump_target(pc, insn.offset as i64) {
                    Some(t) if t < n && program.is_wide_tail(t) => errors.push(Rejection::new(
                        pc,
                        Rule::JumpIntoWide,
                        format!("jump to {t} lands inside an lddw"),
                    )),
                    Some(t) if t < n => {}
                    _ => errors.push(Rejection::new(
                        pc,
                        Rule::BadJump,
                        format!("jump offset {:+} leaves the program", insn.offset),
                    )),
                },
            },
            _ => {}
        }
        pc += step;
    }
    if !errors.is_empty() {
        return Err(errors);
    }

    let layout = FunctionLayout { entries: entries.into_iter().collect(), len: n };
    check_functions(program, &layout)?;
    Ok(layout)
}

fn check_functions(program: &Program, layout: &FunctionLayout) -> Result<(), Vec<Rejection>> {
    let n = program.len();
    let mut errors = Vec::new();
    let mut callees: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); layout.entries.len()];
    for (f, &entry) in layout.entries.iter().enumerate() {
        let range = layout.range(f);
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([entry]);
        seen[entry] = true;
        while let Some(pc) = queue.pop_front() {
            let insn = program.instructions[pc];
            if insn.class() == BPF_JMP && insn.op() == BPF_CALL && insn.src == PSEUDO_CALL {
                let t = jump_target(pc, insn.imm as i64).expect("checked");
                callees[f].insert(layout.function_of(t));
            }
            for s in successors(program, pc) {
                if !range.contains(&s) {
                    let rule = if s >= n || s == range.end { Rule::NoExit } else { Rule::BadJump };
                    let msg = if rule == Rule::NoExit {
                        "execution falls off the end of the function".to_string()
                    } else {
                        format!("jump to {s} crosses a function boundary")
                    };
                    errors.push(Rejection::new(pc, rule, msg));
                    continue;
                }
                if !seen[s] {
                    seen[s] = true;
                    queue.push_back(s);
                }
            }
        }
    }
    // Recursion and call depth.
    fn depth(
        f: usize,
        callees: &[BTreeSet<usize>],
        stack: &mut Vec<usize>,
        memo: &mut [Option<usize>],
    ) -> Result<usize, ()> {
        if stack.contains(&f) {
            return Err(());
        }
        if let Some(d) = memo[f] {
            return Ok(d);
        }
        stack.push(f);
        let mut best = 1;
        for &c in &callees[f] {
            best = best.max(1 + depth(c, callees, stack, memo)?);
        }
        stack.pop();
        memo[f] = Some(best);
        Ok(best)
    }
    let mut memo = vec![None; layout.entries.len()];
    match depth(0, &callees, &mut Vec::new(), &mut memo) {
        Err(()) => errors.push(Rejection::new(0, Rule::BadCall, "recursive local calls")),
        Ok(d) if d > MAX_CALL_FRAMES => errors.push(Rejection::new(
            0,
            Rule::BadCall,
            format!("call depth {d} exceeds {MAX_CALL_FRAMES}"),
        )),
        Ok(_) => {}
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Registers written by the instruction at `pc` (bitmask) and whether it
/// clobbers the caller-saved argument registers.
fn writes(insn: &Instruction) -> (u16, bool) {
    match insn.class() {
        BPF_LD | BPF_LDX | BPF_ALU | BPF_ALU64 => (1 << insn.dst, false),
        BPF_STX if insn.mode() == BPF_ATOMIC => match insn.imm {
            BPF_CMPXCHG => (1, false),
            imm if imm & BPF_FETCH != 0 => (1 << insn.src, false),
            _ => (0, false),
        },
        BPF_JMP if insn.op() == BPF_CALL => (1, true),
        _ => (0, false),
    }
}

/// Must-initialized registers at each instruction.
pub(crate) fn init_summary(program: &Program, layout: &FunctionLayout) -> Vec<u16> {
    let n = program.len();
    let mut state: Vec<Option<u16>> = vec![None; n];
    let mut queue = VecDeque::new();
    for (f, &entry) in layout.entries.iter().enumerate() {
        let init = if f == 0 { 0b100_0000_0010 } else { 0b100_0011_1110 };
        state[entry] = Some(init);
        queue.push_back(entry);
    }
    while let Some(pc) = queue.pop_front() {
        let input = state[pc].expect("queued with state");
        let insn = program.instructions[pc];
        let (w, clobber) = writes(&insn);
        let mut out = input;
        if clobber {
            out &= !0b11_1110;
        }
        out |= w;
        for s in successors(program, pc) {
            if s >= n {
                continue;
            }
            let merged = match state[s] {
                Some(old) => old & out,
                None => out,
            };
            if state[s] != Some(merged) {
                state[s] = Some(merged);
                queue.push_back(s);
            }
        }
    }
    state.into_iter().map(|s| s.unwrap_or(0)).collect()
}
