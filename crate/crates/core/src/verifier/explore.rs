//! Strict mode: depth-first exploration of every path with state pruning.
//!
//! A state reaching a prune point is discarded when a fully explored state
//! recorded there covers it. States are recorded only once every path
//! below them has finished, tracked with a pending-path count per
//! checkpoint.

use std::collections::HashMap;

use super::cfg::{jump_target, FunctionLayout};
use super::state::{covers, Machine, Mode, State};
use super::{Rejection, Rule, VerifyConfig};
use crate::isa::*;

/// How far up the current path to look for an identical loop state.
const LOOP_LOOKBACK: usize = 256;

/// Explored states kept per prune point. Older ones are dropped; pruning
/// only saves work, so forgetting a state never changes a verdict.
const EXPLORED_PER_POINT: usize = 32;

struct Checkpoint {
    pc: usize,
    state: Option<State>,
    pending: usize,
    parent: Option<usize>,
}

fn prune_points(program: &Program, layout: &FunctionLayout) -> Vec<bool> {
    let mut points = vec![false; program.len() + 1];
    for &e in &layout.entries {
        points[e] = true;
    }
    for (pc, insn) in program.instructions.iter().enumerate() {
        if program.is_wide_tail(pc) || !matches!(insn.class(), BPF_JMP | BPF_JMP32) {
            continue;
        }
        match insn.op() {
            BPF_EXIT => {}
            BPF_CALL => points[pc + 1] = true,
            _ => {
                if let Some(t) = jump_target(pc, insn.offset as i64) {
                    points[t] = true;
                }
                if insn.op() != BPF_JA {
                    points[pc + 1] = true;
                }
            }
        }
    }
    points
}

pub(crate) fn run(
    program: &Program,
    config: &VerifyConfig,
    layout: &FunctionLayout,
) -> Result<(), Rejection> {
    let points = prune_points(program, layout);
    let mut machine = Machine::new(program, config, Mode::Strict);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut explored: HashMap<usize, Vec<State>> = HashMap::new();
    let mut work: Vec<(State, usize, usize, Option<usize>)> = vec![(State::initial(), 0, 0, None)];
    let mut processed = 0usize;

    fn complete(
        checkpoints: &mut [Checkpoint],
        explored: &mut HashMap<usize, Vec<State>>,
        mut ck: Option<usize>,
    ) {
        while let Some(c) = ck {
            let cp = &mut checkpoints[c];
            cp.pending -= 1;
            if cp.pending > 0 {
                return;
            }
            if let Some(st) = cp.state.take() {
                let seen = explored.entry(cp.pc).or_default();
                if seen.len() == EXPLORED_PER_POINT {
                    seen.remove(0);
                }
                seen.push(st);
            }
            ck = cp.parent;
        }
    }

    while let Some((mut st, mut pc, mut len, mut ck)) = work.pop() {
        loop {
            processed += 1;
            if processed > config.complexity_limit {
                return Err(Rejection::new(
                    pc,
                    Rule::TooComplex,
                    format!("more than {} instructions processed", config.complexity_limit),
                ));
            }
            if len > config.max_instructions {
                return Err(Rejection::new(
                    pc,
                    Rule::UnboundedLoop,
                    format!("path exceeds {} instructions", config.max_instructions),
                ));
            }
            if points[pc] {
                if explored.get(&pc).is_some_and(|v| v.iter().any(|old| covers(old, &st))) {
                    complete(&mut checkpoints, &mut explored, ck);
                    break;
                }
                let mut cursor = ck;
                for _ in 0..LOOP_LOOKBACK {
                    let Some(c) = cursor else { break };
                    let cp = &checkpoints[c];
                    if cp.pc == pc && cp.state.as_ref().is_some_and(|old| covers(old, &st)) {
                        return Err(Rejection::new(
                            pc,
                            Rule::UnboundedLoop,
                            "loop state repeats without progress",
                        ));
                    }
                    cursor = cp.parent;
                }
                checkpoints.push(Checkpoint { pc, state: Some(st.clone()), pending: 1, parent: ck });
                ck = Some(checkpoints.len() - 1);
            }
            let succ = machine.step(st, pc)?;
            match (succ.first, succ.second) {
                (None, None) => {
                    complete(&mut checkpoints, &mut explored, ck);
                    break;
                }
                (Some((s, next)), None) | (None, Some((s, next))) => {
                    st = s;
                    pc = next;
                    len += 1;
                }
                (Some((s1, p1)), Some((s2, p2))) => {
                    if let Some(c) = ck {
                        checkpoints[c].pending += 1;
                    }
                    work.push((s2, p2, len + 1, ck));
                    st = s1;
                    pc = p1;
                    len += 1;
                }
            }
        }
    }
    Ok(())
}
