//! Permissive mode: a joined forward dataflow keyed by call stack and
//! instruction. Loops converge through widening; memory accesses whose
//! bounds stay imprecise are left to the engine's runtime checks.

use std::collections::{BTreeSet, HashMap};

use super::state::{Machine, Mode, State};
use super::{Rejection, Rule, VerifyConfig};
use crate::isa::Program;

/// Joins at one point before bounds start widening.
const WIDEN_AFTER: u32 = 4;

type Key = (Vec<usize>, usize);

pub(crate) fn run(
    program: &Program,
    config: &VerifyConfig,
) -> Result<(), Rejection> {
    let mut machine = Machine::new(program, config, Mode::Flow);
    let mut states: HashMap<Key, (State, u32)> = HashMap::new();
    // Ordered by pc so straight-line code settles before loop heads revisit.
    let mut queue: BTreeSet<(usize, Vec<usize>)> = BTreeSet::new();
    states.insert((Vec::new(), 0), (State::initial(), 0));
    queue.insert((0, Vec::new()));
    let mut processed = 0usize;

    while let Some((pc, stack)) = queue.pop_first() {
        processed += 1;
        if processed > config.complexity_limit {
            return Err(Rejection::new(
                pc,
                Rule::TooComplex,
                format!("more than {} instructions processed", config.complexity_limit),
            ));
        }
        let st = states[&(stack, pc)].0.clone();
        let succ = machine.step(st, pc)?;
        for (next_state, next_pc) in [succ.first, succ.second].into_iter().flatten() {
            let key = (next_state.call_stack(), next_pc);
            let changed = match states.get_mut(&key) {
                None => {
                    states.insert(key.clone(), (next_state, 0));
                    true
                }
                Some((old, visits)) => {
                    let mut joined = machine.join(old, &next_state);
                    if *visits >= WIDEN_AFTER {
                        machine.widen(old, &mut joined);
                    }
                    if joined != *old {
                        *old = joined;
                        *visits += 1;
                        true
                    } else {
                        false
                    }
                }
            };
            if changed {
                queue.insert((key.1, key.0));
            }
        }
    }
    Ok(())
}
