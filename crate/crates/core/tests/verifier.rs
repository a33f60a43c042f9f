mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;

use support::corpus::{self, Case};
use uebpf::isa::{self, Instruction, Program};
use uebpf::verifier::{verify, Rule, Strictness};

fn check_invalid(c: &Case) -> Result<(), String> {
    let want = c.expect.unwrap();
    let r = verify(&c.program, &c.config);
    match r.first_rule() {
        Some(got) if got == want => Ok(()),
        _ => Err(format!("{}: want {}, got {r}", c.name, want.id())),
    }
}

#[test]
fn every_invalid_case_rejects_with_its_rule() {
    let failures: Vec<String> = corpus::invalid().iter().filter_map(|c| check_invalid(c).err()).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn invalid_corpus_covers_every_rule() {
    let seen: BTreeSet<Rule> = corpus::invalid().iter().filter_map(|c| c.expect).collect();
    let missing: Vec<&str> = Rule::ALL.iter().filter(|r| !seen.contains(r)).map(|r| r.id()).collect();
    assert!(missing.is_empty(), "no case for {missing:?}");
}

#[test]
fn valid_corpus_accepts_in_strict_mode() {
    for c in corpus::valid() {
        let r = verify(&c.program, &c.config);
        assert!(r.accepted(), "{}: {r}", c.name);
        assert_eq!(r.proven_in, Strictness::Strict, "{}", c.name);
        assert!(!r.requires_sfi());
    }
}

#[test]
fn structural_rejections_hold_in_permissive_mode() {
    // Permissive mode relaxes memory proofs, not the program shape.
    let structural = [
        Rule::EmptyProgram,
        Rule::BadJump,
        Rule::JumpIntoWide,
        Rule::NoExit,
        Rule::FrameWrite,
        Rule::UnknownHelper,
        Rule::BadCall,
        Rule::DivByZero,
        Rule::BadMapRef,
    ];
    for c in corpus::invalid() {
        if !structural.contains(&c.expect.unwrap()) {
            continue;
        }
        let cfg = c.config.clone().with_strictness(Strictness::PermissiveSfi);
        assert!(!verify(&c.program, &cfg).accepted(), "{}", c.name);
    }
}

#[test]
fn rejections_name_the_offending_instruction() {
    for c in corpus::invalid() {
        let r = verify(&c.program, &c.config);
        for rej in &r.rejections {
            assert!(rej.index <= c.program.instructions.len(), "{}: {rej}", c.name);
            assert!(!rej.message.is_empty());
        }
    }
}

fn seeds() -> Vec<Program> {
    corpus::valid().into_iter().chain(corpus::invalid()).map(|c| c.program).filter(|p| !p.instructions.is_empty()).collect()
}

/// One random field change in one slot, kept only if it still decodes.
fn mutate(p: &Program, slot: usize, field: u8, value: i32) -> Option<Program> {
    let mut insns: Vec<Instruction> = p.instructions.clone();
    let i = slot % insns.len();
    let ins = &mut insns[i];
    match field % 5 {
        0 => ins.opcode = value as u8,
        1 => ins.dst = (value as u8) % 11,
        2 => ins.src = (value as u8) % 11,
        3 => ins.offset = value as i16,
        _ => ins.imm = value,
    }
    isa::decode(&p.name, &isa::encode(&Program::new(p.name.clone(), insns))).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn verdicts_are_deterministic(seed in 0usize..64, slot in 0usize..64, field in 0u8..5, value in any::<i32>()) {
        let seeds = seeds();
        let Some(p) = mutate(&seeds[seed % seeds.len()], slot, field, value) else { return Ok(()) };
        for strictness in [Strictness::Strict, Strictness::PermissiveSfi] {
            let cfg = corpus::config().with_strictness(strictness);
            prop_assert_eq!(verify(&p, &cfg), verify(&p, &cfg));
        }
    }

    #[test]
    fn strict_acceptance_implies_permissive_acceptance(seed in 0usize..64, slot in 0usize..64, field in 0u8..5, value in any::<i32>()) {
        let seeds = seeds();
        let Some(p) = mutate(&seeds[seed % seeds.len()], slot, field, value) else { return Ok(()) };
        let strict = verify(&p, &corpus::config());
        if strict.accepted() {
            let permissive = verify(&p, &corpus::permissive());
            prop_assert!(permissive.accepted(), "{}", permissive);
            prop_assert_eq!(permissive.proven_in, Strictness::Strict);
        }
    }
}

