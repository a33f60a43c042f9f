use proptest::prelude::*;

use super::state::{refine, scalar_alu, Scalar};
use crate::isa::*;

const ALU_OPS: [u8; 13] = [
    BPF_ADD, BPF_SUB, BPF_MUL, BPF_DIV, BPF_OR, BPF_AND, BPF_LSH, BPF_RSH, BPF_NEG, BPF_MOD,
    BPF_XOR, BPF_MOV, BPF_ARSH,
];
const JMP_OPS: [u8; 11] = [
    BPF_JEQ, BPF_JGT, BPF_JGE, BPF_JSET, BPF_JNE, BPF_JSGT, BPF_JSGE, BPF_JLT, BPF_JLE, BPF_JSLT,
    BPF_JSLE,
];

fn contains(s: &Scalar, v: u64) -> bool {
    s.umin <= v && v <= s.umax && s.smin <= v as i64 && v as i64 <= s.smax
}

/// A range around a concrete value, sometimes exact, sometimes wide.
fn around(v: u64, below: u64, above: u64) -> Scalar {
    Scalar::urange(v.saturating_sub(below), v.saturating_add(above))
}

fn interesting() -> impl Strategy<Value = u64> {
    prop_oneof![
        any::<u64>(),
        0u64..64,
        (0u64..1 << 32),
        Just(u64::MAX),
        Just(i64::MIN as u64),
        Just(i64::MAX as u64),
        Just(u32::MAX as u64),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4000))]

    #[test]
    fn abstract_alu_contains_concrete(
        op in prop::sample::select(&ALU_OPS[..]),
        alu64 in any::<bool>(),
        a in interesting(), b in interesting(),
        da in 0u64..300, ua in 0u64..300, db in 0u64..40, ub in 0u64..40,
    ) {
        let sa = around(a, da, ua);
        let sb = around(b, db, ub);
        let got = scalar_alu(op, alu64, sa, sb);
        let want = eval_alu(op, alu64, a, b);
        prop_assert!(contains(&got, want), "{op:#x} {alu64} {a} {b}: {got:?} misses {want}");
    }

    #[test]
    fn branch_refinement_keeps_concrete_pair(
        op in prop::sample::select(&JMP_OPS[..]),
        jmp32 in any::<bool>(),
        a in interesting(), b in interesting(),
        da in 0u64..300, ua in 0u64..300,
    ) {
        let (a, b) = if jmp32 { (a & 0xffff_ffff, b & 0xffff_ffff) } else { (a, b) };
        let sa = around(a, da, ua);
        let sb = Scalar::konst(b);
        let taken = eval_cond(op, jmp32, a, b);
        let refined = refine(op, jmp32, sa, sb, taken);
        prop_assert!(refined.is_some(), "feasible outcome pruned");
        let (ra, rb) = refined.unwrap();
        prop_assert!(contains(&ra, a) && contains(&rb, b));
    }

    #[test]
    fn intersect_and_hull_are_consistent(a in interesting(), b in interesting(), d in 0u64..1000) {
        let x = around(a, d, d);
        let y = around(b, d, d);
        let h = x.hull(y);
        prop_assert!(contains(&h, a) && contains(&h, b));
        if let Some(i) = x.intersect(y) {
            prop_assert!(x.contains(&i) || contains(&x, i.umin));
        }
        prop_assert!(x.intersect(x) == Some(x));
    }
}

#[test]
fn known_ranges() {
    let byte = Scalar::bits(8);
    assert_eq!(byte.umax, 255);
    let shifted = scalar_alu(BPF_LSH, true, byte, Scalar::konst(4));
    assert_eq!((shifted.umin, shifted.umax), (0, 255 << 4));
    let masked = scalar_alu(BPF_AND, true, Scalar::UNKNOWN, Scalar::konst(0x3f));
    assert_eq!(masked.umax, 0x3f);
    let m = scalar_alu(BPF_MOD, true, Scalar::UNKNOWN, Scalar::konst(11));
    assert_eq!(m.umax, 10);
    let w = scalar_alu(BPF_ADD, false, Scalar::konst(u32::MAX as u64), Scalar::konst(1));
    assert_eq!(w.value(), Some(0));
}

#[test]
fn impossible_branches_are_pruned() {
    let small = Scalar::urange(0, 10);
    assert!(refine(BPF_JGT, false, small, Scalar::konst(10), true).is_none());
    assert!(refine(BPF_JGT, false, small, Scalar::konst(9), true).is_some());
    let (a, _) = refine(BPF_JLT, false, Scalar::UNKNOWN, Scalar::konst(16), true).unwrap();
    assert_eq!((a.umin, a.umax), (0, 15));
    let (a, _) = refine(BPF_JSGT, false, Scalar::UNKNOWN, Scalar::konst(-1i64 as u64), true).unwrap();
    assert_eq!(a.smin, 0);
}
