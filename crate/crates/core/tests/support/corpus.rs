//! Hand-built verifier corpus: programs each rejected for one rule, and
//! valid programs exercising the same features correctly.

use uebpf::isa::asm::*;
use uebpf::isa::*;
use uebpf::maps::MapType;
use uebpf::verifier::{ContextLayout, MapInfo, Rule, Strictness, VerifyConfig};

pub const HASH: u32 = 3;
pub const ARRAY: u32 = 4;
pub const RODATA: u32 = 5;
pub const RINGBUF: u32 = 6;
pub const SINGLE: u32 = 7;

pub struct Case {
    pub name: &'static str,
    pub program: Program,
    pub config: VerifyConfig,
    pub expect: Option<Rule>,
}

fn info(map_type: MapType, key_size: u32, value_size: u32, max_entries: u32, read_only: bool) -> MapInfo {
    MapInfo { map_type, key_size, value_size, max_entries, read_only }
}

/// Strict config with one map of each kind.
pub fn config() -> VerifyConfig {
    VerifyConfig::default()
        .with_map(HASH, info(MapType::Hash, 8, 16, 64, false))
        .with_map(ARRAY, info(MapType::Array, 4, 8, 16, false))
        .with_map(RODATA, info(MapType::Array, 4, 32, 1, true))
        .with_map(RINGBUF, info(MapType::RingBuf, 0, 0, 4096, false))
        .with_map(SINGLE, info(MapType::Array, 4, 64, 1, false))
}

fn prog(name: &str, parts: &[&[Instruction]]) -> Program {
    program(name, parts)
}

/// r0 = lookup(ARRAY, &key 0) with the key at fp-4.
fn array_lookup() -> Vec<Instruction> {
    let mut v = vec![st(BPF_W, 10, -4, 0), mov64_reg(2, 10), alu64_imm(BPF_ADD, 2, -4)];
    v.extend(ld_map(1, ARRAY));
    v.push(call(1));
    v
}

fn ringbuf_reserve(size: i32) -> Vec<Instruction> {
    let mut v = ld_map(1, RINGBUF).to_vec();
    v.extend([mov64_imm(2, size), mov64_imm(3, 0), call(131)]);
    v
}

fn case(name: &'static str, program: Program, expect: Rule) -> Case {
    Case { name, program, config: config(), expect: Some(expect) }
}

/// At least one program per rejection rule.
pub fn invalid() -> Vec<Case> {
    let ret0: &[Instruction] = &[mov64_imm(0, 0), exit()];
    let mut v = vec![
        case("empty", Program::new("empty", vec![]), Rule::EmptyProgram),
        Case {
            name: "too-large",
            program: prog("big", &[&[mov64_imm(0, 0); 20], &[exit()]]),
            config: VerifyConfig { max_instructions: 16, ..config() },
            expect: Some(Rule::TooLarge),
        },
        case("jump-past-end", prog("j", &[&[mov64_imm(0, 0), jmp_imm(BPF_JEQ, 0, 0, 5), exit()]]), Rule::BadJump),
        case("jump-before-start", prog("j", &[&[mov64_imm(0, 0), ja(-3), exit()]]), Rule::BadJump),
        case(
            "jump-into-lddw",
            prog("j", &[&[mov64_imm(0, 0), jmp_imm(BPF_JEQ, 0, 0, 1)], &lddw(1, 7), &[exit()]]),
            Rule::JumpIntoWide,
        ),
        case("no-exit", prog("n", &[&[mov64_imm(0, 1)]]), Rule::NoExit),
        case("branch-falls-off", prog("n", &[&[mov64_imm(0, 1), jmp_imm(BPF_JEQ, 1, 0, 1), exit(), mov64_imm(0, 2)]]), Rule::NoExit),
        case("uninit-r0", prog("u", &[&[exit()]]), Rule::UninitRead),
        case("uninit-r2", prog("u", &[&[mov64_reg(0, 2), exit()]]), Rule::UninitRead),
        case("uninit-stack", prog("u", &[&[ldx(BPF_DW, 0, 10, -8), exit()]]), Rule::UninitRead),
        case("write-r10", prog("f", &[&[mov64_imm(10, 0)], ret0]), Rule::FrameWrite),
        case("add-r10", prog("f", &[&[alu64_imm(BPF_ADD, 10, -8)], ret0]), Rule::FrameWrite),
        case("stack-below", prog("s", &[&[st(BPF_DW, 10, -520, 1), ldx(BPF_DW, 0, 10, -520), exit()]]), Rule::StackOob),
        case("stack-above", prog("s", &[&[st(BPF_W, 10, 0, 1)], ret0]), Rule::StackOob),
        case("unknown-helper", prog("h", &[&[call(999)], ret0]), Rule::UnknownHelper),
        case("call-out-of-range", prog("c", &[&[call_local(10)], ret0]), Rule::BadCall),
        case(
            "recursion",
            prog("c", &[&[call_local(2), mov64_imm(0, 0), exit(), call_local(-1), mov64_imm(0, 0), exit()]]),
            Rule::BadCall,
        ),
        case("div-zero", prog("d", &[&[mov64_imm(0, 5), alu64_imm(BPF_DIV, 0, 0), exit()]]), Rule::DivByZero),
        case("mod-zero", prog("d", &[&[mov64_imm(0, 5), alu32_imm(BPF_MOD, 0, 0), exit()]]), Rule::DivByZero),
        case("unrelocated-map", prog("m", &[&ld_map(1, 42), ret0]), Rule::BadMapRef),
        case("map-value-of-hash", prog("m", &[&ld_map_value(1, HASH, 0), ret0]), Rule::BadMapRef),
        case("ctx-past-end", prog("x", &[&[ldx(BPF_DW, 0, 1, 168), exit()]]), Rule::CtxOob),
        case("ctx-negative", prog("x", &[&[ldx(BPF_W, 0, 1, -4), exit()]]), Rule::CtxOob),
        case("ctx-write-readonly", prog("x", &[&[st(BPF_DW, 1, 0, 0)], ret0]), Rule::CtxWrite),
        case(
            "map-value-past-end",
            prog("v", &[&array_lookup(), &[jmp_imm(BPF_JEQ, 0, 0, 1), ldx(BPF_DW, 0, 0, 8), mov64_imm(0, 0), exit()]]),
            Rule::MapValueOob,
        ),
        case(
            "ringbuf-record-past-end",
            prog(
                "r",
                &[
                    &ringbuf_reserve(16),
                    &[
                        jmp_imm(BPF_JEQ, 0, 0, 4),
                        st(BPF_DW, 0, 16, 1),
                        mov64_reg(1, 0),
                        mov64_imm(2, 0),
                        call(132),
                        mov64_imm(0, 0),
                        exit(),
                    ],
                ],
            ),
            Rule::MemOob,
        ),
        case("scalar-deref", prog("p", &[&[mov64_imm(2, 4096), ldx(BPF_DW, 0, 2, 0), exit()]]), Rule::InvalidMemAccess),
        case("map-ref-deref", prog("p", &[&ld_map(1, ARRAY), &[ldx(BPF_DW, 0, 1, 0), exit()]]), Rule::InvalidMemAccess),
        case("unchecked-lookup", prog("n", &[&array_lookup(), &[ldx(BPF_DW, 0, 0, 0), exit()]]), Rule::NullDeref),
        case("ptr-mul", prog("a", &[&[mov64_reg(2, 10), alu64_imm(BPF_MUL, 2, 2)], ret0]), Rule::PtrArith),
        case("ptr-trunc", prog("a", &[&[mov64_reg(2, 1), alu32_imm(BPF_ADD, 2, 1)], ret0]), Rule::PtrArith),
        case(
            "null-ptr-arith",
            prog("a", &[&array_lookup(), &[alu64_imm(BPF_ADD, 0, 8), mov64_imm(0, 0), exit()]]),
            Rule::PtrArith,
        ),
        case(
            "lookup-scalar-map",
            prog("h", &[&[mov64_imm(1, 3), mov64_reg(2, 10), alu64_imm(BPF_ADD, 2, -8), st(BPF_DW, 10, -8, 0), call(1)], ret0]),
            Rule::BadHelperArg,
        ),
        case(
            "reserve-variable-size",
            prog("h", &[&[ldx(BPF_DW, 2, 1, 0)], &ld_map(1, RINGBUF), &[mov64_imm(3, 0), call(131)], ret0]),
            Rule::BadHelperArg,
        ),
        case(
            "leaked-reservation",
            prog("l", &[&ringbuf_reserve(8), ret0]),
            Rule::UnreleasedRef,
        ),
        case("rodata-write", prog("w", &[&ld_map_value(1, RODATA, 0), &[st(BPF_DW, 1, 0, 1)], ret0]), Rule::ReadOnlyWrite),
        case(
            "rodata-update",
            prog(
                "w",
                &[
                    &[st(BPF_W, 10, -4, 0), st(BPF_DW, 10, -16, 0), mov64_reg(2, 10), alu64_imm(BPF_ADD, 2, -4)],
                    &[mov64_reg(3, 10), alu64_imm(BPF_ADD, 3, -16), mov64_imm(4, 0)],
                    &ld_map(1, RODATA),
                    &[call(2)],
                    ret0,
                ],
            ),
            Rule::ReadOnlyWrite,
        ),
        case(
            "misaligned-atomic",
            prog("a", &[&[st(BPF_DW, 10, -16, 0), mov64_imm(1, 1), atomic(BPF_DW, BPF_ADD as i32, 10, -12, 1)], ret0]),
            Rule::Misaligned,
        ),
        case("self-loop", prog("l", &[&[mov64_imm(0, 0), ja(-1), exit()]]), Rule::UnboundedLoop),
        case(
            "input-bounded-loop",
            prog("l", &[&[ldx(BPF_DW, 2, 1, 0), mov64_imm(0, 0), alu64_imm(BPF_ADD, 0, 1), jmp_reg(BPF_JLT, 0, 2, -2), exit()]]),
            Rule::UnboundedLoop,
        ),
    ];
    // Each branch leaves a different constant in r3, so no two paths merge.
    let mut deep = vec![mov64_imm(3, 0)];
    for i in 0..40 {
        deep.extend([ldx(BPF_DW, 2, 1, (i % 20) * 8), jmp_imm(BPF_JGT, 2, 100, 1), alu64_imm(BPF_ADD, 3, 1 << (i % 30))]);
    }
    deep.extend([mov64_imm(0, 0), exit()]);
    v.push(Case {
        name: "too-complex",
        program: Program::new("branches", deep),
        config: VerifyConfig { complexity_limit: 2000, ..config() },
        expect: Some(Rule::TooComplex),
    });
    v
}

/// Programs that pass strict verification.
pub fn valid() -> Vec<Case> {
    let ok = |name: &'static str, program: Program| Case { name, program, config: config(), expect: None };
    let mut sys_enter = config();
    sys_enter.context = ContextLayout { size: 80, writable: 64..80 };
    let mut v = vec![
        ok("ret", prog("r", &[&[mov64_imm(0, 1), exit()]])),
        ok("ctx-read", prog("c", &[&[ldx(BPF_DW, 0, 1, 112), exit()]])),
        ok("stack", prog("s", &[&[st(BPF_DW, 10, -512, 3), ldx(BPF_DW, 0, 10, -512), exit()]])),
        ok(
            "checked-lookup",
            prog("l", &[&array_lookup(), &[jmp_imm(BPF_JEQ, 0, 0, 2), ldx(BPF_DW, 0, 0, 0), exit(), mov64_imm(0, 0), exit()]]),
        ),
        ok(
            "atomic-count",
            prog(
                "a",
                &[&array_lookup(), &[jmp_imm(BPF_JEQ, 0, 0, 2), mov64_imm(1, 1), atomic(BPF_DW, BPF_ADD as i32, 0, 0, 1), mov64_imm(0, 0), exit()]],
            ),
        ),
        ok(
            "ringbuf-submit",
            prog(
                "r",
                &[
                    &ringbuf_reserve(16),
                    &[jmp_imm(BPF_JEQ, 0, 0, 4), st(BPF_DW, 0, 8, 1), mov64_reg(1, 0), mov64_imm(2, 0), call(132)],
                    &[mov64_imm(0, 0), exit()],
                ],
            ),
        ),
        ok("rodata-read", prog("w", &[&ld_map_value(1, RODATA, 8), &[ldx(BPF_DW, 0, 1, 0), exit()]])),
        ok("single-value-write", prog("w", &[&ld_map_value(1, SINGLE, 0), &[st(BPF_DW, 1, 56, 1), mov64_imm(0, 0), exit()]])),
        ok("div-reg", prog("d", &[&[ldx(BPF_DW, 2, 1, 0), mov64_imm(0, 100), alu64_reg(BPF_DIV, 0, 2), exit()]])),
        ok(
            "counted-loop",
            prog("l", &[&[mov64_imm(0, 0), mov64_imm(2, 10), alu64_imm(BPF_ADD, 0, 3), alu64_imm(BPF_SUB, 2, 1), jmp_imm(BPF_JNE, 2, 0, -3), exit()]]),
        ),
        ok(
            "local-call",
            prog("c", &[&[mov64_imm(1, 5), call_local(1), exit(), mov64_reg(0, 1), alu64_imm(BPF_ADD, 0, 1), exit()]]),
        ),
        ok("pid", prog("p", &[&[call(14), alu64_imm(BPF_RSH, 0, 32), exit()]])),
    ];
    v.push(Case {
        name: "sys-enter-override",
        program: prog("o", &[&[st(BPF_DW, 1, 64, -1), st(BPF_DW, 1, 72, 1), mov64_imm(0, 0), exit()]]),
        config: sys_enter,
        expect: None,
    });
    v
}

/// Permissive-mode config for the same maps.
pub fn permissive() -> VerifyConfig {
    config().with_strictness(Strictness::PermissiveSfi)
}
