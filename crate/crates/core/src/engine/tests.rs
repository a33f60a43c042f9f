use std::sync::Arc;

use super::*;
use crate::helpers;
use crate::isa::asm::*;
use crate::isa::*;
use crate::maps::{Map, MapDescriptor, MapTable};
use crate::verifier::Strictness;

fn build(parts: &[&[Instruction]]) -> Executable {
    build_in(parts, &MapTable::new(), Strictness::Strict)
}

fn build_in(parts: &[&[Instruction]], maps: &MapTable, mode: Strictness) -> Executable {
    let cfg = VerifyConfig::default().with_strictness(mode);
    Executable::new(program("t", parts), maps, &cfg).unwrap()
}

fn run0(exe: &Executable) -> Result<u64, ExecError> {
    let reg = HelperRegistry::new();
    execute(exe, &mut ExecutionContext::new(), &reg)
}

#[test]
fn minimal_program() {
    let exe = build(&[&[mov64_imm(0, 1), exit()]]);
    assert_eq!(run0(&exe).unwrap(), 1);
}

#[test]
fn division_by_zero_register() {
    // r0 = 7 / r1 (r1 = 0) -> 0; r2 = 7 % r1 -> 7.
    let exe = build(&[&[
        mov64_imm(1, 0),
        mov64_imm(0, 7),
        alu64_reg(BPF_DIV, 0, 1),
        mov64_imm(2, 7),
        alu64_reg(BPF_MOD, 2, 1),
        alu64_imm(BPF_LSH, 2, 8),
        alu64_reg(BPF_OR, 0, 2),
        exit(),
    ]]);
    assert_eq!(run0(&exe).unwrap(), 7 << 8);
}

#[test]
fn alu32_zero_extends() {
    let exe = build(&[&lddw(0, u64::MAX), &[alu32_imm(BPF_ADD, 0, 1), exit()]]);
    assert_eq!(run0(&exe).unwrap(), 0);
    let exe = build(&[&lddw(0, 0xffff_ffff_0000_0005), &[mov32_imm(1, -1), alu32_reg(BPF_MOV, 0, 0), exit()]]);
    assert_eq!(run0(&exe).unwrap(), 5);
}

#[test]
fn stack_and_atomics() {
    let exe = build(&[&[
        st(BPF_DW, 10, -8, 40),
        mov64_imm(1, 2),
        atomic(BPF_DW, BPF_ADD as i32, 10, -8, 1),
        mov64_imm(1, 100),
        atomic(BPF_DW, BPF_XCHG, 10, -8, 1),
        // r1 = 42 (old), slot = 100
        ldx(BPF_DW, 0, 10, -8),
        alu64_reg(BPF_ADD, 0, 1),
        exit(),
    ]]);
    assert_eq!(run0(&exe).unwrap(), 142);
}

#[test]
fn cmpxchg_semantics() {
    let exe = build(&[&[
        st(BPF_W, 10, -4, 5),
        mov64_imm(0, 5),
        mov64_imm(1, 9),
        atomic(BPF_W, BPF_CMPXCHG, 10, -4, 1),
        // r0 = 5 (old), slot = 9
        ldx(BPF_W, 2, 10, -4),
        alu64_imm(BPF_LSH, 2, 8),
        alu64_reg(BPF_OR, 0, 2),
        exit(),
    ]]);
    assert_eq!(run0(&exe).unwrap(), 5 | (9 << 8));
}

#[test]
fn local_calls_preserve_callee_saved() {
    // main: r6 = 10; call f; r0 += r6; exit.  f: r6 = 99; r0 = r1 * 3; exit.
    let exe = build(&[&[
        mov64_imm(6, 10),
        mov64_imm(1, 4),
        call_local(2),
        alu64_reg(BPF_ADD, 0, 6),
        exit(),
        mov64_imm(6, 99),
        mov64_reg(0, 1),
        alu64_imm(BPF_MUL, 0, 3),
        exit(),
    ]]);
    assert_eq!(run0(&exe).unwrap(), 22);
}

#[test]
fn byte_swaps() {
    let exe = build(&[&lddw(0, 0x1122_3344_5566_7788), &[Instruction::new(BPF_ALU | BPF_END | BPF_X, 0, 0, 0, 32), exit()]]);
    assert_eq!(run0(&exe).unwrap(), 0x8877_6655);
}

#[test]
fn helper_dispatch_and_ffi() {
    let mut reg = HelperRegistry::new();
    reg.register_helper(helpers::KTIME_GET_NS, Arc::new(|_, _, _, _, _| helpers::monotonic_ns())).unwrap();
    assert!(matches!(
        reg.register_helper(helpers::KTIME_GET_NS, Arc::new(|_, _, _, _, _| 0)),
        Err(EngineError::DuplicateHelperId(5))
    ));
    let add = reg.register_ffi("host_add", Arc::new(|a, b, _, _, _| a.wrapping_add(b))).unwrap();
    assert!(add >= helpers::FFI_BASE_ID);
    assert!(matches!(reg.register_ffi("host_add", Arc::new(|_, _, _, _, _| 0)), Err(EngineError::DuplicateName(_))));

    let cfg = VerifyConfig::default().allow_helper(add);
    let prog = program("ffi", &[&[mov64_imm(1, 40), mov64_imm(2, 2), call(add as i32), exit()]]);
    let exe = Executable::new(prog, &MapTable::new(), &cfg).unwrap();
    assert_eq!(execute(&exe, &mut ExecutionContext::new(), &reg).unwrap(), 42);

    let prog = program("clock", &[&[call(5), mov64_reg(6, 0), call(5), alu64_reg(BPF_SUB, 0, 6), exit()]]);
    let exe = Executable::new(prog, &MapTable::new(), &VerifyConfig::default()).unwrap();
    for _ in 0..100 {
        let d = execute(&exe, &mut ExecutionContext::new(), &reg).unwrap() as i64;
        assert!(d >= 0);
    }
}

#[test]
fn unregistered_helper_is_reported() {
    let exe = build(&[&[call(helpers::KTIME_GET_NS as i32), exit()]]);
    assert_eq!(run0(&exe), Err(ExecError::UnregisteredHelper { pc: 0, id: 5 }));
}

#[test]
fn thousand_ffi_functions_route_correctly() {
    use rand::{Rng, SeedableRng};
    let mut reg = HelperRegistry::new();
    let mut ids = Vec::new();
    for i in 0..1000u64 {
        let id = reg.register_ffi(&format!("f{i}"), Arc::new(move |a, _, _, _, _| a * 1000 + i)).unwrap();
        ids.push(id);
    }
    let mut cfg = VerifyConfig::default();
    cfg.allow_helper_ids.extend(ids.iter().copied());
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for _ in 0..2000 {
        let i = rng.gen_range(0..1000usize);
        assert_eq!(reg.ffi_id(&format!("f{i}")), Some(ids[i]));
        let prog = program("d", &[&[mov64_imm(1, 3), call(ids[i] as i32), exit()]]);
        let exe = Executable::new(prog, &MapTable::new(), &cfg).unwrap();
        assert_eq!(execute(&exe, &mut ExecutionContext::new(), &reg).unwrap(), 3000 + i as u64);
    }
}

#[test]
fn sfi_stack_store_allowed_and_wild_load_rejected() {
    let exe = build(&[&[st(BPF_DW, 10, -8, 3), ldx(BPF_DW, 0, 10, -8), exit()]]);
    let mut ctx = ExecutionContext::new();
    ctx.set_sfi_mode(true);
    assert_eq!(execute(&exe, &mut ctx, &HelperRegistry::new()).unwrap(), 3);

    // Only permissive mode accepts a load through a constant address.
    let exe = build_in(
        &[&[mov64_imm(0, 0), mov64_imm(1, 0x1000), ldx(BPF_DW, 0, 1, 0), exit()]],
        &MapTable::new(),
        Strictness::PermissiveSfi,
    );
    assert!(exe.requires_sfi());
    assert_eq!(
        run0(&exe),
        Err(ExecError::SfiViolation { pc: 2, addr: 0x1000, len: 8, write: false })
    );
}

#[test]
fn registered_regions_and_context() {
    let exe = build_in(
        &[&[ldx(BPF_DW, 2, 1, 8), ldx(BPF_DW, 0, 2, 0), stx(BPF_DW, 2, 8, 0), exit()]],
        &MapTable::new(),
        Strictness::PermissiveSfi,
    );
    let mut buf = [0u64; 2];
    buf[0] = 77;
    let mut regs = [0u8; 168];
    regs[8..16].copy_from_slice(&(buf.as_mut_ptr() as u64).to_le_bytes());
    let mut ctx = ExecutionContext::new().with_context(regs.as_mut_ptr(), regs.len(), 0..0);
    let reg = HelperRegistry::new();
    // Without the buffer registered the load is out of bounds.
    assert!(matches!(execute(&exe, &mut ctx, &reg), Err(ExecError::SfiViolation { pc: 1, .. })));
    ctx.add_region(MemoryRegion::new(buf.as_ptr() as u64, 16, Access::Read));
    assert!(matches!(execute(&exe, &mut ctx, &reg), Err(ExecError::SfiViolation { pc: 2, write: true, .. })));
    ctx.clear_regions();
    ctx.set_context(regs.as_mut_ptr(), regs.len(), 0..0);
    ctx.add_region(MemoryRegion::new(buf.as_ptr() as u64, 16, Access::ReadWrite));
    assert_eq!(execute(&exe, &mut ctx, &reg).unwrap(), 77);
    assert_eq!(buf[1], 77);
}

#[test]
fn budget_stops_unbounded_loops() {
    let exe = build_in(
        &[&[mov64_imm(0, 0), ldx(BPF_DW, 2, 1, 0), jmp_imm(BPF_JEQ, 2, 0, 1), ja(-3), exit()]],
        &MapTable::new(),
        Strictness::PermissiveSfi,
    );
    let mut regs = [0u8; 168];
    regs[0] = 1;
    let mut ctx = ExecutionContext::new().with_context(regs.as_mut_ptr(), 168, 0..0);
    ctx.set_budget(10_000);
    assert_eq!(
        execute(&exe, &mut ctx, &HelperRegistry::new()),
        Err(ExecError::BudgetExhausted { budget: 10_000 })
    );
}

fn seg(tag: &str) -> String {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static N: AtomicUsize = AtomicUsize::new(0);
    format!("uebpf_eng_{}_{}_{}", std::process::id(), tag, N.fetch_add(1, Ordering::Relaxed))
}

#[test]
fn map_helpers_count_through_lookup_pointer() {
    let maps = MapTable::new();
    maps.insert(3, Arc::new(Map::create(&MapDescriptor::hash(4, 8, 16, "counts"), &seg("c")).unwrap()));
    let reg = helpers::standard_registry(maps.clone(), TraceSink::stderr());
    // key = 9 on the stack; if lookup hits, *v += 1 else update(key, 1).
    let exe = build_in(
        &[
            &[st(BPF_W, 10, -4, 9), mov64_reg(2, 10), alu64_imm(BPF_ADD, 2, -4)],
            &ld_map(1, 3),
            &[
                call(1),
                jmp_imm(BPF_JEQ, 0, 0, 4),
                mov64_imm(1, 1),
                atomic(BPF_DW, BPF_ADD as i32, 0, 0, 1),
                mov64_imm(0, 0),
                exit(),
                st(BPF_DW, 10, -16, 1),
                mov64_reg(2, 10),
                alu64_imm(BPF_ADD, 2, -4),
                mov64_reg(3, 10),
                alu64_imm(BPF_ADD, 3, -16),
                mov64_imm(4, 1),
            ],
            &ld_map(1, 3),
            &[call(2), exit()],
        ],
        &maps,
        Strictness::Strict,
    );
    for _ in 0..5 {
        assert_eq!(execute(&exe, &mut ExecutionContext::new(), &reg).unwrap(), 0);
    }
    let m = maps.get(3).unwrap();
    assert_eq!(m.lookup(&9u32.to_le_bytes()).unwrap(), Some(5u64.to_le_bytes().to_vec()));
}

#[test]
fn trace_printk_reaches_sink() {
    let (sink, lines) = TraceSink::capture();
    let reg = helpers::standard_registry(MapTable::new(), sink);
    let fmt = b"v=%d x=%llx\n\0";
    let mut parts: Vec<Instruction> = Vec::new();
    for (i, chunk) in fmt.chunks(8).enumerate() {
        let mut w = [0u8; 8];
        w[..chunk.len()].copy_from_slice(chunk);
        parts.extend(lddw(1, u64::from_le_bytes(w)));
        parts.push(stx(BPF_DW, 10, -16 + 8 * i as i16, 1));
    }
    parts.extend([
        mov64_reg(1, 10),
        alu64_imm(BPF_ADD, 1, -16),
        mov64_imm(2, fmt.len() as i32),
        mov64_imm(3, -5),
        mov64_imm(4, 255),
        call(6),
        exit(),
    ]);
    let exe = build(&[&parts]);
    let n = execute(&exe, &mut ExecutionContext::new(), &reg).unwrap();
    assert_eq!(lines.lock().unwrap().as_slice(), ["v=-5 x=ff"]);
    assert_eq!(n, "v=-5 x=ff\n".len() as u64);
}

#[test]
fn printk_formatting() {
    assert_eq!(helpers::format_printk(b"%05d|%-3|%x|%%|%c", [42, 0xab, b'z' as u64]), "00042|%-3|ab|%|z");
    assert_eq!(helpers::format_printk(b"%u %lu", [u64::MAX, u64::MAX, 0]), format!("{} {}", u32::MAX, u64::MAX));
    let s = b"hi\0";
    assert_eq!(helpers::format_printk(b"[%s]", [s.as_ptr() as u64, 0, 0]), "[hi]");
    assert_eq!(helpers::format_printk(b"[%s]", [8, 0, 0]), "[(fault)]");
}
