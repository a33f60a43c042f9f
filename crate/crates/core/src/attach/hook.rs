//! Function entry and return hooks.
//!
//! A patched entry jumps to a per-hook stub, which loads its record into
//! r11 and enters `uebpf_hook_entry`. That saves the register file as a
//! `pt_regs` frame, calls [`hook_dispatch`], restores everything and jumps
//! to the relocated stolen instructions. Return hooks swap the caller's
//! return address for `uebpf_return_thunk` and keep the original on a
//! per-thread shadow stack.

use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use super::mem::{alloc_trampoline, fill_trampoline, write_code};
use super::plan::{plan_function_hook, FunctionHookPlan, STUB_LEN, STUB_RECORD_AT};
use super::{AttachError, AttachKind, HookStats, PT_REGS_SIZE};
use crate::engine::{self, ExecutionContext, Executable, HelperRegistry};

/// Maximum pending return hooks per thread.
pub const SHADOW_STACK_DEPTH: usize = 4096;

/// Register frame handed to probe programs.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PtRegs {
    pub r15: u64,
    pub r14: u64,
    pub r13: u64,
    pub r12: u64,
    pub rbp: u64,
    pub rbx: u64,
    pub r11: u64,
    pub r10: u64,
    pub r9: u64,
    pub r8: u64,
    pub rax: u64,
    pub rcx: u64,
    pub rdx: u64,
    pub rsi: u64,
    pub rdi: u64,
    pub orig_rax: u64,
    pub rip: u64,
    pub cs: u64,
    pub eflags: u64,
    pub rsp: u64,
    pub ss: u64,
}

const _: () = assert!(std::mem::size_of::<PtRegs>() == PT_REGS_SIZE);

impl PtRegs {
    /// Call argument `n` (0-based, up to 5).
    pub fn arg(&self, n: usize) -> u64 {
        [self.rdi, self.rsi, self.rdx, self.rcx, self.r8, self.r9][n]
    }

    pub fn ret(&self) -> u64 {
        self.rax
    }
}

std::arch::global_asm!(
    ".pushsection .text.uebpf_hook,\"ax\",@progbits",
    ".p2align 4",
    ".globl uebpf_hook_entry",
    ".hidden uebpf_hook_entry",
    "uebpf_hook_entry:",
    "pushfq",
    "sub rsp, 304",
    "mov [rsp+0], r15",
    "mov [rsp+8], r14",
    "mov [rsp+16], r13",
    "mov [rsp+24], r12",
    "mov [rsp+32], rbp",
    "mov [rsp+40], rbx",
    "mov [rsp+48], r11",
    "mov [rsp+56], r10",
    "mov [rsp+64], r9",
    "mov [rsp+72], r8",
    "mov [rsp+80], rax",
    "mov [rsp+88], rcx",
    "mov [rsp+96], rdx",
    "mov [rsp+104], rsi",
    "mov [rsp+112], rdi",
    "mov qword ptr [rsp+120], -1",
    "mov rax, [r11]",
    "mov [rsp+128], rax",
    "mov qword ptr [rsp+136], 0x33",
    "mov rax, [rsp+304]",
    "mov [rsp+144], rax",
    "lea rax, [rsp+312]",
    "mov [rsp+152], rax",
    "mov qword ptr [rsp+160], 0x2b",
    "movdqu [rsp+176], xmm0",
    "movdqu [rsp+192], xmm1",
    "movdqu [rsp+208], xmm2",
    "movdqu [rsp+224], xmm3",
    "movdqu [rsp+240], xmm4",
    "movdqu [rsp+256], xmm5",
    "movdqu [rsp+272], xmm6",
    "movdqu [rsp+288], xmm7",
    "mov rdi, rsp",
    "mov rsi, r11",
    "mov rbx, rsp",
    "and rsp, -16",
    "call {entry}",
    "mov rsp, rbx",
    "movdqu xmm0, [rsp+176]",
    "movdqu xmm1, [rsp+192]",
    "movdqu xmm2, [rsp+208]",
    "movdqu xmm3, [rsp+224]",
    "movdqu xmm4, [rsp+240]",
    "movdqu xmm5, [rsp+256]",
    "movdqu xmm6, [rsp+272]",
    "movdqu xmm7, [rsp+288]",
    "mov r15, [rsp+0]",
    "mov r14, [rsp+8]",
    "mov r13, [rsp+16]",
    "mov r12, [rsp+24]",
    "mov rbp, [rsp+32]",
    "mov rbx, [rsp+40]",
    "mov r10, [rsp+56]",
    "mov r9, [rsp+64]",
    "mov r8, [rsp+72]",
    "mov rax, [rsp+80]",
    "mov rcx, [rsp+88]",
    "mov rdx, [rsp+96]",
    "mov rsi, [rsp+104]",
    "mov rdi, [rsp+112]",
    "mov r11, [rsp+48]",
    "mov r11, [r11+8]",
    "lea rsp, [rsp+304]",
    "popfq",
    "jmp r11",
    "",
    ".p2align 4",
    ".globl uebpf_return_thunk",
    ".hidden uebpf_return_thunk",
    "uebpf_return_thunk:",
    "sub rsp, 8",
    "pushfq",
    "sub rsp, 304",
    "mov [rsp+0], r15",
    "mov [rsp+8], r14",
    "mov [rsp+16], r13",
    "mov [rsp+24], r12",
    "mov [rsp+32], rbp",
    "mov [rsp+40], rbx",
    "mov [rsp+48], r11",
    "mov [rsp+56], r10",
    "mov [rsp+64], r9",
    "mov [rsp+72], r8",
    "mov [rsp+80], rax",
    "mov [rsp+88], rcx",
    "mov [rsp+96], rdx",
    "mov [rsp+104], rsi",
    "mov [rsp+112], rdi",
    "mov qword ptr [rsp+120], -1",
    "mov qword ptr [rsp+128], 0",
    "mov qword ptr [rsp+136], 0x33",
    "mov rax, [rsp+304]",
    "mov [rsp+144], rax",
    "lea rax, [rsp+320]",
    "mov [rsp+152], rax",
    "mov qword ptr [rsp+160], 0x2b",
    "movdqu [rsp+176], xmm0",
    "movdqu [rsp+192], xmm1",
    "movdqu [rsp+208], xmm2",
    "movdqu [rsp+224], xmm3",
    "movdqu [rsp+240], xmm4",
    "movdqu [rsp+256], xmm5",
    "movdqu [rsp+272], xmm6",
    "movdqu [rsp+288], xmm7",
    "mov rdi, rsp",
    "mov rbx, rsp",
    "and rsp, -16",
    "call {ret}",
    "mov rsp, rbx",
    "mov [rsp+312], rax",
    "movdqu xmm0, [rsp+176]",
    "movdqu xmm1, [rsp+192]",
    "movdqu xmm2, [rsp+208]",
    "movdqu xmm3, [rsp+224]",
    "movdqu xmm4, [rsp+240]",
    "movdqu xmm5, [rsp+256]",
    "movdqu xmm6, [rsp+272]",
    "movdqu xmm7, [rsp+288]",
    "mov r15, [rsp+0]",
    "mov r14, [rsp+8]",
    "mov r13, [rsp+16]",
    "mov r12, [rsp+24]",
    "mov rbp, [rsp+32]",
    "mov rbx, [rsp+40]",
    "mov r11, [rsp+48]",
    "mov r10, [rsp+56]",
    "mov r9, [rsp+64]",
    "mov r8, [rsp+72]",
    "mov rax, [rsp+80]",
    "mov rcx, [rsp+88]",
    "mov rdx, [rsp+96]",
    "mov rsi, [rsp+104]",
    "mov rdi, [rsp+112]",
    "lea rsp, [rsp+304]",
    "popfq",
    "ret",
    ".popsection",
    entry = sym hook_dispatch,
    ret = sym return_dispatch,
);

extern "C" {
    fn uebpf_hook_entry();
    fn uebpf_return_thunk();
}

/// Address of the shared entry every dispatch stub jumps to.
pub fn hook_entry_address() -> u64 {
    uebpf_hook_entry as *const () as usize as u64
}

/// Address return hooks substitute for the caller's return address.
pub fn return_thunk_address() -> u64 {
    uebpf_return_thunk as *const () as usize as u64
}

/// Read by the entry assembly: `target` at 0, `continuation` at 8.
#[repr(C)]
struct HookRecord {
    target: u64,
    continuation: u64,
    is_return: bool,
    enabled: AtomicBool,
    program: Arc<Executable>,
    helpers: Arc<HelperRegistry>,
    stats: Arc<HookStats>,
}

struct Shadow {
    ret: u64,
    slot: u64,
    record: &'static HookRecord,
}

thread_local! {
    static IN_HOOK: Cell<bool> = const { Cell::new(false) };
    static SHADOW: RefCell<Vec<Shadow>> = RefCell::new(Vec::with_capacity(SHADOW_STACK_DEPTH));
    static CTX: RefCell<Option<ExecutionContext>> = const { RefCell::new(None) };
}

/// Sets the per-thread reentrancy guard; `None` if it was already set
/// (a hook fired from inside a program or helper) or the thread is
/// tearing down.
pub(super) fn enter_guard() -> Option<Guard> {
    match IN_HOOK.try_with(|g| g.replace(true)) {
        Ok(false) => Some(Guard),
        _ => None,
    }
}

pub(super) struct Guard;

impl Drop for Guard {
    fn drop(&mut self) {
        let _ = IN_HOOK.try_with(|g| g.set(false));
    }
}

/// Runs `exe` on `ctx` with the calling thread's execution context.
pub(super) fn run_program(
    exe: &Executable,
    helpers: &HelperRegistry,
    stats: &HookStats,
    ctx: *mut u8,
    len: usize,
    writable: std::ops::Range<usize>,
) {
    let _ = CTX.try_with(|c| {
        let mut c = c.borrow_mut();
        let ec = c.get_or_insert_with(ExecutionContext::new);
        ec.clear_regions();
        ec.set_context(ctx, len, writable);
        stats.record(engine::execute(exe, ec, helpers));
    });
}

extern "C" fn hook_dispatch(regs: *mut PtRegs, record: *const HookRecord) {
    let rec: &'static HookRecord = unsafe { &*record };
    if !rec.enabled.load(Ordering::Acquire) {
        return;
    }
    let Some(_guard) = enter_guard() else {
        rec.stats.note_skipped();
        return;
    };
    let regs = unsafe { &mut *regs };
    if !rec.is_return {
        run_program(&rec.program, &rec.helpers, &rec.stats, regs as *mut PtRegs as *mut u8, PT_REGS_SIZE, 0..0);
        return;
    }
    let slot = regs.rsp;
    let pushed = SHADOW.try_with(|s| {
        let mut s = s.borrow_mut();
        if s.len() >= SHADOW_STACK_DEPTH {
            return false;
        }
        let ret = unsafe { *(slot as *const u64) };
        s.push(Shadow { ret, slot, record: rec });
        unsafe { *(slot as *mut u64) = return_thunk_address() };
        true
    });
    if pushed != Ok(true) {
        rec.stats.note_overflow();
    }
}

extern "C" fn return_dispatch(regs: *mut PtRegs) -> u64 {
    let regs = unsafe { &mut *regs };
    let slot = regs.rsp - 8;
    // Entries above `slot` were skipped by longjmp or unwinding.
    let found = SHADOW.try_with(|s| {
        let mut s = s.borrow_mut();
        while let Some(top) = s.pop() {
            if top.slot == slot {
                return Some((top.ret, top.record));
            }
            if top.slot > slot {
                s.push(top);
                return None;
            }
        }
        None
    });
    let Ok(Some((ret, rec))) = found else {
        eprintln!("uebpf: return thunk reached without a shadow stack entry");
        std::process::abort();
    };
    regs.rip = ret;
    if rec.enabled.load(Ordering::Acquire) {
        if let Some(_guard) = enter_guard() {
            run_program(&rec.program, &rec.helpers, &rec.stats, regs as *mut PtRegs as *mut u8, PT_REGS_SIZE, 0..0);
        } else {
            rec.stats.note_skipped();
        }
    }
    ret
}

/// Pending return hooks on the calling thread.
pub fn shadow_depth() -> usize {
    SHADOW.try_with(|s| s.borrow().len()).unwrap_or(0)
}

static HOOKED: Mutex<BTreeSet<usize>> = Mutex::new(BTreeSet::new());

/// Bytes read from a hook target for planning.
const ENTRY_WINDOW: usize = 32;
/// Trampoline allocation: stub, relocated instructions, jump back.
const TRAMPOLINE_SPACE: usize = 160;

fn read_entry(target: usize) -> Vec<u8> {
    let mut buf = vec![0u8; ENTRY_WINDOW];
    if crate::helpers::read_user(&mut buf, target as u64) {
        return buf;
    }
    let ps = super::mem::page_size();
    let to_page_end = ps - (target & (ps - 1));
    buf.truncate(to_page_end.min(ENTRY_WINDOW));
    if crate::helpers::read_user(&mut buf, target as u64) {
        buf
    } else {
        Vec::new()
    }
}

/// An installed entry patch. Dropping it detaches.
pub struct FunctionHook {
    plan: FunctionHookPlan,
    record: &'static HookRecord,
    attached: bool,
}

impl std::fmt::Debug for FunctionHook {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionHook")
            .field("target", &format_args!("{:#x}", self.plan.target_address))
            .field("kind", &self.kind())
            .field("attached", &self.attached)
            .finish()
    }
}

/// Patches the function at `target` so `program` runs on every entry
/// (`Uprobe`) or return (`Uretprobe`).
///
/// The caller guarantees no thread executes the first bytes of `target`
/// while the patch is written.
pub fn attach_function(
    target: usize,
    kind: AttachKind,
    program: Arc<Executable>,
    helpers: Arc<HelperRegistry>,
) -> Result<FunctionHook, AttachError> {
    let is_return = match kind {
        AttachKind::Uprobe => false,
        AttachKind::Uretprobe => true,
        other => return Err(AttachError::WrongKind(other)),
    };
    let mut hooked = HOOKED.lock().expect("hook table");
    if hooked.contains(&target) {
        return Err(AttachError::AlreadyHooked { address: target as u64 });
    }
    let entry = read_entry(target);
    if entry.is_empty() {
        return Err(AttachError::UnplannableEntry { address: target as u64, why: "unreadable".into() });
    }
    let tramp = alloc_trampoline(target, TRAMPOLINE_SPACE)?;
    let plan = plan_function_hook(&entry, target as u64, tramp as u64, hook_entry_address())?;
    debug_assert!(plan.trampoline_bytes.len() <= TRAMPOLINE_SPACE && plan.trampoline_bytes.len() > STUB_LEN);
    let record: &'static HookRecord = Box::leak(Box::new(HookRecord {
        target: target as u64,
        continuation: plan.continuation(),
        is_return,
        enabled: AtomicBool::new(true),
        program,
        helpers,
        stats: Arc::new(HookStats::default()),
    }));
    let mut image = plan.trampoline_bytes.clone();
    image[STUB_RECORD_AT..STUB_RECORD_AT + 8].copy_from_slice(&(record as *const HookRecord as u64).to_le_bytes());
    // Nothing may allocate once the patch is live: the target can be malloc.
    hooked.insert(target);
    let patched = unsafe {
        fill_trampoline(tramp, &image);
        write_code(target, &plan.patch_bytes)
    };
    if let Err(e) = patched {
        hooked.remove(&target);
        return Err(e);
    }
    Ok(FunctionHook { plan, record, attached: true })
}

impl FunctionHook {
    pub fn plan(&self) -> &FunctionHookPlan {
        &self.plan
    }

    pub fn target(&self) -> usize {
        self.plan.target_address as usize
    }

    pub fn kind(&self) -> AttachKind {
        if self.record.is_return {
            AttachKind::Uretprobe
        } else {
            AttachKind::Uprobe
        }
    }

    pub fn stats(&self) -> &Arc<HookStats> {
        &self.record.stats
    }

    pub fn is_attached(&self) -> bool {
        self.attached
    }

    /// Restores the original entry bytes. Calls already inside the
    /// trampoline, and pending returns, finish without running the program.
    pub fn detach(&mut self) -> Result<(), AttachError> {
        if !self.attached {
            return Ok(());
        }
        let target = self.target();
        // Disable before anything that may allocate: the target can be malloc.
        self.record.enabled.store(false, Ordering::Release);
        let current = unsafe { std::slice::from_raw_parts(target as *const u8, self.plan.patch_bytes.len()) };
        if current != self.plan.patch_bytes.as_slice() {
            self.record.enabled.store(true, Ordering::Release);
            return Err(AttachError::PlanMismatch { address: target as u64 });
        }
        unsafe { write_code(target, &self.plan.stolen_bytes)? };
        HOOKED.lock().expect("hook table").remove(&target);
        self.attached = false;
        Ok(())
    }
}

impl Drop for FunctionHook {
    fn drop(&mut self) {
        let _ = self.detach();
    }
}
