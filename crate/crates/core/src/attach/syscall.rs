//! Syscall interception.
//!
//! Rewritten sites execute `call rax` instead of `syscall`. Page zero holds
//! a NOP sled covering every syscall number; it slides into a stub that
//! protects the red zone and enters `uebpf_syscall_entry`, which saves the
//! argument registers and calls [`dispatch`]. Code that is not rewritten
//! can route through [`invoke`] directly.

use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use super::hook::{enter_guard, run_program};
use super::mem::write_code;
use super::plan::{SyscallRewritePlan, CALL_RAX, SYSCALL};
use super::{AttachError, AttachKind, HookStats, SYS_ENTER_OVERRIDE, SYS_ENTER_RET, SYS_ENTER_SIZE, SYS_EXIT_SIZE};
use crate::engine::{Executable, HelperRegistry};

include!(concat!(env!("OUT_DIR"), "/syscalls.rs"));

/// Syscall numbers below this have a sled slot and a dispatch slot.
pub const MAX_SYSCALL: usize = 512;

const NR_FORK: u64 = 57;
const NR_VFORK: u64 = 58;
const NR_CLONE3: u64 = 435;

pub fn syscall_number(name: &str) -> Option<u32> {
    SYSCALLS.iter().find(|(n, _)| *n == name).map(|(_, nr)| *nr)
}

pub fn syscall_name(nr: u32) -> Option<&'static str> {
    SYSCALLS.iter().find(|(_, v)| *v == nr).map(|(n, _)| *n)
}

std::arch::global_asm!(
    ".pushsection .text.uebpf_syscall,\"ax\",@progbits",
    ".p2align 4",
    ".globl uebpf_syscall_entry",
    ".hidden uebpf_syscall_entry",
    // Entered from the sled with rsp lowered by 128; the return address
    // pushed by `call rax` sits just above that.
    "uebpf_syscall_entry:",
    "cmp rax, {sigreturn}",
    "je 2f",
    "cmp rax, {clone}",
    "je 3f",
    "push rbx",
    "sub rsp, 312",
    "mov [rsp+0], rdi",
    "mov [rsp+8], rsi",
    "mov [rsp+16], rdx",
    "mov [rsp+24], r10",
    "mov [rsp+32], r8",
    "mov [rsp+40], r9",
    "mov [rsp+48], rax",
    "movdqu [rsp+56], xmm0",
    "movdqu [rsp+72], xmm1",
    "movdqu [rsp+88], xmm2",
    "movdqu [rsp+104], xmm3",
    "movdqu [rsp+120], xmm4",
    "movdqu [rsp+136], xmm5",
    "movdqu [rsp+152], xmm6",
    "movdqu [rsp+168], xmm7",
    "movdqu [rsp+184], xmm8",
    "movdqu [rsp+200], xmm9",
    "movdqu [rsp+216], xmm10",
    "movdqu [rsp+232], xmm11",
    "movdqu [rsp+248], xmm12",
    "movdqu [rsp+264], xmm13",
    "movdqu [rsp+280], xmm14",
    "movdqu [rsp+296], xmm15",
    "mov rdi, rsp",
    "mov rbx, rsp",
    "and rsp, -16",
    "call {dispatch}",
    "mov rsp, rbx",
    "movdqu xmm0, [rsp+56]",
    "movdqu xmm1, [rsp+72]",
    "movdqu xmm2, [rsp+88]",
    "movdqu xmm3, [rsp+104]",
    "movdqu xmm4, [rsp+120]",
    "movdqu xmm5, [rsp+136]",
    "movdqu xmm6, [rsp+152]",
    "movdqu xmm7, [rsp+168]",
    "movdqu xmm8, [rsp+184]",
    "movdqu xmm9, [rsp+200]",
    "movdqu xmm10, [rsp+216]",
    "movdqu xmm11, [rsp+232]",
    "movdqu xmm12, [rsp+248]",
    "movdqu xmm13, [rsp+264]",
    "movdqu xmm14, [rsp+280]",
    "movdqu xmm15, [rsp+296]",
    "mov rdi, [rsp+0]",
    "mov rsi, [rsp+8]",
    "mov rdx, [rsp+16]",
    "mov r10, [rsp+24]",
    "mov r8, [rsp+32]",
    "mov r9, [rsp+40]",
    "add rsp, 312",
    "pop rbx",
    "add rsp, 128",
    "ret",
    // rt_sigreturn restores the whole frame from the original stack.
    "2:",
    "add rsp, 136",
    "syscall",
    "ud2",
    // clone: a child on a new stack needs its own copy of the return
    // address. rsi is left pointing at it in both parent and child.
    "3:",
    "add rsp, 128",
    "test rsi, rsi",
    "jz 4f",
    "sub rsi, 8",
    "mov r11, [rsp]",
    "mov [rsi], r11",
    "4:",
    "syscall",
    "ret",
    "",
    ".p2align 4",
    ".globl uebpf_raw_syscall",
    ".hidden uebpf_raw_syscall",
    "uebpf_raw_syscall:",
    "mov rax, rdi",
    "mov rdi, rsi",
    "mov rsi, rdx",
    "mov rdx, rcx",
    "mov r10, r8",
    "mov r8, r9",
    "mov r9, [rsp+8]",
    "syscall",
    "ret",
    ".popsection",
    dispatch = sym entry_dispatch,
    sigreturn = const 15,
    clone = const 56,
);

extern "C" {
    fn uebpf_syscall_entry();
    fn uebpf_raw_syscall(nr: u64, a1: u64, a2: u64, a3: u64, a4: u64, a5: u64, a6: u64) -> u64;
}

/// Issues a syscall from code that is never rewritten.
pub fn raw_syscall(nr: u64, a: [u64; 6]) -> u64 {
    unsafe { uebpf_raw_syscall(nr, a[0], a[1], a[2], a[3], a[4], a[5]) }
}

#[repr(C)]
struct SyscallFrame {
    rdi: u64,
    rsi: u64,
    rdx: u64,
    r10: u64,
    r8: u64,
    r9: u64,
    rax: u64,
}

extern "C" fn entry_dispatch(f: *mut SyscallFrame) -> u64 {
    let f = unsafe { &*f };
    dispatch(f.rax, [f.rdi, f.rsi, f.rdx, f.r10, f.r8, f.r9])
}

struct Attached {
    id: u64,
    exe: Arc<Executable>,
    helpers: Arc<HelperRegistry>,
    stats: Arc<HookStats>,
}

#[derive(Default)]
struct Slot {
    enter: Vec<Arc<Attached>>,
    exit: Vec<Arc<Attached>>,
}

static TABLE: [AtomicPtr<Slot>; MAX_SYSCALL] = [const { AtomicPtr::new(std::ptr::null_mut()) }; MAX_SYSCALL];
/// Serializes table updates; replaced slots are parked here because a
/// dispatching thread may still read them.
static RETIRED: Mutex<Vec<Box<Slot>>> = Mutex::new(Vec::new());
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn update_slot(nr: usize, f: impl FnOnce(&Slot) -> Slot) {
    let mut retired = RETIRED.lock().expect("syscall table");
    let old = TABLE[nr].load(Ordering::Acquire);
    let next = if old.is_null() { f(&Slot::default()) } else { f(unsafe { &*old }) };
    let next = if next.enter.is_empty() && next.exit.is_empty() {
        std::ptr::null_mut()
    } else {
        Box::into_raw(Box::new(next))
    };
    TABLE[nr].store(next, Ordering::Release);
    if !old.is_null() {
        retired.push(unsafe { Box::from_raw(old) });
    }
}

/// Runs enter programs, the syscall (unless overridden) and exit programs.
/// Returns the value the caller sees in rax.
pub fn dispatch(nr: u64, args: [u64; 6]) -> u64 {
    let nr = if nr == NR_VFORK { NR_FORK } else { nr };
    if nr == NR_CLONE3 {
        // Callers fall back to clone, which the entry path handles.
        return (-libc::ENOSYS) as i64 as u64;
    }
    let slot = if (nr as usize) < MAX_SYSCALL { TABLE[nr as usize].load(Ordering::Acquire) } else { std::ptr::null_mut() };
    if slot.is_null() {
        return raw_syscall(nr, args);
    }
    let Some(_guard) = enter_guard() else {
        return raw_syscall(nr, args);
    };
    let slot = unsafe { &*slot };
    let mut enter = [0u64; SYS_ENTER_SIZE / 8];
    enter[1] = nr;
    enter[2..8].copy_from_slice(&args);
    for p in &slot.enter {
        run_program(&p.exe, &p.helpers, &p.stats, enter.as_mut_ptr() as *mut u8, SYS_ENTER_SIZE, SYS_ENTER_RET..SYS_ENTER_SIZE);
    }
    let ret = if enter[SYS_ENTER_OVERRIDE / 8] != 0 { enter[SYS_ENTER_RET / 8] } else { raw_syscall(nr, args) };
    let mut exit = [0u64; SYS_EXIT_SIZE / 8];
    exit[1] = nr;
    exit[2] = ret;
    for p in &slot.exit {
        run_program(&p.exe, &p.helpers, &p.stats, exit.as_mut_ptr() as *mut u8, SYS_EXIT_SIZE, 0..0);
    }
    ret
}

/// Dispatch-table entry point for code that is not rewritten.
pub fn invoke(nr: u64, args: [u64; 6]) -> i64 {
    dispatch(nr, args) as i64
}

/// A program attached to one syscall's enter or exit point.
pub struct SyscallHook {
    id: u64,
    nr: u32,
    kind: AttachKind,
    stats: Arc<HookStats>,
    attached: bool,
}

impl std::fmt::Debug for SyscallHook {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyscallHook").field("nr", &self.nr).field("kind", &self.kind).finish()
    }
}

pub fn attach_syscall(
    nr: u32,
    kind: AttachKind,
    exe: Arc<Executable>,
    helpers: Arc<HelperRegistry>,
) -> Result<SyscallHook, AttachError> {
    if !matches!(kind, AttachKind::SyscallEnter | AttachKind::SyscallExit) {
        return Err(AttachError::WrongKind(kind));
    }
    if nr as usize >= MAX_SYSCALL {
        return Err(AttachError::UnknownSyscall(nr.to_string()));
    }
    let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
    let stats = Arc::new(HookStats::default());
    let a = Arc::new(Attached { id, exe, helpers, stats: stats.clone() });
    update_slot(nr as usize, |s| {
        let (mut enter, mut exit) = (s.enter.clone(), s.exit.clone());
        if kind == AttachKind::SyscallEnter {
            enter.push(a);
        } else {
            exit.push(a);
        }
        Slot { enter, exit }
    });
    Ok(SyscallHook { id, nr, kind, stats, attached: true })
}

impl SyscallHook {
    pub fn nr(&self) -> u32 {
        self.nr
    }

    pub fn kind(&self) -> AttachKind {
        self.kind
    }

    pub fn stats(&self) -> &Arc<HookStats> {
        &self.stats
    }

    pub fn detach(&mut self) {
        if !self.attached {
            return;
        }
        let id = self.id;
        update_slot(self.nr as usize, |s| Slot {
            enter: s.enter.iter().filter(|a| a.id != id).cloned().collect(),
            exit: s.exit.iter().filter(|a| a.id != id).cloned().collect(),
        });
        self.attached = false;
    }
}

impl Drop for SyscallHook {
    fn drop(&mut self) {
        self.detach();
    }
}

/// Bytes of NOPs at address zero, one per possible syscall number.
pub const SLED_LEN: usize = MAX_SYSCALL;

/// Page-zero image: sled, then `sub rsp, 128; movabs r11, entry; jmp r11`,
/// then int3 for numbers past the sled.
pub fn zero_page_image(entry: u64, page: usize) -> Vec<u8> {
    let mut img = vec![0x90u8; SLED_LEN];
    img.extend_from_slice(&[0x48, 0x81, 0xec, 0x80, 0, 0, 0]);
    img.extend_from_slice(&[0x49, 0xbb]);
    img.extend_from_slice(&entry.to_le_bytes());
    img.extend_from_slice(&[0x41, 0xff, 0xe3]);
    img.resize(page, 0xcc);
    img
}

static ZERO_PAGE: OnceLock<Result<(), String>> = OnceLock::new();

/// Maps the sled at address zero. Needs `vm.mmap_min_addr` to be 0 (or
/// CAP_SYS_RAWIO); afterwards null pointers are readable in this process.
pub fn install_zero_page() -> Result<(), AttachError> {
    ZERO_PAGE
        .get_or_init(|| {
            let ps = super::mem::page_size();
            let p = unsafe {
                libc::mmap(
                    std::ptr::null_mut(),
                    ps,
                    libc::PROT_READ | libc::PROT_WRITE,
                    libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_FIXED_NOREPLACE,
                    -1,
                    0,
                )
            };
            if p == libc::MAP_FAILED {
                return Err(std::io::Error::last_os_error().to_string());
            }
            if !p.is_null() {
                unsafe { libc::munmap(p, ps) };
                return Err("kernel placed the mapping away from address zero".into());
            }
            let img = zero_page_image(uebpf_syscall_entry as *const () as usize as u64, ps);
            unsafe {
                // Address zero: Rust pointer copies reject null, memcpy does not.
                libc::memcpy(p, img.as_ptr() as *const libc::c_void, ps);
                if libc::mprotect(p, ps, libc::PROT_READ | libc::PROT_EXEC) != 0 {
                    return Err(std::io::Error::last_os_error().to_string());
                }
            }
            Ok(())
        })
        .clone()
        .map_err(AttachError::ZeroPageUnavailable)
}

/// Whether rewritten sites can be serviced in this process.
pub fn zero_page_available() -> bool {
    install_zero_page().is_ok()
}

/// A live syscall rewrite. Dropping it restores the original bytes.
#[derive(Debug)]
pub struct SyscallRewrite {
    plan: SyscallRewritePlan,
    applied: bool,
}

/// Applies `plan` to the code it was computed from.
///
/// # Safety
/// The planned region must still hold the bytes that were planned, and
/// no thread may execute a site while it is being rewritten.
pub unsafe fn rewrite_syscalls(plan: &SyscallRewritePlan) -> Result<SyscallRewrite, AttachError> {
    install_zero_page()?;
    for &o in &plan.offsets {
        let at = plan.base as usize + o;
        if super::mem::read_code(at, 2) != SYSCALL {
            return Err(AttachError::PlanMismatch { address: at as u64 });
        }
    }
    for &o in &plan.offsets {
        write_code(plan.base as usize + o, &CALL_RAX)?;
    }
    Ok(SyscallRewrite { plan: plan.clone(), applied: true })
}

impl SyscallRewrite {
    pub fn plan(&self) -> &SyscallRewritePlan {
        &self.plan
    }

    pub fn restore(&mut self) -> Result<(), AttachError> {
        if !self.applied {
            return Ok(());
        }
        for &o in &self.plan.offsets {
            unsafe { write_code(self.plan.base as usize + o, &SYSCALL)? };
        }
        self.applied = false;
        Ok(())
    }
}

impl Drop for SyscallRewrite {
    fn drop(&mut self) {
        let _ = self.restore();
    }
}
