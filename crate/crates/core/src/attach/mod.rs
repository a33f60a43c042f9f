//! In-process hooking: function entry/return hooks through inline
//! trampolines and syscall hooks through rewritten `syscall` instructions.
//!
//! Patching assumes the patched bytes are quiescent: no thread may be
//! executing them while a hook is attached or detached.

mod hook;
pub mod mem;
pub mod plan;
mod spec;
pub mod syscall;

use std::ffi::CString;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::engine::{ExecError, Executable, HelperRegistry};
use crate::targets;

pub use hook::{
    attach_function, hook_entry_address, return_thunk_address, shadow_depth, FunctionHook, PtRegs,
    SHADOW_STACK_DEPTH,
};
pub use plan::{plan_function_hook, plan_syscall_rewrite, FunctionHookPlan, PatchKind, SyscallRewritePlan};
pub use spec::{
    regs, AttachKind, AttachSpec, UnknownSectionConvention, PT_REGS_SIZE, SYS_ENTER_OVERRIDE, SYS_ENTER_RET,
    SYS_ENTER_SIZE, SYS_EXIT_SIZE,
};
pub use syscall::{attach_syscall, rewrite_syscalls, SyscallHook, SyscallRewrite};

#[derive(Debug, Error)]
pub enum AttachError {
    #[error("UnplannableEntry: cannot patch {address:#x}: {why}")]
    UnplannableEntry { address: u64, why: String },
    #[error("TargetTooSmall: {address:#x} has {available} patchable bytes, {needed} needed")]
    TargetTooSmall { address: u64, needed: usize, available: usize },
    #[error("DisassemblyFailure: undecodable bytes at {address:#x}")]
    DisassemblyFailure { address: u64 },
    #[error("AlreadyHooked: {address:#x}")]
    AlreadyHooked { address: u64 },
    #[error("ShadowStackOverflow: more than {SHADOW_STACK_DEPTH} pending returns")]
    ShadowStackOverflow,
    #[error("code at {address:#x} no longer matches the plan")]
    PlanMismatch { address: u64 },
    #[error("no trampoline memory near {near:#x}")]
    NoTrampolineSpace { near: u64 },
    #[error("mprotect at {address:#x}: {source}")]
    Protect { address: u64, source: std::io::Error },
    #[error("cannot map the syscall sled at address zero: {0}")]
    ZeroPageUnavailable(String),
    #[error("unknown syscall {0}")]
    UnknownSyscall(String),
    #[error("UnknownSymbol: {symbol} in {binary}")]
    UnknownSymbol { binary: String, symbol: String },
    #[error("{0:?} is not valid for this attach point")]
    WrongKind(AttachKind),
}

/// Counters for one attached program.
#[derive(Debug, Default)]
pub struct HookStats {
    runs: AtomicU64,
    errors: AtomicU64,
    skipped: AtomicU64,
    overflows: AtomicU64,
    last_result: AtomicU64,
    last_error: Mutex<Option<ExecError>>,
}

impl HookStats {
    pub(crate) fn record(&self, r: Result<u64, ExecError>) {
        self.runs.fetch_add(1, Ordering::Relaxed);
        match r {
            Ok(v) => self.last_result.store(v, Ordering::Relaxed),
            Err(e) => {
                self.errors.fetch_add(1, Ordering::Relaxed);
                *self.last_error.lock().expect("hook stats") = Some(e);
            }
        }
    }

    pub(crate) fn note_skipped(&self) {
        self.skipped.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn note_overflow(&self) {
        self.overflows.fetch_add(1, Ordering::Relaxed);
    }

    /// Program executions, successful or not.
    pub fn runs(&self) -> u64 {
        self.runs.load(Ordering::Relaxed)
    }

    pub fn errors(&self) -> u64 {
        self.errors.load(Ordering::Relaxed)
    }

    /// Hits ignored because the thread was already inside a hook.
    pub fn skipped(&self) -> u64 {
        self.skipped.load(Ordering::Relaxed)
    }

    /// Return hooks dropped because the shadow stack was full.
    pub fn overflows(&self) -> u64 {
        self.overflows.load(Ordering::Relaxed)
    }

    pub fn last_result(&self) -> u64 {
        self.last_result.load(Ordering::Relaxed)
    }

    pub fn last_error(&self) -> Option<ExecError> {
        self.last_error.lock().expect("hook stats").clone()
    }

    /// `ShadowStackOverflow` if any return hook was dropped.
    pub fn check_overflow(&self) -> Result<(), AttachError> {
        if self.overflows() > 0 {
            Err(AttachError::ShadowStackOverflow)
        } else {
            Ok(())
        }
    }
}

/// Resolves `symbol` in `binary`. `demo` and `self` name the built-in demo
/// target; any other binary is looked up with the dynamic linker, first
/// among already loaded objects.
pub fn resolve_symbol(binary: &str, symbol: &str) -> Result<usize, AttachError> {
    let unknown = || AttachError::UnknownSymbol { binary: binary.into(), symbol: symbol.into() };
    if binary == "demo" || binary == "self" {
        if let Some(a) = targets::demo::symbol(symbol) {
            return Ok(a);
        }
        if binary == "demo" {
            return Err(unknown());
        }
    }
    let sym = CString::new(symbol).map_err(|_| unknown())?;
    let p = unsafe { libc::dlsym(libc::RTLD_DEFAULT, sym.as_ptr()) };
    if !p.is_null() {
        return Ok(p as usize);
    }
    let path = CString::new(binary).map_err(|_| unknown())?;
    let h = unsafe { libc::dlopen(path.as_ptr(), libc::RTLD_NOW | libc::RTLD_NOLOAD) };
    let h = if h.is_null() { unsafe { libc::dlopen(path.as_ptr(), libc::RTLD_NOW) } } else { h };
    if h.is_null() {
        return Err(unknown());
    }
    let p = unsafe { libc::dlsym(h, sym.as_ptr()) };
    if p.is_null() {
        return Err(unknown());
    }
    Ok(p as usize)
}

/// A program attached at its [`AttachSpec`].
#[derive(Debug)]
pub enum Attachment {
    Function(FunctionHook),
    Syscall(SyscallHook),
}

impl Attachment {
    pub fn stats(&self) -> &Arc<HookStats> {
        match self {
            Attachment::Function(h) => h.stats(),
            Attachment::Syscall(h) => h.stats(),
        }
    }

    pub fn detach(&mut self) -> Result<(), AttachError> {
        match self {
            Attachment::Function(h) => h.detach(),
            Attachment::Syscall(h) => {
                h.detach();
                Ok(())
            }
        }
    }
}

/// Attaches `exe` where `spec` says.
pub fn attach(spec: &AttachSpec, exe: Arc<Executable>, helpers: Arc<HelperRegistry>) -> Result<Attachment, AttachError> {
    match spec.kind {
        AttachKind::Uprobe | AttachKind::Uretprobe => {
            let binary = spec.binary.as_deref().unwrap_or("self");
            let addr = resolve_symbol(binary, &spec.target)?;
            attach_function(addr, spec.kind, exe, helpers).map(Attachment::Function)
        }
        AttachKind::SyscallEnter | AttachKind::SyscallExit => {
            let nr = syscall::syscall_number(&spec.target).ok_or_else(|| AttachError::UnknownSyscall(spec.target.clone()))?;
            attach_syscall(nr, spec.kind, exe, helpers).map(Attachment::Syscall)
        }
    }
}
