//! Attach targets named by program section conventions, and the context
//! layouts programs see at each kind of attach point.

use std::fmt;

use thiserror::Error;

use crate::verifier::ContextLayout;

/// Size of the x86-64 `pt_regs` frame given to probe programs.
pub const PT_REGS_SIZE: usize = 168;

/// Byte offsets of registers within `pt_regs`.
pub mod regs {
    pub const R15: usize = 0;
    pub const R14: usize = 8;
    pub const R13: usize = 16;
    pub const R12: usize = 24;
    pub const RBP: usize = 32;
    pub const RBX: usize = 40;
    pub const R11: usize = 48;
    pub const R10: usize = 56;
    pub const R9: usize = 64;
    pub const R8: usize = 72;
    pub const RAX: usize = 80;
    pub const RCX: usize = 88;
    pub const RDX: usize = 96;
    pub const RSI: usize = 104;
    pub const RDI: usize = 112;
    pub const ORIG_RAX: usize = 120;
    pub const RIP: usize = 128;
    pub const CS: usize = 136;
    pub const EFLAGS: usize = 144;
    pub const RSP: usize = 152;
    pub const SS: usize = 160;

    /// Offsets of call arguments 1 to 6.
    pub const ARGS: [usize; 6] = [RDI, RSI, RDX, RCX, R8, R9];
}

/// Syscall-entry context: `common` u64, `id` i64, `args[6]`, then a
/// writable return value and a flag that makes it replace the syscall.
pub const SYS_ENTER_SIZE: usize = 80;
pub const SYS_ENTER_RET: usize = 64;
pub const SYS_ENTER_OVERRIDE: usize = 72;
/// Syscall-exit context: `common` u64, `id` i64, `ret` i64.
pub const SYS_EXIT_SIZE: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("UnknownSectionConvention: {0}")]
pub struct UnknownSectionConvention(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttachKind {
    Uprobe,
    Uretprobe,
    SyscallEnter,
    SyscallExit,
}

/// Where a program attaches.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttachSpec {
    pub kind: AttachKind,
    /// Binary holding the probed function; `None` for syscalls.
    pub binary: Option<String>,
    /// Function symbol or syscall name.
    pub target: String,
}

impl AttachSpec {
    pub fn uprobe(binary: &str, symbol: &str) -> Self {
        Self { kind: AttachKind::Uprobe, binary: Some(binary.into()), target: symbol.into() }
    }

    pub fn uretprobe(binary: &str, symbol: &str) -> Self {
        Self { kind: AttachKind::Uretprobe, binary: Some(binary.into()), target: symbol.into() }
    }

    pub fn syscall(kind: AttachKind, name: &str) -> Self {
        Self { kind, binary: None, target: name.into() }
    }

    /// Parses `uprobe/<binary>:<symbol>`, `uretprobe/<binary>:<symbol>`,
    /// `tracepoint/syscalls/sys_enter_<name>` and `.../sys_exit_<name>`.
    pub fn parse(section: &str) -> Result<Self, UnknownSectionConvention> {
        let bad = || UnknownSectionConvention(section.to_string());
        let probe = |kind, rest: &str| {
            let (binary, symbol) = rest.rsplit_once(':').ok_or_else(bad)?;
            if binary.is_empty() || symbol.is_empty() {
                return Err(bad());
            }
            Ok(Self { kind, binary: Some(binary.into()), target: symbol.into() })
        };
        if let Some(rest) = section.strip_prefix("uprobe/") {
            return probe(AttachKind::Uprobe, rest);
        }
        if let Some(rest) = section.strip_prefix("uretprobe/") {
            return probe(AttachKind::Uretprobe, rest);
        }
        if let Some(tp) = section.strip_prefix("tracepoint/syscalls/") {
            let (kind, name) = if let Some(n) = tp.strip_prefix("sys_enter_") {
                (AttachKind::SyscallEnter, n)
            } else if let Some(n) = tp.strip_prefix("sys_exit_") {
                (AttachKind::SyscallExit, n)
            } else {
                return Err(bad());
            };
            if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
                return Err(bad());
            }
            return Ok(Self::syscall(kind, name));
        }
        Err(bad())
    }

    /// The section name this spec parses from.
    pub fn section_name(&self) -> String {
        let bin = self.binary.as_deref().unwrap_or("");
        match self.kind {
            AttachKind::Uprobe => format!("uprobe/{bin}:{}", self.target),
            AttachKind::Uretprobe => format!("uretprobe/{bin}:{}", self.target),
            AttachKind::SyscallEnter => format!("tracepoint/syscalls/sys_enter_{}", self.target),
            AttachKind::SyscallExit => format!("tracepoint/syscalls/sys_exit_{}", self.target),
        }
    }

    /// Context object programs attached here receive in r1.
    pub fn context_layout(&self) -> ContextLayout {
        match self.kind {
            AttachKind::Uprobe | AttachKind::Uretprobe => ContextLayout::read_only(PT_REGS_SIZE as u32),
            AttachKind::SyscallEnter => ContextLayout {
                size: SYS_ENTER_SIZE as u32,
                writable: SYS_ENTER_RET as u32..SYS_ENTER_SIZE as u32,
            },
            AttachKind::SyscallExit => ContextLayout::read_only(SYS_EXIT_SIZE as u32),
        }
    }
}

impl fmt::Display for AttachSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.section_name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_conventions() {
        assert_eq!(AttachSpec::parse("uprobe/libc:malloc").unwrap(), AttachSpec::uprobe("libc", "malloc"));
        assert_eq!(
            AttachSpec::parse("uretprobe/./demo:fib").unwrap(),
            AttachSpec::uretprobe("./demo", "fib")
        );
        assert_eq!(
            AttachSpec::parse("tracepoint/syscalls/sys_enter_openat").unwrap(),
            AttachSpec::syscall(AttachKind::SyscallEnter, "openat")
        );
        assert_eq!(
            AttachSpec::parse("tracepoint/syscalls/sys_exit_openat").unwrap().kind,
            AttachKind::SyscallExit
        );
        for bad in ["xdp", "uprobe/nocolon", "uprobe/:f", "tracepoint/sched/x", "tracepoint/syscalls/sys_enter_"] {
            assert!(AttachSpec::parse(bad).is_err(), "{bad}");
        }
        for s in ["uprobe/libc:malloc", "tracepoint/syscalls/sys_exit_close"] {
            assert_eq!(AttachSpec::parse(s).unwrap().section_name(), s);
        }
    }
}
