//! Pure planning of code patches: computes bytes, touches no memory.

use iced_x86::{BlockEncoder, BlockEncoderOptions, Code, Decoder, DecoderOptions, FlowControl, InstructionBlock};

use super::AttachError;

/// Bytes of a `jmp rel32`.
pub const NEAR_PATCH_LEN: usize = 5;
/// Bytes of `jmp [rip+0]` followed by the absolute target.
pub const FAR_PATCH_LEN: usize = 14;
/// Per-hook dispatch stub at the start of every trampoline:
/// `movabs r11, record` then an absolute jump to the shared entry.
pub const STUB_LEN: usize = 24;
/// Offset of the record address inside the stub.
pub const STUB_RECORD_AT: usize = 2;

const NOP: u8 = 0x90;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchKind {
    /// `jmp rel32`, trampoline within +-2 GiB.
    Near,
    /// `jmp [rip+0]; .quad trampoline`.
    Far,
}

impl PatchKind {
    pub fn len(self) -> usize {
        match self {
            PatchKind::Near => NEAR_PATCH_LEN,
            PatchKind::Far => FAR_PATCH_LEN,
        }
    }
}

/// How to redirect one function entry into a trampoline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionHookPlan {
    pub target_address: u64,
    pub trampoline_address: u64,
    pub kind: PatchKind,
    /// Whole instructions displaced by the patch.
    pub stolen_bytes: Vec<u8>,
    /// Replacement for `stolen_bytes`: the jump plus NOP padding.
    pub patch_bytes: Vec<u8>,
    /// Image for `trampoline_address`: dispatch stub (record address left
    /// zero), the relocated stolen instructions, then a jump back to
    /// `target_address + stolen_bytes.len()`.
    pub trampoline_bytes: Vec<u8>,
}

impl FunctionHookPlan {
    /// Where execution resumes after the dispatcher returns.
    pub fn continuation(&self) -> u64 {
        self.trampoline_address + STUB_LEN as u64
    }
}

fn abs_jmp(to: u64) -> [u8; FAR_PATCH_LEN] {
    let mut b = [0u8; FAR_PATCH_LEN];
    b[..6].copy_from_slice(&[0xff, 0x25, 0, 0, 0, 0]);
    b[6..].copy_from_slice(&to.to_le_bytes());
    b
}

fn rel32(from_end: u64, to: u64) -> Option<i32> {
    i32::try_from(to.wrapping_sub(from_end) as i64).ok()
}

/// Dispatch stub for a trampoline whose shared entry is `entry`.
pub fn dispatch_stub(record: u64, entry: u64) -> [u8; STUB_LEN] {
    let mut b = [0u8; STUB_LEN];
    b[0] = 0x49;
    b[1] = 0xbb;
    b[2..10].copy_from_slice(&record.to_le_bytes());
    b[10..].copy_from_slice(&abs_jmp(entry));
    b
}

fn is_relative_branch(ins: &iced_x86::Instruction) -> bool {
    matches!(
        ins.flow_control(),
        FlowControl::UnconditionalBranch | FlowControl::ConditionalBranch | FlowControl::Call | FlowControl::XbeginXabortXend
    ) && !ins.is_invalid()
        && (ins.is_jmp_short_or_near()
            || ins.is_jcc_short_or_near()
            || ins.is_call_near()
            || ins.is_loop()
            || ins.is_loopcc()
            || ins.is_jcx_short()
            || matches!(ins.code(), Code::Xbegin_rel16 | Code::Xbegin_rel32))
}

/// Plans an entry patch for the function at `target_address` whose first
/// bytes are `entry` (at least the patch length; 32 or more lets branch
/// targets into the stolen range be detected). `entry_stub` is the shared
/// dispatch entry the stub jumps to.
pub fn plan_function_hook(
    entry: &[u8],
    target_address: u64,
    trampoline_address: u64,
    entry_stub: u64,
) -> Result<FunctionHookPlan, AttachError> {
    let kind = match rel32(target_address + NEAR_PATCH_LEN as u64, trampoline_address) {
        Some(_) => PatchKind::Near,
        None => PatchKind::Far,
    };
    let need = kind.len();
    let unplannable = |why: String| AttachError::UnplannableEntry { address: target_address, why };
    let too_small =
        |available: usize| AttachError::TargetTooSmall { address: target_address, needed: need, available };

    let mut dec = Decoder::with_ip(64, entry, target_address, DecoderOptions::NONE);
    let mut stolen = Vec::new();
    let mut len = 0usize;
    while len < need {
        if !dec.can_decode() {
            return Err(too_small(len));
        }
        let ins = dec.decode();
        if ins.is_invalid() {
            if dec.position() >= entry.len() && dec.last_error() == iced_x86::DecoderError::NoMoreBytes {
                return Err(too_small(len));
            }
            return Err(unplannable(format!("undecodable instruction at +{len}")));
        }
        if is_relative_branch(&ins) {
            return Err(unplannable(format!("relative branch at +{len}")));
        }
        len += ins.len();
        let ends = matches!(ins.flow_control(), FlowControl::Return | FlowControl::IndirectBranch)
            || matches!(ins.code(), Code::Int3 | Code::Ud2 | Code::Hlt);
        stolen.push(ins);
        if ends && len < need {
            return Err(too_small(len));
        }
    }
    // Branches later in the function must not land inside the patch.
    let stolen_end = target_address + len as u64;
    while dec.can_decode() {
        let ins = dec.decode();
        if ins.is_invalid() {
            break;
        }
        if is_relative_branch(&ins) {
            let t = ins.near_branch_target();
            if t > target_address && t < stolen_end {
                return Err(unplannable(format!("branch into patched bytes at {t:#x}")));
            }
        }
    }

    let cont = trampoline_address + STUB_LEN as u64;
    let relocated = BlockEncoder::encode(64, InstructionBlock::new(&stolen, cont), BlockEncoderOptions::NONE)
        .map_err(|e| unplannable(format!("cannot relocate: {e}")))?
        .code_buffer;
    let mut trampoline = dispatch_stub(0, entry_stub).to_vec();
    trampoline.extend_from_slice(&relocated);
    trampoline.extend_from_slice(&abs_jmp(stolen_end));

    let mut patch = match kind {
        PatchKind::Near => {
            let d = rel32(target_address + NEAR_PATCH_LEN as u64, trampoline_address).expect("checked above");
            let mut p = vec![0xe9];
            p.extend_from_slice(&d.to_le_bytes());
            p
        }
        PatchKind::Far => abs_jmp(trampoline_address).to_vec(),
    };
    patch.resize(len, NOP);

    Ok(FunctionHookPlan {
        target_address,
        trampoline_address,
        kind,
        stolen_bytes: entry[..len].to_vec(),
        patch_bytes: patch,
        trampoline_bytes: trampoline,
    })
}

/// `syscall` sites found in a code region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyscallRewritePlan {
    pub base: u64,
    pub len: usize,
    /// Offsets of each two-byte `syscall` instruction.
    pub offsets: Vec<usize>,
    /// Instructions decoded while walking the region.
    pub instructions: usize,
}

pub const SYSCALL: [u8; 2] = [0x0f, 0x05];
/// `call rax`.
pub const CALL_RAX: [u8; 2] = [0xff, 0xd0];

/// Walks instruction boundaries of `code` (loaded at `base`) and records
/// every `syscall`. Byte pairs that only look like one, such as inside an
/// immediate, are skipped because the walk never lands on them.
pub fn plan_syscall_rewrite(code: &[u8], base: u64) -> Result<SyscallRewritePlan, AttachError> {
    let mut dec = Decoder::with_ip(64, code, base, DecoderOptions::NONE);
    let mut offsets = Vec::new();
    let mut instructions = 0;
    while dec.can_decode() {
        let at = dec.position();
        let ins = dec.decode();
        if ins.is_invalid() {
            return Err(AttachError::DisassemblyFailure { address: base + at as u64 });
        }
        instructions += 1;
        if ins.code() == Code::Syscall {
            offsets.push(at);
        }
    }
    Ok(SyscallRewritePlan { base, len: code.len(), offsets, instructions })
}

impl SyscallRewritePlan {
    /// Rewrites a copy of the planned region in place. Returns the number
    /// of bytes changed.
    pub fn apply_to(&self, code: &mut [u8]) -> Result<usize, AttachError> {
        if code.len() != self.len {
            return Err(AttachError::PlanMismatch { address: self.base });
        }
        let mut changed = 0;
        for &o in &self.offsets {
            if code[o..o + 2] != SYSCALL {
                return Err(AttachError::PlanMismatch { address: self.base + o as u64 });
            }
            code[o..o + 2].copy_from_slice(&CALL_RAX);
            changed += 2;
        }
        Ok(changed)
    }

    /// Inverse of [`apply_to`](Self::apply_to).
    pub fn revert(&self, code: &mut [u8]) -> Result<(), AttachError> {
        for &o in &self.offsets {
            if code[o..o + 2] != CALL_RAX {
                return Err(AttachError::PlanMismatch { address: self.base + o as u64 });
            }
            code[o..o + 2].copy_from_slice(&SYSCALL);
        }
        Ok(())
    }
}
