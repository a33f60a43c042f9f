//! Program execution.
//!
//! [`Executable`] is a verified program with its map references resolved.
//! [`execute`] runs it with the reference interpreter; any other engine must
//! implement [`Engine`] and produce the same results.

mod interp;
mod registry;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::isa::{self, Program};
use crate::maps::{Map, MapTable, MapType};
use crate::verifier::{self, MapInfo, Strictness, VerifyConfig, VerifyReport, MAX_CALL_FRAMES, STACK_SIZE};

pub use interp::Interpreter;
pub use registry::{HelperFn, HelperRegistry, TraceSink};

/// Default instruction budget per invocation.
pub const DEFAULT_BUDGET: u64 = 1_000_000;

/// Bytes of stack backing all call frames of one execution.
pub const STACK_AREA: usize = STACK_SIZE * MAX_CALL_FRAMES;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("VerifyRejected: {0}")]
    VerifyRejected(Box<VerifyReport>),
    #[error("DuplicateHelperId: {0}")]
    DuplicateHelperId(u32),
    #[error("DuplicateName: {0}")]
    DuplicateName(String),
    #[error("BadMapReference: program references map {0}, which is not usable here")]
    BadMapReference(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("BudgetExhausted: {budget} instructions executed")]
    BudgetExhausted { budget: u64 },
    #[error("SfiViolation: insn {pc}: {len}-byte {} at {addr:#x}", if *.write { "write" } else { "read" })]
    SfiViolation { pc: usize, addr: u64, len: usize, write: bool },
    #[error("UnregisteredHelper: insn {pc}: helper {id}")]
    UnregisteredHelper { pc: usize, id: u32 },
    #[error("CallDepthExceeded: insn {pc}")]
    CallDepthExceeded { pc: usize },
    #[error("InvalidInstruction: insn {pc}: opcode {opcode:#04x}")]
    InvalidInstruction { pc: usize, opcode: u8 },
}

/// Access rights of a memory region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    ReadWrite,
}

/// Memory a program may touch when SFI checks are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryRegion {
    pub base: u64,
    pub len: u64,
    pub access: Access,
}

impl MemoryRegion {
    pub fn new(base: u64, len: u64, access: Access) -> Self {
        Self { base, len, access }
    }

    pub fn from_slice(s: &[u8]) -> Self {
        Self::new(s.as_ptr() as u64, s.len() as u64, Access::Read)
    }

    pub fn from_mut_slice(s: &mut [u8]) -> Self {
        Self::new(s.as_mut_ptr() as u64, s.len() as u64, Access::ReadWrite)
    }

    pub(crate) fn permits(&self, addr: u64, len: u64, write: bool) -> bool {
        addr >= self.base
            && len <= self.len
            && addr - self.base <= self.len - len
            && (!write || self.access == Access::ReadWrite)
    }
}

/// One instruction slot ready for execution. For `lddw` the first slot's
/// `imm` holds the resolved 64-bit value.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slot {
    pub opcode: u8,
    pub dst: u8,
    pub src: u8,
    pub off: i16,
    pub imm: i64,
}

/// A verified program bound to the maps it references.
#[derive(Debug)]
pub struct Executable {
    program: Program,
    code: Vec<Slot>,
    report: VerifyReport,
    maps: BTreeMap<u32, (Arc<Map>, MapInfo)>,
    map_regions: Vec<MemoryRegion>,
}

impl Executable {
    /// Verifies `program` and resolves its map references against `maps`.
    /// The map entries of `config` are filled in from the table.
    pub fn new(program: Program, maps: &MapTable, config: &VerifyConfig) -> Result<Self, EngineError> {
        let mut config = config.clone();
        let mut bound = BTreeMap::new();
        for &i in &program.wide_imm_map {
            let insn = program.instructions[i];
            if insn.src != isa::PSEUDO_MAP_FD && insn.src != isa::PSEUDO_MAP_VALUE {
                continue;
            }
            let handle = insn.imm as u32;
            if let Ok(map) = maps.get(handle) {
                let info = MapInfo::from(map.descriptor());
                config.maps.insert(handle, info);
                bound.insert(handle, (map, info));
            }
        }
        let report = verifier::verify(&program, &config);
        if !report.accepted() {
            return Err(EngineError::VerifyRejected(Box::new(report)));
        }
        let mut code = Vec::with_capacity(program.len());
        let mut i = 0;
        while i < program.len() {
            let insn = program.instructions[i];
            let mut slot = Slot {
                opcode: insn.opcode,
                dst: insn.dst,
                src: insn.src,
                off: insn.offset,
                imm: insn.imm as i64,
            };
            if insn.is_wide_load() {
                slot.imm = match insn.src {
                    isa::PSEUDO_MAP_FD => insn.imm as u32 as i64,
                    isa::PSEUDO_MAP_VALUE => {
                        let handle = insn.imm as u32;
                        let (map, _) = bound.get(&handle).ok_or(EngineError::BadMapReference(handle))?;
                        if map.descriptor().map_type != MapType::Array {
                            return Err(EngineError::BadMapReference(handle));
                        }
                        let off = program.instructions[i + 1].imm as u32 as u64;
                        (map.payload_region().0 as u64 + off) as i64
                    }
                    _ => program.wide_imm(i) as i64,
                };
                code.push(slot);
                code.push(Slot { opcode: 0, dst: 0, src: 0, off: 0, imm: 0 });
                i += 2;
            } else {
                code.push(slot);
                i += 1;
            }
        }
        let map_regions = bound
            .values()
            .map(|(m, info)| {
                let (base, len) = m.payload_region();
                let access = if info.read_only { Access::Read } else { Access::ReadWrite };
                MemoryRegion::new(base as u64, len as u64, access)
            })
            .collect();
        Ok(Self { program, code, report, maps: bound, map_regions })
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn name(&self) -> &str {
        &self.program.name
    }

    pub fn report(&self) -> &VerifyReport {
        &self.report
    }

    /// True when the program was only accepted in permissive mode; such
    /// programs always run with SFI checks.
    pub fn requires_sfi(&self) -> bool {
        self.report.proven_in == Strictness::PermissiveSfi
    }

    /// Handles of the maps the program references.
    pub fn map_handles(&self) -> Vec<u32> {
        self.maps.keys().copied().collect()
    }

    pub(crate) fn code(&self) -> &[Slot] {
        &self.code
    }

    pub(crate) fn map_regions(&self) -> &[MemoryRegion] {
        &self.map_regions
    }

    pub(crate) fn map_info(&self, handle: u64) -> Option<&MapInfo> {
        u32::try_from(handle).ok().and_then(|h| self.maps.get(&h)).map(|(_, info)| info)
    }
}

impl From<&crate::maps::MapDescriptor> for MapInfo {
    fn from(d: &crate::maps::MapDescriptor) -> Self {
        MapInfo {
            map_type: d.map_type,
            key_size: d.key_size,
            value_size: d.value_size,
            max_entries: d.max_entries,
            read_only: d.read_only_prog(),
        }
    }
}

#[repr(C, align(16))]
struct StackArea([u8; STACK_AREA]);

/// Per-invocation machine state. Reusable across executions; each
/// concurrent execution needs its own.
pub struct ExecutionContext {
    /// r1..r5 at entry.
    pub args: [u64; 5],
    stack: Box<StackArea>,
    regions: Vec<MemoryRegion>,
    budget: u64,
    sfi: bool,
}

impl Default for ExecutionContext {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ExecutionContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecutionContext")
            .field("args", &self.args)
            .field("regions", &self.regions)
            .field("budget", &self.budget)
            .field("sfi", &self.sfi)
            .finish()
    }
}

impl ExecutionContext {
    pub fn new() -> Self {
        Self {
            args: [0; 5],
            stack: Box::new(StackArea([0; STACK_AREA])),
            regions: Vec::new(),
            budget: DEFAULT_BUDGET,
            sfi: false,
        }
    }

    /// Passes `ctx` in r1 and registers it as readable, with `writable`
    /// (byte offsets) also writable.
    pub fn with_context(mut self, ctx: *mut u8, len: usize, writable: std::ops::Range<usize>) -> Self {
        self.set_context(ctx, len, writable);
        self
    }

    /// Replaces the context region (the first registered region).
    pub fn set_context(&mut self, ctx: *mut u8, len: usize, writable: std::ops::Range<usize>) {
        self.args[0] = ctx as u64;
        self.regions.retain(|r| r.base < ctx as u64 || r.base >= ctx as u64 + len as u64);
        let base = ctx as u64;
        let w = writable.start.min(len)..writable.end.min(len);
        if w.is_empty() {
            self.regions.push(MemoryRegion::new(base, len as u64, Access::Read));
            return;
        }
        for (s, e, a) in [(0, w.start, Access::Read), (w.start, w.end, Access::ReadWrite), (w.end, len, Access::Read)] {
            if e > s {
                self.regions.push(MemoryRegion::new(base + s as u64, (e - s) as u64, a));
            }
        }
    }

    pub fn add_region(&mut self, region: MemoryRegion) {
        self.regions.push(region);
    }

    pub fn clear_regions(&mut self) {
        self.regions.clear();
    }

    pub fn regions(&self) -> &[MemoryRegion] {
        &self.regions
    }

    pub fn set_sfi_mode(&mut self, on: bool) {
        self.sfi = on;
    }

    pub fn sfi_mode(&self) -> bool {
        self.sfi
    }

    pub fn set_budget(&mut self, budget: u64) {
        self.budget = budget;
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    /// Address one past the entry frame's stack, the initial r10.
    pub fn stack_top(&self) -> u64 {
        self.stack.0.as_ptr() as u64 + STACK_AREA as u64
    }

    pub(crate) fn stack_base(&self) -> u64 {
        self.stack.0.as_ptr() as u64
    }
}

/// Execution contract shared by every engine variant.
pub trait Engine: Send + Sync {
    fn name(&self) -> &'static str;
    fn execute(
        &self,
        exe: &Executable,
        ctx: &mut ExecutionContext,
        helpers: &HelperRegistry,
    ) -> Result<u64, ExecError>;
}

/// Runs `exe` with the reference interpreter.
pub fn execute(exe: &Executable, ctx: &mut ExecutionContext, helpers: &HelperRegistry) -> Result<u64, ExecError> {
    interp::run(exe, ctx, helpers)
}

#[cfg(test)]
mod tests;
