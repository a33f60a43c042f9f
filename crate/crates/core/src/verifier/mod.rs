//! Static validation of programs before execution.
//!
//! Two analyses share one abstract machine (see [`state`]):
//!
//! * strict mode explores every path with exact constant/range tracking,
//!   unrolling loops whose trip count is provable and rejecting anything it
//!   cannot prove safe;
//! * permissive-sfi mode accepts whatever strict accepts, and otherwise runs
//!   a joined dataflow that allows unprovable loops and leaves imprecise
//!   memory bounds to the engine's runtime checks.
//!
//! Rule ids are stable strings; see [`Rule::id`].

mod cfg;
mod explore;
mod flow;
mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use crate::helpers;
use crate::isa::Program;
use crate::maps::MapType;

pub use cfg::FunctionLayout;

/// Stack bytes available to each frame.
pub const STACK_SIZE: usize = 512;
/// Maximum bpf-to-bpf call depth (frames including the entry frame).
pub const MAX_CALL_FRAMES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strictness {
    Strict,
    PermissiveSfi,
}

/// What the verifier needs to know about a map referenced by `lddw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapInfo {
    pub map_type: MapType,
    pub key_size: u32,
    pub value_size: u32,
    pub max_entries: u32,
    /// Program-side writes rejected (read-only data sections).
    pub read_only: bool,
}

/// Shape of the context object passed in r1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextLayout {
    pub size: u32,
    pub writable: Range<u32>,
}

impl ContextLayout {
    pub fn read_only(size: u32) -> Self {
        Self { size, writable: 0..0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub max_instructions: usize,
    pub allow_helper_ids: BTreeSet<u32>,
    pub stack_size: usize,
    pub strictness: Strictness,
    pub context: ContextLayout,
    pub maps: BTreeMap<u32, MapInfo>,
    /// Upper bound on abstract instructions processed across all paths.
    pub complexity_limit: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            max_instructions: 65536,
            allow_helper_ids: helpers::STANDARD_HELPERS.iter().copied().collect(),
            stack_size: STACK_SIZE,
            strictness: Strictness::Strict,
            context: ContextLayout::read_only(crate::attach::PT_REGS_SIZE as u32),
            maps: BTreeMap::new(),
            complexity_limit: 1_000_000,
        }
    }
}

impl VerifyConfig {
    pub fn with_strictness(mut self, strictness: Strictness) -> Self {
        self.strictness = strictness;
        self
    }

    pub fn with_context(mut self, context: ContextLayout) -> Self {
        self.context = context;
        self
    }

    pub fn with_map(mut self, handle: u32, info: MapInfo) -> Self {
        self.maps.insert(handle, info);
        self
    }

    pub fn allow_helper(mut self, id: u32) -> Self {
        self.allow_helper_ids.insert(id);
        self
    }
}

/// Rejection rule identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    EmptyProgram,
    TooLarge,
    BadJump,
    JumpIntoWide,
    NoExit,
    UninitRead,
    FrameWrite,
    StackOob,
    UnknownHelper,
    BadCall,
    DivByZero,
    BadMapRef,
    CtxOob,
    CtxWrite,
    MapValueOob,
    MemOob,
    InvalidMemAccess,
    NullDeref,
    PtrArith,
    BadHelperArg,
    UnreleasedRef,
    ReadOnlyWrite,
    Misaligned,
    UnboundedLoop,
    TooComplex,
}

impl Rule {
    pub const ALL: [Rule; 25] = [
        Rule::EmptyProgram,
        Rule::TooLarge,
        Rule::BadJump,
        Rule::JumpIntoWide,
        Rule::NoExit,
        Rule::UninitRead,
        Rule::FrameWrite,
        Rule::StackOob,
        Rule::UnknownHelper,
        Rule::BadCall,
        Rule::DivByZero,
        Rule::BadMapRef,
        Rule::CtxOob,
        Rule::CtxWrite,
        Rule::MapValueOob,
        Rule::MemOob,
        Rule::InvalidMemAccess,
        Rule::NullDeref,
        Rule::PtrArith,
        Rule::BadHelperArg,
        Rule::UnreleasedRef,
        Rule::ReadOnlyWrite,
        Rule::Misaligned,
        Rule::UnboundedLoop,
        Rule::TooComplex,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Rule::EmptyProgram => "empty-program",
            Rule::TooLarge => "too-large",
            Rule::BadJump => "bad-jump",
            Rule::JumpIntoWide => "jump-into-wide",
            Rule::NoExit => "no-exit",
            Rule::UninitRead => "uninit-read",
            Rule::FrameWrite => "r10-write",
            Rule::StackOob => "stack-oob",
            Rule::UnknownHelper => "unknown-helper",
            Rule::BadCall => "bad-call",
            Rule::DivByZero => "div-by-zero",
            Rule::BadMapRef => "bad-map-ref",
            Rule::CtxOob => "ctx-oob",
            Rule::CtxWrite => "ctx-write",
            Rule::MapValueOob => "map-value-oob",
            Rule::MemOob => "mem-oob",
            Rule::InvalidMemAccess => "invalid-mem-access",
            Rule::NullDeref => "null-deref",
            Rule::PtrArith => "ptr-arith",
            Rule::BadHelperArg => "bad-helper-arg",
            Rule::UnreleasedRef => "unreleased-ref",
            Rule::ReadOnlyWrite => "readonly-write",
            Rule::Misaligned => "misaligned-atomic",
            Rule::UnboundedLoop => "unbounded-loop",
            Rule::TooComplex => "too-complex",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub index: usize,
    pub rule: Rule,
    pub message: String,
}

impl Rejection {
    pub(crate) fn new(index: usize, rule: Rule, message: impl Into<String>) -> Self {
        Self { index, rule, message: message.into() }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "insn {}: {}: {}", self.index, self.rule, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub verdict: Verdict,
    pub rejections: Vec<Rejection>,
    /// Per instruction: bit i set when register i is initialized on every
    /// path reaching it. Diagnostic only.
    pub registers_summary: Vec<u16>,
    /// Mode the verdict was reached in. A permissive program that strict
    /// mode also accepts reports `Strict` and needs no runtime checks.
    pub proven_in: Strictness,
}

impl VerifyReport {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accept
    }

    /// True when execution must run with SFI checks enabled.
    pub fn requires_sfi(&self) -> bool {
        self.accepted() && self.proven_in == Strictness::PermissiveSfi
    }

    pub fn first_rule(&self) -> Option<Rule> {
        self.rejections.first().map(|r| r.rule)
    }

    fn from_rejections(
        rejections: Vec<Rejection>,
        summary: Vec<u16>,
        mode: Strictness,
    ) -> Self {
        let verdict = if rejections.is_empty() { Verdict::Accept } else { Verdict::Reject };
        Self { verdict, rejections, registers_summary: summary, proven_in: mode }
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.verdict {
            Verdict::Accept => write!(f, "accept ({:?})", self.proven_in),
            Verdict::Reject => {
                write!(f, "reject")?;
                for r in &self.rejections {
                    write!(f, "; {r}")?;
                }
                Ok(())
            }
        }
    }
}

/// Verifies `program` under `config`. Never panics on a decoded program.
pub fn verify(program: &Program, config: &VerifyConfig) -> VerifyReport {
    let layout = match cfg::check_structure(program, config) {
        Ok(layout) => layout,
        Err(rejections) => {
            return VerifyReport::from_rejections(rejections, Vec::new(), config.strictness)
        }
    };
    let summary = cfg::init_summary(program, &layout);
    let strict = explore::run(program, config, &layout);
    match (strict, config.strictness) {
        (Ok(()), _) => VerifyReport::from_rejections(Vec::new(), summary, Strictness::Strict),
        (Err(rej), Strictness::Strict) => {
            VerifyReport::from_rejections(vec![rej], summary, Strictness::Strict)
        }
        (Err(_), Strictness::PermissiveSfi) => {
            let rejections = match flow::run(program, config) {
                Ok(()) => Vec::new(),
                Err(rej) => vec![rej],
            };
            VerifyReport::from_rejections(rejections, summary, Strictness::PermissiveSfi)
        }
    }
}

#[cfg(test)]
mod tests;
