//! Abstract machine shared by the strict explorer and the permissive dataflow.

use std::collections::{BTreeSet, HashMap};

use super::cfg::jump_target;
use super::{MapInfo, Rejection, Rule, VerifyConfig, MAX_CALL_FRAMES};
use crate::helpers;
use crate::isa::*;
use crate::maps::MapType;

const SLOTS: usize = 64;
/// Pointer offsets are clamped to this magnitude; anything wider is
/// treated as unbounded.
const OFF_LIMIT: i64 = 1 << 48;
/// Largest size accepted for a variable-size helper buffer.
const MAX_HELPER_BUF: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    Strict,
    Flow,
}

/// Unsigned and signed interval view of a 64-bit value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct Scalar {
    pub umin: u64,
    pub umax: u64,
    pub smin: i64,
    pub smax: i64,
}

impl Scalar {
    pub const UNKNOWN: Scalar = Scalar { umin: 0, umax: u64::MAX, smin: i64::MIN, smax: i64::MAX };

    pub fn konst(v: u64) -> Self {
        Scalar { umin: v, umax: v, smin: v as i64, smax: v as i64 }
    }

    pub fn urange(lo: u64, hi: u64) -> Self {
        Scalar { umin: lo, umax: hi, ..Self::UNKNOWN }.normalize().unwrap_or(Self::UNKNOWN)
    }

    pub fn srange(lo: i64, hi: i64) -> Self {
        Scalar { smin: lo, smax: hi, ..Self::UNKNOWN }.normalize().unwrap_or(Self::UNKNOWN)
    }

    /// Any value of `n` low bits.
    pub fn bits(n: u32) -> Self {
        if n >= 64 {
            Self::UNKNOWN
        } else {
            Self::urange(0, (1u64 << n) - 1)
        }
    }

    pub fn value(&self) -> Option<u64> {
        (self.umin == self.umax).then_some(self.umin)
    }

    fn normalize(mut self) -> Option<Self> {
        for _ in 0..2 {
            if self.umin > self.umax || self.smin > self.smax {
                return None;
            }
            if (self.umin ^ self.umax) >> 63 == 0 {
                self.smin = self.smin.max(self.umin as i64);
                self.smax = self.smax.min(self.umax as i64);
            }
            if (self.smin ^ self.smax) >= 0 {
                self.umin = self.umin.max(self.smin as u64);
                self.umax = self.umax.min(self.smax as u64);
            }
        }
        (self.umin <= self.umax && self.smin <= self.smax).then_some(self)
    }

    pub fn intersect(self, o: Self) -> Option<Self> {
        Scalar {
            umin: self.umin.max(o.umin),
            umax: self.umax.min(o.umax),
            smin: self.smin.max(o.smin),
            smax: self.smax.min(o.smax),
        }
        .normalize()
    }

    pub fn hull(self, o: Self) -> Self {
        Scalar {
            umin: self.umin.min(o.umin),
            umax: self.umax.max(o.umax),
            smin: self.smin.min(o.smin),
            smax: self.smax.max(o.smax),
        }
    }

    pub fn contains(&self, o: &Self) -> bool {
        self.umin <= o.umin && self.umax >= o.umax && self.smin <= o.smin && self.smax >= o.smax
    }

    fn fits_u32(&self) -> bool {
        self.umax <= u32::MAX as u64
    }

    fn is_unknown(&self) -> bool {
        *self == Self::UNKNOWN
    }
}

fn mask_of(v: u64) -> u64 {
    if v == 0 {
        0
    } else {
        u64::MAX >> v.leading_zeros()
    }
}

fn range64(op: u8, a: Scalar, b: Scalar) -> Scalar {
    let full = Scalar::UNKNOWN;
    let s = match op {
        BPF_ADD => {
            let u = match a.umax.checked_add(b.umax) {
                Some(hi) => (a.umin + b.umin, hi),
                None => (0, u64::MAX),
            };
            let s = match (a.smin.checked_add(b.smin), a.smax.checked_add(b.smax)) {
                (Some(lo), Some(hi)) => (lo, hi),
                _ => (i64::MIN, i64::MAX),
            };
            Scalar { umin: u.0, umax: u.1, smin: s.0, smax: s.1 }
        }
        BPF_SUB => {
            let u = if a.umin >= b.umax {
                (a.umin - b.umax, a.umax - b.umin)
            } else {
                (0, u64::MAX)
            };
            let s = match (a.smin.checked_sub(b.smax), a.smax.checked_sub(b.smin)) {
                (Some(lo), Some(hi)) => (lo, hi),
                _ => (i64::MIN, i64::MAX),
            };
            Scalar { umin: u.0, umax: u.1, smin: s.0, smax: s.1 }
        }
        BPF_MUL => match a.umax.checked_mul(b.umax) {
            Some(hi) => Scalar::urange(a.umin * b.umin, hi),
            None => full,
        },
        BPF_DIV if b.umin > 0 => Scalar::urange(a.umin / b.umax, a.umax / b.umin),
        BPF_DIV => Scalar::urange(0, a.umax),
        BPF_MOD if b.umin > 0 => Scalar::urange(0, a.umax.min(b.umax - 1)),
        BPF_MOD => Scalar::urange(0, a.umax),
        BPF_AND => Scalar::urange(0, a.umax.min(b.umax)),
        BPF_OR => Scalar::urange(a.umin.max(b.umin), mask_of(a.umax.max(b.umax))),
        BPF_XOR => Scalar::urange(0, mask_of(a.umax.max(b.umax))),
        BPF_LSH => match b.value() {
            Some(k) => {
                let k = (k & 63) as u32;
                if a.umax.leading_zeros() >= k {
                    Scalar::urange(a.umin << k, a.umax << k)
                } else {
                    full
                }
            }
            None => full,
        },
        BPF_RSH => match b.value() {
            Some(k) => Scalar::urange(a.umin >> (k & 63), a.umax >> (k & 63)),
            None => Scalar::urange(0, a.umax),
        },
        BPF_ARSH => match b.value() {
            Some(k) => Scalar::srange(a.smin >> (k & 63), a.smax >> (k & 63)),
            None if a.smin >= 0 => Scalar::urange(0, a.umax),
            None => full,
        },
        BPF_NEG if a.smin > i64::MIN => Scalar::srange(-a.smax, -a.smin),
        BPF_MOV => b,
        _ => full,
    };
    s.normalize().unwrap_or(full)
}

/// Abstract ALU over scalars.
pub(crate) fn scalar_alu(op: u8, alu64: bool, a: Scalar, b: Scalar) -> Scalar {
    if let (Some(x), Some(y)) = (a.value(), b.value()) {
        return Scalar::konst(eval_alu(op, alu64, x, y));
    }
    if op == BPF_NEG {
        if let Some(x) = a.value() {
            return Scalar::konst(eval_alu(op, alu64, x, 0));
        }
    }
    if alu64 {
        return range64(op, a, b);
    }
    let bits32 = Scalar::bits(32);
    if op == BPF_MOV {
        return if b.fits_u32() { b } else { bits32 };
    }
    if !a.fits_u32() || !b.fits_u32() {
        return bits32;
    }
    let b = match (op, b.value()) {
        (BPF_LSH | BPF_RSH | BPF_ARSH, Some(k)) => Scalar::konst(k & 31),
        (BPF_LSH | BPF_RSH | BPF_ARSH, None) if b.umax > 31 => return bits32,
        _ => b,
    };
    let r = match op {
        BPF_NEG => return bits32,
        BPF_ARSH if a.umax > i32::MAX as u64 => return bits32,
        BPF_ARSH => range64(BPF_RSH, a, b),
        _ => range64(op, a, b),
    };
    if r.fits_u32() {
        r
    } else {
        bits32
    }
}

fn scalar_end(to_be: bool, width: i32, a: Scalar) -> Scalar {
    if let Some(x) = a.value() {
        return Scalar::konst(eval_end(to_be, width, x));
    }
    let bits = Scalar::bits(width as u32);
    if !to_be && a.umax <= bits.umax {
        a
    } else {
        bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Region {
    Ctx,
    /// Stack of call frame `n` (0 = entry frame).
    Stack(u8),
    /// The map object itself; only usable as a helper argument.
    MapPtr(u32),
    MapValue(u32),
    /// Helper-allocated memory (ring buffer records).
    Mem { size: u32, ref_id: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct Pointer {
    pub region: Region,
    pub lo: i64,
    pub hi: i64,
    /// Nonzero while the pointer may be null; the id links copies so a
    /// null check refines all of them.
    pub null_id: u32,
}

impl Pointer {
    fn new(region: Region, off: i64) -> Self {
        Pointer { region, lo: off, hi: off, null_id: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Val {
    Uninit,
    Scalar(Scalar),
    Ptr(Pointer),
}

impl Val {
    const UNKNOWN: Val = Val::Scalar(Scalar::UNKNOWN);
}

/// One 8-byte stack slot: either a spilled register or raw bytes with a
/// per-byte initialization mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Slot {
    Bytes(u8),
    Spill(Val),
}

impl Slot {
    fn init_mask(&self) -> u8 {
        match self {
            Slot::Bytes(m) => *m,
            Slot::Spill(_) => 0xff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) struct Frame {
    pub regs: [Val; REG_COUNT],
    pub stack: Vec<Slot>,
    /// Instruction to resume at in the caller.
    pub ret_pc: usize,
}

impl Frame {
    fn new(depth: u8, ret_pc: usize) -> Self {
        let mut regs = [Val::Uninit; REG_COUNT];
        regs[FRAME_REG as usize] = Val::Ptr(Pointer::new(Region::Stack(depth), 0));
        Frame { regs, stack: vec![Slot::Bytes(0); SLOTS], ret_pc }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) struct State {
    pub frames: Vec<Frame>,
    /// Outstanding acquired references (ring buffer reservations).
    pub refs: BTreeSet<u32>,
}

impl State {
    pub fn initial() -> Self {
        let mut frame = Frame::new(0, usize::MAX);
        frame.regs[1] = Val::Ptr(Pointer::new(Region::Ctx, 0));
        State { frames: vec![frame], refs: BTreeSet::new() }
    }

    fn cur(&mut self) -> &mut Frame {
        self.frames.last_mut().expect("at least one frame")
    }

    fn reg(&self, r: u8) -> Val {
        self.frames.last().expect("at least one frame").regs[r as usize]
    }

    fn set(&mut self, r: u8, v: Val) {
        self.cur().regs[r as usize] = v;
    }

    /// Return sites of every active call, outermost first.
    pub fn call_stack(&self) -> Vec<usize> {
        self.frames.iter().skip(1).map(|f| f.ret_pc).collect()
    }

    fn map_vals(&mut self, mut f: impl FnMut(Val) -> Val) {
        for frame in &mut self.frames {
            for r in frame.regs.iter_mut() {
                *r = f(*r);
            }
            for s in frame.stack.iter_mut() {
                if let Slot::Spill(v) = s {
                    *s = Slot::Spill(f(*v));
                }
            }
        }
    }

    fn mark_null(&mut self, id: u32, is_null: bool) {
        self.map_vals(|v| match v {
            Val::Ptr(p) if p.null_id == id => {
                if is_null {
                    Val::Scalar(Scalar::konst(0))
                } else {
                    Val::Ptr(Pointer { null_id: 0, ..p })
                }
            }
            v => v,
        });
        if is_null {
            self.refs.remove(&id);
        }
    }
}

/// Successors of one instruction.
pub(crate) struct Succ {
    pub first: Option<(State, usize)>,
    pub second: Option<(State, usize)>,
}

impl Succ {
    fn none() -> Self {
        Succ { first: None, second: None }
    }

    fn one(st: State, pc: usize) -> Self {
        Succ { first: Some((st, pc)), second: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Access {
    Read,
    Write(Val),
    Atomic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fit {
    Inside,
    Partial,
    Outside,
}

/// Where `[lo, hi] + size` falls relative to `[start, end)`.
fn fit(lo: i64, hi: i64, size: i64, start: i64, end: i64) -> Fit {
    if lo >= start && hi + size <= end {
        Fit::Inside
    } else if hi < start || lo + size > end || end - start < size {
        Fit::Outside
    } else {
        Fit::Partial
    }
}

pub(crate) struct Machine<'a> {
    pub program: &'a Program,
    pub config: &'a VerifyConfig,
    pub mode: Mode,
    next_id: u32,
}

fn reject<T>(pc: usize, rule: Rule, msg: impl Into<String>) -> Result<T, Rejection> {
    Err(Rejection::new(pc, rule, msg))
}

impl<'a> Machine<'a> {
    pub fn new(program: &'a Program, config: &'a VerifyConfig, mode: Mode) -> Self {
        Machine { program, config, mode, next_id: 0 }
    }

    /// Fresh id for a nullable result. The dataflow uses the call site so
    /// ids stay finite across loop iterations.
    fn fresh_id(&mut self, pc: usize) -> u32 {
        match self.mode {
            Mode::Strict => {
                self.next_id += 1;
                self.next_id
            }
            Mode::Flow => pc as u32 + 1,
        }
    }

    fn read(&self, st: &State, pc: usize, r: u8) -> Result<Val, Rejection> {
        match st.reg(r) {
            Val::Uninit => reject(pc, Rule::UninitRead, format!("r{r} is read before it is written")),
            v => Ok(v),
        }
    }

    fn map_info(&self, handle: u32) -> MapInfo {
        self.config.maps[&handle]
    }

    pub fn step(&mut self, mut st: State, pc: usize) -> Result<Succ, Rejection> {
        let insn = self.program.instructions[pc];
        match insn.class() {
            BPF_ALU | BPF_ALU64 => {
                self.alu(&mut st, pc, &insn)?;
                Ok(Succ::one(st, pc + 1))
            }
            BPF_LD => {
                let v = match insn.src {
                    PSEUDO_MAP_FD => Val::Ptr(Pointer::new(Region::MapPtr(insn.imm as u32), 0)),
                    PSEUDO_MAP_VALUE => {
                        let off = self.program.instructions[pc + 1].imm as u32 as i64;
                        Val::Ptr(Pointer::new(Region::MapValue(insn.imm as u32), off))
                    }
                    _ => Val::Scalar(Scalar::konst(self.program.wide_imm(pc))),
                };
                st.set(insn.dst, v);
                Ok(Succ::one(st, pc + 2))
            }
            BPF_LDX => {
                let base = self.read(&st, pc, insn.src)?;
                let size = size_bytes(insn.size());
                let v = self.access(&mut st, pc, base, insn.offset, size, Access::Read)?;
                st.set(insn.dst, v);
                Ok(Succ::one(st, pc + 1))
            }
            BPF_ST => {
                let base = self.read(&st, pc, insn.dst)?;
                let size = size_bytes(insn.size());
                let v = Val::Scalar(Scalar::konst(insn.imm as i64 as u64));
                self.access(&mut st, pc, base, insn.offset, size, Access::Write(v))?;
                Ok(Succ::one(st, pc + 1))
            }
            BPF_STX if insn.mode() == BPF_ATOMIC => {
                self.atomic(&mut st, pc, &insn)?;
                Ok(Succ::one(st, pc + 1))
            }
            BPF_STX => {
                let base = self.read(&st, pc, insn.dst)?;
                let v = self.read(&st, pc, insn.src)?;
                let size = size_bytes(insn.size());
                self.access(&mut st, pc, base, insn.offset, size, Access::Write(v))?;
                Ok(Succ::one(st, pc + 1))
            }
            _ => match insn.op() {
                BPF_EXIT => self.exit(st, pc),
                BPF_CALL if insn.src == PSEUDO_CALL => {
                    if st.frames.len() >= MAX_CALL_FRAMES {
                        return reject(pc, Rule::BadCall, "call depth limit reached");
                    }
                    let target = jump_target(pc, insn.imm as i64).expect("checked structurally");
                    let depth = st.frames.len() as u8;
                    let mut frame = Frame::new(depth, pc + 1);
                    frame.regs[1..6].copy_from_slice(&st.reg_slice(1..6));
                    st.frames.push(frame);
                    Ok(Succ::one(st, target))
                }
                BPF_CALL => {
                    let r0 = self.helper(&mut st, pc, insn.imm as u32)?;
                    let f = st.cur();
                    f.regs[0] = r0;
                    for r in 1..6 {
                        f.regs[r] = Val::Uninit;
                    }
                    Ok(Succ::one(st, pc + 1))
                }
                BPF_JA => {
                    let t = jump_target(pc, insn.offset as i64).expect("checked structurally");
                    Ok(Succ::one(st, t))
                }
                _ => self.branch(st, pc, &insn),
            },
        }
    }

    fn alu(&mut self, st: &mut State, pc: usize, insn: &Instruction) -> Result<(), Rejection> {
        let alu64 = insn.class() == BPF_ALU64;
        let op = insn.op();
        let imm = Val::Scalar(Scalar::konst(if alu64 {
            insn.imm as i64 as u64
        } else {
            insn.imm as u32 as u64
        }));
        let src = if insn.uses_src_reg() && !matches!(op, BPF_NEG | BPF_END) {
            self.read(st, pc, insn.src)?
        } else {
            imm
        };
        if op == BPF_MOV {
            let v = match src {
                Val::Scalar(s) if !alu64 => Val::Scalar(scalar_alu(BPF_MOV, false, s, s)),
                Val::Ptr(_) if !alu64 => {
                    return reject(pc, Rule::PtrArith, "32-bit move truncates a pointer")
                }
                v => v,
            };
            st.set(insn.dst, v);
            return Ok(());
        }
        let dst = self.read(st, pc, insn.dst)?;
        let out = match (dst, src) {
            (Val::Scalar(a), _) if op == BPF_END => {
                Val::Scalar(scalar_end(insn.uses_src_reg(), insn.imm, a))
            }
            (Val::Scalar(a), Val::Scalar(b)) => Val::Scalar(scalar_alu(op, alu64, a, b)),
            (Val::Ptr(p), Val::Scalar(b)) if alu64 && matches!(op, BPF_ADD | BPF_SUB) => {
                Val::Ptr(self.ptr_add(pc, p, b, op == BPF_SUB)?)
            }
            (Val::Scalar(a), Val::Ptr(p)) if alu64 && op == BPF_ADD => {
                Val::Ptr(self.ptr_add(pc, p, a, false)?)
            }
            (Val::Ptr(p), Val::Ptr(q))
                if alu64 && op == BPF_SUB && p.region == q.region && p.null_id == 0 && q.null_id == 0 =>
            {
                if p.lo == p.hi && q.lo == q.hi {
                    Val::Scalar(Scalar::konst(p.lo.wrapping_sub(q.lo) as u64))
                } else {
                    Val::UNKNOWN
                }
            }
            _ => return reject(pc, Rule::PtrArith, "unsupported arithmetic on a pointer"),
        };
        st.set(insn.dst, out);
        Ok(())
    }

    fn ptr_add(&self, pc: usize, p: Pointer, b: Scalar, sub: bool) -> Result<Pointer, Rejection> {
        if p.null_id != 0 {
            return reject(pc, Rule::PtrArith, "arithmetic on a possibly-null pointer");
        }
        if let Region::MapPtr(_) = p.region {
            return reject(pc, Rule::PtrArith, "arithmetic on a map reference");
        }
        let (dlo, dhi) = if sub {
            (-(b.smax as i128), -(b.smin as i128))
        } else {
            (b.smin as i128, b.smax as i128)
        };
        let lo = p.lo as i128 + dlo;
        let hi = p.hi as i128 + dhi;
        let limit = OFF_LIMIT as i128;
        let (lo, hi) = if lo < -limit || hi > limit {
            (-OFF_LIMIT, OFF_LIMIT)
        } else {
            (lo as i64, hi as i64)
        };
        Ok(Pointer { lo, hi, ..p })
    }

    fn access(
        &mut self,
        st: &mut State,
        pc: usize,
        base: Val,
        off: i16,
        size: usize,
        acc: Access,
    ) -> Result<Val, Rejection> {
        let p = match base {
            Val::Ptr(p) => p,
            _ if self.mode == Mode::Flow => {
                // Raw addresses are left to the runtime bounds checks.
                return Ok(Val::Scalar(Scalar::bits(size as u32 * 8)));
            }
            _ => return reject(pc, Rule::InvalidMemAccess, "memory access through a scalar"),
        };
        if p.null_id != 0 {
            return reject(pc, Rule::NullDeref, "access through a possibly-null pointer");
        }
        let (lo, hi) = (p.lo + off as i64, p.hi + off as i64);
        let size_i = size as i64;
        let loaded = Val::Scalar(Scalar::bits(size as u32 * 8));
        let check = |f: Fit, rule: Rule, what: &str| -> Result<(), Rejection> {
            match (f, self.mode) {
                (Fit::Inside, _) | (Fit::Partial, Mode::Flow) => Ok(()),
                _ => reject(
                    pc,
                    rule,
                    format!("{what} access [{lo}, {}] + {size} out of bounds", hi),
                ),
            }
        };
        let precise = lo == hi;
        if acc == Access::Atomic {
            if !precise && self.mode == Mode::Strict {
                return reject(pc, Rule::Misaligned, "atomic access with variable offset");
            }
            if precise && lo.rem_euclid(size_i) != 0 {
                return reject(pc, Rule::Misaligned, format!("atomic access at offset {lo}"));
            }
        }
        match p.region {
            Region::MapPtr(_) => {
                reject(pc, Rule::InvalidMemAccess, "map reference cannot be dereferenced")
            }
            Region::Ctx => {
                let ctx = &self.config.context;
                if acc == Access::Atomic {
                    return reject(pc, Rule::InvalidMemAccess, "atomic access to context");
                }
                if !precise && self.mode == Mode::Strict {
                    return reject(pc, Rule::CtxOob, "context access with variable offset");
                }
                check(fit(lo, hi, size_i, 0, ctx.size as i64), Rule::CtxOob, "context")?;
                if let Access::Write(_) = acc {
                    let w = &ctx.writable;
                    check(fit(lo, hi, size_i, w.start as i64, w.end as i64), Rule::CtxWrite, "context write")?;
                }
                Ok(loaded)
            }
            Region::MapValue(h) => {
                let info = self.map_info(h);
                if acc != Access::Read && info.read_only {
                    return reject(pc, Rule::ReadOnlyWrite, "write to read-only map value");
                }
                check(fit(lo, hi, size_i, 0, info.value_size as i64), Rule::MapValueOob, "map value")?;
                Ok(loaded)
            }
            Region::Mem { size: msize, .. } => {
                check(fit(lo, hi, size_i, 0, msize as i64), Rule::MemOob, "memory")?;
                Ok(loaded)
            }
            Region::Stack(frame) => {
                let ssize = self.config.stack_size as i64;
                check(fit(lo, hi, size_i, -ssize, 0), Rule::StackOob, "stack")?;
                self.stack_access(st, pc, frame as usize, lo, hi, size, acc)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn stack_access(
        &mut self,
        st: &mut State,
        pc: usize,
        frame: usize,
        lo: i64,
        hi: i64,
        size: usize,
        acc: Access,
    ) -> Result<Val, Rejection> {
        let ssize = self.config.stack_size as i64;
        let first = (lo.max(-ssize) + ssize) as usize;
        let end = ((hi + size as i64).min(0) + ssize) as usize;
        let stack = &mut st.frames[frame].stack;
        let precise = lo == hi;
        let whole_slot = precise && size == 8 && lo.rem_euclid(8) == 0;
        match acc {
            Access::Read | Access::Atomic => {
                if whole_slot && acc == Access::Read {
                    if let Slot::Spill(v) = stack[first / 8] {
                        return Ok(v);
                    }
                }
                if self.mode == Mode::Strict {
                    for byte in first..end {
                        if stack[byte / 8].init_mask() & (1 << (byte % 8)) == 0 {
                            return reject(
                                pc,
                                Rule::UninitRead,
                                format!("read of uninitialized stack byte {}", byte as i64 - ssize),
                            );
                        }
                    }
                }
                if acc == Access::Atomic {
                    for slot in first / 8..end.div_ceil(8) {
                        if let Slot::Spill(_) = stack[slot] {
                            stack[slot] = Slot::Bytes(0xff);
                        }
                    }
                }
                Ok(Val::Scalar(Scalar::bits(size as u32 * 8)))
            }
            Access::Write(v) => {
                if whole_slot {
                    stack[first / 8] = Slot::Spill(v);
                    return Ok(Val::Uninit);
                }
                for slot in first / 8..end.div_ceil(8) {
                    if let Slot::Spill(_) = stack[slot] {
                        stack[slot] = Slot::Bytes(0xff);
                    }
                }
                if precise {
                    for byte in first..end {
                        if let Slot::Bytes(m) = &mut stack[byte / 8] {
                            *m |= 1 << (byte % 8);
                        }
                    }
                }
                Ok(Val::Uninit)
            }
        }
    }

    fn atomic(&mut self, st: &mut State, pc: usize, insn: &Instruction) -> Result<(), Rejection> {
        let size = size_bytes(insn.size());
        let base = self.read(st, pc, insn.dst)?;
        let src = self.read(st, pc, insn.src)?;
        if !matches!(src, Val::Scalar(_)) {
            return reject(pc, Rule::PtrArith, "atomic operand is a pointer");
        }
        if insn.imm == BPF_CMPXCHG {
            if !matches!(self.read(st, pc, 0)?, Val::Scalar(_)) {
                return reject(pc, Rule::PtrArith, "cmpxchg comparand is a pointer");
            }
        }
        self.access(st, pc, base, insn.offset, size, Access::Atomic)?;
        let old = Val::Scalar(Scalar::bits(size as u32 * 8));
        if insn.imm == BPF_CMPXCHG {
            st.set(0, old);
        } else if insn.imm & BPF_FETCH != 0 {
            st.set(insn.src, old);
        }
        Ok(())
    }

    fn exit(&mut self, mut st: State, pc: usize) -> Result<Succ, Rejection> {
        let r0 = self.read(&st, pc, 0)?;
        if st.frames.len() == 1 {
            if !st.refs.is_empty() {
                return reject(pc, Rule::UnreleasedRef, "ring buffer reservation not released");
            }
            return Ok(Succ::none());
        }
        let frame = st.frames.pop().expect("callee frame");
        let depth = st.frames.len() as u8;
        let dead = |v: Val| match v {
            Val::Ptr(p) if p.region == Region::Stack(depth) => Val::UNKNOWN,
            v => v,
        };
        st.map_vals(dead);
        let f = st.cur();
        f.regs[0] = dead(r0);
        for r in 1..6 {
            f.regs[r] = Val::Uninit;
        }
        Ok(Succ::one(st, frame.ret_pc))
    }

    fn branch(&mut self, st: State, pc: usize, insn: &Instruction) -> Result<Succ, Rejection> {
        let jmp32 = insn.class() == BPF_JMP32;
        let op = insn.op();
        let target = jump_target(pc, insn.offset as i64).expect("checked structurally");
        let a = self.read(&st, pc, insn.dst)?;
        let b = if insn.uses_src_reg() {
            self.read(&st, pc, insn.src)?
        } else {
            Val::Scalar(Scalar::konst(if jmp32 {
                insn.imm as u32 as u64
            } else {
                insn.imm as i64 as u64
            }))
        };
        let both = |st: State| Succ { first: Some((st.clone(), pc + 1)), second: Some((st, target)) };
        match (a, b) {
            (Val::Scalar(x), Val::Scalar(y)) => {
                if let (Some(u), Some(v)) = (x.value(), y.value()) {
                    let next = if eval_cond(op, jmp32, u, v) { target } else { pc + 1 };
                    return Ok(Succ::one(st, next));
                }
                let mut out = Succ::none();
                for (taken, next) in [(false, pc + 1), (true, target)] {
                    let Some((nx, ny)) = refine(op, jmp32, x, y, taken) else { continue };
                    let mut s = st.clone();
                    s.set(insn.dst, Val::Scalar(nx));
                    if insn.uses_src_reg() && insn.src != insn.dst {
                        s.set(insn.src, Val::Scalar(ny));
                    }
                    if out.first.is_none() {
                        out.first = Some((s, next));
                    } else {
                        out.second = Some((s, next));
                    }
                }
                Ok(out)
            }
            (Val::Ptr(p), Val::Scalar(y))
                if !jmp32 && y.value() == Some(0) && matches!(op, BPF_JEQ | BPF_JNE) =>
            {
                let eq_next = if op == BPF_JEQ { target } else { pc + 1 };
                let ne_next = if op == BPF_JEQ { pc + 1 } else { target };
                if p.null_id == 0 {
                    return Ok(Succ::one(st, ne_next));
                }
                let mut null = st.clone();
                null.mark_null(p.null_id, true);
                let mut nonnull = st;
                nonnull.mark_null(p.null_id, false);
                Ok(Succ { first: Some((nonnull, ne_next)), second: Some((null, eq_next)) })
            }
            _ => Ok(both(st)),
        }
    }

    fn map_arg(&self, st: &State, pc: usize, r: u8) -> Result<(u32, MapInfo), Rejection> {
        match self.read(st, pc, r)? {
            Val::Ptr(Pointer { region: Region::MapPtr(h), lo: 0, hi: 0, null_id: 0 }) => {
                Ok((h, self.map_info(h)))
            }
            _ => reject(pc, Rule::BadHelperArg, format!("r{r} must be a map reference")),
        }
    }

    fn scalar_arg(&self, st: &State, pc: usize, r: u8) -> Result<Scalar, Rejection> {
        match self.read(st, pc, r)? {
            Val::Scalar(s) => Ok(s),
            _ => reject(pc, Rule::BadHelperArg, format!("r{r} must be a scalar")),
        }
    }

    /// Checks that register `r` points at `[0, max)` accessible bytes and
    /// applies the effect of the helper reading or writing `min..max` of
    /// them.
    fn mem_arg(
        &self,
        st: &mut State,
        pc: usize,
        r: u8,
        min: u64,
        max: u64,
        write: bool,
    ) -> Result<(), Rejection> {
        let bad = |why: String| reject(pc, Rule::BadHelperArg, format!("r{r} {why}"));
        let p = match self.read(st, pc, r)? {
            Val::Ptr(p) => p,
            _ if max == 0 => return Ok(()),
            _ => return bad("must point at readable memory".into()),
        };
        if p.null_id != 0 {
            return bad("may be null".into());
        }
        let (lo, hi, size) = (p.lo, p.hi, max as i64);
        let inside = |start: i64, end: i64| fit(lo, hi, size, start, end) == Fit::Inside;
        match p.region {
            Region::MapPtr(_) => bad("is a map reference, not memory".into()),
            Region::Ctx => {
                if write {
                    bad("points at read-only context".into())
                } else if !inside(0, self.config.context.size as i64) {
                    bad(format!("context range [{lo}, {}] + {size} out of bounds", hi))
                } else {
                    Ok(())
                }
            }
            Region::MapValue(h) => {
                let info = self.map_info(h);
                if write && info.read_only {
                    return reject(pc, Rule::ReadOnlyWrite, "helper writes read-only map value");
                }
                if inside(0, info.value_size as i64) {
                    Ok(())
                } else {
                    bad(format!("map value range [{lo}, {hi}] + {size} out of bounds"))
                }
            }
            Region::Mem { size: msize, .. } => {
                if inside(0, msize as i64) {
                    Ok(())
                } else {
                    bad(format!("memory range [{lo}, {hi}] + {size} out of bounds"))
                }
            }
            Region::Stack(frame) => {
                let ssize = self.config.stack_size as i64;
                if !inside(-ssize, 0) {
                    return bad(format!("stack range [{lo}, {hi}] + {size} out of bounds"));
                }
                let stack = &mut st.frames[frame as usize].stack;
                let first = (lo + ssize) as usize;
                let end = (hi + size + ssize) as usize;
                if write {
                    for slot in first / 8..end.div_ceil(8) {
                        if let Slot::Spill(_) = stack[slot] {
                            stack[slot] = Slot::Bytes(0xff);
                        }
                    }
                    if lo == hi {
                        for byte in first..first + min as usize {
                            if let Slot::Bytes(m) = &mut stack[byte / 8] {
                                *m |= 1 << (byte % 8);
                            }
                        }
                    }
                } else if self.mode == Mode::Strict {
                    for byte in first..end {
                        if stack[byte / 8].init_mask() & (1 << (byte % 8)) == 0 {
                            return reject(
                                pc,
                                Rule::UninitRead,
                                format!("helper reads uninitialized stack byte {}", byte as i64 - ssize),
                            );
                        }
                    }
                }
                Ok(())
            }
        }
    }

    fn helper(&mut self, st: &mut State, pc: usize, id: u32) -> Result<Val, Rejection> {
        let unknown = Ok(Val::UNKNOWN);
        match id {
            helpers::MAP_LOOKUP_ELEM | helpers::MAP_UPDATE_ELEM | helpers::MAP_DELETE_ELEM => {
                let (h, info) = self.map_arg(st, pc, 1)?;
                if info.map_type == MapType::RingBuf {
                    return reject(pc, Rule::BadHelperArg, "ring buffers have no elements");
                }
                let key = info.key_size as u64;
                self.mem_arg(st, pc, 2, key, key, false)?;
                match id {
                    helpers::MAP_LOOKUP_ELEM => {
                        let id = self.fresh_id(pc);
                        Ok(Val::Ptr(Pointer { null_id: id, ..Pointer::new(Region::MapValue(h), 0) }))
                    }
                    helpers::MAP_UPDATE_ELEM => {
                        if info.read_only {
                            return reject(pc, Rule::ReadOnlyWrite, "update of a read-only map");
                        }
                        let value = info.value_size as u64;
                        self.mem_arg(st, pc, 3, value, value, false)?;
                        self.scalar_arg(st, pc, 4)?;
                        unknown
                    }
                    _ => unknown,
                }
            }
            helpers::TRACE_PRINTK => {
                let size = self.scalar_arg(st, pc, 2)?;
                match size.value() {
                    Some(n) if n > 0 && n <= MAX_HELPER_BUF => {
                        self.mem_arg(st, pc, 1, n, n, false)?;
                        unknown
                    }
                    _ => reject(pc, Rule::BadHelperArg, "format size must be a positive constant"),
                }
            }
            helpers::PROBE_READ_USER => {
                let size = self.scalar_arg(st, pc, 2)?;
                if size.umax > MAX_HELPER_BUF {
                    return reject(pc, Rule::BadHelperArg, "read size is unbounded");
                }
                self.mem_arg(st, pc, 1, size.umin, size.umax, true)?;
                self.read(st, pc, 3)?;
                unknown
            }
            helpers::RINGBUF_RESERVE => {
                let (_, info) = self.map_arg(st, pc, 1)?;
                if info.map_type != MapType::RingBuf {
                    return reject(pc, Rule::BadHelperArg, "reserve needs a ring buffer");
                }
                let size = self.scalar_arg(st, pc, 2)?;
                self.scalar_arg(st, pc, 3)?;
                match size.value() {
                    Some(n) if n > 0 && n <= info.max_entries as u64 => {
                        let id = self.fresh_id(pc);
                        st.refs.insert(id);
                        let region = Region::Mem { size: n as u32, ref_id: id };
                        Ok(Val::Ptr(Pointer { null_id: id, ..Pointer::new(region, 0) }))
                    }
                    _ => reject(pc, Rule::BadHelperArg, "reservation size must be a constant within the ring"),
                }
            }
            helpers::RINGBUF_SUBMIT | helpers::RINGBUF_DISCARD => {
                let ref_id = match self.read(st, pc, 1)? {
                    Val::Ptr(Pointer { region: Region::Mem { ref_id, .. }, lo: 0, hi: 0, null_id: 0 })
                        if st.refs.contains(&ref_id) =>
                    {
                        ref_id
                    }
                    _ => {
                        return reject(pc, Rule::BadHelperArg, "r1 must be an unreleased reservation")
                    }
                };
                self.scalar_arg(st, pc, 2)?;
                st.refs.remove(&ref_id);
                st.map_vals(|v| match v {
                    Val::Ptr(Pointer { region: Region::Mem { ref_id: r, .. }, .. }) if r == ref_id => {
                        Val::UNKNOWN
                    }
                    v => v,
                });
                unknown
            }
            _ => unknown,
        }
    }

    /// Least upper bound used by the dataflow.
    pub fn join(&self, a: &State, b: &State) -> State {
        let mut out = a.clone();
        for (fo, fb) in out.frames.iter_mut().zip(&b.frames) {
            for (r, rb) in fo.regs.iter_mut().zip(&fb.regs) {
                *r = join_val(*r, *rb);
            }
            for (s, sb) in fo.stack.iter_mut().zip(&fb.stack) {
                *s = match (*s, *sb) {
                    (Slot::Spill(x), Slot::Spill(y)) => Slot::Spill(join_val(x, y)),
                    (x, y) => Slot::Bytes(x.init_mask() & y.init_mask()),
                };
            }
        }
        out.refs.extend(b.refs.iter().copied());
        out
    }

    /// Pushes every bound that grew since `old` to its extreme.
    pub fn widen(&self, old: &State, new: &mut State) {
        for (fo, fnew) in old.frames.iter().zip(new.frames.iter_mut()) {
            for (o, n) in fo.regs.iter().zip(fnew.regs.iter_mut()) {
                *n = widen_val(*o, *n);
            }
            for (o, n) in fo.stack.iter().zip(fnew.stack.iter_mut()) {
                if let (Slot::Spill(x), Slot::Spill(y)) = (o, &n) {
                    *n = Slot::Spill(widen_val(*x, *y));
                }
            }
        }
    }
}

impl State {
    fn reg_slice(&self, r: std::ops::Range<usize>) -> Vec<Val> {
        self.frames.last().expect("frame").regs[r].to_vec()
    }
}

fn join_val(a: Val, b: Val) -> Val {
    match (a, b) {
        (Val::Uninit, _) | (_, Val::Uninit) => Val::Uninit,
        (Val::Scalar(x), Val::Scalar(y)) => Val::Scalar(x.hull(y)),
        (Val::Ptr(p), Val::Ptr(q)) if p.region == q.region => {
            let null_id = match (p.null_id, q.null_id) {
                (0, 0) => 0,
                (0, x) | (x, 0) => x,
                (x, y) => x.min(y),
            };
            Val::Ptr(Pointer { region: p.region, lo: p.lo.min(q.lo), hi: p.hi.max(q.hi), null_id })
        }
        _ => Val::UNKNOWN,
    }
}

fn widen_val(old: Val, new: Val) -> Val {
    match (old, new) {
        (Val::Scalar(o), Val::Scalar(n)) => {
            let w = Scalar {
                umin: if n.umin < o.umin { 0 } else { n.umin },
                umax: if n.umax > o.umax { u64::MAX } else { n.umax },
                smin: if n.smin < o.smin { i64::MIN } else { n.smin },
                smax: if n.smax > o.smax { i64::MAX } else { n.smax },
            };
            Val::Scalar(w.normalize().unwrap_or(Scalar::UNKNOWN))
        }
        (Val::Ptr(o), Val::Ptr(n)) if o.region == n.region => Val::Ptr(Pointer {
            lo: if n.lo < o.lo { -OFF_LIMIT } else { n.lo },
            hi: if n.hi > o.hi { OFF_LIMIT } else { n.hi },
            ..n
        }),
        (_, n) => n,
    }
}

#[derive(Default)]
struct IdMap {
    fwd: HashMap<u32, u32>,
    rev: HashMap<u32, u32>,
}

impl IdMap {
    fn link(&mut self, a: u32, b: u32) -> bool {
        match (self.fwd.get(&a), self.rev.get(&b)) {
            (Some(&x), Some(&y)) => x == b && y == a,
            (None, None) => {
                self.fwd.insert(a, b);
                self.rev.insert(b, a);
                true
            }
            _ => false,
        }
    }
}

fn region_covers(a: Region, b: Region, ids: &mut IdMap) -> bool {
    match (a, b) {
        (Region::Mem { size: x, ref_id: i }, Region::Mem { size: y, ref_id: j }) => {
            x == y && ids.link(i, j)
        }
        (a, b) => a == b,
    }
}

fn val_covers(old: Val, cur: Val, ids: &mut IdMap) -> bool {
    match (old, cur) {
        (Val::Uninit, _) => true,
        (Val::Scalar(a), Val::Scalar(b)) => a.contains(&b),
        (Val::Ptr(p), Val::Ptr(q)) => {
            let nulls = match (p.null_id, q.null_id) {
                (0, 0) => true,
                (0, _) | (_, 0) => false,
                (x, y) => ids.link(x, y),
            };
            nulls && region_covers(p.region, q.region, ids) && p.lo <= q.lo && p.hi >= q.hi
        }
        _ => false,
    }
}

fn slot_covers(old: Slot, cur: Slot, ids: &mut IdMap) -> bool {
    match (old, cur) {
        (Slot::Bytes(m), Slot::Bytes(n)) => n & m == m,
        (Slot::Bytes(m), Slot::Spill(v)) => m == 0 || matches!(v, Val::Scalar(_)),
        (Slot::Spill(v), Slot::Spill(w)) => val_covers(v, w, ids),
        (Slot::Spill(Val::Scalar(s)), Slot::Bytes(0xff)) => s.is_unknown(),
        _ => false,
    }
}

/// True when every execution from `cur` is also an execution from `old`,
/// so a completed exploration of `old` proves `cur` safe.
pub(crate) fn covers(old: &State, cur: &State) -> bool {
    if old.frames.len() != cur.frames.len() || old.refs.len() != cur.refs.len() {
        return false;
    }
    let mut ids = IdMap::default();
    for (fo, fc) in old.frames.iter().zip(&cur.frames) {
        if fo.ret_pc != fc.ret_pc {
            return false;
        }
        for (o, c) in fo.regs.iter().zip(&fc.regs) {
            if !val_covers(*o, *c, &mut ids) {
                return false;
            }
        }
        for (o, c) in fo.stack.iter().zip(&fc.stack) {
            if !slot_covers(*o, *c, &mut ids) {
                return false;
            }
        }
    }
    old.refs.iter().all(|r| match ids.fwd.get(r) {
        Some(c) => cur.refs.contains(c),
        None => true,
    })
}

#[derive(Clone, Copy)]
enum Rel {
    Eq,
    Ne,
    Ult,
    Ule,
    Slt,
    Sle,
    Set,
    NotSet,
}

/// Narrows `a` and `b` assuming the branch outcome `taken`. `None` when
/// the outcome is impossible.
pub(crate) fn refine(op: u8, jmp32: bool, a: Scalar, b: Scalar, taken: bool) -> Option<(Scalar, Scalar)> {
    let signed = matches!(op, BPF_JSGT | BPF_JSGE | BPF_JSLT | BPF_JSLE);
    if jmp32 {
        let limit = if signed { i32::MAX as u64 } else { u32::MAX as u64 };
        if a.umax > limit || b.umax > limit {
            return Some((a, b));
        }
    }
    // (relation, swapped operands)
    let (rel, swap) = match (op, taken) {
        (BPF_JEQ, true) | (BPF_JNE, false) => (Rel::Eq, false),
        (BPF_JEQ, false) | (BPF_JNE, true) => (Rel::Ne, false),
        (BPF_JLT, true) | (BPF_JGE, false) => (Rel::Ult, false),
        (BPF_JLE, true) | (BPF_JGT, false) => (Rel::Ule, false),
        (BPF_JGT, true) | (BPF_JLE, false) => (Rel::Ult, true),
        (BPF_JGE, true) | (BPF_JLT, false) => (Rel::Ule, true),
        (BPF_JSLT, true) | (BPF_JSGE, false) => (Rel::Slt, false),
        (BPF_JSLE, true) | (BPF_JSGT, false) => (Rel::Sle, false),
        (BPF_JSGT, true) | (BPF_JSLE, false) => (Rel::Slt, true),
        (BPF_JSGE, true) | (BPF_JSLT, false) => (Rel::Sle, true),
        (BPF_JSET, true) => (Rel::Set, false),
        (BPF_JSET, false) => (Rel::NotSet, false),
        _ => return Some((a, b)),
    };
    let (x, y) = if swap { (b, a) } else { (a, b) };
    let (x, y) = apply_rel(rel, x, y)?;
    Some(if swap { (y, x) } else { (x, y) })
}

fn apply_rel(rel: Rel, x: Scalar, y: Scalar) -> Option<(Scalar, Scalar)> {
    match rel {
        Rel::Eq => {
            let i = x.intersect(y)?;
            Some((i, i))
        }
        Rel::Ne => {
            let trim = |s: Scalar, c: u64| -> Option<Scalar> {
                if s.value() == Some(c) {
                    return None;
                }
                let mut s = s;
                if s.umin == c {
                    s.umin += 1;
                }
                if s.umax == c {
                    s.umax -= 1;
                }
                if s.smin == c as i64 {
                    s.smin += 1;
                }
                if s.smax == c as i64 {
                    s.smax -= 1;
                }
                s.normalize()
            };
            match (x.value(), y.value()) {
                (_, Some(c)) => Some((trim(x, c)?, y)),
                (Some(c), _) => Some((x, trim(y, c)?)),
                _ => Some((x, y)),
            }
        }
        Rel::Ult => {
            let xmax = y.umax.checked_sub(1)?;
            let ymin = x.umin.checked_add(1)?;
            Some((
                x.intersect(Scalar { umax: xmax, ..Scalar::UNKNOWN })?,
                y.intersect(Scalar { umin: ymin, ..Scalar::UNKNOWN })?,
            ))
        }
        Rel::Ule => Some((
            x.intersect(Scalar { umax: y.umax, ..Scalar::UNKNOWN })?,
            y.intersect(Scalar { umin: x.umin, ..Scalar::UNKNOWN })?,
        )),
        Rel::Slt => {
            let xmax = y.smax.checked_sub(1)?;
            let ymin = x.smin.checked_add(1)?;
            Some((
                x.intersect(Scalar { smax: xmax, ..Scalar::UNKNOWN })?,
                y.intersect(Scalar { smin: ymin, ..Scalar::UNKNOWN })?,
            ))
        }
        Rel::Sle => Some((
            x.intersect(Scalar { smax: y.smax, ..Scalar::UNKNOWN })?,
            y.intersect(Scalar { smin: x.smin, ..Scalar::UNKNOWN })?,
        )),
        Rel::Set => {
            if x.umax == 0 || y.umax == 0 {
                return None;
            }
            if let (Some(u), Some(v)) = (x.value(), y.value()) {
                if u & v == 0 {
                    return None;
                }
            }
            Some((x, y))
        }
        Rel::NotSet => {
            if let (Some(u), Some(v)) = (x.value(), y.value()) {
                if u & v != 0 {
                    return None;
                }
            }
            Some((x, y))
        }
    }
}
