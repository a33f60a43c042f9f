//! Benchmark harness: the seven VM kernels against their native twins, and
//! probe dispatch latency for function, return, syscall and embedded
//! execution.
//!
//! Timing is median-of-batches on the monotonic clock. Every timed engine
//! result is cross-checked against the native build of the same kernel.

use std::fmt::Write as _;
use std::hint::black_box;
use std::sync::Arc;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::attach::{self, AttachError, AttachKind, AttachSpec, PT_REGS_SIZE};
use crate::engine::{Engine, ExecError, Executable, ExecutionContext, HelperRegistry, Interpreter, MemoryRegion, TraceSink};
use crate::fixtures::{FixtureError, FixtureManifest};
use crate::helpers;
use crate::isa::asm;
use crate::loader::{self, LoadError, LocalMaps, MapSink};
use crate::maps::MapTable;
use crate::targets::{demo, native};

/// Kernel-side uprobe latency reported for the original system, in ns.
/// Used only as a ceiling.
pub const PUBLISHED_KERNEL_UPROBE_NS: f64 = 3224.172760;
pub const PUBLISHED_UPROBE_NS: f64 = 314.569110;
pub const PUBLISHED_URETPROBE_NS: f64 = 381.270270;
pub const PUBLISHED_SYSCALL_NS: f64 = 232.57691;
pub const PUBLISHED_KERNEL_SYSCALL_NS: f64 = 151.82801;
pub const PUBLISHED_EMBEDDED_NS: f64 = 110.008430;

pub const VM_KERNELS: [&str; 7] = ["log2_int", "prime", "memcpy", "simple", "switch", "strcmp_fail", "memory_a_plus_b"];

/// Fixed string the strcmp kernel compares against.
pub const STRCMP_REFERENCE: &[u8] = b"the quick brown fox jumps over the lazy dog";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("FixtureMissing: {0}")]
    FixtureMissing(String),
    #[error("fixture: {0}")]
    Fixture(#[from] FixtureError),
    #[error("load: {0}")]
    Load(#[from] LoadError),
    #[error("attach: {0}")]
    Attach(#[from] AttachError),
    #[error("{kernel}: execution failed on input {input}: {err}")]
    Exec { kernel: String, input: String, err: ExecError },
    #[error("{kernel}: {engine} returned {got:#x}, native {want:#x} on input {input}")]
    Mismatch { kernel: String, engine: String, input: String, got: u64, want: u64 },
    #[error("unknown suite {0:?}")]
    UnknownSuite(String),
    #[error("malformed report line {line}: {why}")]
    MalformedReport { line: usize, why: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batches: 100, batch_size: 1000, warmup: 1000 }
    }
}

impl BenchConfig {
    pub fn iterations(&self) -> u64 {
        (self.batches * self.batch_size) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub median_ns: f64,
    pub p99_ns: f64,
    pub iterations: u64,
}

impl Timing {
    /// `self - base` on medians and p99s, floored at zero.
    fn minus(self, base: Timing) -> Timing {
        Timing {
            median_ns: (self.median_ns - base.median_ns).max(0.0),
            p99_ns: (self.p99_ns - base.p99_ns).max(0.0),
            iterations: self.iterations,
        }
    }
}

/// Runs `warmup` discarded ops, then `batches` timed batches of
/// `batch_size` ops. Statistics are over per-batch ns/op.
pub fn measure(cfg: &BenchConfig, mut op: impl FnMut(usize)) -> Timing {
    for i in 0..cfg.warmup {
        op(i);
    }
    let mut per_op: Vec<f64> = Vec::with_capacity(cfg.batches);
    let mut i = 0;
    for _ in 0..cfg.batches {
        let t = Instant::now();
        for _ in 0..cfg.batch_size {
            op(i);
            i += 1;
        }
        per_op.push(t.elapsed().as_nanos() as f64 / cfg.batch_size as f64);
    }
    per_op.sort_by(f64::total_cmp);
    let at = |q: f64| per_op[((per_op.len() - 1) as f64 * q).round() as usize];
    Timing { median_ns: at(0.5), p99_ns: at(0.99), iterations: cfg.iterations() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmRow {
    pub name: String,
    pub variant: String,
    pub timing: Timing,
    /// Results compared against the native twin during the run.
    pub checked: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProbeKind {
    Uprobe,
    Uretprobe,
    SyscallDispatch,
    Embedded,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 4] = [ProbeKind::Uprobe, ProbeKind::Uretprobe, ProbeKind::SyscallDispatch, ProbeKind::Embedded];

    pub fn id(self) -> &'static str {
        match self {
            ProbeKind::Uprobe => "uprobe",
            ProbeKind::Uretprobe => "uretprobe",
            ProbeKind::SyscallDispatch => "syscall-dispatch",
            ProbeKind::Embedded => "embedded",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == s)
    }

    /// Userspace figure the original system reported for this row.
    pub fn published_ns(self) -> f64 {
        match self {
            ProbeKind::Uprobe => PUBLISHED_UPROBE_NS,
            ProbeKind::Uretprobe => PUBLISHED_URETPROBE_NS,
            ProbeKind::SyscallDispatch => PUBLISHED_SYSCALL_NS,
            ProbeKind::Embedded => PUBLISHED_EMBEDDED_NS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub kind: ProbeKind,
    /// How the row was measured, e.g. `rewrite` or `table` for syscalls.
    pub path: String,
    /// Overhead over the unhooked call; for `embedded`, the whole call.
    pub timing: Option<Timing>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub vm: Vec<VmRow>,
    pub probes: Vec<ProbeRow>,
}

impl BenchReport {
    pub fn probe(&self, kind: ProbeKind) -> Option<&ProbeRow> {
        self.probes.iter().find(|r| r.kind == kind)
    }

    pub fn probe_median(&self, kind: ProbeKind) -> Option<f64> {
        self.probe(kind).and_then(|r| r.timing).map(|t| t.median_ns)
    }

    /// One `key=value` record per line. Fields:
    ///
    /// * `record=vm name variant median_ns p99_ns iterations checked`
    /// * `record=probe row path median_ns p99_ns iterations published_ns`, or
    ///   `record=probe row path skipped` with the reason last
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for r in &self.vm {
            let t = r.timing;
            let _ = writeln!(
                s,
                "record=vm name={} variant={} median_ns={:.3} p99_ns={:.3} iterations={} checked={}",
                r.name, r.variant, t.median_ns, t.p99_ns, t.iterations, r.checked
            );
        }
        for r in &self.probes {
            match (&r.timing, &r.skipped) {
                (Some(t), _) => {
                    let _ = writeln!(
                        s,
                        "record=probe row={} path={} median_ns={:.3} p99_ns={:.3} iterations={} published_ns={:.6}",
                        r.kind.id(),
                        r.path,
                        t.median_ns,
                        t.p99_ns,
                        t.iterations,
                        r.kind.published_ns()
                    );
                }
                (None, why) => {
                    let why = why.as_deref().unwrap_or("").replace('\n', " ");
                    let _ = writeln!(s, "record=probe row={} path={} skipped={}", r.kind.id(), r.path, why);
                }
            }
        }
        s
    }

    /// Inverse of [`BenchReport::to_records`].
    pub fn parse_records(text: &str) -> Result<Self, BenchError> {
        let mut report = BenchReport::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |why: &str| BenchError::MalformedReport { line: n + 1, why: why.to_string() };
            let mut fields = std::collections::BTreeMap::new();
            let mut rest = line;
            while !rest.is_empty() {
                let (kv, tail) = rest.split_once(' ').unwrap_or((rest, ""));
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("field without '='"))?;
                if k == "skipped" {
                    fields.insert(k, if tail.is_empty() { v.to_string() } else { format!("{v} {tail}") });
                    break;
                }
                fields.insert(k, v.to_string());
                rest = tail;
            }
            let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(&format!("missing {k}")));
            let num = |k: &str| -> Result<f64, BenchError> { get(k)?.parse().map_err(|_| bad(&format!("bad {k}"))) };
            let timing = || -> Result<Timing, BenchError> {
                Ok(Timing { median_ns: num("median_ns")?, p99_ns: num("p99_ns")?, iterations: num("iterations")? as u64 })
            };
            match get("record")?.as_str() {
                "vm" => report.vm.push(VmRow {
                    name: get("name")?,
                    variant: get("variant")?,
                    timing: timing()?,
                    checked: num("checked")? as u64,
                }),
                "probe" => {
                    let kind = ProbeKind::from_id(&get("row")?).ok_or_else(|| bad("unknown row"))?;
                    let path = get("path")?;
                    match fields.get("skipped") {
                        Some(why) => report.probes.push(ProbeRow { kind, path, timing: None, skipped: Some(why.clone()) }),
                        None => report.probes.push(ProbeRow { kind, path, timing: Some(timing()?), skipped: None }),
                    }
                }
                other => return Err(bad(&format!("unknown record {other:?}"))),
            }
        }
        Ok(report)
    }

    pub fn human_table(&self) -> String {
        let mut s = String::new();
        if !self.vm.is_empty() {
            let _ = writeln!(s, "{:<16} {:<12} {:>12} {:>12} {:>10}", "kernel", "variant", "median ns", "p99 ns", "iters");
            for r in &self.vm {
                let t = r.timing;
                let _ = writeln!(s, "{:<16} {:<12} {:>12.1} {:>12.1} {:>10}", r.name, r.variant, t.median_ns, t.p99_ns, t.iterations);
            }
        }
        if !self.probes.is_empty() {
            if !s.is_empty() {
                s.push('\n');
            }
            let _ = writeln!(s, "{:<18} {:<8} {:>12} {:>12} {:>10} {:>12}", "probe", "path", "median ns", "p99 ns", "iters", "published ns");
            for r in &self.probes {
                match r.timing {
                    Some(t) => {
                        let _ = writeln!(
                            s,
                            "{:<18} {:<8} {:>12.1} {:>12.1} {:>10} {:>12.2}",
                            r.kind.id(),
                            r.path,
                            t.median_ns,
                            t.p99_ns,
                            t.iterations,
                            r.kind.published_ns()
                        );
                    }
                    None => {
                        let _ = writeln!(s, "{:<18} {:<8} skipped: {}", r.kind.id(), r.path, r.skipped.as_deref().unwrap_or(""));
                    }
                }
            }
            let _ = writeln!(s, "kernel uprobe (not measured here): {PUBLISHED_KERNEL_UPROBE_NS:.2} ns");
        }
        s
    }
}

/// One randomized kernel input with the buffers its pointers refer to.
#[derive(Debug, Clone)]
pub struct KernelInput {
    pub x: u64,
    pub src: Vec<u8>,
    pub dst: Vec<u8>,
    /// NUL-terminated string for `strcmp_fail`.
    pub text: Vec<u8>,
    pub mem: [u64; 2],
}

impl KernelInput {
    pub fn random(kernel: &str, rng: &mut StdRng) -> Self {
        let mut input = KernelInput { x: rng.gen(), src: Vec::new(), dst: Vec::new(), text: Vec::new(), mem: rng.gen() };
        match kernel {
            // Cap the trial-division loop.
            "prime" => input.x %= 200_000,
            "memcpy" => {
                input.x %= 257;
                input.src = (0..input.x).map(|_| rng.gen()).collect();
                input.dst = vec![0; input.x as usize];
            }
            "strcmp_fail" => {
                // Shares a random-length prefix with the reference, then
                // differs (or ends early).
                let keep = rng.gen_range(0..STRCMP_REFERENCE.len());
                input.text = STRCMP_REFERENCE[..keep].to_vec();
                if rng.gen_bool(0.8) {
                    let c = loop {
                        let c = rng.gen_range(1..=255u8);
                        if c != STRCMP_REFERENCE[keep] {
                            break c;
                        }
                    };
                    input.text.push(c);
                }
                input.text.push(0);
                input.x = keep as u64;
            }
            _ => {}
        }
        input
    }

    fn describe(&self, kernel: &str) -> String {
        match kernel {
            "memcpy" => format!("len {}", self.x),
            "strcmp_fail" => format!("{:?}", String::from_utf8_lossy(&self.text[..self.text.len() - 1])),
            "memory_a_plus_b" => format!("[{:#x}, {:#x}]", self.mem[0], self.mem[1]),
            _ => format!("{:#x}", self.x),
        }
    }

    /// Native twin, compiled from the same kernel source as the program.
    pub fn native(&mut self, kernel: &str) -> u64 {
        unsafe {
            match kernel {
                "log2_int" => native::native_log2_int(self.x),
                "prime" => native::native_prime(self.x),
                "memcpy" => native::native_memcpy(self.dst.as_mut_ptr(), self.src.as_ptr(), self.x),
                "simple" => native::native_simple(self.x),
                "switch" => native::native_switch(self.x),
                "strcmp_fail" => native::native_strcmp_fail(self.text.as_ptr()),
                "memory_a_plus_b" => native::native_memory_a_plus_b(self.mem.as_ptr()),
                other => panic!("unknown kernel {other}"),
            }
        }
    }

    /// Loads pt_regs arguments and SFI regions for `kernel` into `ctx`.
    fn prepare(&mut self, kernel: &str, regs: &mut [u64; PT_REGS_SIZE / 8], ctx: &mut ExecutionContext) {
        use crate::attach::regs::{RDI, RDX, RSI};
        regs.fill(0);
        ctx.clear_regions();
        match kernel {
            "memcpy" => {
                regs[RDI / 8] = self.dst.as_mut_ptr() as u64;
                regs[RSI / 8] = self.src.as_ptr() as u64;
                regs[RDX / 8] = self.x;
                ctx.add_region(MemoryRegion::from_mut_slice(&mut self.dst));
                ctx.add_region(MemoryRegion::from_slice(&self.src));
            }
            "strcmp_fail" => {
                regs[RDI / 8] = self.text.as_ptr() as u64;
                ctx.add_region(MemoryRegion::from_slice(&self.text));
            }
            "memory_a_plus_b" => {
                regs[RDI / 8] = self.mem.as_ptr() as u64;
                let bytes = unsafe { std::slice::from_raw_parts(self.mem.as_ptr() as *const u8, 16) };
                ctx.add_region(MemoryRegion::from_slice(bytes));
            }
            _ => regs[RDI / 8] = self.x,
        }
        ctx.set_context(regs.as_mut_ptr() as *mut u8, PT_REGS_SIZE, 0..0);
    }
}

/// A bench kernel loaded from its fixture object.
pub struct Kernel {
    pub name: String,
    pub exe: Arc<Executable>,
    pub helpers: Arc<HelperRegistry>,
    _maps: LocalMaps,
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel").field("name", &self.name).finish()
    }
}

impl Kernel {
    pub fn load(manifest: &FixtureManifest, name: &str) -> Result<Self, BenchError> {
        let missing = |e| match e {
            FixtureError::FixtureMissing(p) => BenchError::FixtureMissing(p),
            other => BenchError::Fixture(other),
        };
        let f = manifest.get(name).map_err(missing)?;
        let bytes = f.read_object().map_err(missing)?;
        let mut maps = LocalMaps::new();
        let helpers = Arc::new(helpers::standard_registry(maps.table(), TraceSink::from_fn(|_| {})));
        let obj = loader::load_object(&bytes, &mut maps, &helpers)?;
        let p = obj.programs.into_iter().next().ok_or_else(|| BenchError::FixtureMissing(format!("{name}: no program")))?;
        Ok(Kernel { name: name.to_string(), exe: p.executable, helpers, _maps: maps })
    }

    /// Runs on `engine`; SFI is on exactly when the verifier deferred
    /// memory proofs to it.
    pub fn run(
        &self,
        engine: &dyn Engine,
        input: &mut KernelInput,
        regs: &mut [u64; PT_REGS_SIZE / 8],
        ctx: &mut ExecutionContext,
    ) -> Result<u64, BenchError> {
        input.prepare(&self.name, regs, ctx);
        ctx.set_sfi_mode(self.exe.requires_sfi());
        engine.execute(&self.exe, ctx, &self.helpers).map_err(|err| BenchError::Exec {
            kernel: self.name.clone(),
            input: input.describe(&self.name),
            err,
        })
    }

    /// Runs engine and native twin on `input`, comparing return values and,
    /// for memcpy, the copied bytes.
    pub fn cross_check(
        &self,
        engine: &dyn Engine,
        input: &mut KernelInput,
        regs: &mut [u64; PT_REGS_SIZE / 8],
        ctx: &mut ExecutionContext,
    ) -> Result<u64, BenchError> {
        input.dst.fill(0);
        let want = input.native(&self.name);
        let len = input.dst.len();
        let native_dst = std::mem::replace(&mut input.dst, vec![0; len]);
        let got = self.run(engine, input, regs, ctx)?;
        let mismatch = |got, want| BenchError::Mismatch {
            kernel: self.name.clone(),
            engine: engine.name().to_string(),
            input: input.describe(&self.name),
            got,
            want,
        };
        if got != want {
            return Err(mismatch(got, want));
        }
        if input.dst != native_dst {
            let at = input.dst.iter().zip(&native_dst).position(|(a, b)| a != b).unwrap_or(0);
            return Err(mismatch(input.dst[at] as u64, native_dst[at] as u64));
        }
        Ok(got)
    }
}

/// Engine variants available in this build.
pub fn engines() -> Vec<Box<dyn Engine>> {
    vec![Box::new(Interpreter)]
}

/// Cross-checks `n` random inputs of every kernel on every engine.
/// Returns the number of inputs checked per kernel.
pub fn vm_differential(manifest: &FixtureManifest, n: usize, seed: u64) -> Result<Vec<(String, usize)>, BenchError> {
    let mut out = Vec::new();
    let mut regs = [0u64; PT_REGS_SIZE / 8];
    let mut ctx = ExecutionContext::new();
    for name in VM_KERNELS {
        let k = Kernel::load(manifest, name)?;
        let mut rng = StdRng::seed_from_u64(seed);
        for engine in engines() {
            for _ in 0..n {
                let mut input = KernelInput::random(name, &mut rng);
                k.cross_check(engine.as_ref(), &mut input, &mut regs, &mut ctx)?;
            }
        }
        out.push((name.to_string(), n));
    }
    Ok(out)
}

/// Times every kernel natively and on each engine. Inputs rotate through a
/// fixed random set, and every engine result is checked against the native
/// result.
pub fn bench_vm_suite(manifest: &FixtureManifest, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    const INPUTS: usize = 64;
    let mut report = BenchReport::default();
    let mut regs = [0u64; PT_REGS_SIZE / 8];
    let mut ctx = ExecutionContext::new();
    for name in VM_KERNELS {
        let k = Kernel::load(manifest, name)?;
        let mut rng = StdRng::seed_from_u64(0xbe7c);
        let mut inputs: Vec<KernelInput> = (0..INPUTS).map(|_| KernelInput::random(name, &mut rng)).collect();
        let expected: Vec<u64> = inputs.iter_mut().map(|i| i.native(name)).collect();

        let timing = measure(cfg, |i| {
            black_box(black_box(&mut inputs[i % INPUTS]).native(name));
        });
        report.vm.push(VmRow { name: name.to_string(), variant: "native".into(), timing, checked: 0 });

        for engine in engines() {
            let mut failure = None;
            let mut checked = 0u64;
            let timing = measure(cfg, |i| {
                let j = i % INPUTS;
                match k.run(engine.as_ref(), &mut inputs[j], &mut regs, &mut ctx) {
                    Ok(got) if got == expected[j] => checked += 1,
                    Ok(got) => {
                        failure.get_or_insert(BenchError::Mismatch {
                            kernel: name.to_string(),
                            engine: engine.name().to_string(),
                            input: inputs[j].describe(name),
                            got,
                            want: expected[j],
                        });
                    }
                    Err(e) => {
                        failure.get_or_insert(e);
                    }
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            report.vm.push(VmRow { name: name.to_string(), variant: engine.name().to_string(), timing, checked });
        }
    }
    Ok(report)
}

/// Returns 0 and touches nothing: the probe under test costs only dispatch.
fn empty_program(ctx: &AttachSpec) -> Result<Arc<Executable>, BenchError> {
    let p = asm::program("empty", &[&[asm::mov64_imm(0, 0), asm::exit()]]);
    let cfg = crate::verifier::VerifyConfig::default().with_context(ctx.context_layout());
    let exe = Executable::new(p, &MapTable::new(), &cfg).map_err(|e| BenchError::FixtureMissing(e.to_string()))?;
    Ok(Arc::new(exe))
}

fn quiet_helpers() -> Arc<HelperRegistry> {
    Arc::new(helpers::standard_registry(MapTable::new(), TraceSink::from_fn(|_| {})))
}

fn call_add(i: usize) {
    black_box(unsafe { demo::demo_add(black_box(i as i64), 1) });
}

fn function_row(kind: AttachKind, cfg: &BenchConfig) -> Result<ProbeRow, BenchError> {
    let target = demo::symbol("add").ok_or_else(|| BenchError::FixtureMissing("demo add".into()))?;
    let spec = match kind {
        AttachKind::Uprobe => AttachSpec::uprobe("self", "demo_add"),
        _ => AttachSpec::uretprobe("self", "demo_add"),
    };
    let base = measure(cfg, call_add);
    let mut hook = attach::attach_function(target, kind, empty_program(&spec)?, quiet_helpers())?;
    let hooked = measure(cfg, call_add);
    let runs = hook.stats().runs();
    hook.detach()?;
    let kind = if kind == AttachKind::Uprobe { ProbeKind::Uprobe } else { ProbeKind::Uretprobe };
    if runs < cfg.iterations() {
        return Ok(ProbeRow { kind, path: "patch".into(), timing: None, skipped: Some(format!("hook ran {runs} times")) });
    }
    Ok(ProbeRow { kind, path: "patch".into(), timing: Some(hooked.minus(base)), skipped: None })
}

fn syscall_row(cfg: &BenchConfig) -> Result<ProbeRow, BenchError> {
    let nr = attach::syscall::syscall_number("getpid").expect("getpid is a syscall");
    let spec = AttachSpec::syscall(AttachKind::SyscallEnter, "getpid");
    let getpid = |_| {
        black_box(unsafe { demo::demo_getpid() });
    };
    let base = measure(cfg, getpid);
    let mut hook = attach::attach_syscall(nr, AttachKind::SyscallEnter, empty_program(&spec)?, quiet_helpers())?;
    let row = if attach::syscall::install_zero_page().is_ok() {
        let r = demo::region();
        let code = unsafe { std::slice::from_raw_parts(r.start as *const u8, r.len()) };
        let plan = attach::plan_syscall_rewrite(code, r.start as u64)?;
        let mut rw = unsafe { attach::rewrite_syscalls(&plan)? };
        let hooked = measure(cfg, getpid);
        rw.restore()?;
        ProbeRow { kind: ProbeKind::SyscallDispatch, path: "rewrite".into(), timing: Some(hooked.minus(base)), skipped: None }
    } else {
        // No zero page: route through the dispatch table instead.
        let hooked = measure(cfg, |_| {
            black_box(attach::syscall::invoke(nr as u64, [0; 6]));
        });
        ProbeRow { kind: ProbeKind::SyscallDispatch, path: "table".into(), timing: Some(hooked.minus(base)), skipped: None }
    };
    let runs = hook.stats().runs();
    hook.detach();
    if runs < cfg.iterations() {
        return Ok(ProbeRow { timing: None, skipped: Some(format!("hook ran {runs} times")), ..row });
    }
    Ok(row)
}

fn embedded_row(cfg: &BenchConfig) -> Result<ProbeRow, BenchError> {
    let spec = AttachSpec::uprobe("self", "demo_add");
    let exe = empty_program(&spec)?;
    let helpers = quiet_helpers();
    let mut regs = [0u64; PT_REGS_SIZE / 8];
    let mut ctx = ExecutionContext::new();
    let timing = measure(cfg, |i| {
        regs[0] = i as u64;
        ctx.set_context(regs.as_mut_ptr() as *mut u8, PT_REGS_SIZE, 0..0);
        black_box(crate::engine::execute(&exe, &mut ctx, &helpers).ok());
    });
    Ok(ProbeRow { kind: ProbeKind::Embedded, path: "direct".into(), timing: Some(timing), skipped: None })
}

/// Probe dispatch latency with an empty program. Patches live code, so no
/// other thread may be inside the demo target meanwhile.
pub fn bench_probe_suite(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let probes = if cfg!(target_arch = "x86_64") {
        vec![function_row(AttachKind::Uprobe, cfg)?, function_row(AttachKind::Uretprobe, cfg)?, syscall_row(cfg)?, embedded_row(cfg)?]
    } else {
        let skip = |kind| ProbeRow { kind, path: "patch".into(), timing: None, skipped: Some("PlatformUnsupported".into()) };
        vec![skip(ProbeKind::Uprobe), skip(ProbeKind::Uretprobe), skip(ProbeKind::SyscallDispatch), embedded_row(cfg)?]
    };
    Ok(BenchReport { vm: Vec::new(), probes })
}

pub fn run_suite(suite: &str, manifest: &FixtureManifest, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    match suite {
        "vm" => bench_vm_suite(manifest, cfg),
        "probe" => bench_probe_suite(cfg),
        "all" => {
            let mut r = bench_vm_suite(manifest, cfg)?;
            r.probes = bench_probe_suite(cfg)?.probes;
            Ok(r)
        }
        other => Err(BenchError::UnknownSuite(other.to_string())),
    }
}
