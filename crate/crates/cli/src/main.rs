//! `uebpf`: load, attach, run and benchmark eBPF objects in userspace.
//!
//! Exit status: 0 on success, 1 when a program, hook or benchmark fails at
//! run time, 2 for bad arguments or inputs the runtime refuses.

use std::ffi::CString;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use uebpf::attach::{self, AttachKind, Attachment, PT_REGS_SIZE};
use uebpf::bench::{self, BenchConfig, BenchError};
use uebpf::control::{Command, ControlError, RegistryConfig, SharedRegistry};
use uebpf::engine::{execute, ExecutionContext, HelperRegistry, TraceSink};
use uebpf::fixtures::FixtureManifest;
use uebpf::helpers;
use uebpf::loader::{self, LoadError, LoadedObject, LocalMaps, MapSink};
use uebpf::maps::{Map, MapType};
use uebpf::targets::demo;

#[derive(Parser)]
#[command(name = "uebpf", version, about = "Userspace eBPF runtime")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify and load an object; print map and program handles.
    Load {
        object: PathBuf,
        /// Load into a new shared registry with this id and keep it.
        #[arg(long)]
        registry: Option<String>,
    },
    /// Attach an object's programs at their sections' attach points.
    Attach {
        object: PathBuf,
        /// Create a shared registry with links for agents instead of
        /// attaching in this process.
        #[arg(long)]
        registry: Option<String>,
        /// Built-in workload to run while attached.
        #[arg(long, value_enum, default_value_t = Workload::None)]
        workload: Workload,
        #[arg(long, default_value_t = 1000)]
        count: u64,
    },
    /// Run an object's program once with `--input` as the first argument.
    Run {
        object: PathBuf,
        #[arg(long, default_value_t = 0)]
        input: u64,
        /// Program (function) name; defaults to the first one.
        #[arg(long)]
        program: Option<String>,
    },
    /// Print every map a shared registry names, entries in hex.
    DumpMaps { registry: String },
    /// Run the benchmark suites.
    Bench {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
        #[arg(long, default_value_t = 1000)]
        warmup: usize,
        /// Print `record=` lines instead of a table.
        #[arg(long)]
        records: bool,
        /// Fixture directory holding manifest.txt; defaults to the workspace one.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Workload {
    None,
    /// `count` direct calls to libc malloc, each freed.
    Malloc,
    /// `count` openat/close pairs on /proc/self/status from the demo code.
    Openat,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Runtime(String),
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::VerifyRejected { .. } => Failure::Runtime(e.to_string()),
            e => Failure::Input(e.to_string()),
        }
    }
}

impl From<ControlError> for Failure {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Load(e) => e.into(),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::FixtureMissing(_) | BenchError::UnknownSuite(_) => Failure::Input(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn read_object(path: &PathBuf) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| LoadError::NotAnObjectFile(format!("{}: {e}", path.display())).into())
}

fn hex(b: &[u8]) -> String {
    b.iter().fold(String::with_capacity(b.len() * 2), |mut s, x| {
        let _ = write!(s, "{x:02x}");
        s
    })
}

fn quiet_helpers(sink: &LocalMaps) -> Arc<HelperRegistry> {
    Arc::new(helpers::standard_registry(sink.table(), TraceSink::stderr()))
}

fn load_local(path: &PathBuf) -> Result<(LoadedObject, LocalMaps, Arc<HelperRegistry>), Failure> {
    let bytes = read_object(path)?;
    let mut maps = LocalMaps::new();
    let helpers = quiet_helpers(&maps);
    let obj = loader::load_object(&bytes, &mut maps, &helpers)?;
    Ok((obj, maps, helpers))
}

fn new_registry(id: &str) -> Result<SharedRegistry, Failure> {
    Ok(SharedRegistry::create(id, RegistryConfig { log_capacity: 4 << 20, table_capacity: 4096 })?)
}

fn cmd_load(object: PathBuf, registry: Option<String>) -> Result<(), Failure> {
    match registry {
        Some(id) => {
            let mut reg = new_registry(&id)?;
            let (maps, progs) = reg.load_object(&read_object(&object)?)?;
            reg.persist();
            for h in maps {
                println!("map handle={h}");
            }
            for h in progs {
                println!("prog handle={h}");
            }
        }
        None => {
            let (obj, _maps, _) = load_local(&object)?;
            for m in &obj.maps {
                println!("map handle={} name={} type={}", m.handle, m.name, m.desc.map_type.name());
            }
            for p in &obj.programs {
                let mode = if p.executable.requires_sfi() { "permissive-sfi" } else { "strict" };
                println!("prog name={} section={} insns={} verified={mode}", p.program.name, p.section, p.program.instructions.len());
            }
        }
    }
    Ok(())
}

/// Runs `workload` with hooks in place. Allocation-free between the first
/// and last call so that only the workload itself reaches malloc.
fn run_workload(workload: Workload, count: u64) -> Result<(), Failure> {
    match workload {
        Workload::None => {}
        Workload::Malloc => {
            for i in 0..count {
                unsafe {
                    let p = libc::malloc(16 + (i as usize & 63));
                    std::hint::black_box(p);
                    libc::free(p);
                }
            }
        }
        Workload::Openat => {
            let path = CString::new("/proc/self/status").expect("no NUL");
            let n = unsafe { demo::demo_open_loop(path.as_ptr(), count as i64) };
            if n != count as i64 {
                return Err(runtime(format!("open loop completed {n} of {count} opens")));
            }
        }
    }
    Ok(())
}

fn cmd_attach(object: PathBuf, registry: Option<String>, workload: Workload, count: u64) -> Result<(), Failure> {
    if let Some(id) = registry {
        let mut reg = new_registry(&id)?;
        let (_, progs) = reg.load_object(&read_object(&object)?)?;
        for prog in progs {
            let link = reg.handle_command(Command::LinkCreate { prog, attach: None })?;
            println!("link handle={} prog={prog}", link.handle().unwrap_or(0));
        }
        reg.persist();
        return Ok(());
    }

    let (obj, maps, helpers) = load_local(&object)?;
    let needs_rewrite = obj.programs.iter().any(|p| matches!(p.attach.kind, AttachKind::SyscallEnter | AttachKind::SyscallExit));
    let mut rewrite = None;
    if needs_rewrite && workload != Workload::None {
        // The workload's syscalls live in the demo code; route them through
        // the dispatcher.
        attach::syscall::install_zero_page().map_err(runtime)?;
        let r = demo::region();
        let code = unsafe { std::slice::from_raw_parts(r.start as *const u8, r.len()) };
        let plan = attach::plan_syscall_rewrite(code, r.start as u64).map_err(runtime)?;
        rewrite = Some(unsafe { attach::rewrite_syscalls(&plan) }.map_err(runtime)?);
    }
    let mut hooks: Vec<Attachment> = Vec::with_capacity(obj.programs.len());
    for p in &obj.programs {
        hooks.push(attach::attach(&p.attach, p.executable.clone(), helpers.clone()).map_err(runtime)?);
    }
    let result = run_workload(workload, count);
    for h in &mut hooks {
        h.detach().map_err(runtime)?;
    }
    if let Some(mut rw) = rewrite {
        rw.restore().map_err(runtime)?;
    }
    result?;

    println!("pid={}", std::process::id());
    for (p, h) in obj.programs.iter().zip(&hooks) {
        let s = h.stats();
        println!("hook program={} runs={} errors={}", p.program.name, s.runs(), s.errors());
        if s.errors() > 0 {
            return Err(runtime(format!("{}: {:?}", p.program.name, s.last_error())));
        }
    }
    for m in &obj.maps {
        let map = maps.table().get(m.handle).map_err(runtime)?;
        print_map(&m.name, m.handle, &map)?;
    }
    Ok(())
}

fn print_map(name: &str, handle: u32, map: &Map) -> Result<(), Failure> {
    let desc = map.descriptor();
    println!("map handle={handle} name={name} type={}", desc.map_type.name());
    if desc.map_type == MapType::RingBuf {
        let mut err = Ok(());
        map.ringbuf_consume(|rec| println!("  event={}", hex(rec))).map_err(runtime).unwrap_or_else(|e| {
            err = Err(e);
            0
        });
        return err;
    }
    for (k, v) in map.entries().map_err(runtime)? {
        println!("  key={} value={}", hex(&k), hex(&v));
    }
    Ok(())
}

fn cmd_run(object: PathBuf, input: u64, program: Option<String>) -> Result<(), Failure> {
    let (obj, _maps, helpers) = load_local(&object)?;
    let p = match &program {
        Some(name) => obj.program(name).ok_or_else(|| Failure::Input(format!("no program {name}")))?,
        None => obj.programs.first().ok_or_else(|| Failure::Input("object has no programs".into()))?,
    };
    let mut regs = [0u64; PT_REGS_SIZE / 8];
    regs[attach::regs::RDI / 8] = input;
    let mut ctx = ExecutionContext::new();
    ctx.set_context(regs.as_mut_ptr() as *mut u8, PT_REGS_SIZE, 0..0);
    ctx.set_sfi_mode(p.executable.requires_sfi());
    let r = execute(&p.executable, &mut ctx, &helpers).map_err(runtime)?;
    println!("{r}");
    Ok(())
}

fn cmd_dump_maps(id: String) -> Result<(), Failure> {
    let reg = SharedRegistry::open(&id).map_err(|e| Failure::Input(e.to_string()))?;
    let view = reg.replay()?;
    for (handle, m) in &view.maps {
        let map = Map::open(&m.segment).map_err(runtime)?;
        if m.desc.map_type == MapType::RingBuf {
            println!("map handle={handle} name={} type=ringbuf pending={}", m.desc.name, map.ringbuf_pending().map_err(runtime)?);
            continue;
        }
        print_map(&m.desc.name, *handle, &map)?;
    }
    Ok(())
}

fn cmd_bench(
    suite: String,
    cfg: BenchConfig,
    records: bool,
    manifest: Option<PathBuf>,
) -> Result<(), Failure> {
    let manifest = match manifest {
        Some(p) => FixtureManifest::load(&p),
        None => FixtureManifest::load_default(),
    }
    .map_err(|e| Failure::Input(e.to_string()))?;
    let report = bench::run_suite(&suite, &manifest, &cfg)?;
    if records {
        print!("{}", report.to_records());
    } else {
        print!("{}", report.human_table());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let r = match cli.cmd {
        Cmd::Load { object, registry } => cmd_load(object, registry),
        Cmd::Attach { object, registry, workload, count } => cmd_attach(object, registry, workload, count),
        Cmd::Run { object, input, program } => cmd_run(object, input, program),
        Cmd::DumpMaps { registry } => cmd_dump_maps(registry),
        Cmd::Bench { suite, batches, batch_size, warmup, records, manifest } => {
            cmd_bench(suite, BenchConfig { batches, batch_size, warmup }, records, manifest)
        }
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
