//! Differential fuzzing of verifier plus engine: mutate accepted programs,
//! keep the mutants the verifier still accepts, run them with SFI shadow
//! checks on and classify every outcome.

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::corpus;
use uebpf::engine::{execute, ExecError, Executable, ExecutionContext, HelperRegistry, TraceSink};
use uebpf::fixtures::FixtureManifest;
use uebpf::helpers;
use uebpf::isa::{self, Program, BPF_CALL, BPF_JMP, PSEUDO_CALL};
use uebpf::loader::{self, LocalMaps, MapSink};
use uebpf::maps::{Map, MapDescriptor, MapTable, MapType};
use uebpf::verifier::{Strictness, VerifyConfig};

use super::workloads::segment;

pub struct Seed {
    pub name: String,
    pub program: Program,
    pub config: VerifyConfig,
    pub maps: Arc<MapTable>,
    pub helpers: Arc<HelperRegistry>,
    pub ctx_len: usize,
}

fn quiet_helpers(maps: Arc<MapTable>) -> Arc<HelperRegistry> {
    Arc::new(helpers::standard_registry(maps, TraceSink::from_fn(|_| {})))
}

/// Maps backing every handle the hand-built corpus refers to.
fn corpus_maps() -> Arc<MapTable> {
    let table = MapTable::new();
    for (handle, info) in &corpus::config().maps {
        let desc = match info.map_type {
            MapType::RingBuf => MapDescriptor::ringbuf(info.max_entries, "rb"),
            t => {
                let mut d = MapDescriptor::new(t, info.key_size, info.value_size, info.max_entries, "m");
                if info.read_only {
                    d.flags |= uebpf::maps::F_RDONLY_PROG;
                }
                d
            }
        };
        table.insert(*handle, Arc::new(Map::create(&desc, &segment("fz")).unwrap()));
    }
    table
}

/// Valid hand-built programs plus every fixture program.
pub fn seeds() -> Vec<Seed> {
    let maps = corpus_maps();
    let helpers = quiet_helpers(maps.clone());
    let mut out: Vec<Seed> = corpus::valid()
        .into_iter()
        .map(|c| Seed {
            name: c.name.to_string(),
            ctx_len: c.config.context.size as usize,
            config: c.config.with_strictness(Strictness::PermissiveSfi),
            program: c.program,
            maps: maps.clone(),
            helpers: helpers.clone(),
        })
        .collect();
    for f in FixtureManifest::load_default().unwrap().fixtures {
        let mut local = LocalMaps::new();
        let helpers = quiet_helpers(local.table());
        let obj = loader::load_object(&f.read_object().unwrap(), &mut local, &helpers).unwrap();
        for p in obj.programs {
            let config = loader::verify_config(&p.attach, &helpers);
            out.push(Seed {
                name: format!("{}:{}", f.name, p.section),
                ctx_len: config.context.size as usize,
                program: p.program,
                config,
                maps: local.table(),
                helpers: helpers.clone(),
            });
        }
    }
    out
}

fn mutate(rng: &mut StdRng, p: &Program) -> Option<Program> {
    let mut insns = p.instructions.clone();
    for _ in 0..rng.gen_range(1..=3) {
        let i = rng.gen_range(0..insns.len());
        let ins = &mut insns[i];
        match rng.gen_range(0..8) {
            0 => ins.opcode = rng.gen(),
            1 => ins.dst = rng.gen_range(0..11),
            2 => ins.src = rng.gen_range(0..11),
            3 => ins.offset = rng.gen_range(-600..600),
            4 => ins.offset = ins.offset.wrapping_add(rng.gen_range(-9..=9)),
            5 => ins.imm = rng.gen(),
            6 => ins.imm = ins.imm.wrapping_add(rng.gen_range(-9..=9)),
            _ => {
                let j = rng.gen_range(0..insns.len());
                insns.swap(i, j);
            }
        }
    }
    isa::decode(&p.name, &isa::encode(&Program::new(p.name.clone(), insns))).ok()
}

/// Helper calls whose results vary between runs.
fn nondeterministic(p: &Program) -> bool {
    p.instructions.iter().any(|i| {
        (i.opcode == BPF_JMP | BPF_CALL && i.src != PSEUDO_CALL && i.imm == 5) || i.is_wide_load() && i.src != 0
    })
}

#[derive(Debug, Default, Clone)]
pub struct FuzzOutcome {
    pub attempts: usize,
    pub executed: usize,
    pub strict: usize,
    pub permissive: usize,
    pub ok: usize,
    /// Violations in programs only permissive mode accepted: the engine
    /// caught what the verifier deferred.
    pub explained_violations: usize,
    pub budget_exhausted: usize,
    pub other_errors: usize,
    /// Violations or budget hits in strict-proven programs.
    pub unexplained: Vec<String>,
    /// Strict-proven programs whose result changed with SFI off.
    pub sfi_mismatches: Vec<String>,
}

impl FuzzOutcome {
    pub fn sound(&self) -> bool {
        self.unexplained.is_empty() && self.sfi_mismatches.is_empty()
    }
}

/// Runs until `target` accepted mutants have executed.
pub fn run(target: usize, seed: u64) -> FuzzOutcome {
    let seeds = seeds();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = FuzzOutcome::default();
    let mut ctx_buf = vec![0u8; 4096];
    let mut ectx = ExecutionContext::new();
    ectx.set_budget(200_000);
    // The attempt cap only guards against a corpus that stops producing
    // accepted mutants.
    while out.executed < target && out.attempts < target * 50 {
        out.attempts += 1;
        let s = &seeds[rng.gen_range(0..seeds.len())];
        let Some(p) = mutate(&mut rng, &s.program) else { continue };
        let Ok(exe) = Executable::new(p, &s.maps, &s.config) else { continue };
        out.executed += 1;
        let strict = !exe.requires_sfi();
        if strict {
            out.strict += 1;
        } else {
            out.permissive += 1;
        }
        rng.fill(&mut ctx_buf[..s.ctx_len]);
        let writable = s.config.context.writable.start as usize..s.config.context.writable.end as usize;
        ectx.clear_regions();
        ectx.set_context(ctx_buf.as_mut_ptr(), s.ctx_len, writable.clone());
        ectx.set_sfi_mode(true);
        let before = ctx_buf[..s.ctx_len].to_vec();
        let shadow = execute(&exe, &mut ectx, &s.helpers);
        match (&shadow, strict) {
            (Ok(_), _) => out.ok += 1,
            (Err(ExecError::SfiViolation { .. }), false) => out.explained_violations += 1,
            (Err(ExecError::BudgetExhausted { .. }), false) => out.budget_exhausted += 1,
            (Err(e @ (ExecError::SfiViolation { .. } | ExecError::BudgetExhausted { .. })), true) => {
                out.unexplained.push(format!("{}: {e}\n{}", s.name, isa::disassemble(exe.program())))
            }
            (Err(_), _) => out.other_errors += 1,
        }
        if strict && !nondeterministic(exe.program()) {
            ctx_buf[..s.ctx_len].copy_from_slice(&before);
            ectx.set_context(ctx_buf.as_mut_ptr(), s.ctx_len, writable);
            ectx.set_sfi_mode(false);
            let plain = execute(&exe, &mut ectx, &s.helpers);
            if plain != shadow {
                out.sfi_mismatches.push(format!("{}: {shadow:?} vs {plain:?}", s.name));
            }
        }
    }
    out
}
