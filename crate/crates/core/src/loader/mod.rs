//! Loading of relocatable eBPF object files.
//!
//! Maps come from legacy `bpf_map_def` records in the `maps` (or `.maps`)
//! section. `lddw` relocations against map symbols become map handles;
//! relocations against `.rodata*` become pointers into a read-only array
//! map holding a copy of the section. Calls to undefined symbols resolve to
//! FFI functions registered by name, and calls into `.text` pull the
//! subprograms into the calling program.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use object::{Object, ObjectSection, ObjectSymbol, RelocationFlags, RelocationTarget, SectionIndex, SymbolKind};
use thiserror::Error;

use crate::attach::{AttachSpec, UnknownSectionConvention};
use crate::engine::{EngineError, Executable, HelperRegistry};
use crate::isa::{self, DecodeError, Instruction, Program, INSN_SIZE};
use crate::maps::{Map, MapDescriptor, MapError, MapHandle, MapTable, MapType, F_RDONLY_PROG, NAME_LEN};
use crate::verifier::{Strictness, VerifyConfig, VerifyReport};

const R_BPF_64_64: u32 = 1;
const R_BPF_64_32: u32 = 10;
/// `struct bpf_map_def`: five u32 fields.
const MAP_DEF_SIZE: usize = 20;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("NotAnObjectFile: {0}")]
    NotAnObjectFile(String),
    #[error("UnsupportedMachine: {0}")]
    UnsupportedMachine(String),
    #[error("UnresolvedFfi: {0}")]
    UnresolvedFfi(String),
    #[error("VerifyRejected: {section}: {report}")]
    VerifyRejected { section: String, report: Box<VerifyReport> },
    #[error(transparent)]
    UnknownSectionConvention(#[from] UnknownSectionConvention),
    #[error("UnknownSymbol: {0}")]
    UnknownSymbol(String),
    #[error("BadRelocation: {section}+{offset:#x}: {why}")]
    BadRelocation { section: String, offset: u64, why: String },
    #[error("BadMapDefinition: {name}: {why}")]
    BadMapDefinition { name: String, why: String },
    #[error("decoding {section}: {source}")]
    Decode { section: String, source: DecodeError },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Engine(EngineError),
}

/// A map declared by the object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapDef {
    pub symbol: String,
    pub desc: MapDescriptor,
}

/// A read-only data section copied into an array map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSection {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Target {
    Map(String),
    Data { section: String, offset: u64 },
    /// Instruction index within `.text`.
    Subprog(usize),
    Ffi(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Reloc {
    index: usize,
    target: Target,
}

/// A program as found in the object, before relocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawProgram {
    pub section: String,
    pub name: String,
    pub attach: AttachSpec,
    pub instructions: Vec<Instruction>,
    relocs: Vec<Reloc>,
}

/// Everything read from an object file.
#[derive(Debug, Clone, Default)]
pub struct ParsedObject {
    pub license: Option<String>,
    pub maps: Vec<MapDef>,
    pub data: Vec<DataSection>,
    pub programs: Vec<RawProgram>,
    /// Code sections without a known attach convention.
    pub skipped: Vec<UnknownSectionConvention>,
    text: Vec<Instruction>,
    text_relocs: Vec<Reloc>,
}

fn bad_reloc(section: &str, offset: u64, why: impl Into<String>) -> LoadError {
    LoadError::BadRelocation { section: section.to_string(), offset, why: why.into() }
}

fn decode_slots(section: &str, bytes: &[u8]) -> Result<Vec<Instruction>, LoadError> {
    isa::decode(section, bytes)
        .map(|p| p.instructions)
        .map_err(|source| LoadError::Decode { section: section.to_string(), source })
}

fn map_name(symbol: &str) -> String {
    let mut end = symbol.len().min(NAME_LEN);
    while !symbol.is_char_boundary(end) {
        end -= 1;
    }
    symbol[..end].to_string()
}

/// Reads the relocations of one code section. `base` is the section
/// offset of the first instruction of interest.
fn section_relocs(
    file: &object::File<'_>,
    section: &object::Section<'_, '_>,
    insns: &[Instruction],
    base: u64,
    sections: &HashMap<SectionIndex, String>,
) -> Result<Vec<Reloc>, LoadError> {
    let sname = section.name().unwrap_or("?").to_string();
    let mut out = Vec::new();
    for (offset, rel) in section.relocations() {
        if offset < base || offset >= base + (insns.len() * INSN_SIZE) as u64 {
            continue;
        }
        if (offset - base) % INSN_SIZE as u64 != 0 {
            return Err(bad_reloc(&sname, offset, "not instruction aligned"));
        }
        let index = ((offset - base) / INSN_SIZE as u64) as usize;
        let insn = insns[index];
        let r_type = match rel.flags() {
            RelocationFlags::Elf { r_type } => r_type,
            other => return Err(bad_reloc(&sname, offset, format!("unexpected flags {other:?}"))),
        };
        let RelocationTarget::Symbol(si) = rel.target() else {
            return Err(bad_reloc(&sname, offset, "target is not a symbol"));
        };
        let sym = file
            .symbol_by_index(si)
            .map_err(|e| bad_reloc(&sname, offset, e.to_string()))?;
        let sym_name = sym.name().unwrap_or("").to_string();
        let target_section = sym.section_index().and_then(|i| sections.get(&i)).map(String::as_str);
        let target = match r_type {
            R_BPF_64_64 => {
                if !insn.is_wide_load() {
                    return Err(bad_reloc(&sname, offset, "64-bit relocation on a non-lddw slot"));
                }
                match target_section {
                    Some("maps" | ".maps") => Target::Map(sym_name),
                    Some(s) if s.starts_with(".rodata") => Target::Data {
                        section: s.to_string(),
                        offset: sym.address().wrapping_add(insn.imm as u32 as u64),
                    },
                    Some(s) => return Err(bad_reloc(&sname, offset, format!("data in unsupported section {s}"))),
                    None => return Err(LoadError::UnknownSymbol(sym_name)),
                }
            }
            R_BPF_64_32 => {
                if insn.opcode != isa::BPF_JMP | isa::BPF_CALL || insn.src != isa::PSEUDO_CALL {
                    return Err(bad_reloc(&sname, offset, "call relocation on a non-call slot"));
                }
                if sym.is_undefined() {
                    Target::Ffi(sym_name)
                } else if target_section == Some(".text") {
                    let idx = (sym.address() / INSN_SIZE as u64) as i64 + insn.imm as i64 + 1;
                    Target::Subprog(usize::try_from(idx).map_err(|_| bad_reloc(&sname, offset, "call before .text"))?)
                } else {
                    return Err(bad_reloc(&sname, offset, "call into a section other than .text"));
                }
            }
            t => return Err(bad_reloc(&sname, offset, format!("relocation type {t}"))),
        };
        out.push(Reloc { index, target });
    }
    Ok(out)
}

/// Parses an object file without creating anything.
pub fn parse_object(bytes: &[u8]) -> Result<ParsedObject, LoadError> {
    if bytes.is_empty() {
        return Err(LoadError::NotAnObjectFile("empty input".into()));
    }
    let file = object::File::parse(bytes).map_err(|e| LoadError::NotAnObjectFile(e.to_string()))?;
    if file.format() != object::BinaryFormat::Elf {
        return Err(LoadError::NotAnObjectFile(format!("{:?} object", file.format())));
    }
    if file.architecture() != object::Architecture::Bpf {
        return Err(LoadError::UnsupportedMachine(format!("{:?}", file.architecture())));
    }
    if !file.is_little_endian() {
        return Err(LoadError::UnsupportedMachine("big-endian BPF".into()));
    }
    let sections: HashMap<SectionIndex, String> =
        file.sections().map(|s| (s.index(), s.name().unwrap_or("").to_string())).collect();
    let mut out = ParsedObject::default();

    for section in file.sections() {
        let name = section.name().unwrap_or("").to_string();
        let data = section.data().map_err(|e| LoadError::NotAnObjectFile(e.to_string()))?;
        match name.as_str() {
            "license" => {
                let end = data.iter().position(|&b| b == 0).unwrap_or(data.len());
                out.license = Some(String::from_utf8_lossy(&data[..end]).into_owned());
            }
            "maps" | ".maps" => {
                let mut syms: Vec<_> = file
                    .symbols()
                    .filter(|s| s.section_index() == Some(section.index()) && s.kind() != SymbolKind::Section)
                    .collect();
                syms.sort_by_key(|s| s.address());
                for sym in syms {
                    let sname = sym.name().unwrap_or("").to_string();
                    let at = sym.address() as usize;
                    let rec = data.get(at..at + MAP_DEF_SIZE).ok_or_else(|| LoadError::BadMapDefinition {
                        name: sname.clone(),
                        why: "record shorter than bpf_map_def".into(),
                    })?;
                    let f = |i: usize| u32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
                    let map_type = MapType::from_raw(f(0)).ok_or_else(|| LoadError::BadMapDefinition {
                        name: sname.clone(),
                        why: format!("unsupported map type {}", f(0)),
                    })?;
                    let mut desc = MapDescriptor::new(map_type, f(1), f(2), f(3), &map_name(&sname));
                    desc.flags = f(4) & F_RDONLY_PROG;
                    desc.validate().map_err(|e| LoadError::BadMapDefinition { name: sname.clone(), why: e.to_string() })?;
                    out.maps.push(MapDef { symbol: sname, desc });
                }
            }
            n if n.starts_with(".rodata") => {
                out.data.push(DataSection { name: n.to_string(), bytes: data.to_vec() });
            }
            ".text" => {
                if !data.is_empty() {
                    out.text = decode_slots(&name, data)?;
                    out.text_relocs = section_relocs(&file, &section, &out.text, 0, &sections)?;
                }
            }
            _ if section.kind() == object::SectionKind::Text && !data.is_empty() => {
                let attach = match AttachSpec::parse(&name) {
                    Ok(a) => a,
                    Err(e) => {
                        out.skipped.push(e);
                        continue;
                    }
                };
                let mut funcs: Vec<_> = file
                    .symbols()
                    .filter(|s| {
                        s.section_index() == Some(section.index()) && s.kind() == SymbolKind::Text && s.is_global()
                    })
                    .map(|s| (s.address(), s.size(), s.name().unwrap_or("").to_string()))
                    .collect();
                funcs.sort();
                if funcs.is_empty() {
                    funcs.push((0, data.len() as u64, name.clone()));
                }
                for (addr, size, fname) in funcs {
                    let size = if size == 0 { data.len() as u64 - addr } else { size };
                    let slice = data
                        .get(addr as usize..(addr + size) as usize)
                        .ok_or_else(|| LoadError::NotAnObjectFile(format!("{fname} outside its section")))?;
                    let instructions = decode_slots(&name, slice)?;
                    let relocs = section_relocs(&file, &section, &instructions, addr, &sections)?;
                    out.programs.push(RawProgram {
                        section: name.clone(),
                        name: fname,
                        attach: attach.clone(),
                        instructions,
                        relocs,
                    });
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

impl ParsedObject {
    /// Data sections referenced by any program, in first-use order.
    pub fn referenced_data(&self) -> Vec<&DataSection> {
        let mut names: Vec<&str> = Vec::new();
        let relocs = self.programs.iter().flat_map(|p| p.relocs.iter()).chain(&self.text_relocs);
        for r in relocs {
            if let Target::Data { section, .. } = &r.target {
                if !names.contains(&section.as_str()) {
                    names.push(section);
                }
            }
        }
        names.iter().filter_map(|n| self.data.iter().find(|d| d.name == *n)).collect()
    }

    /// Applies relocations to program `index`. `handles` maps map symbols
    /// and data section names to handles. Returns the program and the
    /// number of relocations applied.
    pub fn link(
        &self,
        index: usize,
        handles: &BTreeMap<String, MapHandle>,
        helpers: &HelperRegistry,
    ) -> Result<(Program, usize), LoadError> {
        let raw = &self.programs[index];
        let mut insns = raw.instructions.clone();
        let needs_text = raw.relocs.iter().any(|r| matches!(r.target, Target::Subprog(_)));
        let text_base = insns.len();
        let mut relocs: Vec<Reloc> = raw.relocs.clone();
        if needs_text {
            insns.extend_from_slice(&self.text);
            relocs.extend(
                self.text_relocs.iter().map(|r| Reloc { index: r.index + text_base, target: r.target.clone() }),
            );
        }
        let data_size = |name: &str| self.data.iter().find(|d| d.name == name).map(|d| d.bytes.len() as u64);
        for r in &relocs {
            let i = r.index;
            match &r.target {
                Target::Map(sym) => {
                    let h = *handles.get(sym).ok_or_else(|| LoadError::UnknownSymbol(sym.clone()))?;
                    insns[i].src = isa::PSEUDO_MAP_FD;
                    insns[i].imm = h as i32;
                    insns[i + 1].imm = 0;
                }
                Target::Data { section, offset } => {
                    let h = *handles.get(section).ok_or_else(|| LoadError::UnknownSymbol(section.clone()))?;
                    if *offset >= data_size(section).unwrap_or(0) {
                        return Err(bad_reloc(&raw.section, (i * INSN_SIZE) as u64, "offset past end of data"));
                    }
                    insns[i].src = isa::PSEUDO_MAP_VALUE;
                    insns[i].imm = h as i32;
                    insns[i + 1].imm = *offset as i32;
                }
                Target::Subprog(t) => {
                    if *t >= self.text.len() {
                        return Err(bad_reloc(&raw.section, (i * INSN_SIZE) as u64, "call past end of .text"));
                    }
                    insns[i].imm = (text_base + t) as i32 - (i as i32 + 1);
                }
                Target::Ffi(name) => {
                    let id = helpers.ffi_id(name).ok_or_else(|| LoadError::UnresolvedFfi(name.clone()))?;
                    insns[i].src = 0;
                    insns[i].imm = id as i32;
                }
            }
        }
        Ok((Program::new(raw.name.clone(), insns), relocs.len()))
    }
}

/// Creates maps on behalf of the loader.
pub trait MapSink {
    fn create_map(&mut self, desc: &MapDescriptor) -> Result<MapHandle, LoadError>;
    /// Writes `bytes` as entry 0 of an array map created for a data section.
    fn init_data(&mut self, handle: MapHandle, bytes: &[u8]) -> Result<(), LoadError>;
    fn table(&self) -> Arc<MapTable>;
}

/// Maps private to this process, in segments named
/// `uebpf_<pid>_<seq>_<map-name>`.
#[derive(Debug)]
pub struct LocalMaps {
    table: Arc<MapTable>,
    next: MapHandle,
}

impl Default for LocalMaps {
    fn default() -> Self {
        Self::new()
    }
}

impl LocalMaps {
    pub fn new() -> Self {
        Self { table: MapTable::new(), next: 3 }
    }

    pub fn with_table(table: Arc<MapTable>) -> Self {
        let next = table.handles().last().map_or(3, |h| h + 1);
        Self { table, next }
    }
}

static SEGMENT_SEQ: AtomicUsize = AtomicUsize::new(0);

impl MapSink for LocalMaps {
    fn create_map(&mut self, desc: &MapDescriptor) -> Result<MapHandle, LoadError> {
        let seq = SEGMENT_SEQ.fetch_add(1, Ordering::Relaxed);
        let seg = format!("uebpf_{}_{}_{}", std::process::id(), seq, crate::maps::sanitize(&desc.name));
        let map = Map::create(desc, &seg)?;
        let h = self.next;
        self.next += 1;
        self.table.insert(h, Arc::new(map));
        Ok(h)
    }

    fn init_data(&mut self, handle: MapHandle, bytes: &[u8]) -> Result<(), LoadError> {
        let map = self.table.get(handle)?;
        map.update(&0u32.to_le_bytes(), bytes, crate::maps::UpdateFlag::Any)?;
        Ok(())
    }

    fn table(&self) -> Arc<MapTable> {
        self.table.clone()
    }
}

/// A created map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedMap {
    pub name: String,
    pub desc: MapDescriptor,
    pub handle: MapHandle,
}

/// A verified, relocated program.
#[derive(Debug, Clone)]
pub struct LoadedProgram {
    pub section: String,
    pub program: Program,
    pub attach: AttachSpec,
    pub executable: Arc<Executable>,
}

#[derive(Debug, Clone)]
pub struct LoadedObject {
    pub programs: Vec<LoadedProgram>,
    pub maps: Vec<LoadedMap>,
    pub relocations_applied: usize,
    pub license: Option<String>,
    pub skipped: Vec<UnknownSectionConvention>,
}

impl LoadedObject {
    pub fn program(&self, name: &str) -> Option<&LoadedProgram> {
        self.programs.iter().find(|p| p.program.name == name || p.section == name)
    }

    pub fn map(&self, name: &str) -> Option<&LoadedMap> {
        self.maps.iter().find(|m| m.name == name)
    }
}

/// Descriptor of the array map holding a copy of a data section.
pub fn data_map_descriptor(section: &DataSection) -> MapDescriptor {
    let mut desc = MapDescriptor::array(section.bytes.len().max(1) as u32, 1, &map_name(&section.name));
    desc.flags = F_RDONLY_PROG;
    desc
}

/// Creates the maps `parsed` declares plus one per referenced data
/// section, returning handles keyed by symbol or section name.
pub fn create_maps(
    parsed: &ParsedObject,
    sink: &mut dyn MapSink,
) -> Result<(BTreeMap<String, MapHandle>, Vec<LoadedMap>), LoadError> {
    let mut handles = BTreeMap::new();
    let mut maps = Vec::new();
    for def in &parsed.maps {
        let h = sink.create_map(&def.desc)?;
        handles.insert(def.symbol.clone(), h);
        maps.push(LoadedMap { name: def.symbol.clone(), desc: def.desc.clone(), handle: h });
    }
    for data in parsed.referenced_data() {
        let desc = data_map_descriptor(data);
        let h = sink.create_map(&desc)?;
        let mut bytes = data.bytes.clone();
        bytes.resize(desc.value_size as usize, 0);
        sink.init_data(h, &bytes)?;
        handles.insert(data.name.clone(), h);
        maps.push(LoadedMap { name: data.name.clone(), desc, handle: h });
    }
    Ok((handles, maps))
}

/// Verifier settings for a program attached per `attach`, allowing every
/// helper in `helpers`.
pub fn verify_config(attach: &AttachSpec, helpers: &HelperRegistry) -> VerifyConfig {
    let mut cfg = VerifyConfig::default()
        .with_strictness(Strictness::PermissiveSfi)
        .with_context(attach.context_layout());
    cfg.allow_helper_ids.extend(helpers.ids());
    cfg
}

/// Parses `bytes`, creates its maps through `sink`, relocates and verifies
/// every program.
pub fn load_object(bytes: &[u8], sink: &mut dyn MapSink, helpers: &HelperRegistry) -> Result<LoadedObject, LoadError> {
    let parsed = parse_object(bytes)?;
    // Resolve FFI names before creating anything.
    for p in &parsed.programs {
        for r in p.relocs.iter().chain(&parsed.text_relocs) {
            if let Target::Ffi(name) = &r.target {
                if helpers.ffi_id(name).is_none() {
                    return Err(LoadError::UnresolvedFfi(name.clone()));
                }
            }
        }
    }
    let (handles, maps) = create_maps(&parsed, sink)?;
    let table = sink.table();
    let mut programs = Vec::new();
    let mut relocations_applied = 0;
    for (i, raw) in parsed.programs.iter().enumerate() {
        let (program, n) = parsed.link(i, &handles, helpers)?;
        relocations_applied += n;
        let cfg = verify_config(&raw.attach, helpers);
        let exe = Executable::new(program.clone(), &table, &cfg).map_err(|e| match e {
            EngineError::VerifyRejected(report) => LoadError::VerifyRejected { section: raw.section.clone(), report },
            other => LoadError::Engine(other),
        })?;
        programs.push(LoadedProgram {
            section: raw.section.clone(),
            program,
            attach: raw.attach.clone(),
            executable: Arc::new(exe),
        });
    }
    Ok(LoadedObject { programs, maps, relocations_applied, license: parsed.license, skipped: parsed.skipped })
}
