use std::collections::BTreeMap;
use std::sync::atomic::{fence, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use crate::attach::AttachSpec;
use crate::engine::{EngineError, Executable, HelperRegistry, TraceSink};
use crate::helpers;
use crate::isa;
use crate::loader::{self, LoadError, MapSink};
use crate::maps::{sanitize, Map, MapDescriptor, MapError, MapHandle, MapTable, Segment, UpdateFlag};

use super::agent::{AgentView, LinkView, MapView, ProgramView};
use super::{
    Command, CommandKind, CommandResult, ControlError, FIRST_HANDLE, HEADER_SIZE, MAGIC, RECORD_HEADER_SIZE,
    TABLE_ENTRY_SIZE, VERSION,
};

const OFF_EPOCH: usize = 8;
const OFF_SEQ: usize = 16;
const OFF_LOG_CAP: usize = 24;
const OFF_LOG_LEN: usize = 32;
const OFF_RECORDS: usize = 40;
const OFF_TABLE_CAP: usize = 48;
const OFF_TABLE_LEN: usize = 52;
const OFF_CRC: usize = 56;
const OFF_NEXT: usize = 60;

pub(super) const STATE_LIVE: u32 = 1;
pub(super) const STATE_DETACHED: u32 = 2;

#[derive(Debug, Clone, Copy)]
pub struct RegistryConfig {
    pub log_capacity: usize,
    pub table_capacity: u32,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self { log_capacity: 16 << 20, table_capacity: 4096 }
    }
}

/// One row of the handle table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TableEntry {
    pub handle: u32,
    pub kind: CommandKind,
    /// Offset of the creating record within the log area.
    pub record: u64,
    /// Program handle, for links.
    pub aux: u32,
    pub state: u32,
    /// Epoch at which the entry was created.
    pub epoch: u64,
}

impl TableEntry {
    fn to_bytes(self) -> [u8; TABLE_ENTRY_SIZE] {
        let mut b = [0u8; TABLE_ENTRY_SIZE];
        b[0..4].copy_from_slice(&self.handle.to_le_bytes());
        b[4..8].copy_from_slice(&(self.kind as u32).to_le_bytes());
        b[8..16].copy_from_slice(&self.record.to_le_bytes());
        b[16..20].copy_from_slice(&self.aux.to_le_bytes());
        b[20..24].copy_from_slice(&self.state.to_le_bytes());
        b[24..32].copy_from_slice(&self.epoch.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Option<Self> {
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        Some(TableEntry {
            handle: u32_at(0),
            kind: CommandKind::from_raw(u32_at(4))?,
            record: u64_at(8),
            aux: u32_at(16),
            state: u32_at(20),
            epoch: u64_at(24),
        })
    }

    pub fn is_live(&self) -> bool {
        self.state == STATE_LIVE
    }
}

fn pad8(n: usize) -> usize {
    (n + 7) & !7
}

/// CRC of a record with its crc field taken as zero. Covers the padding.
fn record_crc(rec: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&rec[..12]);
    h.update(&rec[RECORD_HEADER_SIZE..]);
    h.finalize()
}

fn chain_crc(prev: u32, record_crc: u32) -> u32 {
    let mut h = crc32fast::Hasher::new_with_initial(prev);
    h.update(&record_crc.to_le_bytes());
    h.finalize()
}

struct Control {
    maps: Arc<MapTable>,
    helpers: Arc<HelperRegistry>,
    programs: BTreeMap<u32, (AttachSpec, Arc<Executable>)>,
    table: Vec<TableEntry>,
}

/// The registry segment, seen from the control process (read-write) or
/// from an agent (read-only).
pub struct SharedRegistry {
    id: String,
    seg: Segment,
    control: Option<Control>,
    persist: bool,
}

impl std::fmt::Debug for SharedRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SharedRegistry").field("id", &self.id).field("control", &self.control.is_some()).finish()
    }
}

/// Consistent copy of the mutable parts of a registry.
pub(super) struct Snapshot {
    pub epoch: u64,
    pub log: Vec<u8>,
    pub records: u64,
    pub crc: u32,
    pub next_handle: u32,
    pub table: Vec<u8>,
}

impl SharedRegistry {
    pub fn segment_name(id: &str) -> String {
        format!("bpftime_registry_{}", sanitize(id))
    }

    /// Segment name of the map created with `handle`.
    pub fn map_segment_name(id: &str, handle: u32, map_name: &str) -> String {
        format!("bpftime_{}_{}_{}", sanitize(id), handle, sanitize(map_name))
    }

    /// Creates a registry as its control process, with the standard helpers.
    pub fn create(id: &str, config: RegistryConfig) -> Result<Self, ControlError> {
        Self::create_with(id, config, |maps| helpers::standard_registry(maps, TraceSink::stderr()))
    }

    /// Creates a registry whose programs are verified against the helpers
    /// `make_helpers` registers.
    pub fn create_with(
        id: &str,
        config: RegistryConfig,
        make_helpers: impl FnOnce(Arc<MapTable>) -> HelperRegistry,
    ) -> Result<Self, ControlError> {
        let log_cap = pad8(config.log_capacity.max(RECORD_HEADER_SIZE));
        let len = HEADER_SIZE + log_cap + config.table_capacity as usize * TABLE_ENTRY_SIZE;
        let seg = Segment::create(&Self::segment_name(id), len)?;
        let maps = MapTable::new();
        let helpers = Arc::new(make_helpers(maps.clone()));
        let reg = SharedRegistry {
            id: id.to_string(),
            seg,
            control: Some(Control { maps, helpers, programs: BTreeMap::new(), table: Vec::new() }),
            persist: false,
        };
        unsafe {
            let p = reg.seg.as_ptr();
            std::ptr::copy_nonoverlapping(VERSION.to_le_bytes().as_ptr(), p.add(4), 4);
            reg.word64(OFF_LOG_CAP).store(log_cap as u64, Ordering::Relaxed);
            reg.word32(OFF_TABLE_CAP).store(config.table_capacity, Ordering::Relaxed);
            reg.word32(OFF_NEXT).store(FIRST_HANDLE, Ordering::Relaxed);
            fence(Ordering::Release);
            std::ptr::copy_nonoverlapping(MAGIC.as_ptr(), p, 4);
        }
        Ok(reg)
    }

    /// Opens an existing registry as an agent. The mapping is read-only.
    pub fn open(id: &str) -> Result<Self, ControlError> {
        let seg = Segment::open(&Self::segment_name(id), false)?;
        if seg.len() < HEADER_SIZE {
            return Err(ControlError::CorruptLog("registry shorter than its header".into()));
        }
        let reg = SharedRegistry { id: id.to_string(), seg, control: None, persist: false };
        reg.check_header()?;
        Ok(reg)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_control(&self) -> bool {
        self.control.is_some()
    }

    /// Keeps the registry and its map segments after the control process
    /// drops them.
    pub fn persist(&mut self) {
        self.seg.persist();
        self.persist = true;
    }

    fn word64(&self, off: usize) -> &AtomicU64 {
        unsafe { &*(self.seg.as_ptr().add(off) as *const AtomicU64) }
    }

    fn word32(&self, off: usize) -> &AtomicU32 {
        unsafe { &*(self.seg.as_ptr().add(off) as *const AtomicU32) }
    }

    fn check_header(&self) -> Result<(), ControlError> {
        let head = self.seg.read_bytes(0, 8);
        if head[0..4] != MAGIC {
            return Err(ControlError::CorruptLog("bad registry magic".into()));
        }
        let found = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if found != VERSION {
            return Err(ControlError::VersionMismatch { found, expected: VERSION });
        }
        Ok(())
    }

    fn log_capacity(&self) -> usize {
        self.word64(OFF_LOG_CAP).load(Ordering::Relaxed) as usize
    }

    fn table_capacity(&self) -> usize {
        self.word32(OFF_TABLE_CAP).load(Ordering::Relaxed) as usize
    }

    fn table_offset(&self) -> usize {
        HEADER_SIZE + self.log_capacity()
    }

    /// Mutation count; readers acquire on it.
    pub fn epoch(&self) -> u64 {
        self.word64(OFF_EPOCH).load(Ordering::Acquire)
    }

    /// Bytes of log in use.
    pub fn log_len(&self) -> usize {
        self.word64(OFF_LOG_LEN).load(Ordering::Acquire) as usize
    }

    /// Number of log records.
    pub fn log_records(&self) -> u64 {
        self.word64(OFF_RECORDS).load(Ordering::Acquire)
    }

    /// Byte range of the log area within the segment.
    pub fn log_area(&self) -> std::ops::Range<usize> {
        HEADER_SIZE..HEADER_SIZE + self.log_capacity()
    }

    /// Byte range of the table area within the segment.
    pub fn table_area(&self) -> std::ops::Range<usize> {
        self.table_offset()..self.table_offset() + self.table_capacity() * TABLE_ENTRY_SIZE
    }

    pub(super) fn snapshot(&self) -> Result<Snapshot, ControlError> {
        self.check_header()?;
        let (log_cap, table_cap) = (self.log_capacity(), self.table_capacity());
        if HEADER_SIZE + log_cap + table_cap * TABLE_ENTRY_SIZE > self.seg.len() {
            return Err(ControlError::CorruptLog("areas exceed the segment".into()));
        }
        loop {
            let s1 = self.word64(OFF_SEQ).load(Ordering::Acquire);
            if s1 & 1 == 1 {
                std::hint::spin_loop();
                continue;
            }
            let epoch = self.word64(OFF_EPOCH).load(Ordering::Acquire);
            let log_len = self.word64(OFF_LOG_LEN).load(Ordering::Relaxed) as usize;
            let records = self.word64(OFF_RECORDS).load(Ordering::Relaxed);
            let crc = self.word32(OFF_CRC).load(Ordering::Relaxed);
            let next_handle = self.word32(OFF_NEXT).load(Ordering::Relaxed);
            let table_len = self.word32(OFF_TABLE_LEN).load(Ordering::Relaxed) as usize;
            if log_len > log_cap || table_len > table_cap {
                return Err(ControlError::CorruptLog("header lengths exceed capacity".into()));
            }
            let log = self.seg.read_bytes(HEADER_SIZE, log_len);
            let table = self.seg.read_bytes(HEADER_SIZE + log_cap, table_len * TABLE_ENTRY_SIZE);
            fence(Ordering::Acquire);
            if self.word64(OFF_SEQ).load(Ordering::Relaxed) == s1 {
                return Ok(Snapshot { epoch, log, records, crc, next_handle, table });
            }
        }
    }

    /// Rebuilds the handle table and agent view from the log, checking every
    /// checksum and that the result matches the stored table.
    pub fn replay(&self) -> Result<AgentView, ControlError> {
        let snap = self.snapshot()?;
        let replayed = replay_log(&snap.log)?;
        let corrupt = |m: &str| Err(ControlError::CorruptLog(m.to_string()));
        if replayed.crc != snap.crc {
            return corrupt("rolling checksum mismatch");
        }
        if replayed.records != snap.records || replayed.records != snap.epoch {
            return corrupt("record count does not match the epoch");
        }
        if replayed.next_handle != snap.next_handle {
            return corrupt("handle counter does not match the log");
        }
        let stored: Option<Vec<TableEntry>> = snap.table.chunks(TABLE_ENTRY_SIZE).map(TableEntry::from_bytes).collect();
        if stored.as_deref() != Some(&replayed.table[..]) {
            return corrupt("handle table does not match the log");
        }
        Ok(replayed.view(&self.id, snap.epoch))
    }

    /// The handle table as stored in the segment.
    pub fn table(&self) -> Result<Vec<TableEntry>, ControlError> {
        let snap = self.snapshot()?;
        snap.table
            .chunks(TABLE_ENTRY_SIZE)
            .map(|c| TableEntry::from_bytes(c).ok_or_else(|| ControlError::CorruptLog("bad table entry".into())))
            .collect()
    }

    /// The control process's own copy of the handle table.
    pub fn live_table(&self) -> Option<&[TableEntry]> {
        self.control.as_ref().map(|c| &c.table[..])
    }

    /// Maps created through this registry (control side).
    pub fn maps(&self) -> Option<&Arc<MapTable>> {
        self.control.as_ref().map(|c| &c.maps)
    }

    pub fn helpers(&self) -> Option<&Arc<HelperRegistry>> {
        self.control.as_ref().map(|c| &c.helpers)
    }

    /// Verified program loaded under `handle` (control side).
    pub fn program(&self, handle: u32) -> Option<Arc<Executable>> {
        self.control.as_ref()?.programs.get(&handle).map(|(_, e)| e.clone())
    }

    /// Executes one command. Mutating commands are logged before this
    /// returns; failed commands leave the log untouched.
    pub fn handle_command(&mut self, cmd: Command) -> Result<CommandResult, ControlError> {
        cmd.validate()?;
        if self.control.is_none() {
            return Err(ControlError::PermissionDenied(if cmd.kind().mutates() {
                "agents cannot append to the command log"
            } else {
                "agents read maps through their own runtime"
            }));
        }
        let payload = cmd.encode_payload();
        let rec_len = RECORD_HEADER_SIZE + pad8(payload.len());
        if cmd.kind().mutates() {
            self.ensure_space(rec_len, matches!(cmd.kind(), CommandKind::MapCreate | CommandKind::ProgLoad | CommandKind::LinkCreate))?;
        }
        let next = self.word32(OFF_NEXT).load(Ordering::Relaxed);
        let c = self.control.as_mut().expect("control role");
        let get_map = |h: MapHandle| {
            c.maps.get(h).map_err(|e| match e {
                MapError::InvalidHandle(h) => ControlError::InvalidHandle(h),
                other => other.into(),
            })
        };
        match &cmd {
            Command::MapLookupElem { map, key } => return Ok(CommandResult::Value(get_map(*map)?.lookup(key)?)),
            Command::MapGetNextKey { map, key } => {
                return Ok(CommandResult::Key(get_map(*map)?.get_next_key(key.as_deref())?))
            }
            Command::MapUpdateElem { map, key, value, flags } => {
                get_map(*map)?.update(key, value, UpdateFlag::from_raw(*flags)?)?;
            }
            Command::MapDeleteElem { map, key } => get_map(*map)?.delete(key)?,
            Command::MapCreate(desc) => {
                // The registry unlinks its map segments itself, see Drop.
                let mut m = Map::create(desc, &Self::map_segment_name(&self.id, next, &desc.name))?;
                m.persist();
                c.maps.insert(next, Arc::new(m));
            }
            Command::ProgLoad { name, attach, insns } => {
                let program = isa::decode(name, insns).map_err(|e| ControlError::MalformedCommand(e.to_string()))?;
                let cfg = loader::verify_config(attach, &c.helpers);
                let exe = Executable::new(program, &c.maps, &cfg).map_err(|e| match e {
                    EngineError::VerifyRejected(r) => ControlError::VerifyRejected(r),
                    other => ControlError::Engine(other),
                })?;
                c.programs.insert(next, (attach.clone(), Arc::new(exe)));
            }
            Command::LinkCreate { prog, attach } => {
                let (own, _) = c.programs.get(prog).ok_or(ControlError::InvalidHandle(*prog))?;
                if let Some(a) = attach {
                    if a.context_layout() != own.context_layout() {
                        return Err(ControlError::MalformedCommand(format!(
                            "program {prog} was verified for {own}, not {a}"
                        )));
                    }
                }
            }
            Command::LinkDetach { link } => {
                let live_link = c.table.iter().any(|e| e.handle == *link && e.kind == CommandKind::LinkCreate && e.is_live());
                if !live_link {
                    return Err(ControlError::InvalidHandle(*link));
                }
            }
        }
        let handle = self.append(&cmd, &payload)?;
        Ok(handle.map_or(CommandResult::Done, CommandResult::Handle))
    }

    fn ensure_space(&self, rec_len: usize, new_entry: bool) -> Result<(), ControlError> {
        if self.log_len() + rec_len > self.log_capacity() {
            return Err(ControlError::LogFull(rec_len));
        }
        let table_len = self.word32(OFF_TABLE_LEN).load(Ordering::Relaxed) as usize;
        if new_entry && table_len >= self.table_capacity() {
            return Err(ControlError::LogFull(TABLE_ENTRY_SIZE));
        }
        Ok(())
    }

    /// Writes the record and table changes under the seqlock and publishes
    /// them by bumping the epoch.
    fn append(&mut self, cmd: &Command, payload: &[u8]) -> Result<Option<u32>, ControlError> {
        let kind = cmd.kind();
        let log_off = self.log_len();
        let next = self.word32(OFF_NEXT).load(Ordering::Relaxed);
        let epoch = self.word64(OFF_EPOCH).load(Ordering::Relaxed) + 1;
        let creates = matches!(kind, CommandKind::MapCreate | CommandKind::ProgLoad | CommandKind::LinkCreate);
        let handle = if creates { next } else { 0 };

        let mut rec = vec![0u8; RECORD_HEADER_SIZE + pad8(payload.len())];
        rec[0..4].copy_from_slice(&(payload.len() as u32).to_le_bytes());
        rec[4..8].copy_from_slice(&(kind as u32).to_le_bytes());
        rec[8..12].copy_from_slice(&handle.to_le_bytes());
        rec[RECORD_HEADER_SIZE..RECORD_HEADER_SIZE + payload.len()].copy_from_slice(payload);
        let crc = record_crc(&rec);
        rec[12..16].copy_from_slice(&crc.to_le_bytes());
        let rolling = chain_crc(self.word32(OFF_CRC).load(Ordering::Relaxed), crc);

        let table_off = HEADER_SIZE + self.log_capacity();
        let c = self.control.as_mut().expect("control role");
        let changed = apply_to_table(&mut c.table, cmd, handle, log_off as u64, epoch)
            .map_err(|e| ControlError::CorruptLog(format!("live table: {e}")))?;
        let table_len = c.table.len();
        let entry = changed.map(|i| (i, c.table[i].to_bytes()));

        let seq = self.word64(OFF_SEQ).load(Ordering::Relaxed);
        self.word64(OFF_SEQ).store(seq + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        unsafe {
            let base = self.seg.as_ptr();
            std::ptr::copy_nonoverlapping(rec.as_ptr(), base.add(HEADER_SIZE + log_off), rec.len());
            if let Some((i, e)) = entry {
                std::ptr::copy_nonoverlapping(e.as_ptr(), base.add(table_off + i * TABLE_ENTRY_SIZE), e.len());
            }
        }
        self.word64(OFF_LOG_LEN).store((log_off + rec.len()) as u64, Ordering::Relaxed);
        self.word64(OFF_RECORDS).fetch_add(1, Ordering::Relaxed);
        self.word32(OFF_TABLE_LEN).store(table_len as u32, Ordering::Relaxed);
        self.word32(OFF_CRC).store(rolling, Ordering::Relaxed);
        if creates {
            self.word32(OFF_NEXT).store(next + 1, Ordering::Relaxed);
        }
        self.word64(OFF_EPOCH).store(epoch, Ordering::Release);
        self.word64(OFF_SEQ).store(seq + 2, Ordering::Release);
        Ok(creates.then_some(handle))
    }

    /// Appends LINK_DETACH for `link`. Agents restore the patched code when
    /// they next observe the epoch.
    pub fn snapshot_and_detach(&mut self, link: u32) -> Result<(), ControlError> {
        self.handle_command(Command::LinkDetach { link }).map(|_| ())
    }

    /// Loads an object file through the command surface: one MAP_CREATE per
    /// map, MAP_UPDATE_ELEM for data sections, one PROG_LOAD per program.
    /// Returns map handles and program handles.
    pub fn load_object(&mut self, bytes: &[u8]) -> Result<(Vec<u32>, Vec<u32>), ControlError> {
        let parsed = loader::parse_object(bytes)?;
        let helpers = self.helpers().ok_or(ControlError::PermissionDenied("agents cannot load programs"))?.clone();
        let (handles, loaded) = {
            let mut sink = RegistrySink { reg: self, error: None };
            let r = loader::create_maps(&parsed, &mut sink);
            if let Some(e) = sink.error {
                return Err(e);
            }
            r?
        };
        let mut progs = Vec::new();
        for (i, raw) in parsed.programs.iter().enumerate() {
            let (program, _) = parsed.link(i, &handles, &helpers)?;
            let cmd = Command::ProgLoad { name: program.name.clone(), attach: raw.attach.clone(), insns: isa::encode(&program) };
            progs.push(self.handle_command(cmd)?.handle().expect("PROG_LOAD returns a handle"));
        }
        Ok((loaded.iter().map(|m| m.handle).collect(), progs))
    }

    /// Raw segment bytes, for fault injection.
    ///
    /// # Safety
    /// Writes bypass the log and can leave the registry inconsistent; no
    /// other thread may be using the registry.
    pub unsafe fn raw_bytes_mut(&mut self) -> &mut [u8] {
        assert!(self.seg.is_writable(), "agent mappings are read-only");
        std::slice::from_raw_parts_mut(self.seg.as_ptr(), self.seg.len())
    }

    /// Address of the segment mapping.
    pub fn as_ptr(&self) -> *const u8 {
        self.seg.as_ptr()
    }
}

impl Drop for SharedRegistry {
    fn drop(&mut self) {
        if self.persist {
            return;
        }
        if let Some(c) = &self.control {
            for h in c.maps.handles() {
                if let Ok(m) = c.maps.get(h) {
                    let _ = Segment::unlink(m.segment_name());
                }
            }
        }
    }
}

struct RegistrySink<'a> {
    reg: &'a mut SharedRegistry,
    error: Option<ControlError>,
}

impl MapSink for RegistrySink<'_> {
    fn create_map(&mut self, desc: &MapDescriptor) -> Result<MapHandle, LoadError> {
        match self.reg.handle_command(Command::MapCreate(desc.clone())) {
            Ok(r) => Ok(r.handle().expect("MAP_CREATE returns a handle")),
            Err(e) => {
                let msg = e.to_string();
                self.error = Some(e);
                Err(LoadError::Map(MapError::InvalidDescriptor(msg)))
            }
        }
    }

    fn init_data(&mut self, handle: MapHandle, bytes: &[u8]) -> Result<(), LoadError> {
        let cmd = Command::MapUpdateElem { map: handle, key: 0u32.to_le_bytes().to_vec(), value: bytes.to_vec(), flags: 0 };
        match self.reg.handle_command(cmd) {
            Ok(_) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                self.error = Some(e);
                Err(LoadError::Map(MapError::InvalidDescriptor(msg)))
            }
        }
    }

    fn table(&self) -> Arc<MapTable> {
        self.reg.maps().expect("control role").clone()
    }
}

/// Applies a logged command to a handle table. Returns the index of the
/// entry it created or changed.
fn apply_to_table(
    table: &mut Vec<TableEntry>,
    cmd: &Command,
    handle: u32,
    record: u64,
    epoch: u64,
) -> Result<Option<usize>, String> {
    let find = |table: &Vec<TableEntry>, h: u32, kind: CommandKind| {
        table.iter().position(|e| e.handle == h && e.kind == kind)
    };
    let push = |table: &mut Vec<TableEntry>, kind, aux| {
        table.push(TableEntry { handle, kind, record, aux, state: STATE_LIVE, epoch });
        Ok(Some(table.len() - 1))
    };
    match cmd {
        Command::MapCreate(_) => push(table, CommandKind::MapCreate, 0),
        Command::ProgLoad { .. } => push(table, CommandKind::ProgLoad, 0),
        Command::LinkCreate { prog, .. } => {
            find(table, *prog, CommandKind::ProgLoad).ok_or_else(|| format!("link to unknown program {prog}"))?;
            push(table, CommandKind::LinkCreate, *prog)
        }
        Command::LinkDetach { link } => {
            let i = find(table, *link, CommandKind::LinkCreate).ok_or_else(|| format!("detach of unknown link {link}"))?;
            if !table[i].is_live() {
                return Err(format!("link {link} detached twice"));
            }
            table[i].state = STATE_DETACHED;
            Ok(Some(i))
        }
        Command::MapUpdateElem { map, .. } | Command::MapDeleteElem { map, .. } => {
            find(table, *map, CommandKind::MapCreate).ok_or_else(|| format!("element command on unknown map {map}"))?;
            Ok(None)
        }
        Command::MapLookupElem { .. } | Command::MapGetNextKey { .. } => Err("read command in the log".into()),
    }
}

/// State rebuilt from a log.
pub(super) struct Replayed {
    pub table: Vec<TableEntry>,
    pub commands: Vec<(u32, Command)>,
    pub crc: u32,
    pub records: u64,
    pub next_handle: u32,
}

pub(super) fn replay_log(log: &[u8]) -> Result<Replayed, ControlError> {
    let mut out = Replayed { table: Vec::new(), commands: Vec::new(), crc: 0, records: 0, next_handle: FIRST_HANDLE };
    let mut off = 0;
    while off < log.len() {
        let corrupt = |m: String| ControlError::CorruptLog(format!("record at {off}: {m}"));
        if log.len() - off < RECORD_HEADER_SIZE {
            return Err(corrupt("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(log[off + o..off + o + 4].try_into().expect("4 bytes"));
        let (len, raw_kind, handle, crc) = (u32_at(0) as usize, u32_at(4), u32_at(8), u32_at(12));
        let end = off + RECORD_HEADER_SIZE + pad8(len);
        if len > log.len() || end > log.len() {
            return Err(corrupt(format!("length {len} runs past the log")));
        }
        let rec = &log[off..end];
        if record_crc(rec) != crc {
            return Err(corrupt("checksum mismatch".into()));
        }
        let kind = CommandKind::from_raw(raw_kind).ok_or_else(|| corrupt(format!("kind {raw_kind}")))?;
        let cmd = Command::decode_payload(kind, &rec[RECORD_HEADER_SIZE..RECORD_HEADER_SIZE + len])
            .map_err(|e| corrupt(e.to_string()))?;
        let creates = matches!(kind, CommandKind::MapCreate | CommandKind::ProgLoad | CommandKind::LinkCreate);
        let expected = if creates { out.next_handle } else { 0 };
        if handle != expected {
            return Err(corrupt(format!("handle {handle}, expected {expected}")));
        }
        out.records += 1;
        apply_to_table(&mut out.table, &cmd, handle, off as u64, out.records).map_err(corrupt)?;
        if creates {
            out.next_handle += 1;
        }
        out.crc = chain_crc(out.crc, crc);
        out.commands.push((handle, cmd));
        off = end;
    }
    Ok(out)
}

impl Replayed {
    fn view(&self, id: &str, epoch: u64) -> AgentView {
        let mut view = AgentView { epoch, ..AgentView::default() };
        for (handle, cmd) in &self.commands {
            match cmd {
                Command::MapCreate(desc) => {
                    view.maps.insert(
                        *handle,
                        MapView { segment: SharedRegistry::map_segment_name(id, *handle, &desc.name), desc: desc.clone() },
                    );
                }
                Command::ProgLoad { name, attach, insns } => {
                    view.programs.insert(*handle, ProgramView::new(name.clone(), attach.clone(), insns.clone()));
                }
                Command::LinkCreate { prog, attach } => {
                    let spec = attach.clone().unwrap_or_else(|| view.programs[prog].attach.clone());
                    view.links.insert(*handle, LinkView { prog: *prog, attach: spec, live: true });
                }
                Command::LinkDetach { link } => {
                    if let Some(l) = view.links.get_mut(link) {
                        l.live = false;
                    }
                }
                _ => {}
            }
        }
        view
    }
}
