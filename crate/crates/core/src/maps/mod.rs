//! Kernel-compatible maps stored in named shared-memory segments.
//!
//! Every map owns one segment. The first 256 bytes are a header:
//!
//! | offset | field |
//! |-------:|-------|
//! | 0  | magic `BPTM` |
//! | 4  | layout version (u32) |
//! | 8  | map type, key size, value size, max entries, flags (u32 each) |
//! | 28 | reserved |
//! | 32 | name, 16 bytes, NUL padded |
//! | 48 | reader-writer lock word |
//! | 52 | ring buffer consumer lock word |
//! | 56 | type-specific words (u64 each) |
//! | 88 | ring buffer producer lock word |
//!
//! The payload starts at byte 256. All multi-byte fields are native
//! (little-endian) and every value is 8-byte aligned.

mod hash;
mod lock;
mod ringbuf;
mod segment;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use thiserror::Error;

pub use lock::{ReadGuard, SharedRwLock, WriteGuard};
pub use segment::{sanitize, Segment};

pub const MAGIC: [u8; 4] = *b"BPTM";
pub const LAYOUT_VERSION: u32 = 1;
pub const HEADER_SIZE: usize = 256;
pub const NAME_LEN: usize = 16;
/// Thread slots in a per-thread ("per-cpu") array.
pub const PERCPU_SLOTS: usize = 1024;
/// Map flag: programs may read but not write the values.
pub const F_RDONLY_PROG: u32 = 1 << 7;

const MAX_KEY_SIZE: u32 = 512;
const MAX_VALUE_SIZE: u32 = 1 << 20;
const MAX_SEGMENT: usize = 1 << 34;

/// Map handle within a registry.
pub type MapHandle = u32;

/// Map kinds, numbered as in the kernel UAPI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapType {
    Hash,
    Array,
    PercpuArray,
    RingBuf,
}

impl MapType {
    pub fn raw(self) -> u32 {
        match self {
            MapType::Hash => 1,
            MapType::Array => 2,
            MapType::PercpuArray => 6,
            MapType::RingBuf => 27,
        }
    }

    pub fn from_raw(v: u32) -> Option<Self> {
        Some(match v {
            1 => MapType::Hash,
            2 => MapType::Array,
            6 => MapType::PercpuArray,
            27 => MapType::RingBuf,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MapType::Hash => "hash",
            MapType::Array => "array",
            MapType::PercpuArray => "percpu_array",
            MapType::RingBuf => "ringbuf",
        }
    }
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("InvalidDescriptor: {0}")]
    InvalidDescriptor(String),
    #[error("SegmentExists: {0}")]
    SegmentExists(String),
    #[error("SegmentMissing: {0}")]
    SegmentMissing(String),
    #[error("OutOfSharedMemory: cannot reserve {0} bytes")]
    OutOfSharedMemory(usize),
    #[error("CorruptSegment: {0}")]
    CorruptSegment(String),
    #[error("VersionMismatch: segment layout {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("BadKeySize: expected {expected} bytes, got {got}")]
    BadKeySize { expected: u32, got: usize },
    #[error("BadValueSize: expected {expected} bytes, got {got}")]
    BadValueSize { expected: u32, got: usize },
    #[error("BadKey: index {index} out of range for {max_entries} entries")]
    BadKey { index: u32, max_entries: u32 },
    #[error("BadFlags: {0}")]
    BadFlags(u64),
    #[error("KeyExists")]
    KeyExists,
    #[error("KeyAbsent")]
    KeyAbsent,
    #[error("TableFull: {0} live entries")]
    TableFull(u32),
    #[error("Unsupported: {op} on {map_type} map")]
    Unsupported { op: &'static str, map_type: &'static str },
    #[error("RingFull")]
    RingFull,
    #[error("PayloadTooLarge: {len} bytes exceeds {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("BadRecord: address {0:#x} is not an outstanding reservation")]
    BadRecord(usize),
    #[error("ConsumerBusy: another consumer holds the ring buffer")]
    ConsumerBusy,
    #[error("InvalidHandle: {0}")]
    InvalidHandle(MapHandle),
    #[error("segment i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl MapError {
    /// Negative errno handed back to programs by map helpers.
    pub fn errno(&self) -> i64 {
        -(match self {
            MapError::KeyExists => libc::EEXIST,
            MapError::KeyAbsent => libc::ENOENT,
            MapError::TableFull(_) => libc::E2BIG,
            MapError::RingFull => libc::EAGAIN,
            MapError::Unsupported { .. } => libc::EOPNOTSUPP,
            MapError::InvalidHandle(_) => libc::EBADF,
            _ => libc::EINVAL,
        } as i64)
    }
}

/// Update semantics, numbered as the kernel's `BPF_ANY` family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateFlag {
    Any,
    NoExist,
    Exist,
}

impl UpdateFlag {
    pub fn from_raw(v: u64) -> Result<Self, MapError> {
        match v {
            0 => Ok(UpdateFlag::Any),
            1 => Ok(UpdateFlag::NoExist),
            2 => Ok(UpdateFlag::Exist),
            other => Err(MapError::BadFlags(other)),
        }
    }

    pub fn raw(self) -> u64 {
        match self {
            UpdateFlag::Any => 0,
            UpdateFlag::NoExist => 1,
            UpdateFlag::Exist => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MapDescriptor {
    pub map_type: MapType,
    pub key_size: u32,
    pub value_size: u32,
    pub max_entries: u32,
    pub flags: u32,
    pub name: String,
}

impl MapDescriptor {
    pub fn new(map_type: MapType, key_size: u32, value_size: u32, max_entries: u32, name: &str) -> Self {
        Self { map_type, key_size, value_size, max_entries, flags: 0, name: name.to_string() }
    }

    pub fn hash(key_size: u32, value_size: u32, max_entries: u32, name: &str) -> Self {
        Self::new(MapType::Hash, key_size, value_size, max_entries, name)
    }

    pub fn array(value_size: u32, max_entries: u32, name: &str) -> Self {
        Self::new(MapType::Array, 4, value_size, max_entries, name)
    }

    pub fn percpu_array(value_size: u32, max_entries: u32, name: &str) -> Self {
        Self::new(MapType::PercpuArray, 4, value_size, max_entries, name)
    }

    pub fn ringbuf(capacity: u32, name: &str) -> Self {
        Self::new(MapType::RingBuf, 0, 0, capacity, name)
    }

    pub fn read_only_prog(&self) -> bool {
        self.flags & F_RDONLY_PROG != 0
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |m: String| Err(MapError::InvalidDescriptor(m));
        if self.name.len() > NAME_LEN {
            return bad(format!("name {:?} longer than {NAME_LEN} bytes", self.name));
        }
        match self.map_type {
            MapType::RingBuf => {
                if self.key_size != 0 || self.value_size != 0 {
                    return bad("ring buffer key and value sizes must be 0".into());
                }
                if !self.max_entries.is_power_of_two() || self.max_entries < 16 {
                    return bad(format!(
                        "ring buffer capacity {} is not a power of two >= 16",
                        self.max_entries
                    ));
                }
            }
            t => {
                if matches!(t, MapType::Array | MapType::PercpuArray) && self.key_size != 4 {
                    return bad(format!("{} key size must be 4", t.name()));
                }
                if self.key_size == 0 || self.key_size > MAX_KEY_SIZE {
                    return bad(format!("key size {} out of range", self.key_size));
                }
                if self.value_size == 0 || self.value_size > MAX_VALUE_SIZE {
                    return bad(format!("value size {} out of range", self.value_size));
                }
                if self.max_entries == 0 {
                    return bad("max_entries must be at least 1".into());
                }
            }
        }
        if self.payload_size() > MAX_SEGMENT {
            return Err(MapError::OutOfSharedMemory(self.payload_size()));
        }
        Ok(())
    }

    fn value_stride(&self) -> usize {
        round8(self.value_size as usize)
    }

    fn payload_size(&self) -> usize {
        let n = self.max_entries as usize;
        match self.map_type {
            MapType::Hash => hash::capacity_for(self.max_entries) * hash::entry_size(self),
            MapType::Array => n * self.value_stride(),
            MapType::PercpuArray => n * PERCPU_SLOTS * self.value_stride(),
            MapType::RingBuf => n,
        }
    }
}

pub(crate) fn round8(n: usize) -> usize {
    (n + 7) & !7
}

#[repr(C)]
struct Header {
    magic: [u8; 4],
    version: u32,
    map_type: u32,
    key_size: u32,
    value_size: u32,
    max_entries: u32,
    flags: u32,
    _reserved: u32,
    name: [u8; NAME_LEN],
    lock: AtomicU32,
    consumer_lock: AtomicU32,
    words: [AtomicU64; 4],
    producer_lock: AtomicU32,
}

const _: () = assert!(std::mem::size_of::<Header>() <= HEADER_SIZE);

/// A map bound to its shared segment.
pub struct Map {
    desc: MapDescriptor,
    seg: Segment,
}

impl std::fmt::Debug for Map {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Map").field("desc", &self.desc).field("segment", &self.seg.name()).finish()
    }
}

fn check_len(got: usize, expected: u32, value: bool) -> Result<(), MapError> {
    if got == expected as usize {
        Ok(())
    } else if value {
        Err(MapError::BadValueSize { expected, got })
    } else {
        Err(MapError::BadKeySize { expected, got })
    }
}

thread_local! {
    static THREAD_SLOT: usize = {
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        NEXT.fetch_add(1, Ordering::Relaxed) % PERCPU_SLOTS
    };
}

/// Slot used by the calling thread in per-thread arrays.
pub fn thread_slot() -> usize {
    THREAD_SLOT.with(|s| *s)
}

impl Map {
    /// Creates the backing segment and writes the header.
    pub fn create(desc: &MapDescriptor, segment_name: &str) -> Result<Self, MapError> {
        desc.validate()?;
        let seg = Segment::create(segment_name, HEADER_SIZE + desc.payload_size())?;
        let map = Map { desc: desc.clone(), seg };
        let h = map.header_mut();
        unsafe {
            (*h).version = LAYOUT_VERSION;
            (*h).map_type = desc.map_type.raw();
            (*h).key_size = desc.key_size;
            (*h).value_size = desc.value_size;
            (*h).max_entries = desc.max_entries;
            (*h).flags = desc.flags;
            (&mut (*h).name)[..desc.name.len()].copy_from_slice(desc.name.as_bytes());
            if desc.map_type == MapType::Hash {
                (*h).words[0].store(hash::capacity_for(desc.max_entries) as u64, Ordering::Relaxed);
            }
            // Magic last: a concurrent opener never sees a half-written header.
            std::sync::atomic::fence(Ordering::Release);
            (*h).magic = MAGIC;
        }
        Ok(map)
    }

    /// Opens an existing map segment and reads its descriptor.
    pub fn open(segment_name: &str) -> Result<Self, MapError> {
        let seg = Segment::open(segment_name, true)?;
        if seg.len() < HEADER_SIZE {
            return Err(MapError::CorruptSegment(format!("{segment_name}: too short")));
        }
        let h = seg.as_ptr() as *const Header;
        let (magic, version) = unsafe { ((*h).magic, (*h).version) };
        if magic != MAGIC {
            return Err(MapError::CorruptSegment(format!("{segment_name}: bad magic")));
        }
        if version != LAYOUT_VERSION {
            return Err(MapError::VersionMismatch { found: version, expected: LAYOUT_VERSION });
        }
        let desc = unsafe {
            let name_len = (*h).name.iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
            MapDescriptor {
                map_type: MapType::from_raw((*h).map_type).ok_or_else(|| {
                    MapError::CorruptSegment(format!("{segment_name}: unknown map type"))
                })?,
                key_size: (*h).key_size,
                value_size: (*h).value_size,
                max_entries: (*h).max_entries,
                flags: (*h).flags,
                name: String::from_utf8_lossy(&(&(*h).name)[..name_len]).into_owned(),
            }
        };
        desc.validate()?;
        if seg.len() < HEADER_SIZE + desc.payload_size() {
            return Err(MapError::CorruptSegment(format!("{segment_name}: truncated payload")));
        }
        Ok(Map { desc, seg })
    }

    /// Keeps the segment name after this handle is dropped.
    pub fn persist(&mut self) {
        self.seg.persist();
    }

    pub fn descriptor(&self) -> &MapDescriptor {
        &self.desc
    }

    pub fn segment_name(&self) -> &str {
        self.seg.name()
    }

    fn header(&self) -> &Header {
        unsafe { &*(self.seg.as_ptr() as *const Header) }
    }

    fn header_mut(&self) -> *mut Header {
        self.seg.as_ptr() as *mut Header
    }

    fn payload(&self) -> *mut u8 {
        unsafe { self.seg.as_ptr().add(HEADER_SIZE) }
    }

    /// Address range of the value storage, for runtime bounds checks.
    pub fn payload_region(&self) -> (usize, usize) {
        (self.payload() as usize, self.seg.len() - HEADER_SIZE)
    }

    fn lock(&self) -> SharedRwLock<'_> {
        SharedRwLock::new(&self.header().lock)
    }

    fn unsupported<T>(&self, op: &'static str) -> Result<T, MapError> {
        Err(MapError::Unsupported { op, map_type: self.desc.map_type.name() })
    }

    fn array_index(&self, key: &[u8]) -> Result<usize, MapError> {
        check_len(key.len(), 4, false)?;
        let index = u32::from_le_bytes(key.try_into().expect("4 bytes"));
        if index >= self.desc.max_entries {
            return Err(MapError::BadKey { index, max_entries: self.desc.max_entries });
        }
        Ok(index as usize)
    }

    fn array_slot(&self, index: usize, slot: usize) -> *mut u8 {
        let stride = self.desc.value_stride();
        let per_entry = if self.desc.map_type == MapType::PercpuArray { PERCPU_SLOTS } else { 1 };
        unsafe { self.payload().add((index * per_entry + slot) * stride) }
    }

    /// Copy of the value stored under `key`. Per-thread arrays return the
    /// calling thread's slot.
    pub fn lookup(&self, key: &[u8]) -> Result<Option<Vec<u8>>, MapError> {
        let vs = self.desc.value_size as usize;
        match self.desc.map_type {
            MapType::Hash => {
                check_len(key.len(), self.desc.key_size, false)?;
                let _g = self.lock().read();
                Ok(self.hash_find(key).map(|i| unsafe {
                    std::slice::from_raw_parts(self.hash_value(i), vs).to_vec()
                }))
            }
            MapType::Array | MapType::PercpuArray => {
                let index = self.array_index(key)?;
                let slot = if self.desc.map_type == MapType::PercpuArray { thread_slot() } else { 0 };
                let _g = self.lock().read();
                let p = self.array_slot(index, slot);
                Ok(Some(unsafe { std::slice::from_raw_parts(p, vs).to_vec() }))
            }
            MapType::RingBuf => self.unsupported("lookup"),
        }
    }

    /// Every thread slot of a per-thread array entry.
    pub fn lookup_percpu(&self, key: &[u8]) -> Result<Vec<Vec<u8>>, MapError> {
        if self.desc.map_type != MapType::PercpuArray {
            return self.unsupported("lookup_percpu");
        }
        let index = self.array_index(key)?;
        let vs = self.desc.value_size as usize;
        let _g = self.lock().read();
        Ok((0..PERCPU_SLOTS)
            .map(|slot| unsafe { std::slice::from_raw_parts(self.array_slot(index, slot), vs).to_vec() })
            .collect())
    }

    pub fn update(&self, key: &[u8], value: &[u8], flag: UpdateFlag) -> Result<(), MapError> {
        check_len(value.len(), self.desc.value_size, true)?;
        match self.desc.map_type {
            MapType::Hash => {
                check_len(key.len(), self.desc.key_size, false)?;
                let _g = self.lock().write();
                self.hash_insert(key, value, flag)
            }
            MapType::Array | MapType::PercpuArray => {
                let index = self.array_index(key)?;
                if flag == UpdateFlag::NoExist {
                    return Err(MapError::KeyExists);
                }
                let slot = if self.desc.map_type == MapType::PercpuArray { thread_slot() } else { 0 };
                let _g = self.lock().write();
                unsafe {
                    std::ptr::copy_nonoverlapping(value.as_ptr(), self.array_slot(index, slot), value.len())
                };
                Ok(())
            }
            MapType::RingBuf => self.unsupported("update"),
        }
    }

    pub fn delete(&self, key: &[u8]) -> Result<(), MapError> {
        match self.desc.map_type {
            MapType::Hash => {
                check_len(key.len(), self.desc.key_size, false)?;
                let _g = self.lock().write();
                self.hash_remove(key)
            }
            _ => self.unsupported("delete"),
        }
    }

    /// Key following `key` in iteration order; `None` starts from the
    /// beginning. Returns `None` at the end.
    pub fn get_next_key(&self, key: Option<&[u8]>) -> Result<Option<Vec<u8>>, MapError> {
        match self.desc.map_type {
            MapType::Hash => {
                if let Some(k) = key {
                    check_len(k.len(), self.desc.key_size, false)?;
                }
                let _g = self.lock().read();
                Ok(self.hash_next(key))
            }
            MapType::Array | MapType::PercpuArray => {
                let next = match key {
                    None => 0,
                    Some(k) => {
                        check_len(k.len(), 4, false)?;
                        match u32::from_le_bytes(k.try_into().expect("4 bytes")) {
                            i if i >= self.desc.max_entries => 0,
                            i => i + 1,
                        }
                    }
                };
                Ok((next < self.desc.max_entries).then(|| next.to_le_bytes().to_vec()))
            }
            MapType::RingBuf => self.unsupported("get_next_key"),
        }
    }

    /// Number of live entries (hash) or slots (arrays).
    pub fn len(&self) -> usize {
        match self.desc.map_type {
            MapType::Hash => self.header().words[1].load(Ordering::Acquire) as usize,
            MapType::RingBuf => 0,
            _ => self.desc.max_entries as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Address of the value for `key` as seen by programs, or null.
    /// The pointer stays valid for the life of the segment.
    pub fn lookup_ptr(&self, key: &[u8]) -> *mut u8 {
        match self.desc.map_type {
            MapType::Hash => {
                let _g = self.lock().read();
                self.hash_find(key).map_or(std::ptr::null_mut(), |i| self.hash_value(i))
            }
            MapType::Array => self.array_index(key).map_or(std::ptr::null_mut(), |i| self.array_slot(i, 0)),
            MapType::PercpuArray => self
                .array_index(key)
                .map_or(std::ptr::null_mut(), |i| self.array_slot(i, thread_slot())),
            MapType::RingBuf => std::ptr::null_mut(),
        }
    }

    /// Whole contents as key/value pairs, in iteration order.
    pub fn entries(&self) -> Result<Vec<(Vec<u8>, Vec<u8>)>, MapError> {
        let mut out = Vec::new();
        let mut key: Option<Vec<u8>> = None;
        while let Some(k) = self.get_next_key(key.as_deref())? {
            if let Some(v) = self.lookup(&k)? {
                out.push((k.clone(), v));
            }
            key = Some(k);
            if out.len() > self.desc.max_entries as usize {
                break;
            }
        }
        Ok(out)
    }
}

/// Maps addressable by handle, shared between the engine, its helpers and
/// the control plane.
#[derive(Debug, Default)]
pub struct MapTable {
    maps: RwLock<BTreeMap<MapHandle, Arc<Map>>>,
}

impl MapTable {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn insert(&self, handle: MapHandle, map: Arc<Map>) {
        self.maps.write().expect("map table lock").insert(handle, map);
    }

    pub fn remove(&self, handle: MapHandle) -> Option<Arc<Map>> {
        self.maps.write().expect("map table lock").remove(&handle)
    }

    pub fn get(&self, handle: MapHandle) -> Result<Arc<Map>, MapError> {
        self.maps
            .read()
            .expect("map table lock")
            .get(&handle)
            .cloned()
            .ok_or(MapError::InvalidHandle(handle))
    }

    pub fn handles(&self) -> Vec<MapHandle> {
        self.maps.read().expect("map table lock").keys().copied().collect()
    }

    /// Map whose value storage contains `addr`.
    pub fn containing(&self, addr: usize) -> Option<Arc<Map>> {
        self.maps
            .read()
            .expect("map table lock")
            .values()
            .find(|m| {
                let (base, len) = m.payload_region();
                addr >= base && addr < base + len
            })
            .cloned()
    }

    /// Value regions of every map, for runtime bounds checks.
    pub fn regions(&self) -> Vec<(MapHandle, usize, usize, bool)> {
        self.maps
            .read()
            .expect("map table lock")
            .iter()
            .map(|(h, m)| {
                let (base, len) = m.payload_region();
                (*h, base, len, !m.descriptor().read_only_prog())
            })
            .collect()
    }
}
