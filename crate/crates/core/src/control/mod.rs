//! A bpf()-style command surface over a shared registry segment.
//!
//! The control process owns the registry and appends every mutating
//! command to a log in shared memory. Agents map the registry read-only,
//! replay the log to rebuild the handle table, open the map segments it
//! names and attach the programs its links describe.
//!
//! Registry segment `bpftime_registry_<id>`, little-endian throughout:
//!
//! ```text
//! 0   magic "BPRG"        4   version u32
//! 8   epoch u64           16  seq u64 (odd while a mutation is in flight)
//! 24  log_capacity u64    32  log_len u64
//! 40  records u64         48  table_capacity u32   52  table_len u32
//! 56  rolling crc32 u32   60  next_handle u32
//! 64  log area, log_capacity bytes
//!     table area, table_capacity entries of TABLE_ENTRY_SIZE bytes
//! ```
//!
//! A log record is `[payload_len u32][kind u32][handle u32][crc32 u32]`
//! followed by the payload, padded to 8 bytes. The record crc covers every
//! other byte of the record, padding included. The rolling crc chains each record crc onto the
//! previous value.
//!
//! A table entry is `[handle u32][kind u32][record_offset u64][aux u32]
//! [state u32][epoch u64]`; `aux` is the program handle of a link.

mod agent;
mod registry;

use std::fmt;

use thiserror::Error;

use crate::attach::{AttachError, AttachSpec};
use crate::engine::EngineError;
use crate::loader::LoadError;
use crate::maps::{MapDescriptor, MapError, MapHandle, MapType, UpdateFlag};
use crate::verifier::VerifyReport;

pub use agent::{AgentRuntime, AgentView, LinkView, MapView, ProgramView, POLL_INTERVAL};
pub use registry::{RegistryConfig, SharedRegistry, TableEntry};

pub const MAGIC: [u8; 4] = *b"BPRG";
pub const VERSION: u32 = 1;
pub const HEADER_SIZE: usize = 64;
pub const RECORD_HEADER_SIZE: usize = 16;
pub const TABLE_ENTRY_SIZE: usize = 32;
/// Handles 0 to 2 are reserved, as for stdio descriptors.
pub const FIRST_HANDLE: u32 = 3;
pub const MAX_PROGRAM_BYTES: usize = 1 << 20;
pub const MAX_NAME_LEN: usize = 255;
pub const MAX_ELEM_BYTES: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("MalformedCommand: {0}")]
    MalformedCommand(String),
    #[error("VerifyRejected: {0}")]
    VerifyRejected(Box<VerifyReport>),
    #[error("InvalidHandle: {0}")]
    InvalidHandle(u32),
    #[error("CorruptLog: {0}")]
    CorruptLog(String),
    #[error("VersionMismatch: registry layout {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("LogFull: {0} bytes needed")]
    LogFull(usize),
    #[error("PermissionDenied: {0}")]
    PermissionDenied(&'static str),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Engine(EngineError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Attach(#[from] AttachError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum CommandKind {
    MapCreate = 0,
    MapLookupElem = 1,
    MapUpdateElem = 2,
    MapDeleteElem = 3,
    MapGetNextKey = 4,
    ProgLoad = 5,
    LinkCreate = 28,
    LinkDetach = 34,
}

impl CommandKind {
    pub fn from_raw(v: u32) -> Option<Self> {
        Some(match v {
            0 => CommandKind::MapCreate,
            1 => CommandKind::MapLookupElem,
            2 => CommandKind::MapUpdateElem,
            3 => CommandKind::MapDeleteElem,
            4 => CommandKind::MapGetNextKey,
            5 => CommandKind::ProgLoad,
            28 => CommandKind::LinkCreate,
            34 => CommandKind::LinkDetach,
            _ => return None,
        })
    }

    /// Whether the command changes registry or map state and is logged.
    pub fn mutates(self) -> bool {
        !matches!(self, CommandKind::MapLookupElem | CommandKind::MapGetNextKey)
    }
}

/// One bpf()-style request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    MapCreate(MapDescriptor),
    MapLookupElem { map: MapHandle, key: Vec<u8> },
    MapUpdateElem { map: MapHandle, key: Vec<u8>, value: Vec<u8>, flags: u64 },
    MapDeleteElem { map: MapHandle, key: Vec<u8> },
    MapGetNextKey { map: MapHandle, key: Option<Vec<u8>> },
    /// Raw instruction bytes, map references already pointing at registry
    /// handles. `attach` fixes the context layout the verifier assumes.
    ProgLoad { name: String, attach: AttachSpec, insns: Vec<u8> },
    /// Binds a program to an attach point; `None` uses the program's own.
    LinkCreate { prog: u32, attach: Option<AttachSpec> },
    LinkDetach { link: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandResult {
    Handle(u32),
    Value(Option<Vec<u8>>),
    Key(Option<Vec<u8>>),
    Done,
}

impl CommandResult {
    pub fn handle(&self) -> Option<u32> {
        match self {
            CommandResult::Handle(h) => Some(*h),
            _ => None,
        }
    }
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::MapCreate(_) => CommandKind::MapCreate,
            Command::MapLookupElem { .. } => CommandKind::MapLookupElem,
            Command::MapUpdateElem { .. } => CommandKind::MapUpdateElem,
            Command::MapDeleteElem { .. } => CommandKind::MapDeleteElem,
            Command::MapGetNextKey { .. } => CommandKind::MapGetNextKey,
            Command::ProgLoad { .. } => CommandKind::ProgLoad,
            Command::LinkCreate { .. } => CommandKind::LinkCreate,
            Command::LinkDetach { .. } => CommandKind::LinkDetach,
        }
    }

    /// Checks payload bounds before anything is touched.
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: String| Err(ControlError::MalformedCommand(m));
        match self {
            Command::MapCreate(d) => {
                if d.name.is_empty() || d.name.len() > MAX_NAME_LEN {
                    return bad(format!("map name length {}", d.name.len()));
                }
            }
            Command::MapLookupElem { key, .. } | Command::MapDeleteElem { key, .. } => {
                if key.len() > MAX_ELEM_BYTES {
                    return bad(format!("key of {} bytes", key.len()));
                }
            }
            Command::MapGetNextKey { key, .. } => {
                if key.as_ref().is_some_and(|k| k.len() > MAX_ELEM_BYTES) {
                    return bad("oversized key".into());
                }
            }
            Command::MapUpdateElem { key, value, flags, .. } => {
                if key.len() > MAX_ELEM_BYTES || value.len() > MAX_ELEM_BYTES {
                    return bad(format!("key {} / value {} bytes", key.len(), value.len()));
                }
                UpdateFlag::from_raw(*flags)?;
            }
            Command::ProgLoad { name, insns, .. } => {
                if name.is_empty() || name.len() > MAX_NAME_LEN {
                    return bad(format!("program name length {}", name.len()));
                }
                if insns.is_empty() || insns.len() % crate::isa::INSN_SIZE != 0 {
                    return bad(format!("{} instruction bytes", insns.len()));
                }
                if insns.len() > MAX_PROGRAM_BYTES {
                    return bad(format!("program of {} bytes exceeds 1 MiB", insns.len()));
                }
            }
            Command::LinkCreate { .. } | Command::LinkDetach { .. } => {}
        }
        Ok(())
    }

    /// Payload bytes as stored in the log.
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer::default();
        match self {
            Command::MapCreate(d) => {
                w.u32(d.map_type.raw());
                w.u32(d.key_size);
                w.u32(d.value_size);
                w.u32(d.max_entries);
                w.u32(d.flags);
                w.bytes(d.name.as_bytes());
            }
            Command::MapLookupElem { map, key } | Command::MapDeleteElem { map, key } => {
                w.u32(*map);
                w.bytes(key);
            }
            Command::MapUpdateElem { map, key, value, flags } => {
                w.u32(*map);
                w.u64(*flags);
                w.bytes(key);
                w.bytes(value);
            }
            Command::MapGetNextKey { map, key } => {
                w.u32(*map);
                w.u32(key.is_some() as u32);
                w.bytes(key.as_deref().unwrap_or_default());
            }
            Command::ProgLoad { name, attach, insns } => {
                w.bytes(name.as_bytes());
                w.bytes(attach.section_name().as_bytes());
                w.bytes(insns);
            }
            Command::LinkCreate { prog, attach } => {
                w.u32(*prog);
                w.bytes(attach.as_ref().map(|a| a.section_name()).unwrap_or_default().as_bytes());
            }
            Command::LinkDetach { link } => w.u32(*link),
        }
        w.0
    }

    pub fn decode_payload(kind: CommandKind, payload: &[u8]) -> Result<Self, ControlError> {
        let mut r = Reader { buf: payload, at: 0 };
        let cmd = match kind {
            CommandKind::MapCreate => {
                let raw = r.u32()?;
                let map_type = MapType::from_raw(raw).ok_or_else(|| malformed(format!("map type {raw}")))?;
                let (key_size, value_size, max_entries, flags) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let name = r.string()?;
                let mut d = MapDescriptor::new(map_type, key_size, value_size, max_entries, &name);
                d.flags = flags;
                Command::MapCreate(d)
            }
            CommandKind::MapLookupElem => Command::MapLookupElem { map: r.u32()?, key: r.bytes()? },
            CommandKind::MapDeleteElem => Command::MapDeleteElem { map: r.u32()?, key: r.bytes()? },
            CommandKind::MapUpdateElem => {
                let map = r.u32()?;
                let flags = r.u64()?;
                Command::MapUpdateElem { map, flags, key: r.bytes()?, value: r.bytes()? }
            }
            CommandKind::MapGetNextKey => {
                let map = r.u32()?;
                let some = r.u32()? != 0;
                let key = r.bytes()?;
                Command::MapGetNextKey { map, key: some.then_some(key) }
            }
            CommandKind::ProgLoad => {
                let name = r.string()?;
                let attach = parse_spec(&r.string()?)?;
                Command::ProgLoad { name, attach, insns: r.bytes()? }
            }
            CommandKind::LinkCreate => {
                let prog = r.u32()?;
                let s = r.string()?;
                let attach = if s.is_empty() { None } else { Some(parse_spec(&s)?) };
                Command::LinkCreate { prog, attach }
            }
            CommandKind::LinkDetach => Command::LinkDetach { link: r.u32()? },
        };
        if r.at != payload.len() {
            return Err(malformed(format!("{} trailing payload bytes", payload.len() - r.at)));
        }
        Ok(cmd)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::MapCreate(d) => write!(f, "MAP_CREATE {} {}", d.map_type.name(), d.name),
            Command::MapLookupElem { map, .. } => write!(f, "MAP_LOOKUP_ELEM {map}"),
            Command::MapUpdateElem { map, .. } => write!(f, "MAP_UPDATE_ELEM {map}"),
            Command::MapDeleteElem { map, .. } => write!(f, "MAP_DELETE_ELEM {map}"),
            Command::MapGetNextKey { map, .. } => write!(f, "MAP_GET_NEXT_KEY {map}"),
            Command::ProgLoad { name, attach, .. } => write!(f, "PROG_LOAD {name} {attach}"),
            Command::LinkCreate { prog, .. } => write!(f, "LINK_CREATE {prog}"),
            Command::LinkDetach { link } => write!(f, "LINK_DETACH {link}"),
        }
    }
}

fn malformed(m: String) -> ControlError {
    ControlError::MalformedCommand(m)
}

fn parse_spec(s: &str) -> Result<AttachSpec, ControlError> {
    AttachSpec::parse(s).map_err(|e| malformed(e.to_string()))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ControlError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| malformed("truncated payload".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ControlError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ControlError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, ControlError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn string(&mut self) -> Result<String, ControlError> {
        String::from_utf8(self.bytes()?).map_err(|_| malformed("name is not utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payloads_round_trip() {
        let cmds = [
            Command::MapCreate(MapDescriptor::hash(8, 8, 1024, "counts")),
            Command::MapUpdateElem { map: 3, key: vec![1; 8], value: vec![2; 8], flags: 1 },
            Command::MapDeleteElem { map: 3, key: vec![1; 8] },
            Command::MapLookupElem { map: 3, key: vec![] },
            Command::MapGetNextKey { map: 4, key: None },
            Command::MapGetNextKey { map: 4, key: Some(vec![0; 4]) },
            Command::ProgLoad { name: "p".into(), attach: AttachSpec::uprobe("demo", "add"), insns: vec![0; 16] },
            Command::LinkCreate { prog: 5, attach: None },
            Command::LinkDetach { link: 6 },
        ];
        for c in cmds {
            let back = Command::decode_payload(c.kind(), &c.encode_payload()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let c = Command::MapUpdateElem { map: 3, key: vec![1; 8], value: vec![2; 8], flags: 0 };
        let p = c.encode_payload();
        for n in 0..p.len() {
            assert!(matches!(
                Command::decode_payload(CommandKind::MapUpdateElem, &p[..n]),
                Err(ControlError::MalformedCommand(_))
            ));
        }
    }
}
