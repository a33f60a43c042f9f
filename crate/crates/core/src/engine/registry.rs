use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use super::EngineError;
use crate::helpers::FFI_BASE_ID;

/// Host function callable from programs: r1..r5 in, r0 out.
pub type HelperFn = Arc<dyn Fn(u64, u64, u64, u64, u64) -> u64 + Send + Sync>;

const DIRECT: usize = 256;

/// Helper id and FFI name tables. Immutable once shared.
#[derive(Clone)]
pub struct HelperRegistry {
    direct: Vec<Option<HelperFn>>,
    other: HashMap<u32, HelperFn>,
    ffi: BTreeMap<String, u32>,
    next_ffi: u32,
}

impl Default for HelperRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for HelperRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HelperRegistry").field("ids", &self.ids()).field("ffi", &self.ffi).finish()
    }
}

impl HelperRegistry {
    pub fn new() -> Self {
        Self { direct: vec![None; DIRECT], other: HashMap::new(), ffi: BTreeMap::new(), next_ffi: FFI_BASE_ID }
    }

    pub fn register_helper(&mut self, id: u32, f: HelperFn) -> Result<(), EngineError> {
        if self.get(id).is_some() {
            return Err(EngineError::DuplicateHelperId(id));
        }
        if (id as usize) < DIRECT {
            self.direct[id as usize] = Some(f);
        } else {
            self.other.insert(id, f);
        }
        Ok(())
    }

    /// Registers a host function by name and returns its assigned id.
    pub fn register_ffi(&mut self, name: &str, f: HelperFn) -> Result<u32, EngineError> {
        if self.ffi.contains_key(name) {
            return Err(EngineError::DuplicateName(name.to_string()));
        }
        while self.get(self.next_ffi).is_some() {
            self.next_ffi += 1;
        }
        let id = self.next_ffi;
        self.register_helper(id, f)?;
        self.ffi.insert(name.to_string(), id);
        self.next_ffi += 1;
        Ok(id)
    }

    pub fn ffi_id(&self, name: &str) -> Option<u32> {
        self.ffi.get(name).copied()
    }

    pub fn ffi_names(&self) -> impl Iterator<Item = (&str, u32)> {
        self.ffi.iter().map(|(n, id)| (n.as_str(), *id))
    }

    #[inline]
    pub fn get(&self, id: u32) -> Option<&HelperFn> {
        match self.direct.get(id as usize) {
            Some(slot) => slot.as_ref(),
            None => self.other.get(&id),
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        self.get(id).is_some()
    }

    /// Every registered id, ascending.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..DIRECT as u32).filter(|&i| self.direct[i as usize].is_some()).collect();
        ids.extend(self.other.keys().copied());
        ids.sort_unstable();
        ids
    }
}

/// Destination of `trace_printk` lines.
#[derive(Clone)]
pub struct TraceSink(Arc<dyn Fn(&str) + Send + Sync>);

impl fmt::Debug for TraceSink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TraceSink")
    }
}

impl Default for TraceSink {
    fn default() -> Self {
        Self::stderr()
    }
}

impl TraceSink {
    pub fn stderr() -> Self {
        Self(Arc::new(|line| eprintln!("{line}")))
    }

    pub fn from_fn(f: impl Fn(&str) + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    /// A sink that keeps lines in memory.
    pub fn capture() -> (Self, Arc<Mutex<Vec<String>>>) {
        let lines = Arc::new(Mutex::new(Vec::new()));
        let l = lines.clone();
        (Self::from_fn(move |s| l.lock().expect("trace capture").push(s.to_string())), lines)
    }

    pub fn emit(&self, line: &str) {
        (self.0)(line)
    }
}
