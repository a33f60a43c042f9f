use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::attach::{self, AttachSpec, Attachment, HookStats};
use crate::engine::{EngineError, Executable, HelperRegistry, TraceSink};
use crate::helpers;
use crate::isa;
use crate::loader;
use crate::maps::{Map, MapDescriptor, MapTable};

use super::{ControlError, SharedRegistry};

/// Default interval between epoch checks.
pub const POLL_INTERVAL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapView {
    pub segment: String,
    pub desc: MapDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramView {
    pub name: String,
    pub attach: AttachSpec,
    pub insns: Arc<Vec<u8>>,
    /// crc32 of the instruction bytes.
    pub hash: u32,
}

impl ProgramView {
    pub(super) fn new(name: String, attach: AttachSpec, insns: Vec<u8>) -> Self {
        let hash = crc32fast::hash(&insns);
        Self { name, attach, insns: Arc::new(insns), hash }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkView {
    pub prog: u32,
    pub attach: AttachSpec,
    pub live: bool,
}

/// Everything an agent learns from replaying the log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentView {
    pub epoch: u64,
    pub maps: BTreeMap<u32, MapView>,
    pub programs: BTreeMap<u32, ProgramView>,
    pub links: BTreeMap<u32, LinkView>,
}

impl AgentView {
    pub fn is_empty(&self) -> bool {
        self.maps.is_empty() && self.programs.is_empty() && self.links.is_empty()
    }

    /// Links still to be applied.
    pub fn pending_links(&self) -> impl Iterator<Item = (u32, &LinkView)> {
        self.links.iter().filter(|(_, l)| l.live).map(|(h, l)| (*h, l))
    }

    /// crc32 over handle sets, map segment names and descriptors, program
    /// hashes and link states. Equal views have equal digests.
    pub fn digest(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.epoch.to_le_bytes());
        for (k, m) in &self.maps {
            h.update(&k.to_le_bytes());
            h.update(m.segment.as_bytes());
            let d = &m.desc;
            for v in [d.map_type.raw(), d.key_size, d.value_size, d.max_entries, d.flags] {
                h.update(&v.to_le_bytes());
            }
        }
        for (k, p) in &self.programs {
            h.update(&k.to_le_bytes());
            h.update(p.name.as_bytes());
            h.update(p.attach.section_name().as_bytes());
            h.update(&p.hash.to_le_bytes());
        }
        for (k, l) in &self.links {
            h.update(&k.to_le_bytes());
            h.update(&l.prog.to_le_bytes());
            h.update(l.attach.section_name().as_bytes());
            h.update(&[l.live as u8]);
        }
        h.finalize()
    }
}

/// The runtime inside a target process: replays the registry, opens its
/// maps, builds its programs and keeps the attached hooks in step with the
/// live links.
pub struct AgentRuntime {
    registry: SharedRegistry,
    maps: Arc<MapTable>,
    helpers: Arc<HelperRegistry>,
    programs: BTreeMap<u32, Arc<Executable>>,
    attached: BTreeMap<u32, Attachment>,
    failed: BTreeMap<u32, String>,
    view: AgentView,
}

impl std::fmt::Debug for AgentRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentRuntime")
            .field("registry", &self.registry)
            .field("epoch", &self.view.epoch)
            .field("attached", &self.attached.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl AgentRuntime {
    /// Opens registry `id` read-only with the standard helpers and applies
    /// its current state.
    pub fn attach(id: &str) -> Result<Self, ControlError> {
        Self::attach_with(id, |maps| helpers::standard_registry(maps, TraceSink::stderr()))
    }

    pub fn attach_with(id: &str, make_helpers: impl FnOnce(Arc<MapTable>) -> HelperRegistry) -> Result<Self, ControlError> {
        let registry = SharedRegistry::open(id)?;
        let maps = MapTable::new();
        let helpers = Arc::new(make_helpers(maps.clone()));
        let mut rt = AgentRuntime {
            registry,
            maps,
            helpers,
            programs: BTreeMap::new(),
            attached: BTreeMap::new(),
            failed: BTreeMap::new(),
            view: AgentView::default(),
        };
        rt.sync()?;
        Ok(rt)
    }

    pub fn registry(&self) -> &SharedRegistry {
        &self.registry
    }

    pub fn view(&self) -> &AgentView {
        &self.view
    }

    /// Maps opened from the registry, keyed by registry handle.
    pub fn maps(&self) -> &Arc<MapTable> {
        &self.maps
    }

    pub fn program(&self, handle: u32) -> Option<&Arc<Executable>> {
        self.programs.get(&handle)
    }

    pub fn helpers(&self) -> &Arc<HelperRegistry> {
        &self.helpers
    }

    /// Links currently patched into this process.
    pub fn attached_links(&self) -> Vec<u32> {
        self.attached.keys().copied().collect()
    }

    /// Links that could not be attached, with the reason.
    pub fn failed_links(&self) -> &BTreeMap<u32, String> {
        &self.failed
    }

    pub fn link_stats(&self, link: u32) -> Option<Arc<HookStats>> {
        self.attached.get(&link).map(|a| a.stats().clone())
    }

    /// Replays the registry if its epoch moved. Returns whether anything
    /// changed.
    pub fn sync(&mut self) -> Result<bool, ControlError> {
        if self.registry.epoch() == self.view.epoch && self.view.epoch != 0 {
            return Ok(false);
        }
        let view = self.registry.replay()?;
        if view == self.view {
            return Ok(false);
        }
        for (h, m) in &view.maps {
            if self.maps.get(*h).is_err() {
                self.maps.insert(*h, Arc::new(Map::open(&m.segment)?));
            }
        }
        for (h, p) in &view.programs {
            if self.programs.contains_key(h) {
                continue;
            }
            let program = isa::decode(&p.name, &p.insns).map_err(|e| ControlError::CorruptLog(e.to_string()))?;
            let cfg = loader::verify_config(&p.attach, &self.helpers);
            let exe = Executable::new(program, &self.maps, &cfg).map_err(|e| match e {
                EngineError::VerifyRejected(r) => ControlError::VerifyRejected(r),
                other => ControlError::Engine(other),
            })?;
            self.programs.insert(*h, Arc::new(exe));
        }
        for (h, l) in &view.links {
            if l.live && !self.attached.contains_key(h) && !self.failed.contains_key(h) {
                let exe = self.programs[&l.prog].clone();
                match attach::attach(&l.attach, exe, self.helpers.clone()) {
                    Ok(a) => {
                        self.attached.insert(*h, a);
                    }
                    Err(e) => {
                        self.failed.insert(*h, e.to_string());
                    }
                }
            }
            if !l.live {
                if let Some(mut a) = self.attached.remove(h) {
                    a.detach()?;
                }
            }
        }
        self.view = view;
        Ok(true)
    }

    /// Runs [`AgentRuntime::sync`] every `interval` on a background thread
    /// until `stop` is set, then hands the runtime back.
    pub fn spawn_poller(mut self, interval: Duration, stop: Arc<AtomicBool>) -> JoinHandle<Result<Self, ControlError>> {
        std::thread::spawn(move || {
            while !stop.load(Ordering::Acquire) {
                self.sync()?;
                std::thread::sleep(interval);
            }
            self.sync()?;
            Ok(self)
        })
    }

    /// Detaches everything this agent attached.
    pub fn detach_all(&mut self) -> Result<(), ControlError> {
        for (_, mut a) in std::mem::take(&mut self.attached) {
            a.detach()?;
        }
        Ok(())
    }
}
