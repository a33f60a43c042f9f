//! Map workloads shared by the maps tests and the acceptance run.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use uebpf::maps::{Map, MapDescriptor, MapError, UpdateFlag};

pub fn segment(tag: &str) -> String {
    static N: AtomicUsize = AtomicUsize::new(0);
    format!("uebpf_it_{}_{}_{}", std::process::id(), tag, N.fetch_add(1, Ordering::Relaxed))
}

/// Value pattern: every 8-byte word carries the same stamp, so a value
/// mixing two writes is detectable.
fn stamped(stamp: u64, words: usize) -> Vec<u8> {
    (0..words).flat_map(|_| stamp.to_le_bytes()).collect()
}

fn is_torn(value: &[u8]) -> bool {
    let first = &value[..8];
    value.chunks(8).any(|w| w != first)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct HashOutcome {
    pub ops: usize,
    pub inserts: usize,
    pub deletes: usize,
    pub live: usize,
    pub iterated: usize,
    pub torn: usize,
}

impl HashOutcome {
    pub fn consistent(&self) -> bool {
        self.torn == 0 && self.live == self.inserts - self.deletes && self.iterated == self.live
    }
}

/// `threads` workers each issue `ops` random inserts, overwrites, deletes
/// and lookups on one shared hash map over a small key space.
pub fn concurrent_hash(threads: usize, ops: usize, seed: u64) -> HashOutcome {
    const KEYS: u64 = 1024;
    const WORDS: usize = 8;
    let map = Arc::new(Map::create(&MapDescriptor::hash(8, 8 * WORDS as u32, KEYS as u32, "churn"), &segment("churn")).unwrap());
    let barrier = Arc::new(Barrier::new(threads));
    let workers: Vec<_> = (0..threads)
        .map(|t| {
            let map = map.clone();
            let barrier = barrier.clone();
            std::thread::spawn(move || {
                let mut rng = StdRng::seed_from_u64(seed ^ (t as u64) << 32);
                let mut out = HashOutcome::default();
                barrier.wait();
                for i in 0..ops {
                    let key = rng.gen_range(0..KEYS).to_le_bytes();
                    let stamp = (t as u64) << 48 | i as u64;
                    match rng.gen_range(0..4) {
                        0 => match map.update(&key, &stamped(stamp, WORDS), UpdateFlag::NoExist) {
                            Ok(()) => out.inserts += 1,
                            Err(MapError::KeyExists) => {}
                            Err(e) => panic!("insert: {e}"),
                        },
                        1 => match map.update(&key, &stamped(stamp, WORDS), UpdateFlag::Exist) {
                            Ok(()) | Err(MapError::KeyAbsent) => {}
                            Err(e) => panic!("overwrite: {e}"),
                        },
                        2 => match map.delete(&key) {
                            Ok(()) => out.deletes += 1,
                            Err(MapError::KeyAbsent) => {}
                            Err(e) => panic!("delete: {e}"),
                        },
                        _ => {
                            if let Some(v) = map.lookup(&key).unwrap() {
                                out.torn += is_torn(&v) as usize;
                            }
                        }
                    }
                    out.ops += 1;
                }
                out
            })
        })
        .collect();
    let mut total = HashOutcome::default();
    for w in workers {
        let o = w.join().unwrap();
        total.ops += o.ops;
        total.inserts += o.inserts;
        total.deletes += o.deletes;
        total.torn += o.torn;
    }
    total.live = map.len();
    let entries = map.entries().unwrap();
    total.iterated = entries.len();
    total.torn += entries.iter().filter(|(_, v)| is_torn(v)).count();
    total
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RingOutcome {
    pub produced: usize,
    pub consumed: usize,
    pub out_of_order: usize,
    pub duplicates: usize,
    pub ring_full_retries: usize,
}

impl RingOutcome {
    pub fn lossless_fifo(&self) -> bool {
        self.consumed == self.produced && self.out_of_order == 0 && self.duplicates == 0
    }
}

/// `producers` threads each submit `per_producer` sequence-numbered
/// records while one consumer drains. A full ring makes the producer
/// retry; nothing is dropped.
pub fn ringbuf_stream(producers: usize, per_producer: usize, capacity: u32) -> RingOutcome {
    let map = Arc::new(Map::create(&MapDescriptor::ringbuf(capacity, "stream"), &segment("stream")).unwrap());
    let retries = Arc::new(AtomicUsize::new(0));
    let handles: Vec<_> = (0..producers)
        .map(|p| {
            let map = map.clone();
            let retries = retries.clone();
            std::thread::spawn(move || {
                for seq in 0..per_producer as u64 {
                    let mut rec = (p as u64).to_le_bytes().to_vec();
                    rec.extend(seq.to_le_bytes());
                    // Variable tail so records straddle the wrap point.
                    rec.resize(16 + (seq % 37) as usize, seq as u8);
                    loop {
                        match map.ringbuf_output(&rec) {
                            Ok(()) => break,
                            Err(MapError::RingFull) => {
                                retries.fetch_add(1, Ordering::Relaxed);
                                std::thread::yield_now();
                            }
                            Err(e) => panic!("output: {e}"),
                        }
                    }
                }
            })
        })
        .collect();
    let total = producers * per_producer;
    let mut next = vec![0u64; producers];
    let mut out = RingOutcome { produced: total, ..Default::default() };
    let mut seen = std::collections::HashSet::new();
    while out.consumed < total {
        let n = map
            .ringbuf_consume(|d| {
                let p = u64::from_le_bytes(d[..8].try_into().unwrap()) as usize;
                let seq = u64::from_le_bytes(d[8..16].try_into().unwrap());
                if !seen.insert((p, seq)) {
                    out.duplicates += 1;
                }
                if seq != next[p] || d.len() != 16 + (seq % 37) as usize {
                    out.out_of_order += 1;
                }
                next[p] = seq + 1;
                out.consumed += 1;
            })
            .unwrap();
        if n == 0 {
            if handles.iter().all(|h| h.is_finished()) && map.ringbuf_pending().unwrap() == 0 {
                break;
            }
            std::thread::yield_now();
        }
    }
    for h in handles {
        h.join().unwrap();
    }
    out.ring_full_retries = retries.load(Ordering::Relaxed);
    out
}

/// Control side creates maps and writes; a forked process opens the same
/// segments by name, checks the writes and answers through the maps.
/// Returns the child's exit status and whether control saw its answers.
pub fn cross_process(entries: u32) -> Result<(), String> {
    let hash_seg = segment("xh");
    let arr_seg = segment("xa");
    let hash = Map::create(&MapDescriptor::hash(8, 8, entries * 2, "xh"), &hash_seg).map_err(|e| e.to_string())?;
    let arr = Map::create(&MapDescriptor::array(8, entries, "xa"), &arr_seg).map_err(|e| e.to_string())?;
    for i in 0..entries as u64 {
        hash.update(&i.to_le_bytes(), &(i * 3).to_le_bytes(), UpdateFlag::Any).unwrap();
        arr.update(&(i as u32).to_le_bytes(), &(i * 5).to_le_bytes(), UpdateFlag::Any).unwrap();
    }
    let pid = unsafe { libc::fork() };
    if pid == 0 {
        let code = (|| -> Result<i32, MapError> {
            let h = Map::open(&hash_seg)?;
            let a = Map::open(&arr_seg)?;
            for i in 0..entries as u64 {
                if h.lookup(&i.to_le_bytes())? != Some((i * 3).to_le_bytes().to_vec()) {
                    return Ok(3);
                }
                if a.lookup(&(i as u32).to_le_bytes())? != Some((i * 5).to_le_bytes().to_vec()) {
                    return Ok(4);
                }
                h.update(&(i + 1_000_000).to_le_bytes(), &i.to_le_bytes(), UpdateFlag::NoExist)?;
                a.update(&(i as u32).to_le_bytes(), &(i * 7).to_le_bytes(), UpdateFlag::Exist)?;
            }
            Ok(0)
        })()
        .unwrap_or(2);
        unsafe { libc::_exit(code) };
    }
    let mut status = 0;
    unsafe { libc::waitpid(pid, &mut status, 0) };
    if !(libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0) {
        return Err(format!("child status {status:#x}"));
    }
    for i in 0..entries as u64 {
        if hash.lookup(&(i + 1_000_000).to_le_bytes()).unwrap() != Some(i.to_le_bytes().to_vec()) {
            return Err(format!("child insert {i} not visible"));
        }
        if arr.lookup(&(i as u32).to_le_bytes()).unwrap() != Some((i * 7).to_le_bytes().to_vec()) {
            return Err(format!("child write to slot {i} not visible"));
        }
    }
    if hash.len() != 2 * entries as usize {
        return Err(format!("hash holds {} entries", hash.len()));
    }
    Ok(())
}
