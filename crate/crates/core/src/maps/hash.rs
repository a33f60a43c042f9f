//! Fixed-capacity open-addressing hash table laid out in the payload.
//!
//! Entry: 8-byte state word, key padded to 8, value padded to 8. Deleted
//! entries become tombstones that keep their key bytes so iteration can
//! resume from a key deleted mid-walk. Capacity is the next power of two
//! at or above twice `max_entries`; when live entries plus tombstones pass
//! three quarters of it, the table is rebuilt in place.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{round8, Map, MapDescriptor, MapError, UpdateFlag};

const EMPTY: u64 = 0;
const TOMBSTONE: u64 = 1;
const OCCUPIED: u64 = 2;

pub(super) fn capacity_for(max_entries: u32) -> usize {
    (max_entries as usize * 2).max(8).next_power_of_two()
}

pub(super) fn entry_size(desc: &MapDescriptor) -> usize {
    8 + round8(desc.key_size as usize) + round8(desc.value_size as usize)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Map {
    fn capacity(&self) -> usize {
        self.header().words[0].load(Ordering::Relaxed) as usize
    }

    fn live(&self) -> &AtomicU64 {
        &self.header().words[1]
    }

    fn tombstones(&self) -> &AtomicU64 {
        &self.header().words[2]
    }

    fn entry(&self, i: usize) -> *mut u8 {
        unsafe { self.payload().add(i * entry_size(&self.desc)) }
    }

    fn state(&self, i: usize) -> &AtomicU64 {
        unsafe { &*(self.entry(i) as *const AtomicU64) }
    }

    fn key_at(&self, i: usize) -> &[u8] {
        unsafe { std::slice::from_raw_parts(self.entry(i).add(8), self.desc.key_size as usize) }
    }

    pub(super) fn hash_value(&self, i: usize) -> *mut u8 {
        unsafe { self.entry(i).add(8 + round8(self.desc.key_size as usize)) }
    }

    /// Walks the probe sequence for `key`. Returns the occupied index if
    /// present, else the first reusable slot seen.
    fn probe(&self, key: &[u8], match_tombstones: bool) -> (Option<usize>, Option<usize>) {
        let cap = self.capacity();
        let mask = cap - 1;
        let mut i = fnv1a(key) as usize & mask;
        let mut free = None;
        for _ in 0..cap {
            match self.state(i).load(Ordering::Acquire) {
                EMPTY => return (None, free.or(Some(i))),
                OCCUPIED if self.key_at(i) == key => return (Some(i), free),
                TOMBSTONE => {
                    if match_tombstones && self.key_at(i) == key {
                        return (Some(i), free);
                    }
                    free.get_or_insert(i);
                }
                _ => {}
            }
            i = (i + 1) & mask;
        }
        (None, free)
    }

    pub(super) fn hash_find(&self, key: &[u8]) -> Option<usize> {
        if key.len() != self.desc.key_size as usize {
            return None;
        }
        self.probe(key, false).0
    }

    /// Caller holds the write lock.
    pub(super) fn hash_insert(&self, key: &[u8], value: &[u8], flag: UpdateFlag) -> Result<(), MapError> {
        let (found, _) = self.probe(key, false);
        if let Some(i) = found {
            if flag == UpdateFlag::NoExist {
                return Err(MapError::KeyExists);
            }
            unsafe { std::ptr::copy_nonoverlapping(value.as_ptr(), self.hash_value(i), value.len()) };
            return Ok(());
        }
        if flag == UpdateFlag::Exist {
            return Err(MapError::KeyAbsent);
        }
        let live = self.live().load(Ordering::Relaxed);
        if live >= self.desc.max_entries as u64 {
            return Err(MapError::TableFull(live as u32));
        }
        let used = live + self.tombstones().load(Ordering::Relaxed) + 1;
        if used * 4 > self.capacity() as u64 * 3 {
            self.rebuild();
        }
        let (_, free) = self.probe(key, false);
        let i = free.expect("load factor keeps a free slot");
        if self.state(i).load(Ordering::Relaxed) == TOMBSTONE {
            self.tombstones().fetch_sub(1, Ordering::Relaxed);
        }
        unsafe {
            std::ptr::copy_nonoverlapping(key.as_ptr(), self.entry(i).add(8), key.len());
            std::ptr::copy_nonoverlapping(value.as_ptr(), self.hash_value(i), value.len());
        }
        self.state(i).store(OCCUPIED, Ordering::Release);
        self.live().fetch_add(1, Ordering::Release);
        Ok(())
    }

    /// Caller holds the write lock.
    pub(super) fn hash_remove(&self, key: &[u8]) -> Result<(), MapError> {
        match self.probe(key, false).0 {
            Some(i) => {
                self.state(i).store(TOMBSTONE, Ordering::Release);
                self.live().fetch_sub(1, Ordering::Release);
                self.tombstones().fetch_add(1, Ordering::Relaxed);
                Ok(())
            }
            None => Err(MapError::KeyAbsent),
        }
    }

    /// Drops tombstones by reinserting every live entry.
    fn rebuild(&self) {
        let cap = self.capacity();
        let es = entry_size(&self.desc);
        let ks = self.desc.key_size as usize;
        let vs = self.desc.value_size as usize;
        let mut live = Vec::new();
        for i in 0..cap {
            if self.state(i).load(Ordering::Relaxed) == OCCUPIED {
                let v = unsafe { std::slice::from_raw_parts(self.hash_value(i), vs).to_vec() };
                live.push((self.key_at(i).to_vec(), v));
            }
        }
        unsafe { std::ptr::write_bytes(self.payload(), 0, cap * es) };
        self.tombstones().store(0, Ordering::Relaxed);
        let mask = cap - 1;
        for (k, v) in live {
            let mut i = fnv1a(&k) as usize & mask;
            while self.state(i).load(Ordering::Relaxed) != EMPTY {
                i = (i + 1) & mask;
            }
            unsafe {
                std::ptr::copy_nonoverlapping(k.as_ptr(), self.entry(i).add(8), ks);
                std::ptr::copy_nonoverlapping(v.as_ptr(), self.hash_value(i), vs);
            }
            self.state(i).store(OCCUPIED, Ordering::Release);
        }
    }

    /// Caller holds the read lock.
    pub(super) fn hash_next(&self, key: Option<&[u8]>) -> Option<Vec<u8>> {
        let start = match key {
            None => 0,
            Some(k) => match self.probe(k, true).0 {
                Some(i) => i + 1,
                None => 0,
            },
        };
        (start..self.capacity())
            .find(|&i| self.state(i).load(Ordering::Acquire) == OCCUPIED)
            .map(|i| self.key_at(i).to_vec())
    }
}
