//! Locks built on atomic words that live inside shared segments, so every
//! process mapping the segment synchronizes on the same memory.

use std::sync::atomic::{AtomicU32, Ordering};

const WRITER: u32 = 1 << 31;
const WRITER_WAITING: u32 = 1 << 30;
const READERS: u32 = WRITER_WAITING - 1;

fn backoff(spins: &mut u32) {
    *spins += 1;
    if *spins < 64 {
        std::hint::spin_loop();
    } else {
        std::thread::yield_now();
    }
}

/// Reader-writer lock over one shared word. Waiting writers block new
/// readers so writers are not starved.
pub struct SharedRwLock<'a> {
    word: &'a AtomicU32,
}

pub struct ReadGuard<'a> {
    word: &'a AtomicU32,
}

pub struct WriteGuard<'a> {
    word: &'a AtomicU32,
}

impl<'a> SharedRwLock<'a> {
    pub fn new(word: &'a AtomicU32) -> Self {
        Self { word }
    }

    pub fn read(&self) -> ReadGuard<'a> {
        let mut spins = 0;
        loop {
            let v = self.word.load(Ordering::Relaxed);
            if v & (WRITER | WRITER_WAITING) == 0
                && v & READERS != READERS
                && self
                    .word
                    .compare_exchange_weak(v, v + 1, Ordering::Acquire, Ordering::Relaxed)
                    .is_ok()
            {
                return ReadGuard { word: self.word };
            }
            backoff(&mut spins);
        }
    }

    pub fn write(&self) -> WriteGuard<'a> {
        let mut spins = 0;
        loop {
            let v = self.word.load(Ordering::Relaxed);
            if v & (WRITER | READERS) == 0 {
                if self
                    .word
                    .compare_exchange_weak(v, WRITER, Ordering::Acquire, Ordering::Relaxed)
                    .is_ok()
                {
                    return WriteGuard { word: self.word };
                }
            } else if v & WRITER_WAITING == 0 {
                self.word.fetch_or(WRITER_WAITING, Ordering::Relaxed);
            }
            backoff(&mut spins);
        }
    }
}

impl Drop for ReadGuard<'_> {
    fn drop(&mut self) {
        self.word.fetch_sub(1, Ordering::Release);
    }
}

impl Drop for WriteGuard<'_> {
    fn drop(&mut self) {
        self.word.store(0, Ordering::Release);
    }
}

/// Test-and-set spinlock over one shared word.
pub struct SpinGuard<'a> {
    word: &'a AtomicU32,
}

pub fn spin_lock(word: &AtomicU32) -> SpinGuard<'_> {
    let mut spins = 0;
    while word.compare_exchange_weak(0, 1, Ordering::Acquire, Ordering::Relaxed).is_err() {
        backoff(&mut spins);
    }
    SpinGuard { word }
}

/// Non-blocking acquire; `None` when already held.
pub fn try_spin_lock(word: &AtomicU32) -> Option<SpinGuard<'_>> {
    word.compare_exchange(0, 1, Ordering::Acquire, Ordering::Relaxed).ok().map(|_| SpinGuard { word })
}

impl Drop for SpinGuard<'_> {
    fn drop(&mut self) {
        self.word.store(0, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn writers_exclude_readers() {
        let word = Arc::new(AtomicU32::new(0));
        let counter = Arc::new(std::sync::atomic::AtomicU64::new(0));
        let threads: Vec<_> = (0..4)
            .map(|_| {
                let (word, counter) = (word.clone(), counter.clone());
                std::thread::spawn(move || {
                    let lock = SharedRwLock::new(&word);
                    for _ in 0..10_000 {
                        let _g = lock.write();
                        let v = counter.load(Ordering::Relaxed);
                        counter.store(v + 1, Ordering::Relaxed);
                    }
                    for _ in 0..1000 {
                        let _g = lock.read();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(counter.load(Ordering::Relaxed), 40_000);
        assert_eq!(word.load(Ordering::Relaxed), 0);
    }
}
