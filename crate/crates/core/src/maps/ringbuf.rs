//! Multi-producer, single-consumer ring buffer.
//!
//! Records carry an 8-byte header: a length word whose bit 31 marks a
//! record still being written and bit 30 a discarded record, followed by
//! the record's offset from the data start. Producers reserve under a
//! spinlock and commit by clearing the busy bit; the consumer stops at the
//! first busy record, so records are delivered in reservation order. A
//! record that would straddle the end of the data area is preceded by a
//! discarded padding record that fills the tail.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use super::lock::{spin_lock, try_spin_lock};
use super::{round8, Map, MapError, MapType};

pub const RECORD_HEADER: usize = 8;
const BUSY: u32 = 1 << 31;
const DISCARD: u32 = 1 << 30;
const LEN_MASK: u32 = DISCARD - 1;

impl Map {
    fn ring_check(&self) -> Result<usize, MapError> {
        if self.desc.map_type != MapType::RingBuf {
            return Err(MapError::Unsupported { op: "ringbuf", map_type: self.desc.map_type.name() });
        }
        Ok(self.desc.max_entries as usize)
    }

    fn consumer_pos(&self) -> &AtomicU64 {
        &self.header().words[0]
    }

    fn producer_pos(&self) -> &AtomicU64 {
        &self.header().words[1]
    }

    fn record_header(&self, off: usize) -> &AtomicU32 {
        unsafe { &*(self.payload().add(off) as *const AtomicU32) }
    }

    /// Reserves `len` bytes; returns the address of the payload area.
    pub fn ringbuf_reserve(&self, len: usize) -> Result<*mut u8, MapError> {
        let cap = self.ring_check()?;
        if len > cap - RECORD_HEADER || len > LEN_MASK as usize {
            return Err(MapError::PayloadTooLarge { len, max: cap - RECORD_HEADER });
        }
        let need = round8(len + RECORD_HEADER);
        let _g = spin_lock(&self.header().producer_lock);
        let cons = self.consumer_pos().load(Ordering::Acquire);
        let prod = self.producer_pos().load(Ordering::Relaxed);
        let pos = (prod % cap as u64) as usize;
        let pad = if pos + need > cap { cap - pos } else { 0 };
        if prod + (pad + need) as u64 - cons > cap as u64 {
            return Err(MapError::RingFull);
        }
        if pad > 0 {
            unsafe { (self.payload().add(pos + 4) as *mut u32).write(pos as u32) };
            self.record_header(pos).store((pad - RECORD_HEADER) as u32 | DISCARD, Ordering::Release);
        }
        let at = (pos + pad) % cap;
        unsafe { (self.payload().add(at + 4) as *mut u32).write(at as u32) };
        self.record_header(at).store(len as u32 | BUSY, Ordering::Release);
        self.producer_pos().store(prod + (pad + need) as u64, Ordering::Release);
        Ok(unsafe { self.payload().add(at + RECORD_HEADER) })
    }

    /// Resolves a payload address to its record header offset, checking
    /// that it names a record still being written.
    fn outstanding(&self, data: *mut u8) -> Result<usize, MapError> {
        let cap = self.ring_check()?;
        let base = self.payload() as usize;
        let addr = data as usize;
        let bad = Err(MapError::BadRecord(addr));
        if addr < base + RECORD_HEADER || addr >= base + cap || (addr - base) % 8 != 0 {
            return bad;
        }
        let off = addr - base - RECORD_HEADER;
        let stored = unsafe { (self.payload().add(off + 4) as *const u32).read() };
        let hdr = self.record_header(off).load(Ordering::Acquire);
        if hdr & BUSY == 0 || stored as usize != off {
            return bad;
        }
        Ok(off)
    }

    pub fn ringbuf_submit(&self, data: *mut u8) -> Result<(), MapError> {
        let off = self.outstanding(data)?;
        self.record_header(off).fetch_and(!BUSY, Ordering::Release);
        Ok(())
    }

    pub fn ringbuf_discard(&self, data: *mut u8) -> Result<(), MapError> {
        let off = self.outstanding(data)?;
        let h = self.record_header(off);
        let len = h.load(Ordering::Relaxed) & LEN_MASK;
        h.store(len | DISCARD, Ordering::Release);
        Ok(())
    }

    /// Copies `payload` into a new record and commits it.
    pub fn ringbuf_output(&self, payload: &[u8]) -> Result<(), MapError> {
        let p = self.ringbuf_reserve(payload.len())?;
        unsafe { std::ptr::copy_nonoverlapping(payload.as_ptr(), p, payload.len()) };
        self.ringbuf_submit(p)
    }

    /// Delivers every committed record in order and frees their space.
    /// Stops at the first record still being written.
    pub fn ringbuf_consume(&self, mut sink: impl FnMut(&[u8])) -> Result<usize, MapError> {
        let cap = self.ring_check()?;
        let _g = try_spin_lock(&self.header().consumer_lock).ok_or(MapError::ConsumerBusy)?;
        let mut cons = self.consumer_pos().load(Ordering::Relaxed);
        let mut delivered = 0;
        loop {
            let prod = self.producer_pos().load(Ordering::Acquire);
            if cons >= prod {
                break;
            }
            let off = (cons % cap as u64) as usize;
            let hdr = self.record_header(off).load(Ordering::Acquire);
            if hdr & BUSY != 0 {
                break;
            }
            let len = (hdr & LEN_MASK) as usize;
            if hdr & DISCARD == 0 {
                let data = unsafe { std::slice::from_raw_parts(self.payload().add(off + RECORD_HEADER), len) };
                sink(data);
                delivered += 1;
            }
            cons += round8(len + RECORD_HEADER) as u64;
            self.consumer_pos().store(cons, Ordering::Release);
        }
        Ok(delivered)
    }

    /// Bytes reserved but not yet consumed.
    pub fn ringbuf_pending(&self) -> Result<u64, MapError> {
        self.ring_check()?;
        Ok(self.producer_pos().load(Ordering::Acquire) - self.consumer_pos().load(Ordering::Acquire))
    }
}
