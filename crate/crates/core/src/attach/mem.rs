//! Code memory: patching live text and allocating trampolines near it.

use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::AttachError;

pub fn page_size() -> usize {
    unsafe { libc::sysconf(libc::_SC_PAGESIZE) as usize }
}

fn page_span(addr: usize, len: usize) -> (usize, usize) {
    let ps = page_size();
    let start = addr & !(ps - 1);
    let end = (addr + len + ps - 1) & !(ps - 1);
    (start, end - start)
}

fn protect(start: usize, len: usize, prot: i32) -> Result<(), AttachError> {
    let r = unsafe { libc::mprotect(start as *mut libc::c_void, len, prot) };
    if r != 0 {
        return Err(AttachError::Protect { address: start as u64, source: io::Error::last_os_error() });
    }
    Ok(())
}

/// Overwrites executable bytes at `addr`, leaving the pages read+execute.
///
/// # Safety
/// `addr..addr+bytes.len()` must be mapped code. Unless the range fits
/// in one aligned 8-byte word, no thread may be executing it meanwhile.
pub unsafe fn write_code(addr: usize, bytes: &[u8]) -> Result<(), AttachError> {
    let (start, len) = page_span(addr, bytes.len());
    protect(start, len, libc::PROT_READ | libc::PROT_WRITE | libc::PROT_EXEC)?;
    let word = addr & !7;
    if addr + bytes.len() <= word + 8 {
        // One aligned store, so a thread running this code sees either
        // the old or the new instruction, never a mix.
        let cell = &*(word as *const AtomicU64);
        let mut v = cell.load(Ordering::Relaxed).to_le_bytes();
        v[addr - word..addr - word + bytes.len()].copy_from_slice(bytes);
        cell.store(u64::from_le_bytes(v), Ordering::Release);
    } else {
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), addr as *mut u8, bytes.len());
    }
    protect(start, len, libc::PROT_READ | libc::PROT_EXEC)
}

/// Reads `len` bytes of code.
///
/// # Safety
/// The range must be mapped and readable.
pub unsafe fn read_code(addr: usize, len: usize) -> Vec<u8> {
    std::slice::from_raw_parts(addr as *const u8, len).to_vec()
}

const CHUNK: usize = 64 << 10;
const STEP: usize = 1 << 20;
const REACH: usize = (1 << 31) - 2 * CHUNK;

struct Chunk {
    base: usize,
    used: usize,
}

static POOL: Mutex<Vec<Chunk>> = Mutex::new(Vec::new());

fn reachable(a: usize, b: usize) -> bool {
    a.abs_diff(b) < REACH
}

fn map_chunk(hint: usize, fixed: bool) -> Option<usize> {
    let flags = libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | if fixed { libc::MAP_FIXED_NOREPLACE } else { 0 };
    let p = unsafe {
        libc::mmap(
            hint as *mut libc::c_void,
            CHUNK,
            libc::PROT_READ | libc::PROT_WRITE | libc::PROT_EXEC,
            flags,
            -1,
            0,
        )
    };
    if p == libc::MAP_FAILED {
        return None;
    }
    Some(p as usize)
}

fn map_near(target: usize) -> Option<usize> {
    let origin = target & !(STEP - 1);
    for i in 1..(REACH / STEP) {
        let d = i * STEP;
        for hint in [origin.checked_sub(d), origin.checked_add(d)].into_iter().flatten() {
            if hint < (1 << 16) || hint >= (1 << 47) - CHUNK {
                continue;
            }
            if let Some(p) = map_chunk(hint, true) {
                if reachable(p, target) {
                    return Some(p);
                }
                unsafe { libc::munmap(p as *mut libc::c_void, CHUNK) };
            }
        }
    }
    None
}

/// Reserves `len` bytes of RWX memory, preferably within rel32 reach of
/// `near`. Trampolines are never freed: a thread may still be running
/// one when its hook is detached.
pub fn alloc_trampoline(near: usize, len: usize) -> Result<usize, AttachError> {
    let len = (len + 15) & !15;
    let mut pool = POOL.lock().expect("trampoline pool");
    if let Some(c) = pool.iter_mut().find(|c| reachable(c.base, near) && c.used + len <= CHUNK) {
        let at = c.base + c.used;
        c.used += len;
        return Ok(at);
    }
    let base = match map_near(near) {
        Some(b) => b,
        None => map_chunk(0, false).ok_or(AttachError::NoTrampolineSpace { near: near as u64 })?,
    };
    pool.push(Chunk { base, used: len });
    Ok(base)
}

/// Copies a trampoline image into pool memory.
///
/// # Safety
/// `addr` must come from [`alloc_trampoline`] with at least `bytes.len()`.
pub unsafe fn fill_trampoline(addr: usize, bytes: &[u8]) {
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), addr as *mut u8, bytes.len());
}
