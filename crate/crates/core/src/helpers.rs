//! Helper numbering shared by the verifier, the engine and the loader.
//!
//! Ids follow the kernel UAPI `enum bpf_func_id` so objects built by the
//! standard toolchain call the right functions unmodified.

pub const MAP_LOOKUP_ELEM: u32 = 1;
pub const MAP_UPDATE_ELEM: u32 = 2;
pub const MAP_DELETE_ELEM: u32 = 3;
pub const KTIME_GET_NS: u32 = 5;
pub const TRACE_PRINTK: u32 = 6;
pub const GET_CURRENT_PID_TGID: u32 = 14;
pub const PROBE_READ_USER: u32 = 112;
pub const RINGBUF_RESERVE: u32 = 131;
pub const RINGBUF_SUBMIT: u32 = 132;
pub const RINGBUF_DISCARD: u32 = 133;

/// First id handed out to name-registered host (FFI) functions.
pub const FFI_BASE_ID: u32 = 100_000;

/// The helper set every runtime registers.
pub const STANDARD_HELPERS: [u32; 10] = [
    MAP_LOOKUP_ELEM,
    MAP_UPDATE_ELEM,
    MAP_DELETE_ELEM,
    KTIME_GET_NS,
    TRACE_PRINTK,
    GET_CURRENT_PID_TGID,
    PROBE_READ_USER,
    RINGBUF_RESERVE,
    RINGBUF_SUBMIT,
    RINGBUF_DISCARD,
];

pub fn name(id: u32) -> Option<&'static str> {
    Some(match id {
        MAP_LOOKUP_ELEM => "map_lookup_elem",
        MAP_UPDATE_ELEM => "map_update_elem",
        MAP_DELETE_ELEM => "map_delete_elem",
        KTIME_GET_NS => "ktime_get_ns",
        TRACE_PRINTK => "trace_printk",
        GET_CURRENT_PID_TGID => "get_current_pid_tgid",
        PROBE_READ_USER => "probe_read_user",
        RINGBUF_RESERVE => "ringbuf_reserve",
        RINGBUF_SUBMIT => "ringbuf_submit",
        RINGBUF_DISCARD => "ringbuf_discard",
        _ => return None,
    })
}

use std::sync::Arc;

use crate::engine::{HelperFn, HelperRegistry, TraceSink};
use crate::maps::{MapTable, UpdateFlag};

fn errno(e: i32) -> u64 {
    (-(e as i64)) as u64
}

/// Copies `dst.len()` bytes from `src` in this process, failing instead of
/// faulting when the source is unmapped.
pub fn read_user(dst: &mut [u8], src: u64) -> bool {
    if dst.is_empty() {
        return true;
    }
    let local = libc::iovec { iov_base: dst.as_mut_ptr().cast(), iov_len: dst.len() };
    let remote = libc::iovec { iov_base: src as *mut libc::c_void, iov_len: dst.len() };
    let n = unsafe { libc::process_vm_readv(libc::getpid(), &local, 1, &remote, 1, 0) };
    n == dst.len() as isize
}

/// Reads a NUL-terminated string of at most `max` bytes from `src`.
pub fn read_user_str(src: u64, max: usize) -> Option<String> {
    let mut out = Vec::new();
    let mut chunk = [0u8; 32];
    while out.len() < max {
        // Never read across a page boundary in one go: the next page may
        // be unmapped even though the string ends before it.
        let addr = src + out.len() as u64;
        let to_page = (4096 - (addr % 4096)) as usize;
        let n = chunk.len().min(to_page).min(max - out.len());
        if !read_user(&mut chunk[..n], addr) {
            return if out.is_empty() { None } else { Some(String::from_utf8_lossy(&out).into_owned()) };
        }
        match chunk[..n].iter().position(|&b| b == 0) {
            Some(end) => {
                out.extend_from_slice(&chunk[..end]);
                break;
            }
            None => out.extend_from_slice(&chunk[..n]),
        }
    }
    Some(String::from_utf8_lossy(&out).into_owned())
}

/// Expands a `trace_printk` format with up to three integer arguments.
/// Supports `%d %i %u %x %X %c %s %p %%` with optional `0`, width and
/// `l`/`ll` modifiers.
pub fn format_printk(fmt: &[u8], args: [u64; 3]) -> String {
    let mut out = String::new();
    let mut next = args.iter();
    let mut i = 0;
    while i < fmt.len() {
        let c = fmt[i];
        i += 1;
        if c != b'%' {
            out.push(c as char);
            continue;
        }
        let zero = fmt.get(i) == Some(&b'0');
        if zero {
            i += 1;
        }
        let mut width = 0usize;
        while let Some(d @ b'0'..=b'9') = fmt.get(i).copied() {
            width = width * 10 + (d - b'0') as usize;
            i += 1;
        }
        let mut long = 0;
        while fmt.get(i) == Some(&b'l') {
            long += 1;
            i += 1;
        }
        let Some(&conv) = fmt.get(i) else {
            out.push('%');
            break;
        };
        i += 1;
        if conv == b'%' {
            out.push('%');
            continue;
        }
        if !b"diuxXcps".contains(&conv) {
            out.push('%');
            out.push(conv as char);
            continue;
        }
        let v = next.next().copied().unwrap_or(0);
        let body = match conv {
            b'd' | b'i' if long > 0 => (v as i64).to_string(),
            b'd' | b'i' => (v as i32).to_string(),
            b'u' if long > 0 => v.to_string(),
            b'u' => (v as u32).to_string(),
            b'x' if long > 0 => format!("{v:x}"),
            b'x' => format!("{:x}", v as u32),
            b'X' if long > 0 => format!("{v:X}"),
            b'X' => format!("{:X}", v as u32),
            b'c' => ((v as u8) as char).to_string(),
            b'p' => format!("0x{v:x}"),
            _ => read_user_str(v, 256).unwrap_or_else(|| "(fault)".to_string()),
        };
        let pad = width.saturating_sub(body.len());
        let fill = if zero && conv != b's' { '0' } else { ' ' };
        if fill == '0' && body.starts_with('-') {
            out.push('-');
            out.extend(std::iter::repeat('0').take(pad));
            out.push_str(&body[1..]);
        } else {
            out.extend(std::iter::repeat(fill).take(pad));
            out.push_str(&body);
        }
    }
    out
}

fn helper(f: impl Fn(u64, u64, u64, u64, u64) -> u64 + Send + Sync + 'static) -> HelperFn {
    Arc::new(f)
}

/// Nanoseconds on the monotonic clock.
pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// Process id in the upper half, thread id in the lower half.
pub fn pid_tgid() -> u64 {
    let pid = unsafe { libc::getpid() } as u64;
    let tid = unsafe { libc::syscall(libc::SYS_gettid) } as u64;
    (pid << 32) | (tid & 0xffff_ffff)
}

/// Registers every id in [`STANDARD_HELPERS`], bound to `maps`.
pub fn register_standard(
    reg: &mut HelperRegistry,
    maps: Arc<MapTable>,
    sink: TraceSink,
) -> Result<(), crate::engine::EngineError> {
    let m = maps.clone();
    reg.register_helper(
        MAP_LOOKUP_ELEM,
        helper(move |h, key, _, _, _| {
            let Ok(map) = m.get(h as u32) else { return 0 };
            let ks = map.descriptor().key_size as usize;
            let key = unsafe { std::slice::from_raw_parts(key as *const u8, ks) };
            map.lookup_ptr(key) as u64
        }),
    )?;
    let m = maps.clone();
    reg.register_helper(
        MAP_UPDATE_ELEM,
        helper(move |h, key, value, flags, _| {
            let Ok(map) = m.get(h as u32) else { return errno(libc::EBADF) };
            let d = map.descriptor();
            if d.read_only_prog() {
                return errno(libc::EPERM);
            }
            let key = unsafe { std::slice::from_raw_parts(key as *const u8, d.key_size as usize) };
            let value = unsafe { std::slice::from_raw_parts(value as *const u8, d.value_size as usize) };
            let res = UpdateFlag::from_raw(flags).and_then(|f| map.update(key, value, f));
            match res {
                Ok(()) => 0,
                Err(e) => e.errno() as u64,
            }
        }),
    )?;
    let m = maps.clone();
    reg.register_helper(
        MAP_DELETE_ELEM,
        helper(move |h, key, _, _, _| {
            let Ok(map) = m.get(h as u32) else { return errno(libc::EBADF) };
            let ks = map.descriptor().key_size as usize;
            let key = unsafe { std::slice::from_raw_parts(key as *const u8, ks) };
            match map.delete(key) {
                Ok(()) => 0,
                Err(e) => e.errno() as u64,
            }
        }),
    )?;
    reg.register_helper(KTIME_GET_NS, helper(|_, _, _, _, _| monotonic_ns()))?;
    reg.register_helper(
        TRACE_PRINTK,
        helper(move |fmt, size, a, b, c| {
            let raw = unsafe { std::slice::from_raw_parts(fmt as *const u8, size as usize) };
            let raw = &raw[..raw.iter().position(|&x| x == 0).unwrap_or(raw.len())];
            let text = format_printk(raw, [a, b, c]);
            sink.emit(text.strip_suffix('\n').unwrap_or(&text));
            text.len() as u64
        }),
    )?;
    reg.register_helper(GET_CURRENT_PID_TGID, helper(|_, _, _, _, _| pid_tgid()))?;
    reg.register_helper(
        PROBE_READ_USER,
        helper(|dst, size, src, _, _| {
            let dst = unsafe { std::slice::from_raw_parts_mut(dst as *mut u8, size as usize) };
            if read_user(dst, src) {
                0
            } else {
                dst.fill(0);
                errno(libc::EFAULT)
            }
        }),
    )?;
    let m = maps.clone();
    reg.register_helper(
        RINGBUF_RESERVE,
        helper(move |h, size, flags, _, _| {
            if flags != 0 {
                return 0;
            }
            match m.get(h as u32).and_then(|map| map.ringbuf_reserve(size as usize)) {
                Ok(p) => p as u64,
                Err(_) => 0,
            }
        }),
    )?;
    let m = maps.clone();
    reg.register_helper(
        RINGBUF_SUBMIT,
        helper(move |p, _, _, _, _| match m.containing(p as usize) {
            Some(map) => map.ringbuf_submit(p as *mut u8).map_or_else(|e| e.errno() as u64, |_| 0),
            None => errno(libc::EINVAL),
        }),
    )?;
    let m = maps;
    reg.register_helper(
        RINGBUF_DISCARD,
        helper(move |p, _, _, _, _| match m.containing(p as usize) {
            Some(map) => map.ringbuf_discard(p as *mut u8).map_or_else(|e| e.errno() as u64, |_| 0),
            None => errno(libc::EINVAL),
        }),
    )?;
    Ok(())
}

/// A registry holding just the standard helpers.
pub fn standard_registry(maps: Arc<MapTable>, sink: TraceSink) -> HelperRegistry {
    let mut reg = HelperRegistry::new();
    register_standard(&mut reg, maps, sink).expect("fresh registry has no ids");
    reg
}
