//! Named POSIX shared-memory segments.

use std::ffi::CString;
use std::io;
use std::ptr::NonNull;

use super::MapError;

/// A mapped named segment. The creating side unlinks the name on drop
/// unless [`Segment::persist`] was called.
#[derive(Debug)]
pub struct Segment {
    name: String,
    ptr: NonNull<u8>,
    len: usize,
    writable: bool,
    unlink_on_drop: bool,
}

// The mapping is plain shared memory; synchronization is the user's job.
unsafe impl Send for Segment {}
unsafe impl Sync for Segment {}

fn c_name(name: &str) -> Result<CString, MapError> {
    if name.is_empty() || name.len() > 250 || name.contains('/') {
        return Err(MapError::InvalidDescriptor(format!("bad segment name {name:?}")));
    }
    CString::new(format!("/{name}"))
        .map_err(|_| MapError::InvalidDescriptor(format!("bad segment name {name:?}")))
}

/// Replaces characters that are not safe in a segment name.
pub fn sanitize(part: &str) -> String {
    part.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

impl Segment {
    /// Creates a zero-filled segment of `len` bytes. Fails if the name exists.
    pub fn create(name: &str, len: usize) -> Result<Self, MapError> {
        let cname = c_name(name)?;
        let fd = unsafe {
            libc::shm_open(cname.as_ptr(), libc::O_CREAT | libc::O_EXCL | libc::O_RDWR, 0o600)
        };
        if fd < 0 {
            let err = io::Error::last_os_error();
            return Err(match err.raw_os_error() {
                Some(libc::EEXIST) => MapError::SegmentExists(name.to_string()),
                _ => MapError::Io(err),
            });
        }
        let fail = |err: MapError| {
            unsafe {
                libc::close(fd);
                libc::shm_unlink(cname.as_ptr());
            }
            Err(err)
        };
        if unsafe { libc::ftruncate(fd, len as libc::off_t) } != 0 {
            return fail(MapError::Io(io::Error::last_os_error()));
        }
        // Reserve the pages now so a full tmpfs reports ENOSPC here rather
        // than SIGBUS on first touch.
        let rc = unsafe { libc::posix_fallocate(fd, 0, len as libc::off_t) };
        if rc != 0 {
            return fail(if rc == libc::ENOSPC {
                MapError::OutOfSharedMemory(len)
            } else {
                MapError::Io(io::Error::from_raw_os_error(rc))
            });
        }
        let ptr = match map_fd(fd, len, true) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        unsafe { libc::close(fd) };
        Ok(Segment { name: name.to_string(), ptr, len, writable: true, unlink_on_drop: true })
    }

    /// Maps an existing segment. Read-only mappings fault on write.
    pub fn open(name: &str, writable: bool) -> Result<Self, MapError> {
        let cname = c_name(name)?;
        let flags = if writable { libc::O_RDWR } else { libc::O_RDONLY };
        let fd = unsafe { libc::shm_open(cname.as_ptr(), flags, 0) };
        if fd < 0 {
            let err = io::Error::last_os_error();
            return Err(match err.raw_os_error() {
                Some(libc::ENOENT) => MapError::SegmentMissing(name.to_string()),
                _ => MapError::Io(err),
            });
        }
        let mut st: libc::stat = unsafe { std::mem::zeroed() };
        if unsafe { libc::fstat(fd, &mut st) } != 0 {
            let err = io::Error::last_os_error();
            unsafe { libc::close(fd) };
            return Err(MapError::Io(err));
        }
        let len = st.st_size as usize;
        let res = map_fd(fd, len, writable);
        unsafe { libc::close(fd) };
        let ptr = res?;
        Ok(Segment { name: name.to_string(), ptr, len, writable, unlink_on_drop: false })
    }

    /// Keeps the name alive after this handle is dropped.
    pub fn persist(&mut self) {
        self.unlink_on_drop = false;
    }

    /// Removes a segment name without mapping it.
    pub fn unlink(name: &str) -> Result<(), MapError> {
        let cname = c_name(name)?;
        if unsafe { libc::shm_unlink(cname.as_ptr()) } != 0 {
            return Err(MapError::Io(io::Error::last_os_error()));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_writable(&self) -> bool {
        self.writable
    }

    pub fn as_ptr(&self) -> *mut u8 {
        self.ptr.as_ptr()
    }

    /// Copy of `len` bytes at `off`.
    pub fn read_bytes(&self, off: usize, len: usize) -> Vec<u8> {
        assert!(off + len <= self.len);
        unsafe { std::slice::from_raw_parts(self.as_ptr().add(off), len).to_vec() }
    }
}

fn map_fd(fd: libc::c_int, len: usize, writable: bool) -> Result<NonNull<u8>, MapError> {
    if len == 0 {
        return Err(MapError::CorruptSegment("segment is empty".into()));
    }
    let prot = if writable { libc::PROT_READ | libc::PROT_WRITE } else { libc::PROT_READ };
    let p = unsafe { libc::mmap(std::ptr::null_mut(), len, prot, libc::MAP_SHARED, fd, 0) };
    if p == libc::MAP_FAILED {
        let err = io::Error::last_os_error();
        return Err(match err.raw_os_error() {
            Some(libc::ENOMEM) => MapError::OutOfSharedMemory(len),
            _ => MapError::Io(err),
        });
    }
    Ok(NonNull::new(p as *mut u8).expect("mmap never returns null on success"))
}

impl Drop for Segment {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr.as_ptr() as *mut libc::c_void, self.len);
        }
        if self.unlink_on_drop {
            let _ = Segment::unlink(&self.name);
        }
    }
}
