//! Native code linked into the library for benchmarking and hook tests:
//! host builds of the benchmark kernels and a small demo target.

/// Host builds of the benchmark kernels (fixtures/bench/native.c).
pub mod native {
    extern "C" {
        pub fn native_log2_int(x: u64) -> u64;
        pub fn native_prime(n: u64) -> u64;
        pub fn native_memcpy(dst: *mut u8, src: *const u8, len: u64) -> u64;
        pub fn native_simple(x: u64) -> u64;
        pub fn native_switch(x: u64) -> u64;
        pub fn native_strcmp_fail(a: *const u8) -> u64;
        pub fn native_memory_a_plus_b(mem: *const u64) -> u64;
    }

    /// The string `strcmp_fail` compares against.
    pub const STRCMP_REFERENCE: &[u8] = b"the quick brown fox jumps over the lazy dog";
}

/// Demo target (fixtures/demo/demo.c). All of its code sits in one
/// section, returned by [`demo::region`].
pub mod demo {
    extern "C" {
        pub fn demo_add(a: i64, b: i64) -> i64;
        pub fn demo_fib(n: i64) -> i64;
        pub fn demo_deep(depth: i64) -> i64;
        pub fn demo_sentinel6(a: i64, b: i64, c: i64, d: i64, e: i64, f: i64) -> i64;
        pub fn demo_ret42() -> i64;
        pub fn demo_openat(path: *const libc::c_char, flags: i64) -> i64;
        pub fn demo_close(fd: i64) -> i64;
        pub fn demo_getpid() -> i64;
        pub fn demo_write(fd: i64, buf: *const u8, len: i64) -> i64;
        pub fn demo_open_loop(path: *const libc::c_char, n: i64) -> i64;
        pub fn demo_workload(x: i64) -> i64;
        pub fn demo_imm_pattern() -> i64;
        pub fn demo_tiny(a: i32, b: i32) -> i32;
        pub fn demo_branchy(a: i64) -> i64;
        fn demo_region(start: *mut usize, end: *mut usize);
    }

    /// Address range of the demo code section.
    pub fn region() -> std::ops::Range<usize> {
        let (mut s, mut e) = (0, 0);
        unsafe { demo_region(&mut s, &mut e) };
        s..e
    }

    /// Named entry points, for attaching by symbol.
    pub fn symbols() -> Vec<(&'static str, usize)> {
        vec![
            ("add", demo_add as *const () as usize),
            ("fib", demo_fib as *const () as usize),
            ("deep", demo_deep as *const () as usize),
            ("sentinel6", demo_sentinel6 as *const () as usize),
            ("ret42", demo_ret42 as *const () as usize),
            ("openat", demo_openat as *const () as usize),
            ("close", demo_close as *const () as usize),
            ("getpid", demo_getpid as *const () as usize),
            ("write", demo_write as *const () as usize),
            ("open_loop", demo_open_loop as *const () as usize),
            ("workload", demo_workload as *const () as usize),
            ("imm_pattern", demo_imm_pattern as *const () as usize),
            ("tiny", demo_tiny as *const () as usize),
            ("branchy", demo_branchy as *const () as usize),
        ]
    }

    pub fn symbol(name: &str) -> Option<usize> {
        symbols().into_iter().find(|(n, _)| *n == name).map(|(_, a)| a)
    }
}
