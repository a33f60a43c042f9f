use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const UNISTD: [&str; 2] = ["/usr/include/x86_64-linux-gnu/asm/unistd_64.h", "/usr/include/asm/unistd_64.h"];

// Used when no kernel headers are installed.
const FALLBACK: &[(&str, u32)] = &[
    ("read", 0),
    ("write", 1),
    ("open", 2),
    ("close", 3),
    ("mmap", 9),
    ("rt_sigreturn", 15),
    ("getpid", 39),
    ("clone", 56),
    ("fork", 57),
    ("vfork", 58),
    ("execve", 59),
    ("exit", 60),
    ("gettid", 186),
    ("exit_group", 231),
    ("openat", 257),
    ("clone3", 435),
];

fn syscall_table(out: &Path) {
    let mut rows: Vec<(String, u32)> = Vec::new();
    if let Some(text) = UNISTD.iter().find_map(|p| {
        println!("cargo:rerun-if-changed={p}");
        std::fs::read_to_string(p).ok()
    }) {
        for line in text.lines() {
            let mut it = line.split_whitespace();
            if let (Some("#define"), Some(name), Some(nr)) = (it.next(), it.next(), it.next()) {
                if let (Some(name), Ok(nr)) = (name.strip_prefix("__NR_"), nr.parse()) {
                    rows.push((name.to_string(), nr));
                }
            }
        }
    }
    if rows.is_empty() {
        rows = FALLBACK.iter().map(|(n, v)| (n.to_string(), *v)).collect();
    }
    rows.sort_by_key(|r| r.1);
    let mut src = String::from("pub(crate) static SYSCALLS: &[(&str, u32)] = &[\n");
    for (n, v) in rows {
        writeln!(src, "    ({n:?}, {v}),").unwrap();
    }
    src.push_str("];\n");
    std::fs::write(out.join("syscalls.rs"), src).unwrap();
}

fn main() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let native = fixtures.join("bench/native.c");
    let demo = fixtures.join("demo/demo.c");
    println!("cargo:rerun-if-changed={}", native.display());
    println!("cargo:rerun-if-changed={}", fixtures.join("bench/kernels.h").display());
    println!("cargo:rerun-if-changed={}", demo.display());
    cc::Build::new()
        .file(&native)
        .include(fixtures.join("bench"))
        .opt_level(2)
        .compile("uebpf_native");
    cc::Build::new()
        .file(&demo)
        .opt_level(1)
        .flag("-fno-omit-frame-pointer")
        .flag("-mno-omit-leaf-frame-pointer")
        .flag("-fcf-protection=none")
        .flag("-fno-optimize-sibling-calls")
        .flag("-fno-inline")
        .compile("uebpf_demo");
    let out = PathBuf::from(std::env::var("OUT_DIR").unwrap());
    syscall_table(&out);
}
