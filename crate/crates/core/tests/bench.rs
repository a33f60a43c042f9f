use uebpf::bench::{self, BenchConfig, BenchReport, ProbeKind, VM_KERNELS};
use uebpf::fixtures::FixtureManifest;

fn quick() -> BenchConfig {
    BenchConfig { batches: 10, batch_size: 100, warmup: 100 }
}

/// Independent Rust statement of each kernel, written from its definition
/// rather than from the C source.
fn reference(kernel: &str, input: &bench::KernelInput) -> u64 {
    let x = input.x;
    match kernel {
        "log2_int" => {
            if x == 0 {
                0
            } else {
                63 - x.leading_zeros() as u64
            }
        }
        "prime" => (x >= 2 && (2..).take_while(|d| d * d <= x).all(|d| x % d != 0)) as u64,
        "memcpy" => x,
        "simple" => {
            if x > 100 {
                x.wrapping_mul(2)
            } else if x & 1 == 1 {
                x + 3
            } else {
                x ^ 0x55
            }
        }
        "switch" => match x % 11 {
            0 => x.wrapping_add(1),
            1 => x.wrapping_mul(3),
            2 => x >> 2,
            3 => x ^ 0xdead_beef,
            4 => x.wrapping_sub(7),
            5 => x | 0x100,
            6 => x & 0xff,
            7 => x.wrapping_mul(x),
            8 => !x,
            9 => x << 3,
            _ => 42,
        },
        "strcmp_fail" => {
            let r = bench::STRCMP_REFERENCE;
            let t = &input.text;
            let i = (0..).find(|&i| t[i] != r.get(i).copied().unwrap_or(0) || t[i] == 0).unwrap();
            (t[i] as i64 - r.get(i).copied().unwrap_or(0) as i64) as u64
        }
        "memory_a_plus_b" => input.mem[0].wrapping_add(input.mem[1]),
        other => panic!("{other}"),
    }
}

#[test]
fn native_twins_agree_with_reference() {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    for k in VM_KERNELS {
        for _ in 0..10_000 {
            let mut input = bench::KernelInput::random(k, &mut rng);
            let want = reference(k, &input);
            assert_eq!(input.native(k), want, "{k} on {:#x}", input.x);
            if k == "memcpy" {
                assert_eq!(input.dst, input.src);
            }
        }
    }
}

#[test]
fn engine_matches_native_on_random_inputs() {
    let m = FixtureManifest::load_default().unwrap();
    let checked = bench::vm_differential(&m, 2_000, 3).unwrap();
    assert_eq!(checked.len(), VM_KERNELS.len());
}

#[test]
fn vm_suite_has_native_and_interpreter_rows() {
    let m = FixtureManifest::load_default().unwrap();
    let r = bench::bench_vm_suite(&m, &quick()).unwrap();
    for k in VM_KERNELS {
        for v in ["native", "interpreter"] {
            let row = r.vm.iter().find(|x| x.name == k && x.variant == v).unwrap_or_else(|| panic!("{k}/{v}"));
            assert_eq!(row.timing.iterations, 1000);
            assert!(row.timing.median_ns > 0.0 && row.timing.p99_ns >= row.timing.median_ns);
            if v == "interpreter" {
                assert_eq!(row.checked, 1100);
            }
        }
    }
}

#[test]
fn probe_suite_reports_every_row() {
    let r = bench::bench_probe_suite(&quick()).unwrap();
    for k in ProbeKind::ALL {
        let row = r.probe(k).unwrap();
        assert!(row.timing.is_some(), "{}: {:?}", k.id(), row.skipped);
    }
    let path = &r.probe(ProbeKind::SyscallDispatch).unwrap().path;
    assert!(path == "rewrite" || path == "table");
    assert!(r.human_table().contains("3224.17"));
}

#[test]
fn report_round_trips_through_records() {
    let m = FixtureManifest::load_default().unwrap();
    let mut r = bench::run_suite("all", &m, &quick()).unwrap();
    let back = BenchReport::parse_records(&r.to_records()).unwrap();
    // Records keep three decimals.
    for (a, b) in r.vm.iter().zip(&back.vm) {
        assert!((a.timing.median_ns - b.timing.median_ns).abs() < 1e-3);
    }
    assert_eq!(back.to_records(), r.to_records());
    r.probes[0].timing = None;
    r.probes[0].skipped = Some("hook ran 0 times".into());
    let back = BenchReport::parse_records(&r.to_records()).unwrap();
    assert_eq!(back.probes[0].skipped.as_deref(), Some("hook ran 0 times"));
}

#[test]
fn malformed_records_are_rejected() {
    assert!(BenchReport::parse_records("record=vm name=x").is_err());
    assert!(BenchReport::parse_records("record=probe row=nope path=x skipped=y").is_err());
    assert!(BenchReport::parse_records("garbage").is_err());
    assert!(bench::run_suite("gpu", &FixtureManifest::load_default().unwrap(), &quick()).is_err());
}
