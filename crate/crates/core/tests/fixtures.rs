use std::sync::Arc;

use uebpf::engine::{Executable, TraceSink};
use uebpf::fixtures::{self, FixtureGroup, FixtureManifest};
use uebpf::helpers;
use uebpf::loader::{load_object, LocalMaps, MapSink};
use uebpf::verifier::Strictness;

fn manifest() -> FixtureManifest {
    FixtureManifest::load_default().unwrap()
}

#[test]
fn manifest_lists_the_nine_fixtures() {
    let m = manifest();
    let names: Vec<&str> = m.fixtures.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(
        names,
        ["log2_int", "prime", "memcpy", "simple", "switch", "strcmp_fail", "memory_a_plus_b", "malloc_count", "opensnoop"]
    );
    assert_eq!(m.bench().count(), 7);
    assert!(m.bench().all(|f| f.native_twin.is_some()));
    assert!(m.fixtures.iter().filter(|f| f.group == FixtureGroup::Tracing).all(|f| f.native_twin.is_none()));
    assert!(m.compiler.contains("clang"));
    for f in &m.fixtures {
        assert!(f.source.exists(), "{}", f.source.display());
        assert!(f.object.exists(), "{}", f.object.display());
    }
}

#[test]
fn every_object_loads_with_its_listed_sections() {
    for f in &manifest().fixtures {
        let mut maps = LocalMaps::new();
        let reg = Arc::new(helpers::standard_registry(maps.table(), TraceSink::from_fn(|_| {})));
        let obj = load_object(&f.read_object().unwrap(), &mut maps, &reg).unwrap_or_else(|e| panic!("{}: {e}", f.name));
        let sections: Vec<&str> = obj.programs.iter().map(|p| p.section.as_str()).collect();
        assert_eq!(sections, f.sections, "{}", f.name);
        for p in &obj.programs {
            assert_eq!(p.attach.to_string(), p.section);
        }
    }
}

#[test]
fn bench_kernels_pass_strict_where_loops_allow() {
    // prime loops on its input; the pointer kernels dereference raw uprobe
    // arguments. Both need the runtime checks of permissive mode.
    let strict = ["log2_int", "simple", "switch"];
    for f in manifest().bench() {
        let mut maps = LocalMaps::new();
        let reg = Arc::new(helpers::standard_registry(maps.table(), TraceSink::from_fn(|_| {})));
        let obj = load_object(&f.read_object().unwrap(), &mut maps, &reg).unwrap();
        let p = &obj.programs[0];
        let cfg = uebpf::loader::verify_config(&p.attach, &reg).with_strictness(Strictness::Strict);
        let verdict = Executable::new(p.program.clone(), &maps.table(), &cfg);
        assert_eq!(verdict.is_ok(), strict.contains(&f.name.as_str()), "{}: {:?}", f.name, verdict.err());
    }
}

#[test]
fn objects_rebuild_identically_under_the_pinned_compiler() {
    let m = manifest();
    let clang = std::env::var("CLANG").unwrap_or_else(|_| "clang".into());
    match fixtures::compiler_version(&clang) {
        Ok(v) if v == m.compiler => {}
        Ok(v) => {
            eprintln!("skipping: manifest pins {:?}, found {v:?}", m.compiler);
            return;
        }
        Err(e) => {
            eprintln!("skipping: {e}; using checked-in objects");
            return;
        }
    }
    for f in &m.fixtures {
        let fresh = m.rebuild(f, &clang).unwrap();
        assert!(fresh == f.read_object().unwrap(), "{} differs from its checked-in object", f.name);
    }
}
