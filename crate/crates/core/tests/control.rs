mod support;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use uebpf::attach::AttachSpec;
use uebpf::control::{
    AgentRuntime, Command, CommandKind, CommandResult, ControlError, RegistryConfig, SharedRegistry, FIRST_HANDLE,
};
use uebpf::maps::{MapDescriptor, UpdateFlag};
use uebpf::targets::demo;

static LIVE: Mutex<()> = Mutex::new(());

fn live() -> MutexGuard<'static, ()> {
    LIVE.lock().unwrap_or_else(|e| e.into_inner())
}

fn fresh_id(tag: &str) -> String {
    static SEQ: AtomicUsize = AtomicUsize::new(0);
    format!("t{}_{}_{}", std::process::id(), tag, SEQ.fetch_add(1, Ordering::Relaxed))
}

fn registry(tag: &str) -> SharedRegistry {
    SharedRegistry::create(&fresh_id(tag), RegistryConfig { log_capacity: 4 << 20, table_capacity: 2048 }).unwrap()
}

fn trivial(name: &str) -> Command {
    let insns = uebpf::isa::encode(&uebpf::isa::asm::program(
        name,
        &[&[uebpf::isa::asm::mov64_imm(0, 0), uebpf::isa::asm::exit()]],
    ));
    Command::ProgLoad { name: name.into(), attach: AttachSpec::uprobe("demo", "add"), insns }
}

fn u64_value(r: CommandResult) -> u64 {
    match r {
        CommandResult::Value(Some(v)) => u64::from_le_bytes(v.try_into().unwrap()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn handles_are_allocated_from_three_and_never_reused() {
    let mut reg = registry("handles");
    let h = reg.handle_command(Command::MapCreate(MapDescriptor::hash(8, 8, 1024, "m"))).unwrap();
    assert_eq!(h, CommandResult::Handle(FIRST_HANDLE));
    assert_eq!(FIRST_HANDLE, 3);

    let bad = uebpf::isa::encode(&uebpf::isa::asm::program("bad", &[&[uebpf::isa::asm::exit()]]));
    let before = (reg.log_records(), reg.log_len(), reg.epoch());
    let err = reg.handle_command(Command::ProgLoad { name: "bad".into(), attach: AttachSpec::uprobe("demo", "add"), insns: bad });
    assert!(matches!(err, Err(ControlError::VerifyRejected(_))), "{err:?}");
    assert_eq!((reg.log_records(), reg.log_len(), reg.epoch()), before);

    let p = reg.handle_command(trivial("p")).unwrap().handle().unwrap();
    let l = reg.handle_command(Command::LinkCreate { prog: p, attach: None }).unwrap().handle().unwrap();
    assert_eq!((p, l), (4, 5));
    assert_eq!(reg.log_records(), 3);
    reg.snapshot_and_detach(l).unwrap();
    let p2 = reg.handle_command(trivial("q")).unwrap().handle().unwrap();
    assert_eq!(p2, 6);
}

#[test]
fn malformed_commands_are_rejected_before_logging() {
    let mut reg = registry("malformed");
    let cases = [
        Command::MapCreate(MapDescriptor::hash(8, 8, 16, "")),
        Command::ProgLoad { name: "x".into(), attach: AttachSpec::uprobe("demo", "add"), insns: vec![0; 12] },
        Command::ProgLoad { name: "x".into(), attach: AttachSpec::uprobe("demo", "add"), insns: vec![0; (1 << 20) + 8] },
        Command::MapUpdateElem { map: 3, key: vec![0; 4], value: vec![0; 8], flags: 9 },
    ];
    for c in cases {
        assert!(reg.handle_command(c.clone()).is_err(), "{c}");
    }
    assert_eq!(reg.log_records(), 0);
    assert!(reg.replay().unwrap().is_empty());
}

#[test]
fn empty_registry_replays_to_an_empty_view() {
    let reg = registry("empty");
    let agent = SharedRegistry::open(reg.id()).unwrap();
    let view = agent.replay().unwrap();
    assert!(view.is_empty());
    assert_eq!(view.epoch, 0);
}

#[test]
fn random_logs_replay_identically_in_two_agents() {
    for seed in 0..3u64 {
        let mut reg = registry("replay");
        let mut rng = StdRng::seed_from_u64(seed);
        let t = support::registry::drive(&mut reg, &mut rng, 1000);
        assert!(t.logged > 500 && t.rejected > 50, "{t:?}");

        let a = SharedRegistry::open(reg.id()).unwrap().replay().unwrap();
        let b = SharedRegistry::open(reg.id()).unwrap().replay().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.epoch, t.logged as u64);
        assert_eq!(reg.table().unwrap(), reg.live_table().unwrap());
        assert_eq!(reg.replay().unwrap(), a);
        // Entries carry the epoch that created them.
        for e in reg.table().unwrap() {
            assert!(e.epoch >= 1 && e.epoch <= a.epoch);
        }
        let handles: Vec<u32> = reg.table().unwrap().iter().map(|e| e.handle).collect();
        assert!(handles.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(handles.len(), a.maps.len() + a.programs.len() + a.links.len());
    }
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let mut reg = registry("corrupt");
    let mut rng = StdRng::seed_from_u64(7);
    support::registry::drive(&mut reg, &mut rng, 120);
    let good = reg.replay().unwrap();
    let log = reg.log_area().start..reg.log_area().start + reg.log_len();
    let table = reg.table_area().start..reg.table_area().start + reg.table().unwrap().len() * 32;
    let mut checked = 0;
    for off in log.chain(table) {
        let flip: u8 = rng.gen_range(1..=255);
        unsafe { reg.raw_bytes_mut()[off] ^= flip };
        let r = SharedRegistry::open(reg.id()).unwrap().replay();
        assert!(matches!(r, Err(ControlError::CorruptLog(_))), "byte {off} ^ {flip:#x}: {r:?}");
        unsafe { reg.raw_bytes_mut()[off] ^= flip };
        checked += 1;
    }
    assert!(checked > 1000);
    assert_eq!(reg.replay().unwrap(), good);
}

#[test]
fn version_mismatch_is_reported() {
    let mut reg = registry("version");
    unsafe { reg.raw_bytes_mut()[4] = 9 };
    assert!(matches!(SharedRegistry::open(reg.id()), Err(ControlError::VersionMismatch { found: 9, expected: 1 })));
}

#[test]
fn agents_cannot_write_the_registry() {
    let mut reg = registry("ro");
    reg.handle_command(Command::MapCreate(MapDescriptor::array(8, 4, "a"))).unwrap();
    let mut agent = SharedRegistry::open(reg.id()).unwrap();
    assert!(!agent.is_control());
    let r = agent.handle_command(Command::MapCreate(MapDescriptor::array(8, 4, "b")));
    assert!(matches!(r, Err(ControlError::PermissionDenied(_))), "{r:?}");
    assert!(matches!(agent.handle_command(Command::LinkDetach { link: 3 }), Err(ControlError::PermissionDenied(_))));
    assert_eq!(reg.log_records(), 1);

    // A raw store into the agent mapping faults.
    let p = agent.as_ptr() as *mut u8;
    let pid = unsafe { libc::fork() };
    if pid == 0 {
        unsafe {
            std::ptr::write_volatile(p.add(8), 0xff);
            libc::_exit(0);
        }
    }
    let mut status = 0;
    unsafe { libc::waitpid(pid, &mut status, 0) };
    assert!(libc::WIFSIGNALED(status), "child status {status:#x}");
    assert_eq!(libc::WTERMSIG(status), libc::SIGSEGV);
    assert_eq!(reg.epoch(), 1);
}

#[test]
fn agent_in_another_process_shares_map_segments() {
    let mut reg = registry("xproc");
    let hash = reg.handle_command(Command::MapCreate(MapDescriptor::hash(8, 8, 64, "h"))).unwrap().handle().unwrap();
    let arr = reg.handle_command(Command::MapCreate(MapDescriptor::array(8, 4, "a"))).unwrap().handle().unwrap();
    let put = |reg: &mut SharedRegistry, m: u32, k: Vec<u8>, v: u64| {
        reg.handle_command(Command::MapUpdateElem { map: m, key: k, value: v.to_le_bytes().to_vec(), flags: 0 }).unwrap();
    };
    put(&mut reg, hash, 7u64.to_le_bytes().to_vec(), 700);
    put(&mut reg, arr, 1u32.to_le_bytes().to_vec(), 11);
    put(&mut reg, arr, 2u32.to_le_bytes().to_vec(), 22);
    assert_eq!(reg.log_records(), 5);

    let id = reg.id().to_string();
    let pid = unsafe { libc::fork() };
    if pid == 0 {
        // Agent: replay, check what control wrote, write back.
        let code = (|| -> Result<i32, ControlError> {
            let agent = AgentRuntime::attach(&id)?;
            let maps = agent.maps();
            let h = maps.get(hash)?;
            let a = maps.get(arr)?;
            if h.lookup(&7u64.to_le_bytes())? != Some(700u64.to_le_bytes().to_vec()) {
                return Ok(3);
            }
            if a.lookup(&2u32.to_le_bytes())? != Some(22u64.to_le_bytes().to_vec()) {
                return Ok(4);
            }
            h.update(&8u64.to_le_bytes(), &800u64.to_le_bytes(), UpdateFlag::NoExist)?;
            a.update(&3u32.to_le_bytes(), &33u64.to_le_bytes(), UpdateFlag::Any)?;
            Ok(0)
        })()
        .unwrap_or(2);
        unsafe { libc::_exit(code) };
    }
    let mut status = 0;
    unsafe { libc::waitpid(pid, &mut status, 0) };
    assert!(libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0, "agent status {status:#x}");
    let look = |reg: &mut SharedRegistry, m: u32, k: Vec<u8>| reg.handle_command(Command::MapLookupElem { map: m, key: k }).unwrap();
    assert_eq!(u64_value(look(&mut reg, hash, 8u64.to_le_bytes().to_vec())), 800);
    assert_eq!(u64_value(look(&mut reg, arr, 3u32.to_le_bytes().to_vec())), 33);
    // Reads are not logged.
    assert_eq!(reg.log_records(), 5);
}

#[test]
fn detaching_twice_is_an_invalid_handle() {
    let mut reg = registry("detach2");
    let p = reg.handle_command(trivial("p")).unwrap().handle().unwrap();
    let l = reg.handle_command(Command::LinkCreate { prog: p, attach: None }).unwrap().handle().unwrap();
    reg.snapshot_and_detach(l).unwrap();
    assert!(matches!(reg.snapshot_and_detach(l), Err(ControlError::InvalidHandle(h)) if h == l));
    assert!(matches!(reg.snapshot_and_detach(p), Err(ControlError::InvalidHandle(_))));
    let view = reg.replay().unwrap();
    assert!(!view.links[&l].live);
    assert_eq!(reg.table().unwrap().iter().filter(|e| e.kind == CommandKind::LinkDetach).count(), 0);
}

fn demo_probes() -> Vec<u8> {
    std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/demo_probes.o")).unwrap()
}

#[test]
fn agent_applies_and_reverts_links() {
    let _g = live();
    let mut reg = registry("links");
    let (maps, progs) = reg.load_object(&demo_probes()).unwrap();
    let stats = maps[0];
    let view = reg.replay().unwrap();
    let on_add = *progs.iter().find(|h| view.programs[h].attach == AttachSpec::uprobe("demo", "add")).unwrap();

    let add = demo::symbol("add").unwrap();
    let original = unsafe { std::slice::from_raw_parts(add as *const u8, 16).to_vec() };
    let mut agent = AgentRuntime::attach(reg.id()).unwrap();
    assert!(agent.attached_links().is_empty());

    let link = reg.handle_command(Command::LinkCreate { prog: on_add, attach: None }).unwrap().handle().unwrap();
    assert!(agent.sync().unwrap());
    assert_eq!(agent.attached_links(), [link]);
    for i in 0..100 {
        assert_eq!(unsafe { demo::demo_add(i, 1) }, i + 1);
    }
    let calls = reg.handle_command(Command::MapLookupElem { map: stats, key: 0u32.to_le_bytes().to_vec() }).unwrap();
    assert_eq!(u64_value(calls), 100);

    reg.snapshot_and_detach(link).unwrap();
    assert!(agent.sync().unwrap());
    assert!(agent.attached_links().is_empty());
    let now = unsafe { std::slice::from_raw_parts(add as *const u8, 16).to_vec() };
    assert_eq!(now, original);
    unsafe { demo::demo_add(1, 1) };
    let calls = reg.handle_command(Command::MapLookupElem { map: stats, key: 0u32.to_le_bytes().to_vec() }).unwrap();
    assert_eq!(u64_value(calls), 100);
}

#[test]
fn detach_under_live_traffic() {
    let _g = live();
    let mut reg = registry("traffic");
    let (_, progs) = reg.load_object(&demo_probes()).unwrap();
    let view = reg.replay().unwrap();
    let on_add = *progs.iter().find(|h| view.programs[h].attach == AttachSpec::uprobe("demo", "add")).unwrap();
    let link = reg.handle_command(Command::LinkCreate { prog: on_add, attach: None }).unwrap().handle().unwrap();

    let agent = AgentRuntime::attach(reg.id()).unwrap();
    let stats = agent.link_stats(link).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let poller = agent.spawn_poller(Duration::from_millis(2), stop.clone());

    let done = Arc::new(AtomicBool::new(false));
    let calls = Arc::new(AtomicU64::new(0));
    let traffic = {
        let (done, calls) = (done.clone(), calls.clone());
        std::thread::spawn(move || {
            let mut i = 0i64;
            while !done.load(Ordering::Relaxed) {
                assert_eq!(unsafe { demo::demo_add(i, 3) }, i + 3);
                calls.fetch_add(1, Ordering::Relaxed);
                i += 1;
            }
        })
    };
    let t0 = Instant::now();
    while stats.runs() < 1000 && t0.elapsed() < Duration::from_secs(10) {
        std::thread::yield_now();
    }
    assert!(stats.runs() >= 1000);
    reg.snapshot_and_detach(link).unwrap();
    // Wait for the agent to observe the new epoch and restore the bytes.
    let add = demo::symbol("add").unwrap();
    let t0 = Instant::now();
    while unsafe { *(add as *const u8) } == 0xe9 && t0.elapsed() < Duration::from_secs(10) {
        std::thread::sleep(Duration::from_millis(1));
    }
    // The one traffic thread calls sequentially, so once it finishes a
    // further call any dispatch that was in flight has completed.
    let c0 = calls.load(Ordering::Relaxed);
    while calls.load(Ordering::Relaxed) < c0 + 2 {
        std::thread::yield_now();
    }
    let settled = stats.runs();
    let before = calls.load(Ordering::Relaxed);
    while calls.load(Ordering::Relaxed) < before + 10_000 {
        std::thread::yield_now();
    }
    done.store(true, Ordering::Relaxed);
    traffic.join().unwrap();
    stop.store(true, Ordering::Release);
    let agent = poller.join().unwrap().unwrap();
    assert!(agent.attached_links().is_empty());
    assert_eq!(stats.runs(), settled, "no dispatches after the detach was applied");
    assert_eq!(stats.errors(), 0);
    assert!(stats.runs() <= calls.load(Ordering::Relaxed));
}
