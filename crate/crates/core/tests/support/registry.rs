//! Randomized command traffic against a registry.

use rand::rngs::StdRng;
use rand::Rng;

use uebpf::attach::AttachSpec;
use uebpf::control::{Command, CommandKind, ControlError, SharedRegistry};
use uebpf::isa::{self, asm, BPF_JEQ, BPF_W};
use uebpf::maps::{MapDescriptor, MapError, MapType};

#[derive(Debug, Default, Clone, Copy)]
pub struct Traffic {
    pub logged: usize,
    pub rejected: usize,
    pub reads: usize,
}

/// Counts a hit in slot 0 of array map `handle`.
pub fn counting_program(handle: u32) -> Vec<u8> {
    let p = asm::program(
        "count",
        &[
            &[asm::st(BPF_W, 10, -4, 0), asm::mov64_reg(2, 10), asm::alu64_imm(isa::BPF_ADD, 2, -4)],
            &asm::ld_map(1, handle),
            &[
                asm::call(1),
                asm::jmp_imm(BPF_JEQ, 0, 0, 2),
                asm::mov64_imm(1, 1),
                asm::atomic(isa::BPF_DW, isa::BPF_ADD as i32, 0, 0, 1),
                asm::mov64_imm(0, 0),
                asm::exit(),
            ],
        ],
    );
    isa::encode(&p)
}

fn trivial_program(r0: i32) -> Vec<u8> {
    isa::encode(&asm::program("ret", &[&[asm::mov64_imm(0, r0), asm::exit()]]))
}

/// Reads r0 before writing it.
fn invalid_program() -> Vec<u8> {
    isa::encode(&asm::program("bad", &[&[asm::exit()]]))
}

fn key(rng: &mut StdRng, desc: &MapDescriptor) -> Vec<u8> {
    match desc.map_type {
        MapType::Array => rng.gen_range(0..desc.max_entries).to_le_bytes().to_vec(),
        _ => (0..desc.key_size).map(|_| rng.gen_range(0..4u8)).collect(),
    }
}

/// Issues `n` random commands, roughly one in eight of them invalid.
/// Invalid commands must fail without being logged.
pub fn drive(reg: &mut SharedRegistry, rng: &mut StdRng, n: usize) -> Traffic {
    let mut maps: Vec<(u32, MapDescriptor)> = Vec::new();
    let mut progs: Vec<u32> = Vec::new();
    let mut links: Vec<u32> = Vec::new();
    let mut dead_links: Vec<u32> = Vec::new();
    let mut t = Traffic::default();
    let spec = AttachSpec::uprobe("demo", "add");
    for i in 0..n {
        let before = reg.log_records();
        let choice = if maps.is_empty() { 0 } else { rng.gen_range(0..10) };
        let (cmd, valid) = match choice {
            0 => {
                let desc = if rng.gen_bool(0.5) {
                    MapDescriptor::array(8, rng.gen_range(1..64), &format!("a{i}"))
                } else {
                    MapDescriptor::hash(rng.gen_range(1..9), 8, rng.gen_range(8..256), &format!("h{i}"))
                };
                (Command::MapCreate(desc), true)
            }
            1..=3 => {
                let (h, d) = &maps[rng.gen_range(0..maps.len())];
                let value = rng.gen::<u64>().to_le_bytes().to_vec();
                (Command::MapUpdateElem { map: *h, key: key(rng, d), value, flags: 0 }, true)
            }
            4 => {
                let (h, d) = &maps[rng.gen_range(0..maps.len())];
                (Command::MapLookupElem { map: *h, key: key(rng, d) }, true)
            }
            5 => {
                let (h, d) = maps[rng.gen_range(0..maps.len())].clone();
                if d.map_type == MapType::Hash {
                    let k = key(rng, &d);
                    let present = reg.handle_command(Command::MapLookupElem { map: h, key: k.clone() }).unwrap();
                    let valid = present != uebpf::control::CommandResult::Value(None);
                    (Command::MapDeleteElem { map: h, key: k }, valid)
                } else {
                    (Command::MapGetNextKey { map: h, key: None }, true)
                }
            }
            6 => {
                let arrays: Vec<u32> = maps.iter().filter(|(_, d)| d.map_type == MapType::Array).map(|(h, _)| *h).collect();
                let insns = match arrays.is_empty() {
                    true => trivial_program(rng.gen_range(0..100)),
                    false => counting_program(arrays[rng.gen_range(0..arrays.len())]),
                };
                (Command::ProgLoad { name: format!("p{i}"), attach: spec.clone(), insns }, true)
            }
            7 if !progs.is_empty() => {
                (Command::LinkCreate { prog: progs[rng.gen_range(0..progs.len())], attach: None }, true)
            }
            8 if !links.is_empty() => {
                let l = links.swap_remove(rng.gen_range(0..links.len()));
                dead_links.push(l);
                (Command::LinkDetach { link: l }, true)
            }
            _ => match rng.gen_range(0..4) {
                0 => (Command::ProgLoad { name: "bad".into(), attach: spec.clone(), insns: invalid_program() }, false),
                1 => (Command::MapUpdateElem { map: 999_999, key: vec![0; 4], value: vec![0; 8], flags: 0 }, false),
                2 if !dead_links.is_empty() => (Command::LinkDetach { link: dead_links[0] }, false),
                _ => (Command::LinkCreate { prog: 999_999, attach: None }, false),
            },
        };
        let kind = cmd.kind();
        let result = reg.handle_command(cmd.clone());
        match (&result, valid) {
            (Ok(r), true) => {
                if kind.mutates() {
                    t.logged += 1;
                    assert_eq!(reg.log_records(), before + 1, "{cmd} not logged");
                } else {
                    t.reads += 1;
                    assert_eq!(reg.log_records(), before, "{cmd} logged");
                }
                match (&cmd, r.handle()) {
                    (Command::MapCreate(d), Some(h)) => maps.push((h, d.clone())),
                    (Command::ProgLoad { .. }, Some(h)) => progs.push(h),
                    (Command::LinkCreate { .. }, Some(h)) => links.push(h),
                    _ => {}
                }
            }
            (Err(e), false) => {
                assert!(
                    matches!(e, ControlError::VerifyRejected(_) | ControlError::InvalidHandle(_) | ControlError::Map(_)),
                    "{cmd}: {e}"
                );
                assert_eq!(reg.log_records(), before, "{cmd} failed but was logged");
                t.rejected += 1;
            }
            // Random keys can outgrow a small hash map.
            (Err(ControlError::Map(MapError::TableFull(_))), true) if kind == CommandKind::MapUpdateElem => {
                assert_eq!(reg.log_records(), before, "{cmd} failed but was logged");
                t.rejected += 1;
            }
            (r, _) => panic!("{cmd}: unexpected {r:?}"),
        }
    }
    t
}
