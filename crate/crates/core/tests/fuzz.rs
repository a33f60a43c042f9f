mod support;

#[test]
fn seeds_are_all_accepted() {
    for s in support::fuzz::seeds() {
        uebpf::engine::Executable::new(s.program.clone(), &s.maps, &s.config).unwrap_or_else(|e| panic!("{}: {e}", s.name));
    }
}

#[test]
fn mutated_accepted_programs_never_escape() {
    let o = support::fuzz::run(20_000, 0x5eed);
    eprintln!("{o:?}");
    assert_eq!(o.executed, 20_000, "{o:?}");
    assert!(o.strict > 0 && o.permissive > 0);
    assert!(o.sound(), "unexplained: {:#?}\nsfi mismatches: {:#?}", &o.unexplained[..o.unexplained.len().min(5)], o.sfi_mismatches);
}
