use std::process::Command;

fn node_b() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ham-node-b"))
}

/// `(name, key)` pairs from a dump: the map gives each name's local label,
/// the vector gives each label's key.
fn name_keys(dump: &str) -> Vec<(String, usize)> {
    let mut names = Vec::new();
    let mut lines = dump.lines();
    while let Some(line) = lines.next() {
        if let Some(name) = line.strip_prefix("name: ") {
            let label = lines.next().unwrap().strip_prefix("handler: ").unwrap();
            names.push((name.to_owned(), label.to_owned()));
        }
    }
    let vector: Vec<&str> = dump
        .lines()
        .filter_map(|l| l.strip_prefix("index: "))
        .map(|l| l.split_once(", handler: ").unwrap().1)
        .collect();
    names
        .into_iter()
        .map(|(name, label)| {
            let key = vector.iter().position(|&v| v == label).unwrap();
            (name, key)
        })
        .collect()
}

#[test]
fn dump_matches_forward_registration() {
    let out = node_b().args(["--mode", "dump-table"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();

    // Local labels differ with registration order; names and keys must not.
    let mut reg = ham::runtime::new_registry();
    ham::suite::register(&mut reg, ham::suite::Order::Forward).unwrap();
    reg.init().unwrap();
    let ours = name_keys(&text);
    assert_eq!(ours, name_keys(&reg.dump_table().unwrap()));
    for (i, (_, key)) in ours.iter().enumerate() {
        assert_eq!(*key, i);
    }
    let mut sorted = ours.clone();
    sorted.sort();
    assert_eq!(ours, sorted);
}

#[test]
fn extra_handler_changes_the_table() {
    let plain = node_b().args(["--mode", "dump-table"]).output().unwrap();
    let extra = node_b().args(["--mode", "dump-table", "--extra-handler"]).output().unwrap();
    let count = |o: &std::process::Output| String::from_utf8_lossy(&o.stdout).matches("name: ").count();
    assert_eq!(count(&extra), count(&plain) + 1);
}

#[test]
fn serve_without_peers_is_a_usage_error() {
    let out = node_b().env_remove("HAM_PEERS").env_remove("HAM_NODE_ID").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
