//! Determinism criterion: running the same desk-scale reproduction twice with
//! one master seed must yield byte-identical CSV outputs.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn a9_reproduce_desk_is_byte_identical() {
    let base = std::env::temp_dir().join("hdrc_a9");
    let _ = std::fs::remove_dir_all(&base);
    let run = |out: &PathBuf| {
        let status = Command::new(env!("CARGO_BIN_EXE_hdrc"))
            .args([
                "reproduce",
                "--table",
                "table2",
                "--budget",
                "desk",
                "--seed",
                "2024",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .expect("spawn hdrc");
        assert!(status.success());
    };
    let first = base.join("first");
    let second = base.join("second");
    run(&first);
    run(&second);

    let mut identical = true;
    let mut detail = String::new();
    for name in ["table2_runs.csv", "table2_summary.csv"] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        let same = a == b;
        identical &= same;
        detail.push_str(&format!("{name}: {} bytes, identical = {same}; ", a.len()));
    }
    println!(
        "A9: {} — {detail}",
        if identical { "PASS" } else { "FAIL" }
    );
    assert!(identical);
}
