use std::path::Path;
use std::process::{Command, Output};

fn mtvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtvm")).args(args).env_remove("MTVM_SEED").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set", "data.train_worlds=2",
    "--set", "data.val_unseen_worlds=1",
    "--set", "data.nodes=12",
    "--set", "data.train_episodes_per_world=3",
    "--set", "data.eval_episodes_per_world=2",
    "--set", "trainer.iterations=4",
    "--set", "trainer.eval_every=2",
    "--set", "trainer.batch_size=2",
    "--set", "model.d_model=16",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn gradcheck_passes_and_reports() {
    let o = mtvm(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("max rel err"), "{out}");
    assert!(out.contains("\"command\": \"gradcheck\""), "manifest printed: {out}");
}

#[test]
fn gen_world_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = mtvm(&["gen-world", "--seed", "7", "--nodes", "50", "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let name = "world_train_7.json";
    assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    assert!(a.join("manifest.json").exists());
}

#[test]
fn eval_without_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtvm(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn bad_input_exits_with_one() {
    let o = mtvm(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["train", "--set", "trainer.nope=1", "--out", out],
        vec!["train", "--set", "loss.drop_rate=3", "--out", out],
        vec!["gen-world", "--split", "somewhere", "--out", out],
        vec!["ablate", "--axis", "width", "--out", out],
    ] {
        assert_eq!(mtvm(&args).status.code(), Some(1), "{args:?}");
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn replaying_a_train_manifest_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = mtvm(&with_tiny(&["train", "--out", first.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let manifest: serde_json::Value = serde_json::from_slice(&read(&first, "manifest.json")).unwrap();
    let mut argv: Vec<String> =
        manifest["argv"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let second = dir.path().join("second");
    let at = argv.iter().position(|a| a == "--out").unwrap();
    argv[at + 1] = second.to_str().unwrap().to_string();
    let o = mtvm(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["checkpoint.json", "best.json", "runlog.jsonl", "config.json"] {
        assert_eq!(read(&first, name), read(&second, name), "{name}");
    }

    let ck = first.join("checkpoint.json");
    let ev = dir.path().join("eval");
    let o = mtvm(&with_tiny(&["eval", "--checkpoint", ck.to_str().unwrap(), "--out", ev.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&read(&ev, "report.json")).unwrap();
    assert_eq!(report["n_episodes"], 2);

    let at = dir.path().join("attn");
    let o = mtvm(&with_tiny(&["export-attn", "--checkpoint", ck.to_str().unwrap(), "--out", at.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let attn: serde_json::Value = serde_json::from_slice(&read(&at, "attention.json")).unwrap();
    let steps = attn["steps"].as_array().unwrap();
    assert!(!steps.is_empty());
    assert_eq!(steps[0]["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mtvm"));
        cmd.args(with_tiny(&["train", "--out", out.to_str().unwrap()])).env_remove("MTVM_SEED");
        if let Some(s) = seed {
            cmd.env("MTVM_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        out
    };
    let plain = run(None, "plain");
    let seeded = run(Some("5"), "seeded");
    assert_ne!(read(&plain, "checkpoint.json"), read(&seeded, "checkpoint.json"));
    let m: serde_json::Value = serde_json::from_slice(&read(&seeded, "manifest.json")).unwrap();
    assert_eq!(m["seeds"]["trainer"], 5);
    assert_eq!(m["env"]["MTVM_SEED"], "5");
}

#[test]
fn ablate_writes_long_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let o = mtvm(&with_tiny(&[
        "ablate", "--axis", "memory_capacity", "--values", "1,VARIABLE", "--seeds", "0,1", "--jobs", "2", "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = String::from_utf8(read(&out, "results.csv")).unwrap();
    // header + 2 values × 2 seeds × 2 splits
    assert_eq!(csv.lines().count(), 1 + 8);
}
