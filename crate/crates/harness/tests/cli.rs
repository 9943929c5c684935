use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_velora");

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const GOOD: &str = r#"
seed = 2
epochs = 2
batch_size = 16
[dataset]
kind = "synthetic_regression"
n = 128
d_in = 8
[model]
kind = "mlp"
hidden = [8]
[layers.layer1]
save_policy = "velora"
m = 4
[analysis]
mc_samples = 1000
probe_examples = 8
ms = [1, 2, 4, 8]
"#;

fn velora(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_m = write(dir.path(), "m.toml", &GOOD.replace("m = 4", "m = 3"));
    let typo = write(dir.path(), "t.toml", &GOOD.replace("epochs", "epohcs"));
    for cfg in [bad_m, typo, dir.path().join("missing.toml").display().to_string()] {
        let out = velora(&["train", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn nan_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "nan.toml", &format!("{GOOD}[optimizer]\nkind = \"sgd\"\nlr = 1e200\n"));
    let out = velora(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn train_analyze_compare_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", GOOD);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = velora(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--log-every", "2", "--deterministic", "true"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = std::fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.bin")).unwrap(), std::fs::read(b.join("checkpoint.bin")).unwrap());

    let o = velora(&["analyze", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(a.join("analysis.jsonl")).unwrap();
    assert!(rows.lines().any(|l| l.contains("\"kind\":\"stable_rank\"")));
    assert!(rows.lines().any(|l| l.contains("\"kind\":\"divergence\"")));

    let o = velora(&["compare", a.join("metrics.jsonl").to_str().unwrap(), b.join("metrics.jsonl").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("relative gap +0.0000%"));

    let seeded = dir.path().join("c");
    let o = velora(&["train", "--config", &cfg, "--out", seeded.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success());
    assert_ne!(ma, std::fs::read(seeded.join("metrics.jsonl")).unwrap());
    let canon = std::fs::read_to_string(seeded.join("config.toml")).unwrap();
    assert!(canon.starts_with("seed = 3\n"), "{canon}");

    let nondet = dir.path().join("d");
    let o = velora(&["train", "--config", &cfg, "--out", nondet.to_str().unwrap(), "--deterministic", "false"]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(nondet.join("metrics.jsonl")).unwrap().contains("\"steps_per_sec\":"));
}

#[test]
fn gradcheck_passes_and_compare_needs_two_files() {
    let o = velora(&["gradcheck", "--seeds", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = velora(&["compare", "only-one.jsonl"]);
    assert_eq!(o.status.code(), Some(2), "clap usage errors also exit 2");
}
