use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cyclereward::checkpoint;
use cyclereward::config::RunConfig;
use cyclereward::denoiser::DenoiserParams;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cyclereward"))
}

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    bin().args([cmd, "--config"]).arg(config).arg("--out").arg(out).output().unwrap()
}

fn pipeline_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pipeline.json")
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p
}

const TINY: &str = r#"{
  "data": { "n": 40, "kind": "depth-map", "split": [0.6, 0.2, 0.2] },
  "model": { "widths": [4, 8, 4] },
  "pretrain": { "iters": 0 },
  "finetune": { "iters": 2, "batch": 2 },
  "eval": { "n": 2 },
  "sample": { "n": 2 },
  "bench": { "t_samples": [1, 2] }
}"#;

#[test]
fn resolved_config_is_printed_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = run("gen-data", &cfg, dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let end = stdout.find("\n}\n").unwrap() + 2;
    let printed = RunConfig::from_json(&stdout[..end]).unwrap();
    assert_eq!(printed, RunConfig::load(&cfg).unwrap());
    assert_eq!(printed.pretrain.batch, 16, "defaults are filled in");
}

#[test]
fn zero_iteration_pretraining_saves_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), TINY);
    assert!(run("gen-data", &cfg_path, dir.path()).status.success());
    assert!(run("pretrain", &cfg_path, dir.path()).status.success());
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let init = DenoiserParams::init(cfg.denoiser(), cfg.init_seed()).unwrap();
    let saved = std::fs::read(dir.path().join("pretrained.ckpt")).unwrap();
    assert_eq!(saved, checkpoint::to_bytes(&init.to_named()));
}

#[test]
fn every_command_runs_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for cmd in ["gen-data", "pretrain", "finetune", "eval", "sample", "bench-tape"] {
        let out = run(cmd, &cfg, dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["manifest.txt", "pretrain_loss.csv", "finetune_steps.csv", "eval.csv", "tape.csv", "tape_fit.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let pgm = std::fs::read(dir.path().join("samples/sample_000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n48 16\n255\n"));
    assert_eq!(pgm.len(), 13 + 48 * 16);
}

#[test]
fn seed_flag_overrides_the_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), TINY);
    bin().args(["gen-data", "--seed", "5", "--config"]).arg(&cfg).arg("--out").arg(a.path()).output().unwrap();
    bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(b.path()).output().unwrap();
    let read = |d: &Path| std::fs::read(d.join("data.cnds")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"eval\": { \"samples\": 3 }\n}");
    let out = run("eval", &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("samples") && err.contains("line 2"), "{err}");
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("pretrain", &dir.path().join("absent.json"), dir.path());
    assert_eq!(out.status.code(), Some(3));
    let cfg = write_config(dir.path(), TINY);
    let out = run("finetune", &cfg, dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("data.cnds"));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "data": { "n": 40, "kind": "depth-map" }, "model": { "widths": [4, 8, 4] },
             "pretrain": { "iters": 20, "batch": 2, "lr": 1e200 } }"#,
    );
    assert!(run("gen-data", &cfg, dir.path()).status.success());
    assert_eq!(run("pretrain", &cfg, dir.path()).status.code(), Some(4));
}

/// The committed pipeline config reproduces the committed evaluation
/// report bit for bit. Regenerate the golden file after an intentional
/// numeric change.
#[test]
fn pipeline_matches_golden_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pipeline_config();
    for cmd in ["gen-data", "pretrain", "finetune", "eval"] {
        let out = run(cmd, &cfg, dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let got = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pipeline_eval.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, std::fs::read_to_string(golden).unwrap());
}
