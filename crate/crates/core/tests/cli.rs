//! Drives the `cordvip` binary end to end on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cordvip::nncore::Checkpoint;
use tempfile::TempDir;

const TINY: &str = r#"{
  "n_points": 64,
  "d": 16,
  "heads": 4,
  "state_dim": 8,
  "hidden": 32,
  "blocks": 1,
  "pretrain_epochs": 2,
  "frames_per_epoch": 8,
  "pretrain_batch_size": 4,
  "val_episodes": 1,
  "val_stride": 4,
  "policy_epochs": 3,
  "policy_batch_size": 16,
  "finetune_every": 2,
  "finetune_batches": 2,
  "finetune_batch_size": 2
}"#;

fn cordvip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cordvip")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cordvip(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cordvip(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.json")
    }

    fn config_with(&self, name: &str, extra: &str) -> PathBuf {
        let p = self.path(name);
        let body = TINY.trim_end().trim_end_matches('}').trim_end();
        fs::write(&p, format!("{body},\n{extra}\n}}")).unwrap();
        p
    }

    /// The tiny config with one existing entry rewritten.
    fn variant(&self, name: &str, from: &str, to: &str) -> PathBuf {
        assert!(TINY.contains(from));
        let p = self.path(name);
        fs::write(&p, TINY.replace(from, to)).unwrap();
        p
    }

    fn gen(&self, name: &str, episodes: usize, seed: u64) -> PathBuf {
        let out = self.path(name);
        ok(&[
            "gen-data",
            "--episodes",
            &episodes.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            s(&out),
            "--config",
            s(&self.config()),
        ]);
        out
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn csv_rows(p: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

#[test]
fn gen_data_zero_episodes_writes_only_a_manifest() {
    let f = Fixture::new();
    let out = f.gen("empty", 0, 0);
    let files = dir_bytes(&out);
    assert_eq!(files.len(), 1);
    assert_eq!(files[0].0, "manifest.json");
    let m: serde_json::Value = serde_json::from_slice(&files[0].1).unwrap();
    assert_eq!(m["episodes"].as_array().unwrap().len(), 0);
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let f = Fixture::new();
    let a = f.gen("a", 3, 7);
    let b = f.gen("b", 3, 7);
    let c = f.gen("c", 3, 8);
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(da.len(), 4);
    assert_eq!(da, db);
    assert_ne!(da, dir_bytes(&c));
    // rerunning into the same directory overwrites with the same bytes
    f.gen("a", 3, 7);
    assert_eq!(dir_bytes(&a), da);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let eps = m["episodes"].as_array().unwrap();
    assert_eq!(eps.len(), 3);
    for (i, e) in eps.iter().enumerate() {
        assert_eq!(e["env_seed"], 7 + i as u64);
        assert!(a.join(e["file"].as_str().unwrap()).exists());
        assert_eq!(e["success"], true);
    }
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    // usage errors
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gen-data", "--out", "x"]), 1);
    assert_eq!(code(&["gen-data", "--episodes", "2", "--env", "pendulum", "--out", s(&f.path("p"))]), 1);
    assert_eq!(code(&["--help"]), 0);
    let noisy = f.config_with("noisy.json", r#""expert_noise": -0.01"#);
    assert_eq!(code(&["gen-data", "--episodes", "1", "--out", s(&f.path("n")), "--config", s(&noisy)]), 1);

    // schema and data errors
    let typo = f.config_with("typo.json", r#""n_pionts": 32"#);
    assert_eq!(code(&["gen-data", "--episodes", "1", "--out", s(&f.path("t")), "--config", s(&typo)]), 2);
    let missing = f.path("nowhere");
    assert_eq!(code(&["pretrain", "--data", s(&missing), "--out", s(&f.path("e.ckpt"))]), 2);
    assert_eq!(code(&["eval", "--policy", s(&missing), "--episodes", "1", "--report", s(&f.path("r.csv"))]), 2);
    let blocker = f.path("file");
    fs::write(&blocker, b"not a directory").unwrap();
    let under_file = blocker.join("data");
    assert_ne!(code(&["gen-data", "--episodes", "1", "--out", s(&under_file), "--config", s(&f.config())]), 0);
}

#[test]
fn inspect_dumps_clouds_and_contact() {
    let f = Fixture::new();
    let data = f.gen("data", 1, 0);
    let ep = data.join("episode_0000.cvep");
    let prefix = f.path("dump");
    ok(&["inspect", "--episode", s(&ep), "--step", "3", "--out", s(&prefix), "--config", s(&f.config())]);
    let (h, obj) = csv_rows(&f.path("dump_object.csv"));
    assert_eq!(h, "x,y,z,contact");
    assert_eq!(obj.len(), 64);
    let contact: Vec<f64> = obj.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(contact.iter().all(|c| (0.0..=1.0).contains(c)));
    let (h, hand) = csv_rows(&f.path("dump_hand.csv"));
    assert_eq!(h, "x,y,z");
    assert_eq!(hand.len(), 64);
    assert_eq!(
        code(&["inspect", "--episode", s(&ep), "--step", "100000", "--out", s(&prefix), "--config", s(&f.config())]),
        1
    );
}

#[test]
fn bench_fk_echoes_configuration_and_slows_with_points() {
    let rate = |points: &str| -> f64 {
        let out = ok(&["bench-fk", "--links", "20", "--points", points, "--seconds", "0.5"]);
        let mut lines = out.lines();
        assert_eq!(lines.next().unwrap(), format!("bench-fk links=20 points={points} seconds=0.5"));
        let last = lines.next().unwrap();
        let r = last.split(": ").nth(1).unwrap().trim_end_matches(" calls/s");
        r.parse().unwrap()
    };
    let (small, large) = (rate("64"), rate("1024"));
    assert!(small > large, "{small} vs {large}");
}

#[test]
fn pretrain_train_eval_pipeline() {
    let f = Fixture::new();
    let cfg = f.config();
    let data = f.gen("data", 3, 0);

    // full run, and a one-epoch run resumed to the same end point
    let full = f.path("full.ckpt");
    ok(&["pretrain", "--data", s(&data), "--config", s(&cfg), "--out", s(&full), "--seed", "5"]);
    let one = f.variant("one.json", "\"pretrain_epochs\": 2", "\"pretrain_epochs\": 1");
    let half = f.path("half.ckpt");
    ok(&["pretrain", "--data", s(&data), "--config", s(&one), "--out", s(&half), "--seed", "5"]);
    let resumed = f.path("resumed.ckpt");
    ok(&[
        "pretrain", "--data", s(&data), "--config", s(&cfg), "--out", s(&resumed), "--seed", "5", "--resume", s(&half),
    ]);
    let full_log = fs::read(f.path("full.ckpt.metrics.csv")).unwrap();
    assert_eq!(fs::read(f.path("resumed.ckpt.metrics.csv")).unwrap(), full_log);
    assert_eq!(fs::read(&resumed).unwrap(), fs::read(&full).unwrap());
    let (h, rows) = csv_rows(&f.path("full.ckpt.metrics.csv"));
    assert!(h.starts_with("epoch,contact_mse,coordination_mse,total"));
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
    }

    let ep = data.join("episode_0001.cvep");
    let prefix = f.path("pred");
    let out = ok(&[
        "inspect", "--episode", s(&ep), "--step", "0", "--out", s(&prefix), "--encoder", s(&full), "--config", s(&cfg),
    ]);
    assert!(out.starts_with("predicted vs ground-truth contact pearson "));
    let (h, rows) = csv_rows(&f.path("pred_object.csv"));
    assert_eq!(h, "x,y,z,contact,predicted");
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[4].parse::<f64>().unwrap())));

    // λ = 0: coordination is logged but the optimized total is contact alone
    let no_coord = f.config_with("lambda0.json", r#""lambda": 0.0"#);
    let l0 = f.path("l0.ckpt");
    ok(&["pretrain", "--data", s(&data), "--config", s(&no_coord), "--out", s(&l0)]);
    let (_, rows) = csv_rows(&f.path("l0.ckpt.metrics.csv"));
    for r in &rows {
        let v: Vec<f64> = r.iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[2] > 0.0);
        assert_eq!(v[3], v[1]);
    }

    // frozen encoder: the policy carries the pretrained weights unchanged
    let frozen = f.path("frozen.ckpt");
    ok(&[
        "train", "--data", s(&data), "--encoder", s(&full), "--config", s(&cfg), "--out", s(&frozen), "--freeze-encoder",
    ]);
    let enc = Checkpoint::load(&full).unwrap();
    let pol = Checkpoint::load(&frozen).unwrap();
    let corr: Vec<_> = enc.tensors.iter().filter(|(n, _)| n.starts_with("corr.")).collect();
    assert!(!corr.is_empty());
    for (n, t) in &corr {
        assert_eq!(pol.get(n), Some(t), "{n}");
    }
    let tuned = f.path("tuned.ckpt");
    ok(&["train", "--data", s(&data), "--encoder", s(&full), "--config", s(&cfg), "--out", s(&tuned)]);
    let tuned_ck = Checkpoint::load(&tuned).unwrap();
    assert!(corr.iter().any(|(n, t)| tuned_ck.get(n) != Some(t)));

    // no encoder: random init, and a mismatched encoder is a schema error
    let scratch = f.path("scratch.ckpt");
    let out = ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&scratch)]);
    assert!(out.starts_with("train done: loss "));
    let (h, rows) = csv_rows(&f.path("scratch.ckpt.metrics.csv"));
    assert_eq!(h, "epoch,loss");
    assert_eq!(rows.len(), 4);
    let wide = f.variant("wide.json", "\"state_dim\": 8", "\"state_dim\": 12");
    assert_eq!(
        code(&["train", "--data", s(&data), "--encoder", s(&full), "--config", s(&wide), "--out", s(&f.path("x.ckpt"))]),
        2
    );

    // eval: fixed seeds give identical report bytes; the fraction is the mean
    let report = f.path("eval.csv");
    let run = |r: &Path| {
        ok(&["eval", "--policy", s(&tuned), "--episodes", "3", "--seed", "9", "--report", s(r), "--max-steps", "8"])
    };
    let line = run(&report);
    let again = f.path("again.csv");
    run(&again);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&again).unwrap());
    let (h, rows) = csv_rows(&report);
    assert_eq!(h, cordvip::cli::EVAL_CSV_HEADER);
    assert_eq!(rows.len(), 3);
    let successes: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let mean = successes.iter().sum::<f64>() / 3.0;
    let frac: f64 = line.split(['(', ')']).nth(1).unwrap().parse().unwrap();
    assert!((frac - mean).abs() < 1e-3, "{line}");
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[1], (9 + i).to_string());
        assert!(r[4].parse::<usize>().unwrap() <= 8);
    }
    let (th, trows) = csv_rows(&f.path("eval.timing.csv"));
    assert_eq!(th, "episode,steps,seconds,steps_per_second");
    assert_eq!(trows.len(), 3);
}
