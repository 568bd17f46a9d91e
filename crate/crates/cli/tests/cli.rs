use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pointcopy::analysis::planted::{planted_color_model, single_cell_patches};
use pointcopy::data::{write_dataset, BBox, Grid, GroundedTrace, ObjectEntry, Vocab};
use pointcopy::AugToken;
use serde_json::Value;

const SMALL: &str = "
[model]
dim = 16
heads = 2
max_seq = 40

[data]
rows = 3
cols = 3
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointcopy"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn gen(&self, cfg: &Path, n: usize, seed: u64, name: &str) -> PathBuf {
        let out = self.path(name);
        let n = n.to_string();
        let seed = seed.to_string();
        let o = run(&[
            "--config",
            s(cfg),
            "gen-data",
            "--n",
            &n,
            "--seed",
            &seed,
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    }
}

fn losses(out: &str) -> Vec<f64> {
    out.lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let env = Env::new();
    let cfg = env.config("c.toml", SMALL);
    let a = env.gen(&cfg, 10, 7, "a.jsonl");
    let b = env.gen(&cfg, 10, 7, "b.jsonl");
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 10);
    let c = env.gen(&cfg, 10, 8, "c.jsonl");
    assert_ne!(bytes, std::fs::read(&c).unwrap());
}

#[test]
fn gen_data_reports_retention() {
    let env = Env::new();
    let out = env.path("d.jsonl");
    let o = run(&[
        "gen-data",
        "--n",
        "20",
        "--seed",
        "1",
        "--defects",
        "6",
        "--tasks",
        "mixed",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "kept 14 of 20 traces");
}

#[test]
fn usage_and_io_errors_exit_2() {
    let env = Env::new();
    let out = env.path("x.jsonl");
    assert_eq!(code(&run(&["gen-data", "--n", "0", "--out", s(&out)])), 2);
    let bad = env.path("missing/dir/x.jsonl");
    assert_eq!(code(&run(&["gen-data", "--n", "3", "--out", s(&bad)])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let cfg = env.config("bad.toml", "[model]\nheads = 0\n");
    assert_eq!(
        code(&run(&["--config", s(&cfg), "gen-data", "--n", "1", "--out", s(&out)])),
        2
    );
}

#[test]
fn training_memorizes_one_trace() {
    let env = Env::new();
    let cfg = env.config(
        "c.toml",
        &format!("{SMALL}\n[train]\nlr = 0.01\nbatch = 1\ngrad_accum = 1\nepochs = 150\n"),
    );
    let data = env.gen(&cfg, 1, 3, "one.jsonl");
    let ck = env.path("m.ckpt");
    let metrics = env.path("metrics.jsonl");
    let o = run(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ck),
        "--metrics",
        s(&metrics),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let l = losses(&stdout(&o));
    assert_eq!(l.len(), 150);
    assert!(*l.last().unwrap() < 0.05, "final loss {}", l.last().unwrap());
    let logged = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(logged, stdout(&o));
    let first: Value = serde_json::from_str(logged.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "loss", "ce", "zloss", "ptr_acc"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert!(ck.exists());
}

#[test]
fn zero_lr_gives_constant_loss() {
    let env = Env::new();
    let cfg = env.config(
        "c.toml",
        &format!("{SMALL}\n[train]\nlr = 0.0\nbatch = 4\ngrad_accum = 1\nepochs = 3\n"),
    );
    let data = env.gen(&cfg, 4, 3, "d.jsonl");
    let o = run(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&env.path("m.ckpt")),
    ]);
    assert_eq!(code(&o), 0);
    let l = losses(&stdout(&o));
    assert_eq!(l.len(), 3);
    assert!(l.iter().all(|x| (x - l[0]).abs() < 1e-12));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let env = Env::new();
    let cfg = env.config(
        "c.toml",
        &format!("{SMALL}\n[train]\nlr = 0.003\nbatch = 2\ngrad_accum = 2\nepochs = 2\nseed = 9\n"),
    );
    let data = env.gen(&cfg, 12, 3, "d.jsonl");
    let full = run(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&env.path("full.ckpt")),
    ]);
    assert_eq!(code(&full), 0);
    let full = losses(&stdout(&full));
    assert_eq!(full.len(), 6);

    let half = env.path("half.ckpt");
    let o = run(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&half),
        "--max-steps",
        "2",
    ]);
    assert_eq!(losses(&stdout(&o)).len(), 2);
    let o = run(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&env.path("rest.ckpt")),
        "--resume",
        s(&half),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rest = losses(&stdout(&o));
    assert_eq!(rest.len(), 4);
    for (a, b) in rest.iter().zip(&full[2..]) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn diverging_training_exits_3() {
    let env = Env::new();
    let cfg = env.config(
        "c.toml",
        &format!("{SMALL}\n[train]\nlr = 1e200\nbatch = 2\ngrad_accum = 1\n"),
    );
    let data = env.gen(&cfg, 4, 3, "d.jsonl");
    let o = run(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&env.path("m.ckpt")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step 1"));
}

fn trained(env: &Env, cfg: &Path) -> (PathBuf, PathBuf) {
    let data = env.gen(cfg, 8, 3, "d.jsonl");
    let ck = env.path("m.ckpt");
    let o = run(&[
        "--config",
        s(cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ck),
        "--max-steps",
        "2",
    ]);
    assert_eq!(code(&o), 0);
    (data, ck)
}

#[test]
fn eval_reports_and_checks_shapes() {
    let env = Env::new();
    let cfg = env.config("c.toml", SMALL);
    let (data, ck) = trained(&env, &cfg);
    let o = run(&["--config", s(&cfg), "eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(code(&o), 0);
    let r: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["tasks"], 8);
    assert_eq!(r["ptr_total"], 8);
    assert_eq!(r["pointing"], true);

    let o = run(&[
        "--config",
        s(&cfg),
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--no-pointing",
    ]);
    let r: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["ptr_correct"], 0);

    let wide = env.config("w.toml", "[model]\ndim = 32\nheads = 2\nmax_seq = 40\n");
    let o = run(&["--config", s(&wide), "eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(code(&o), 4);
    let missing = env.path("nope.ckpt");
    assert_eq!(
        code(&run(&[
            "--config",
            s(&cfg),
            "eval",
            "--checkpoint",
            s(&missing),
            "--data",
            s(&data)
        ])),
        2
    );
}

#[test]
fn decode_writes_transcript() {
    let env = Env::new();
    let cfg = env.config("c.toml", SMALL);
    let (data, ck) = trained(&env, &cfg);
    let tr = env.path("t.jsonl");
    let o = run(&[
        "--config",
        s(&cfg),
        "decode",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--index",
        "2",
        "--transcript",
        s(&tr),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&tr).unwrap();
    assert!(!text.is_empty());
    for (t, line) in text.lines().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["t"], t);
        assert!(v["kind"] == "vocab" || v["kind"] == "ptr");
        assert!(v["logit_top5"].as_array().unwrap().len() <= 5);
    }
    let o = run(&[
        "--config",
        s(&cfg),
        "decode",
        "--checkpoint",
        s(&ck),
        "--task",
        "compare",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("{\"t\":0,"));
}

#[test]
fn analyze_is_deterministic_and_zero_without_copies() {
    let env = Env::new();
    let cfg = env.config("c.toml", SMALL);
    let (_, ck) = trained(&env, &cfg);
    let (a, b) = (env.path("a.csv"), env.path("b.csv"));
    for out in [&a, &b] {
        let o = run(&[
            "--config",
            s(&cfg),
            "analyze",
            "--checkpoint",
            s(&ck),
            "--task",
            "lookup",
            "--seed",
            "5",
            "--out",
            s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("step,cumulative_image.l0,cumulative_image.l1,bbox_ratio.l0"));

    let off = env.config("off.toml", &format!("{SMALL}\n[decode]\npointing = false\n"));
    let c = env.path("c.csv");
    let o = run(&[
        "--config",
        s(&off),
        "analyze",
        "--checkpoint",
        s(&ck),
        "--task",
        "lookup",
        "--seed",
        "5",
        "--out",
        s(&c),
    ]);
    assert_eq!(code(&o), 0);
    let mut rdr = csv::Reader::from_path(&c).unwrap();
    let cols: Vec<usize> = rdr
        .headers()
        .unwrap()
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("copy_attention"))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(cols.len(), 2);
    for rec in rdr.records() {
        let rec = rec.unwrap();
        for &i in &cols {
            assert_eq!(rec[i].parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn ground_finds_planted_patch() {
    let env = Env::new();
    let grid = Grid::new(8, 8, 16);
    let patches = single_cell_patches(grid, 2, 3, 0, 1).unwrap();
    let obj = |r: usize, c: usize| ObjectEntry {
        label: format!("cell({r},{c})"),
        bbox: grid.cell_bbox(r, c),
    };
    let trace = GroundedTrace {
        prompt: vec![Vocab::LOOKUP, Vocab::row(2), Vocab::col(3)],
        patches,
        target: vec![
            AugToken::Vocab(Vocab::REGION),
            AugToken::Ptr(grid.index(2, 3) as u32),
            AugToken::Vocab(Vocab::color(1)),
            AugToken::Vocab(Vocab::EOS),
        ],
        objects: vec![obj(2, 3), obj(0, 0), obj(7, 7)],
    };
    let data = env.path("img.jsonl");
    write_dataset(&data, &[trace]).unwrap();
    let ck = env.path("planted.ckpt");
    planted_color_model(32, 80, 2.0)
        .unwrap()
        .checkpoint()
        .save(&ck)
        .unwrap();
    let cfg = env.config("p.toml", "[model]\nlayers = 1\ndim = 32\nheads = 1\nmax_seq = 80\n");
    let out = env.path("box.txt");
    let o = run(&[
        "--config",
        s(&cfg),
        "ground",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--description",
        "<color1>",
        "--baseline",
        "<pad>",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed = stdout(&o);
    let v: Vec<u32> = printed.trim().split(',').map(|x| x.parse().unwrap()).collect();
    let b = BBox::new(v[0], v[1], v[2], v[3]).unwrap();
    // center of patch (row 2, col 3)
    assert!(b.contains(3.5 * 16.0, 2.5 * 16.0), "{b}");
    assert_eq!(std::fs::read_to_string(&out).unwrap(), printed);
    let o = run(&[
        "--config",
        s(&cfg),
        "ground",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--description",
        "<nonsense>",
        "--baseline",
        "<pad>",
    ]);
    assert_eq!(code(&o), 2);
}
