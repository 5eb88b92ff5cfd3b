use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[run]
seed = 11

[backbone]
layers = 6
dim = 24

[tasks]
scale = 0.1

[search]
simulations = 20

[router]
hidden = 16
windows = 4

[train]
warmup = 5
epochs = 3
lr_max = 3e-3

[eval]
p_grid = [-1.0, -0.5, 0.0, 1.0]
ablations = false
ood = true
"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthroute"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn subcommands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let c = ["--config", "small.toml"];
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(&c);
        let out = bin(d, &all);
        ok(&out);
        out
    };
    run(&["tasks", "gen", "--split", "train", "--out", "work/train.jsonl"]);
    run(&["tasks", "gen", "--split", "heldout", "--out", "work/heldout.jsonl"]);
    run(&["tasks", "gen", "--stratum", "D4", "--count", "7", "--out", "work/d4.jsonl"]);
    assert_eq!(std::fs::read_to_string(d.join("work/d4.jsonl")).unwrap().lines().count(), 7);
    run(&["pretrain", "--out", "work/backbone.ckpt"]);
    let s = run(&["search", "--backbone", "work/backbone.ckpt", "--corpus", "work/train.jsonl", "--out", "work/dataset.jsonl"]);
    assert!(String::from_utf8_lossy(&s.stdout).contains("kept"));
    let stats = std::fs::read_to_string(d.join("work/search_stats.csv")).unwrap();
    assert!(stats.starts_with("stratum,original,sampled,visited,inferences,layers_saved"));
    run(&[
        "train", "--backbone", "work/backbone.ckpt", "--dataset", "work/dataset.jsonl", "--heldout", "work/heldout.jsonl",
        "--out", "work/routers.ckpt",
    ]);
    let log = std::fs::read_to_string(d.join("work/train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,loss,skip_f1,exec_f1,repeat_f1,macro_f1,lr");
    assert_eq!(log.lines().count(), 4);
    run(&["eval", "--routers", "work/routers.ckpt", "--corpus", "work/heldout.jsonl", "--out", "work/report.json"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("work/report.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() <= 1.0);
    assert!(report["f1"]["macro_f1"].is_number());
    run(&[
        "eval", "--ood", "--routers", "work/routers.ckpt", "--corpus", "work/heldout.jsonl", "--dataset",
        "work/dataset.jsonl", "--out", "work/ood.json",
    ]);
    let ood: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("work/ood.json")).unwrap()).unwrap();
    let delta = ood["ood_accuracy"].as_f64().unwrap() - ood["in_domain_accuracy"].as_f64().unwrap();
    assert!((ood["delta"].as_f64().unwrap() - delta).abs() < 1e-12);
    run(&[
        "analyze", "--routers", "work/routers.ckpt", "--corpus", "work/heldout.jsonl", "--dataset", "work/dataset.jsonl",
        "--out", "work/analysis",
    ]);
    for f in ["usage.csv", "depth_groups.csv", "label_distribution.csv", "usage.svg", "config.toml"] {
        assert!(d.join("work/analysis").join(f).is_file(), "{f}");
    }
    let sweep = run(&[
        "sweep", "--routers", "work/routers.ckpt", "--corpus", "work/heldout.jsonl", "--p-grid", "-1,1", "--out",
        "work/sweep.csv",
    ]);
    assert_eq!(String::from_utf8_lossy(&sweep.stdout).lines().count(), 2);
    let rows = std::fs::read_to_string(d.join("work/sweep.csv")).unwrap();
    let last: Vec<&str> = rows.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(last[2], "12.0");
}

#[test]
fn all_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(&bin(d, &["all", "--config", "small.toml", "--out", "a"]));
    ok(&bin(d, &["all", "--config", "small.toml", "--out", "b", "--workers", "2"]));
    let mut names: Vec<_> = std::fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 15);
    for n in names {
        let (x, y) = (std::fs::read(d.join("a").join(&n)).unwrap(), std::fs::read(d.join("b").join(&n)).unwrap());
        assert!(x == y, "{n:?} differs");
    }
    // A different seed changes the corpus.
    ok(&bin(d, &["tasks", "gen", "--config", "small.toml", "--seed", "12", "--out", "c/corpus.jsonl"]));
    ok(&bin(d, &["tasks", "gen", "--config", "small.toml", "--out", "c/same.jsonl"]));
    let same = std::fs::read(d.join("c/same.jsonl")).unwrap();
    let mut full = std::fs::read_to_string(d.join("a/corpus.jsonl")).unwrap();
    full.push_str(&std::fs::read_to_string(d.join("a/heldout.jsonl")).unwrap());
    assert_eq!(same.len(), full.len());
    assert_ne!(std::fs::read(d.join("c/corpus.jsonl")).unwrap(), same);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(bin(d, &["all", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(d, &["--help"]).status.code(), Some(0));

    std::fs::write(d.join("bad.toml"), "[search]\nsimulation = 3\n").unwrap();
    let out = bin(d, &["all", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulation"));
    assert_eq!(bin(d, &["all", "--config", "missing.toml"]).status.code(), Some(2));

    let out = bin(d, &["search", "--backbone", "nope.ckpt", "--corpus", "nope.jsonl", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let out = bin(d, &["search", "--backbone", "junk.ckpt", "--corpus", "empty.jsonl", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(3));

    // Divergent router training.
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    std::fs::write(d.join("hot.toml"), format!("{SMALL}\n").replace("lr_max = 3e-3", "lr_max = 1e30")).unwrap();
    let out = bin(d, &["all", "--config", "hot.toml", "--out", "hot"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn transformer_backbone_pretrains() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("t.toml"),
        "[backbone]\nkind = \"transformer\"\nlayers = 3\ndim = 16\nheads = 2\nffn = 32\nmax_seq = 32\n\
         [pretrain]\nsteps = 30\nbatch = 4\nwarmup = 5\ntrain_examples = 64\nheldout_examples = 16\ncopy_len = 3\n",
    )
    .unwrap();
    let out = bin(d, &["pretrain", "--config", "t.toml", "--out", "t/backbone.ckpt"]);
    ok(&out);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("t/pretrain.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 30);
    let bytes = std::fs::read(d.join("t/backbone.ckpt")).unwrap();
    assert_eq!(&bytes[..8], b"DRLLMCK1");
}
