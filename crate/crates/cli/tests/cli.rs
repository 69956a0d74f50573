use std::path::Path;
use std::process::Command;

use clap::{CommandFactory, Parser};
use gnnformer::embed::{PeMode, Variant};
use gnnformer::metrics::EvalReport;
use gnnformer::train::TrainConfig;
use gnnformer_cli::{Cli, Command as Sub, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gnnformer"))
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(out: &Path) {
    let (code, text) = run(&[
        "gen-data", "--train", "6", "--val", "3", "--test", "3", "--seed", "5", "--min-cells", "8",
        "--max-cells", "18", "--out", s(out),
    ]);
    assert_eq!(code, EXIT_OK, "{text}");
}

const TINY: &[&str] = &[
    "--k", "3", "--gnn-layers", "1", "--enc-layers", "1", "--dec-layers", "1", "--heads", "2", "--d-model", "16",
    "--ff-dim", "32", "--encoder-width", "16", "--batch-size", "2", "--max-steps", "2", "--val-every", "2",
    "--max-len", "40", "--seed", "3",
];

#[test]
fn gen_data_writes_splits_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen_small(&a);
    gen_small(&b);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    assert_eq!(std::fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn train_eval_visualize_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data);
    let run_dir = dir.path().join("run");
    let graphs = dir.path().join("graphs");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run_dir), "--dump-graphs", s(&graphs)];
    args.extend_from_slice(TINY);
    let (code, text) = run(&args);
    assert_eq!(code, EXIT_OK, "{text}");
    let ckpt = run_dir.join("best.ckpt");
    assert!(ckpt.exists());
    assert!(run_dir.join("best.ckpt.meta.json").exists());
    assert_eq!(std::fs::read_dir(&graphs).unwrap().count(), 6);

    let metrics = dir.path().join("metrics.json");
    let reports = dir.path().join("reports.jsonl");
    let attn = dir.path().join("attn");
    let test = data.join("test.jsonl");
    let (code, text) = run(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--out", s(&metrics), "--reports", s(&reports),
        "--record-attention", s(&attn),
    ]);
    assert_eq!(code, EXIT_OK, "{text}");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    for name in EvalReport::FIELD_NAMES {
        assert!(m[name].is_number(), "missing {name}");
    }
    assert_eq!(m["n"], 3);
    assert_eq!(std::fs::read_to_string(&reports).unwrap().lines().count(), 3);
    assert_eq!(std::fs::read_dir(&attn).unwrap().count(), 3);

    let (code, text) = run(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--out", s(&dir.path().join("m2.json")), "--beam",
        "2", "--dtype", "f32",
    ]);
    assert_eq!(code, EXIT_OK, "{text}");

    let id = std::fs::read_to_string(&test).unwrap();
    let first: serde_json::Value = serde_json::from_str(id.lines().next().unwrap()).unwrap();
    let svg = dir.path().join("map.svg");
    let (code, text) = run(&[
        "visualize", "--checkpoint", s(&ckpt), "--data", s(&test), "--scene", &first["id"].to_string(), "--out",
        s(&svg), "--token-pos", "0",
    ]);
    assert_eq!(code, EXIT_OK, "{text}");
    let n = first["cells"].as_array().unwrap().len();
    assert_eq!(std::fs::read_to_string(&svg).unwrap().matches("<circle").count(), n);
    assert!(svg.with_extension("json").exists());

    let (code, _) = run(&[
        "visualize", "--checkpoint", s(&ckpt), "--data", s(&test), "--scene", "999999", "--out", s(&svg),
    ]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data);
    let mut bytes = Vec::new();
    for name in ["r1", "r2"] {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(TINY);
        assert_eq!(run(&args).0, EXIT_OK);
        bytes.push(std::fs::read(out.join("best.ckpt")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    assert_eq!(run(&["train", "--bogus"]).0, EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(run(&["--help"]).0, EXIT_OK);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    assert_eq!(run(&["train", "--data", s(&missing), "--out", s(dir.path())]).0, EXIT_DATA);
    assert_eq!(
        run(&["eval", "--checkpoint", s(&missing), "--data", s(&missing), "--out", s(&missing)]).0,
        EXIT_DATA
    );
    let data = dir.path().join("data");
    gen_small(&data);
    // 16 is not divisible by 3 heads
    assert_eq!(
        run(&["train", "--data", s(&data), "--out", s(dir.path()), "--d-model", "16", "--heads", "3"]).0,
        EXIT_USAGE
    );
    assert_eq!(run(&["gen-data", "--out", s(dir.path()), "--min-cells", "9", "--max-cells", "2"]).0, EXIT_USAGE);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc.json");
    let (code, text) = run(&["gradcheck", "--out", s(&out)]);
    assert_eq!(code, EXIT_OK, "{text}");
    assert!(text.contains("ok"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert!(v.as_array().unwrap().len() > 20);
}

fn parsed_config(extra: &[&str]) -> TrainConfig {
    let mut args = vec!["gnnformer", "train", "--data", "d", "--out", "o"];
    args.extend_from_slice(extra);
    match Cli::try_parse_from(args).unwrap().command {
        Sub::Train(a) => a.flags.to_config().unwrap(),
        _ => unreachable!(),
    }
}

#[test]
fn every_config_field_has_a_flag_that_round_trips() {
    let set = parsed_config(&[
        "--variant", "no-gnn", "--k", "7", "--coord-weight", "3.5", "--gnn-layers", "3", "--enc-layers", "2",
        "--dec-layers", "4", "--heads", "4", "--d-model", "64", "--ff-dim", "96", "--encoder-width", "48",
        "--pe-mode", "learned", "--agg-include-input", "--dropout", "0.25", "--lr", "0.002", "--batch-size", "5",
        "--max-steps", "77", "--patience", "6", "--val-every", "11", "--clip-norm", "2.5", "--max-len", "50",
        "--seed", "42",
    ]);
    let want = TrainConfig {
        variant: Variant::NoGnn,
        k: 7,
        coord_weight: 3.5,
        gnn_layers: 3,
        enc_layers: 2,
        dec_layers: 4,
        heads: 4,
        d_model: 64,
        ff_dim: 96,
        encoder_width: 48,
        pe_mode: PeMode::Learned,
        agg_include_input: true,
        dropout: 0.25,
        lr: 0.002,
        batch_size: 5,
        max_steps: 77,
        patience: 6,
        val_every: 11,
        clip_norm: 2.5,
        max_len: 50,
        seed: 42,
    };
    assert_eq!(set, want);

    // every serialized field differs from its default, so no flag was silently dropped
    let a = serde_json::to_value(&set).unwrap();
    let d = serde_json::to_value(TrainConfig::default()).unwrap();
    let cmd = Cli::command();
    let train = cmd.find_subcommand("train").unwrap();
    for (key, value) in a.as_object().unwrap() {
        assert_ne!(value, &d[key], "{key}");
        let flag = key.replace('_', "-");
        assert!(train.get_arguments().any(|arg| arg.get_long() == Some(flag.as_str())), "no --{flag}");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"k": 9, "lr": 0.01}"#).unwrap();
    let c = parsed_config(&["--config", s(&path), "--k", "4"]);
    assert_eq!(c.k, 4);
    assert_eq!(c.lr, 0.01);
    assert_eq!(c.d_model, TrainConfig::default().d_model);
}
