//! Commands through the argument parser, their artifacts and exit codes.

use std::path::{Path, PathBuf};

use aef::cli::{run_args, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};
use aef::data::report::{read_json, Report, CSV_COLUMNS};
use aef::data::{load_perturbation, save_ppm, Dataset};

const TINY: &str = r#"
[hp]
t_out = 2
batch_size = 8

[[ensemble]]
paradigm = "input-concat"
image_size = 16
width = 4

[[ensemble]]
paradigm = "latent-injection"
image_size = 16
width = 4
seed = 1

[[ensemble]]
paradigm = "style-injection"
image_size = 16
width = 4
seed = 2
resistance_blur = 1.0

[pretrain]
steps = 10
images = 16

[train_images]
source = "synthetic"
n = 8
size = 16
seed = 0
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.in.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> u8 {
    run_args(std::iter::once("aef").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_and_rerun_from_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("train");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]), EXIT_OK);
    for f in ["config.toml", "perturbation.aefp", "trace.csv", "trace.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let header = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let report: Report = read_json(&out.join("trace.json")).unwrap();
    assert_eq!(report.hyper_params.seed, 3);
    assert_eq!(report.rows.len(), 2 * 3);

    // The echoed config reproduces the run bit for bit.
    let again = dir.path().join("again");
    assert_eq!(run(&["train", "--config", s(&out.join("config.toml")), "--out", s(&again)]), EXIT_OK);
    for f in ["perturbation.aefp", "trace.csv", "trace.json"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let eval = dir.path().join("eval");
    let p = out.join("perturbation.aefp");
    assert_eq!(run(&["eval", "--config", s(&cfg), "--out", s(&eval), "--perturbation", s(&p)]), EXIT_OK);
    let csv = std::fs::read_to_string(eval.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(csv.lines().last().unwrap().contains("aggregate"));
    assert_eq!(load_perturbation(&p).unwrap().size(), 16);
}

#[test]
fn sweep_holdout_and_ablate_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("t_out = 2", "t_out = 1"));
    let sweep = dir.path().join("sweep");
    let code = run(&["sweep", "--config", s(&cfg), "--out", s(&sweep), "--param", "T", "--values", "0.1,1"]);
    assert_eq!(code, EXIT_OK);
    assert!(sweep.join("T=0.1").join("eval.csv").exists());
    assert!(sweep.join("T=1").join("perturbation.aefp").exists());
    let report: Report = read_json(&sweep.join("sweep.json")).unwrap();
    assert_eq!(report.rows.len(), 2 * 4);

    let hold = dir.path().join("holdout");
    assert_eq!(run(&["holdout", "--config", s(&cfg), "--out", s(&hold), "--exclude", "latent-injection"]), EXIT_OK);
    let report: Report = read_json(&hold.join("exclude-latent-injection").join("holdout.json")).unwrap();
    assert_eq!(report.details["roles"]["latent-injection"], "black-box");
    assert_eq!(report.details["roles"]["input-concat"], "white-box");

    let only = dir.path().join("only");
    assert_eq!(run(&["holdout", "--config", s(&cfg), "--out", s(&only), "--only", "input-concat"]), EXIT_OK);
    let report: Report = read_json(&only.join("only-input-concat").join("holdout.json")).unwrap();
    assert_eq!(report.details["roles"]["style-injection@blur1"], "black-box");

    let all = dir.path().join("folds");
    assert_eq!(run(&["holdout", "--config", s(&cfg), "--out", s(&all)]), EXIT_OK);
    assert_eq!(std::fs::read_dir(&all).unwrap().count(), 3);

    let ablate = dir.path().join("ablate");
    assert_eq!(run(&["ablate", "--config", s(&cfg), "--out", s(&ablate)]), EXIT_OK);
    let report: Report = read_json(&ablate.join("ablation.json")).unwrap();
    assert!(report.details.contains_key("srmask_delta_pct"));
    assert!(ablate.join("static").join("trace.csv").exists());
}

#[test]
fn ppm_images_can_replace_synthetic_ones() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    let data = Dataset::synthetic(8, 16, 9).unwrap();
    for i in 0..8 {
        save_ppm(&data.images.image(i), &images.join(format!("img{i}.ppm"))).unwrap();
    }
    let text = TINY.replace(
        "source = \"synthetic\"\nn = 8\nsize = 16\nseed = 0",
        &format!("source = \"ppm\"\ndir = {:?}", s(&images)),
    );
    let cfg = write_config(dir.path(), &text);
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]), EXIT_OK);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(run(&["--help"]), EXIT_OK);
    assert_eq!(run(&["train"]), EXIT_CONFIG);
    assert_eq!(run(&["train", "--config", "/nonexistent/aef.toml"]), EXIT_CONFIG);

    let typo = write_config(dir.path(), &TINY.replace("t_out", "t_outer"));
    assert_eq!(run(&["train", "--config", s(&typo), "--out", s(&out)]), EXIT_CONFIG);
    let no_ensemble = write_config(dir.path(), "[train_images]\nsource = \"synthetic\"\nn = 4\nsize = 16\nseed = 0\n");
    assert_eq!(run(&["train", "--config", s(&no_ensemble), "--out", s(&out)]), EXIT_CONFIG);

    let cfg = write_config(dir.path(), TINY);
    let sweep = ["sweep", "--config", s(&cfg), "--out", s(&out), "--param"];
    assert_eq!(run(&[&sweep[..], &["gamma", "--values", "1"]].concat()), EXIT_CONFIG);
    assert_eq!(run(&[&sweep[..], &["T", "--values", "0.1,abc"]].concat()), EXIT_CONFIG);
    assert_eq!(run(&[&sweep[..], &["T", "--values=-1"]].concat()), EXIT_CONFIG);
    assert_eq!(run(&["holdout", "--config", s(&cfg), "--out", s(&out), "--exclude", "cyclegan"]), EXIT_CONFIG);
    assert_eq!(run(&["train", "--config", s(&cfg), "--weighting", "greedy"]), EXIT_CONFIG);

    let diverging = write_config(dir.path(), &TINY.replace("steps = 10", "steps = 10\nlr = 1e300"));
    assert_eq!(run(&["train", "--config", s(&diverging), "--out", s(&out)]), EXIT_NUMERICAL);
}
