use std::path::Path;
use std::process::{Command, Output};

use nuta::tooling::heatmap::{parse_pgm, HeadGrid};

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");

fn nuta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nuta"))
        .args(args)
        .env_remove("NUTA_SEED")
        .output()
        .expect("binary runs")
}

fn cfg(name: &str) -> String {
    format!("{CONFIGS}/{name}")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_subcommand_and_flag_exit_two() {
    let o = nuta(&["bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(nuta(&["flops", "--nope"]).status.code(), Some(2));
    assert_eq!(nuta(&[]).status.code(), Some(2));
}

#[test]
fn failures_exit_one_with_diagnostics() {
    let o = nuta(&["flops", "--config", "/nonexistent.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent.cfg"));
    // a data config is not a network config
    assert_eq!(nuta(&["flops", "--config", &cfg("data.cfg")]).status.code(), Some(1));
}

#[test]
fn flops_compare_prints_ratio_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cost.csv");
    let o = nuta(&[
        "flops",
        "--config",
        &cfg("i3d50.cfg"),
        "--compare",
        &cfg("nuta50.cfg"),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("ratio nuta50 / i3d50")).expect("ratio line");
    let ratio: f64 = line.split('=').nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((1.10..=1.30).contains(&ratio), "{line}");
    assert!(text.contains("GFLOP (2xMAC)"));

    let records = std::fs::read_to_string(&csv).unwrap();
    let mut lines = records.lines();
    assert_eq!(lines.next(), Some("config,layer,branch,output,macs,flops_2x"));
    let mut totals = std::collections::HashMap::<String, u64>::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let macs: u64 = f[4].parse().unwrap();
        assert_eq!(f[5].parse::<u64>().unwrap(), 2 * macs);
        *totals.entry(f[0].to_string()).or_default() += macs;
    }
    let r = totals["nuta50"] as f64 / totals["i3d50"] as f64;
    assert!((r - ratio).abs() < 1e-4);

    let machine = nuta(&["flops", "--config", &cfg("toy.cfg"), "--machine"]);
    assert!(stdout(&machine).starts_with("config,layer,"));
}

#[test]
fn viz_on_untrained_net_with_constant_clip_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("maps");
    let o = nuta(&["viz", "--config", &cfg("toy.cfg"), "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut grids = 0;
    for entry in std::fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") => {
                let g = HeadGrid::from_text(&std::fs::read_to_string(&path).unwrap()).unwrap();
                let t = g.cols as f64;
                assert!(g.values.iter().all(|v| (v - 1.0 / t).abs() < 1e-6), "{}", path.display());
                grids += 1;
            }
            Some("pgm") => {
                let (_, _, px) = parse_pgm(&std::fs::read(&path).unwrap()).unwrap();
                let first = px[0];
                assert!(px.iter().all(|&p| p == first));
            }
            _ => panic!("unexpected file {}", path.display()),
        }
    }
    assert_eq!(grids, 8);
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data_cfg = d.join("data.cfg");
    std::fs::write(
        &data_cfg,
        "num_train = 32\nnum_val = 16\nclasses = 8\nframes = 8\nheight = 32\nwidth = 32\ninformative = 2\nseed = 5\n",
    )
    .unwrap();
    let data = d.join("data");
    let o = nuta(&["gen-data", "--config", data_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success());

    // the env var overrides the file's seed
    let data2 = d.join("data2");
    let o = Command::new(env!("CARGO_BIN_EXE_nuta"))
        .args(["gen-data", "--config", data_cfg.to_str().unwrap(), "--out", data2.to_str().unwrap()])
        .env("NUTA_SEED", "6")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("seed 6"));
    assert_ne!(read(&data.join("train.clips")), read(&data2.join("train.clips")));

    let run = d.join("run");
    let o = nuta(&[
        "train",
        "--net",
        &cfg("toy.cfg"),
        "--train",
        &cfg("train.cfg"),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "2",
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("val_accuracy"));
    for f in ["metrics.csv", "best.ckpt", "summary.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let preds = d.join("preds.csv");
    let o = nuta(&[
        "eval",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--data",
        data.join("val.clips").to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let acc: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .unwrap()
        .parse()
        .unwrap();
    let rows: Vec<String> = std::fs::read_to_string(&preds).unwrap().lines().skip(1).map(String::from).collect();
    let hits = rows
        .iter()
        .filter(|r| {
            let f: Vec<&str> = r.split(',').collect();
            f[1] == f[2]
        })
        .count();
    assert_eq!(hits as f64 / rows.len() as f64, acc);

    let maps = d.join("maps");
    let o = nuta(&[
        "viz",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--data",
        data.join("val.clips").to_str().unwrap(),
        "--clip",
        "3",
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("stage 4: attention_mass"));
}

#[test]
fn invariants_subcommand_passes() {
    let o = nuta(&["invariants", "--configs", CONFIGS]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 7);
}
