//! Trains the toy net and its uniform-only ablation on the same data.
//!
//! `cargo run --release --example train_toy -- [train_clips] [epochs]`
//! (defaults 1000 and 8; the full recipe is 5000 and 30).

use nuta::cli::train_run;
use nuta::net::{HeadInput, NetworkConfig};
use nuta::train::{generate_dataset, DataConfig, TrainConfig, TrainOutputs};

fn main() -> nuta::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("a count"));
    let clips = args.next().unwrap_or(1000);
    let epochs = args.next().unwrap_or(8);
    let root = env!("CARGO_MANIFEST_DIR");
    let net = NetworkConfig::load(format!("{root}/configs/toy.cfg"))?;
    let mut data = DataConfig::load(format!("{root}/configs/data.cfg"))?;
    data.num_train = clips;
    data.num_val = clips / 5;
    let mut recipe = TrainConfig::load(format!("{root}/configs/train.cfg"))?;
    // Same shape of schedule on a shorter run.
    recipe.lr_drop_epochs = vec![epochs * 2 / 3, epochs * 5 / 6];
    recipe.lr_drop_epochs.dedup();
    recipe.lr_drop_epochs.retain(|&e| e > 0 && e < epochs);
    recipe.epochs = epochs;
    let (tr, va) = generate_dataset(&data)?;
    let progress = TrainOutputs {
        progress: true,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for head in [HeadInput::Both, HeadInput::Uniform] {
        let mut cfg = net.clone();
        cfg.head = head;
        eprintln!("-- head {head}");
        let run = train_run(&cfg, &recipe, &tr, &va, &progress)?;
        rows.push((head, run));
    }
    println!("{:<8} {:>10} {:>6} {:>8}", "head", "val acc", "best", "mass");
    for (head, run) in &rows {
        let mass = run.eval.attention_mass.map_or("-".into(), |m| format!("{m:.3}"));
        println!("{head:<8} {:>10.4} {:>6} {mass:>8}", run.eval.accuracy, run.report.best_epoch);
    }
    Ok(())
}
