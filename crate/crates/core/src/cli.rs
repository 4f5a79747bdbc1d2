//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 when a command or check fails, 2 on usage errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{HeadInput, NetworkConfig, TwoBranchNet};
use crate::nn::Mode;
use crate::tensor::{no_grad, Tensor};
use crate::tooling::flops::{config_cost, CostReport};
use crate::tooling::gradcheck::{self, MIN_COORDS};
use crate::tooling::heatmap::export_heatmap;
use crate::tooling::invariants;
use crate::train::{
    attention_mass, evaluate, generate_dataset, train, Augment, Checkpoint, DataConfig, Dataset, Evaluation,
    TrainConfig, TrainOutputs, TrainReport,
};

/// Multiple of the uniform baseline `k/T` the trained map should reach.
pub const SELECTIVITY_FACTOR: f64 = 1.5;

#[derive(Parser, Debug)]
#[command(name = "nuta", version, about = "Non-uniform temporal aggregation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Finite-difference check of every differentiable op and the micro net.
    Gradcheck {
        /// Sampled coordinates per input tensor.
        #[arg(long, default_value_t = MIN_COORDS)]
        coords: usize,
    },
    /// Render the synthetic train/val splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (train.clips, val.clips).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Train a network and keep the best checkpoint.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-sample predictions as `index,label,prediction`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Analytic cost of a network config.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Second config; prints `compare / config`.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Per-layer records for every report, delimiter-separated.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print only the records, no table.
        #[arg(long)]
        machine: bool,
    },
    /// Export projection-map heatmaps for one clip.
    Viz(VizArgs),
    /// Property suite over the shipped configs.
    Invariants {
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct SeedArg {
    /// Overrides the seed in the config file.
    #[arg(long, env = "NUTA_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (metrics.csv, best.ckpt, summary.txt).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the classifier input of the network config.
    #[arg(long)]
    pub head: Option<HeadInput>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    /// Trained network. Without it `--config` builds an untrained one.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Clip source; without it a constant grey clip is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub clip: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

pub const TRAIN_SPLIT: &str = "train.clips";
pub const VAL_SPLIT: &str = "val.clips";

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one command; `Ok(false)` means it ran but a check failed.
pub fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Gradcheck { coords } => cmd_gradcheck(coords),
        Command::GenData { config, out, seed } => cmd_gen_data(&config, &out, seed.seed),
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            checkpoint,
            data,
            predictions,
            batch,
        } => cmd_eval(&checkpoint, &data, predictions.as_deref(), batch),
        Command::Flops {
            config,
            compare,
            csv,
            machine,
        } => cmd_flops(&config, compare.as_deref(), csv.as_deref(), machine),
        Command::Viz(args) => cmd_viz(&args),
        Command::Invariants { configs } => cmd_invariants(&configs),
    }
}

fn cmd_gradcheck(coords: usize) -> Result<bool> {
    let reports = gradcheck::run_suite(coords)?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed();
    }
    println!("{}", if ok { "all checks passed" } else { "gradient check FAILED" });
    Ok(ok)
}

/// Writes both splits into `out`.
pub fn gen_data(cfg: &DataConfig, out: &Path) -> Result<(Dataset, Dataset)> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (tr, va) = generate_dataset(cfg)?;
    tr.save(out.join(TRAIN_SPLIT))?;
    va.save(out.join(VAL_SPLIT))?;
    Ok((tr, va))
}

fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<bool> {
    let mut cfg = DataConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (tr, va) = gen_data(&cfg, out)?;
    println!(
        "wrote {} train and {} val clips ({} classes, {} of {} frames informative, seed {}) to {}",
        tr.len(),
        va.len(),
        cfg.classes,
        cfg.informative,
        cfg.frames,
        cfg.seed,
        out.display()
    );
    Ok(true)
}

/// Outcome of [`train_run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: TrainReport,
    pub eval: Evaluation,
    /// `k / T` of the validation split.
    pub uniform_mass: f64,
}

impl RunSummary {
    /// Whether the best model's map beats the uniform baseline by
    /// [`SELECTIVITY_FACTOR`]. `None` when no map indexes input frames.
    pub fn selective(&self) -> Option<bool> {
        self.eval
            .attention_mass
            .map(|m| m >= SELECTIVITY_FACTOR * self.uniform_mass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "best_epoch {}", self.report.best_epoch);
        let _ = writeln!(s, "val_accuracy {}", self.eval.accuracy);
        let per_class: Vec<String> = self.eval.per_class.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(s, "per_class {}", per_class.join(" "));
        match self.eval.attention_mass {
            Some(m) => {
                let _ = writeln!(s, "val_attention_mass {m}");
                let _ = writeln!(s, "uniform_mass {}", self.uniform_mass);
                let need = SELECTIVITY_FACTOR * self.uniform_mass;
                if m >= need {
                    let _ = writeln!(s, "selectivity ok ({m:.4} >= {need:.4})");
                } else {
                    let _ = writeln!(s, "selectivity FLAG: mass {m:.4} below {need:.4}");
                }
            }
            None => {
                let _ = writeln!(s, "val_attention_mass none");
            }
        }
        s
    }
}

/// Builds the network from `net_cfg` seeded by the training seed, trains it,
/// and evaluates the best checkpoint on the validation split.
pub fn train_run(
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    outputs: &TrainOutputs,
) -> Result<RunSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut net = TwoBranchNet::<f32>::init(net_cfg, &mut rng)?;
    let report = train(&mut net, train_cfg, train_data, val_data, outputs)?;
    let mut best = report.best.build::<f32>()?;
    let eval = evaluate(&mut best, val_data, 64)?;
    let meta = val_data.meta;
    Ok(RunSummary {
        report,
        eval,
        uniform_mass: meta.informative as f64 / meta.frames as f64,
    })
}

fn cmd_train(args: &TrainArgs) -> Result<bool> {
    let mut net_cfg = NetworkConfig::load(&args.net)?;
    if let Some(h) = args.head {
        net_cfg.head = h;
    }
    let mut train_cfg = TrainConfig::load(&args.train)?;
    if let Some(s) = args.seed.seed {
        train_cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
        train_cfg.lr_drop_epochs.retain(|&d| d < e);
    }
    train_cfg.validate()?;
    let tr = Dataset::load(args.data.join(TRAIN_SPLIT))?;
    let va = Dataset::load(args.data.join(VAL_SPLIT))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let outputs = TrainOutputs {
        metrics: Some(args.out.join("metrics.csv")),
        checkpoint: Some(args.out.join("best.ckpt")),
        progress: !args.quiet,
    };
    let summary = train_run(&net_cfg, &train_cfg, &tr, &va, &outputs)?;
    let text = summary.to_text();
    let path = args.out.join("summary.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    if summary.selective() == Some(false) {
        eprintln!("warning: attention mass below {SELECTIVITY_FACTOR} x uniform baseline");
    }
    Ok(true)
}

fn cmd_eval(checkpoint: &Path, data: &Path, predictions: Option<&Path>, batch: usize) -> Result<bool> {
    let mut net = Checkpoint::load(checkpoint)?.build::<f32>()?;
    let split = Dataset::load(data)?;
    let ev = evaluate(&mut net, &split, batch)?;
    println!("samples {}", split.len());
    println!("accuracy {}", ev.accuracy);
    for (c, a) in ev.per_class.iter().enumerate() {
        println!("class {c} {a:.4}");
    }
    if let Some(m) = ev.attention_mass {
        println!("attention_mass {m}");
    }
    if let Some(path) = predictions {
        let mut s = String::from("index,label,prediction\n");
        for (i, (l, p)) in ev.labels.iter().zip(&ev.predictions).enumerate() {
            let _ = writeln!(s, "{i},{l},{p}");
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))?;
    }
    Ok(true)
}

fn cmd_flops(config: &Path, compare: Option<&Path>, csv: Option<&Path>, machine: bool) -> Result<bool> {
    let mut reports: Vec<CostReport> = vec![config_cost(&NetworkConfig::load(config)?)?];
    if let Some(other) = compare {
        reports.push(config_cost(&NetworkConfig::load(other)?)?);
    }
    let records = cost_records(&reports);
    if machine {
        print!("{records}");
    } else {
        for r in &reports {
            println!("{r}\n");
        }
        if let [base, other] = &reports[..] {
            println!(
                "ratio {} / {} = {:.4} (same under MAC and 2xMAC)",
                other.config,
                base.config,
                other.ratio_to(base)
            );
        }
    }
    if let Some(path) = csv {
        std::fs::write(path, &records).map_err(|e| Error::io(path, e))?;
    }
    Ok(true)
}

/// Per-layer records of several reports, prefixed by the config name.
pub fn cost_records(reports: &[CostReport]) -> String {
    let mut s = String::from("config,");
    for (i, r) in reports.iter().enumerate() {
        for (j, line) in r.to_csv().lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    s += line;
                    s.push('\n');
                }
            } else {
                let _ = writeln!(s, "{},{line}", r.config);
            }
        }
    }
    s
}

fn cmd_viz(args: &VizArgs) -> Result<bool> {
    let mut net = match (&args.checkpoint, &args.config) {
        (Some(ckpt), _) => Checkpoint::load(ckpt)?.build::<f32>()?,
        (None, Some(cfg)) => {
            let cfg = NetworkConfig::load(cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed.seed.unwrap_or(0));
            TwoBranchNet::init(&cfg, &mut rng)?
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    let cfg = net.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (clip, informative) = match &args.data {
        Some(path) => {
            let split = Dataset::load(path)?;
            if args.clip >= split.len() {
                return Err(Error::InvalidArgument {
                    op: "viz",
                    msg: format!("clip {} outside split of {}", args.clip, split.len()),
                });
            }
            let (x, _, frames) = split.batch::<f32, _>(&[args.clip], Augment::default(), &mut rng)?;
            (x, Some(frames))
        }
        None => (
            Tensor::full([1, cfg.input_channels, cfg.frames, cfg.height, cfg.width], 0.5)?,
            None,
        ),
    };
    let out = no_grad(|| net.forward(&clip, Mode::Eval, &mut rng))?;
    for (m, &stage) in out.maps.iter().zip(&cfg.nuta_stages) {
        let files = export_heatmap(m, 0, args.clip, &args.out, &format!("stage{stage}"))?;
        println!("stage {stage}: {} heads, {} files in {}", m.heads(), files.len(), args.out.display());
        if let Some(frames) = &informative {
            if m.source_steps() == cfg.frames {
                println!("stage {stage}: attention_mass {}", attention_mass(m, frames)?);
            }
        }
    }
    Ok(true)
}

fn cmd_invariants(configs: &Path) -> Result<bool> {
    let checks = invariants::run_suite(configs)?;
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}
