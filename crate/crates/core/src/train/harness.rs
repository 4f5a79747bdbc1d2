use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::data::{Augment, Dataset};
use super::optim::{Sgd, TrainConfig};
use crate::error::{Error, Result};
use crate::net::TwoBranchNet;
use crate::nn::{cross_entropy, Mode};
use crate::temporal::ProjectionMap;
use crate::tensor::{no_grad, Scalar, Tensor};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_accuracy,val_accuracy,val_attention_mass";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_attention_mass: Option<f64>,
}

impl EpochRecord {
    pub fn to_csv(&self) -> String {
        let mass = self.val_attention_mass.map_or(String::new(), |m| m.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_accuracy, self.val_accuracy, mass
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(EpochRecord {
            epoch: f[0].parse().ok()?,
            lr: f[1].parse().ok()?,
            train_loss: f[2].parse().ok()?,
            train_accuracy: f[3].parse().ok()?,
            val_accuracy: f[4].parse().ok()?,
            val_attention_mass: if f[5].is_empty() { None } else { Some(f[5].parse().ok()?) },
        })
    }
}

/// Reads a metrics log written by [`train`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "missing metrics header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            EpochRecord::from_csv(l).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("malformed record on line {}", i + 2),
            })
        })
        .collect()
}

/// Where training writes its artefacts. Missing paths are skipped.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch progress lines on standard error.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Parameters at the best validation accuracy.
    pub best: Checkpoint,
}

/// Top-1 accuracy summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// Mean informative-frame mass of the first aggregation stage's map, when
    /// that map indexes input frames directly.
    pub attention_mass: Option<f64>,
}

impl Evaluation {
    /// Recomputes accuracy from the stored predictions.
    pub fn recount(&self) -> f64 {
        let hits = self.predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        hits as f64 / self.labels.len() as f64
    }
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per sample, the mean over heads and output steps of the map mass placed
/// on that sample's informative source frames.
pub fn attention_mass_per_sample<T: Scalar>(m: &ProjectionMap<T>, informative: &[Vec<usize>]) -> Result<Vec<f64>> {
    if informative.len() != m.batch() {
        return Err(Error::invalid(
            "attention_mass",
            format!("{} frame sets for a batch of {}", informative.len(), m.batch()),
        ));
    }
    let src = m.source_steps();
    let rows = (m.heads() * m.out_steps()) as f64;
    informative
        .iter()
        .enumerate()
        .map(|(n, frames)| {
            if let Some(&bad) = frames.iter().find(|&&f| f >= src) {
                return Err(Error::invalid("attention_mass", format!("frame {bad} outside [0, {src})")));
            }
            let mut total = 0.0;
            for h in 0..m.heads() {
                for i in 0..m.out_steps() {
                    let row = m.row(n, h, i);
                    total += frames.iter().map(|&f| row[f].as_f64()).sum::<f64>();
                }
            }
            Ok(total / rows)
        })
        .collect()
}

/// Mean over batch, heads and output steps of the mass on informative frames.
/// A uniform map gives `k / T`.
pub fn attention_mass<T: Scalar>(m: &ProjectionMap<T>, informative: &[Vec<usize>]) -> Result<f64> {
    let per = attention_mass_per_sample(m, informative)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Eval-mode accuracy over a split. Deterministic and order-independent.
pub fn evaluate<T: Scalar>(net: &mut TwoBranchNet<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let classes = net.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut predictions = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let mut masses = Vec::new();
    let mut mass_ok = true;
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y, frames) = data.batch::<T, _>(chunk, Augment::default(), &mut rng)?;
        let out = no_grad(|| net.forward(&x, Mode::Eval, &mut rng))?;
        predictions.extend(argmax_rows(&out.logits));
        labels.extend(y);
        match out.maps.first() {
            Some(m) if mass_ok && m.source_steps() == data.meta.frames => {
                masses.extend(attention_mass_per_sample(m, &frames)?);
            }
            _ => mass_ok = false,
        }
    }
    let mut per_class = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(&labels) {
        counts[l] += 1;
        if p == l {
            per_class[l] += 1.0;
        }
    }
    for (acc, &n) in per_class.iter_mut().zip(&counts) {
        if n > 0 {
            *acc /= n as f64;
        }
    }
    let hits = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        accuracy: hits as f64 / labels.len().max(1) as f64,
        per_class,
        predictions,
        labels,
        attention_mass: (mass_ok && !masses.is_empty()).then(|| masses.iter().sum::<f64>() / masses.len() as f64),
    })
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGrad { .. } | Error::InvalidArgument { op: "sgd", .. } => {
            Error::Diverged {
                epoch,
                step,
                source: Box::new(e),
            }
        }
        other => other,
    }
}

/// Runs the full schedule. The metrics log is rewritten from scratch and
/// appended to after every epoch; the checkpoint is replaced whenever the
/// validation accuracy strictly improves.
pub fn train<T: Scalar>(
    net: &mut TwoBranchNet<T>,
    cfg: &TrainConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::invalid("train", "empty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let augment = Augment {
        flip: cfg.flip,
        temporal_offset: cfg.temporal_offset,
    };
    let mut log = match &outputs.metrics {
        Some(path) => {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
            Some((f, path.clone()))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y, _) = train_data.batch::<T, _>(chunk, augment, &mut rng)?;
            let out = net.forward(&x, Mode::Train, &mut rng).map_err(|e| diverged(epoch, step, e))?;
            let loss = cross_entropy(&out.logits, &y).map_err(|e| diverged(epoch, step, e))?;
            loss.backward().map_err(|e| diverged(epoch, step, e))?;
            loss_sum += loss.item().as_f64() * chunk.len() as f64;
            hits += argmax_rows(&out.logits).iter().zip(&y).filter(|(p, l)| p == l).count();
            sgd.step(net.named_params_mut(), lr).map_err(|e| diverged(epoch, step, e))?;
            step += 1;
        }
        let eval = evaluate(net, val_data, cfg.batch_size.max(32))?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_data.len() as f64,
            train_accuracy: hits as f64 / train_data.len() as f64,
            val_accuracy: eval.accuracy,
            val_attention_mass: eval.attention_mass,
        };
        if let Some((f, path)) = &mut log {
            writeln!(f, "{}", record.to_csv()).map_err(|e| Error::io(&*path, e))?;
        }
        if outputs.progress {
            let mut line = String::new();
            let _ = write!(
                line,
                "epoch {epoch:>3}  lr {lr:<8}  loss {:.4}  train {:.3}  val {:.3}",
                record.train_loss, record.train_accuracy, record.val_accuracy
            );
            if let Some(m) = record.val_attention_mass {
                let _ = write!(line, "  mass {m:.3}");
            }
            let _ = write!(line, "  ({:.1}s)", started.elapsed().as_secs_f64());
            eprintln!("{line}");
        }
        if best.as_ref().map_or(true, |(_, acc, _)| record.val_accuracy > *acc) {
            let ckpt = Checkpoint::capture(net);
            if let Some(path) = &outputs.checkpoint {
                ckpt.save(path)?;
            }
            best = Some((epoch, record.val_accuracy, ckpt));
        }
        records.push(record);
    }
    let (best_epoch, best_val_accuracy, best) = best.expect("at least one epoch");
    Ok(TrainReport {
        records,
        best_epoch,
        best_val_accuracy,
        best,
    })
}
