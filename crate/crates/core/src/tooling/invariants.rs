//! Property suite behind the `invariants` subcommand.
//!
//! Every check is deterministic (fixed seeds) and reports a one-line summary.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::flops::{config_cost, Convention};
use super::heatmap::{head_grids, HeadGrid};
use crate::error::{Error, Result};
use crate::net::{FusionKind, HeadInput, NetworkConfig, TwoBranchNet};
use crate::nn::Mode;
use crate::temporal::{projection_map, NutaParams, ProjectionMap};
use crate::tensor::macs::count_macs;
use crate::tensor::{no_grad, Tensor};
use crate::train::{attention_mass, DataConfig, TrainConfig};

pub const ROW_TOLERANCE: f64 = 1e-6;
pub const MAP_TRIALS: usize = 1000;

/// Largest clip (`T * H * W`) the suite will actually run through a network.
const EXECUTABLE_VOLUME: usize = 8 * 32 * 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<28} {}", self.name, self.detail)
    }
}

fn random_tensor(dims: [usize; 5], rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let n = dims.iter().product();
    Tensor::new((0..n).map(|_| rng.sample(StandardNormal)).collect(), dims)
}

/// Worst row error and whether every entry lies in `[0, 1]`.
fn map_bounds(m: &ProjectionMap<f64>) -> (f64, bool) {
    let in_range = m.tensor().data().iter().all(|v| (0.0..=1.0).contains(v));
    (m.max_row_error().unwrap_or(0.0), in_range)
}

/// Random module and feature for one map trial.
fn map_trial(t: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, NutaParams<f64>)> {
    let channels = heads * rng.gen_range(1..=3) * 2;
    let groups = [1, 2][rng.gen_range(0..2)];
    let hw = rng.gen_range(1..=3);
    let batch = rng.gen_range(1..=2);
    let mut p = NutaParams::init(channels, channels, heads, groups, rng)?;
    if rng.gen_bool(0.5) {
        p = p.with_scaled_logits();
    }
    // Spread the logits so some rows are close to one-hot.
    let scale: f64 = [0.1, 1.0, 10.0][rng.gen_range(0..3)];
    let f = random_tensor([batch, channels, t, hw, hw], rng)?.scale(scale)?;
    Ok((f, p))
}

/// Row sums and entry range of `trials` random maps with `T` in {4, 6, 8} and
/// heads in {1, 2, 4}.
pub fn map_normalization(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut bad_range) = (0.0f64, 0usize);
    for i in 0..trials {
        let t = [4, 6, 8][i % 3];
        let heads = [1, 2, 4][(i / 3) % 3];
        let (f, p) = map_trial(t, heads, &mut rng)?;
        let m = no_grad(|| projection_map(&f, &p))?;
        let (err, in_range) = map_bounds(&m);
        worst = worst.max(err);
        bad_range += usize::from(!in_range);
    }
    Ok(Check::new(
        "map_rows_stochastic",
        worst <= ROW_TOLERANCE && bad_range == 0,
        format!("{trials} maps, worst |row sum - 1| = {worst:.2e}, entries outside [0,1]: {bad_range}"),
    ))
}

/// A temporally constant feature gives `1/T` everywhere.
pub fn map_constant_input(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..trials {
        let t = [4, 6, 8][i % 3];
        let heads = [1, 2, 4][(i / 3) % 3];
        let (f, p) = map_trial(t, heads, &mut rng)?;
        // Repeat frame 0 along time.
        let d = f.dims().to_vec();
        let (plane, frames) = (d[3] * d[4], d[2]);
        let mut data = f.to_vec();
        for chunk in data.chunks_mut(plane * frames) {
            let first = chunk[..plane].to_vec();
            for s in 1..frames {
                chunk[s * plane..(s + 1) * plane].copy_from_slice(&first);
            }
        }
        let f = Tensor::new(data, d)?;
        let m = no_grad(|| projection_map(&f, &p))?;
        let target = 1.0 / t as f64;
        worst = m.tensor().data().iter().map(|v| (v - target).abs()).fold(worst, f64::max);
    }
    Ok(Check::new(
        "map_constant_uniform",
        worst <= ROW_TOLERANCE,
        format!("{trials} constant clips, worst |m - 1/T| = {worst:.2e}"),
    ))
}

/// Temporal extent before the first aggregation stage, the per-stage
/// extents, and the final extent, all from the resolved plan.
fn plan_contracts(cfg: &NetworkConfig) -> Result<Vec<String>> {
    let plan = cfg.plan()?;
    let mut problems = Vec::new();
    let mut entry = None;
    let mut k = 0;
    for (i, sp) in plan.stages.iter().enumerate() {
        let Some(_) = &sp.nuta else { continue };
        k += 1;
        entry.get_or_insert(sp.output[0]);
        let t = sp.output[0];
        if sp.exit()[0] * 2 != t {
            problems.push(format!("stage {} does not halve T={t}", sp.number));
        }
        // The next aggregation stage sees this stage's aggregated feature.
        if let Some(next) = plan.stages[i + 1..].iter().find_map(|s| s.nuta.as_ref()) {
            let next_t = plan.stages[i + 1..].iter().find(|s| s.nuta.is_some()).map(|s| s.output[0]);
            if next.prev_extent[0] != t / 2 || next_t != Some(t / 2) {
                problems.push(format!("stage {}: branches disagree on T after sync", sp.number));
            }
        }
    }
    let last = plan.stages.last().map(|s| s.exit()[0]).unwrap_or(cfg.frames);
    if let Some(t0) = entry {
        if last != t0 >> k {
            problems.push(format!("final T {last} != {t0}/2^{k}"));
        }
    }
    Ok(problems)
}

/// Runs one zero clip through the network and compares the recorded
/// extents with the plan.
fn traced_contracts(cfg: &NetworkConfig) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = TwoBranchNet::<f32>::init(cfg, &mut rng)?;
    let clip = Tensor::zeros([1, cfg.input_channels, cfg.frames, cfg.height, cfg.width])?;
    let out = no_grad(|| net.forward(&clip, Mode::Eval, &mut rng))?;
    let mut problems = Vec::new();
    let k = cfg.nuta_stages.len();
    for (tr, sp) in out.trace.iter().zip(&net.plan().stages) {
        if tr.residual[1..] != sp.output[..] || tr.uniform[1] != sp.exit()[0] {
            problems.push(format!("stage {}: traced extents differ from plan", tr.stage));
        }
        if let Some(n) = tr.nuta {
            if n[1] * 2 != tr.residual[1] || n[1] != tr.uniform[1] {
                problems.push(format!("stage {}: T {} -> nuta {} uniform {}", tr.stage, tr.residual[1], n[1], tr.uniform[1]));
            }
        }
    }
    let strided = cfg.stem_stride[0] != 1 || net.plan().stages.iter().any(|s| s.temporal_stride != 1);
    let last = out.trace.last().map(|t| t.uniform[1]).unwrap_or(cfg.frames);
    if !strided && last != cfg.frames >> k {
        problems.push(format!("final T {last} != {}/2^{k}", cfg.frames));
    }
    Ok(problems)
}

/// Shape contracts over every network config: plan walk for all, a traced
/// forward pass for those small enough to run.
pub fn shape_contracts(configs: &[NetworkConfig]) -> Result<Check> {
    let mut problems = Vec::new();
    let mut traced = 0;
    for cfg in configs {
        for p in plan_contracts(cfg)? {
            problems.push(format!("{}: {p}", cfg.name));
        }
        if cfg.frames * cfg.height * cfg.width <= EXECUTABLE_VOLUME {
            traced += 1;
            for p in traced_contracts(cfg)? {
                problems.push(format!("{}: {p}", cfg.name));
            }
        }
    }
    let detail = if problems.is_empty() {
        format!("{} configs ({traced} traced)", configs.len())
    } else {
        problems.join("; ")
    };
    Ok(Check::new("shape_contracts", problems.is_empty(), detail))
}

/// Cost model against the MAC counter inside the real kernels, for every
/// executable config under each fusion kind and head input.
pub fn flops_match_execution(configs: &[NetworkConfig]) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    let mut problems = Vec::new();
    for base in configs.iter().filter(|c| c.frames * c.height * c.width <= EXECUTABLE_VOLUME) {
        for fusion in [FusionKind::Concat, FusionKind::Sum, FusionKind::NonLocal] {
            for head in [HeadInput::Both, HeadInput::Uniform] {
                let mut cfg = base.clone();
                cfg.fusion = fusion;
                cfg.head = head;
                let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng)?;
                let clip = Tensor::zeros([1, cfg.input_channels, cfg.frames, cfg.height, cfg.width])?;
                let (out, counted) = count_macs(|| no_grad(|| net.forward(&clip, Mode::Eval, &mut rng)));
                out?;
                let model = config_cost(&cfg)?.total_macs();
                cases += 1;
                if counted != model {
                    problems.push(format!("{} {fusion} {head}: executed {counted} model {model}", cfg.name));
                }
            }
        }
    }
    let detail = if problems.is_empty() {
        format!("{cases} executions, exact")
    } else {
        problems.join("; ")
    };
    Ok(Check::new("flops_match_execution", problems.is_empty() && cases > 0, detail))
}

/// Per-layer entries sum to the total, and ratios do not depend on the
/// convention.
pub fn cost_report_consistency(configs: &[NetworkConfig]) -> Result<Check> {
    let reports = configs.iter().map(config_cost).collect::<Result<Vec<_>>>()?;
    let mut ok = true;
    for r in &reports {
        let layer_sum: u64 = r.layers.iter().map(|l| l.macs).sum();
        ok &= layer_sum == r.total_macs();
        ok &= r.total(Convention::TwoFlopsPerMac) == 2 * r.total(Convention::Macs);
    }
    for a in &reports {
        for b in &reports {
            let by = |c: Convention| a.total(c) as f64 / b.total(c) as f64;
            ok &= by(Convention::Macs) == by(Convention::TwoFlopsPerMac);
        }
    }
    Ok(Check::new(
        "cost_report_consistency",
        ok,
        format!("{} reports, {} ratios", reports.len(), reports.len() * reports.len()),
    ))
}

/// Text grids of random maps parse back to identical values; images are
/// monotone in value.
pub fn heatmap_round_trip(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for i in 0..trials {
        let (f, p) = map_trial([4, 6, 8][i % 3], [1, 2, 4][i % 3], &mut rng)?;
        let m = no_grad(|| projection_map(&f, &p))?;
        for grid in head_grids(&m, 0, i)? {
            let back = HeadGrid::from_text(&grid.to_text()).map_err(|e| Error::invalid("heatmap", e))?;
            let mut pairs: Vec<(f64, u8)> = grid.values.iter().map(|&v| (v, grid.level(v))).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let monotone = pairs.windows(2).all(|w| w[0].1 <= w[1].1);
            if back.values.iter().zip(&grid.values).any(|(a, b)| a.to_bits() != b.to_bits()) || !monotone {
                failures += 1;
            }
        }
    }
    Ok(Check::new(
        "heatmap_round_trip",
        failures == 0,
        format!("{trials} maps, {failures} grids failed"),
    ))
}

/// Uniform maps place exactly `k/T` on any set of `k` frames.
pub fn uniform_attention_mass(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 2..=16 {
        for k in 1..t {
            let heads = rng.gen_range(1..=4);
            let m = ProjectionMap::from_tensor(Tensor::full([2, heads, (t / 2).max(1), t], 1.0 / t as f64)?, 1e-12)?;
            let frames: Vec<Vec<usize>> = (0..2).map(|_| sample(&mut rng, t, k).into_vec()).collect();
            let mass = attention_mass(&m, &frames)?;
            worst = worst.max((mass - k as f64 / t as f64).abs());
        }
    }
    Ok(Check::new(
        "uniform_attention_mass",
        worst < 1e-12,
        format!("T in 2..=16, all k, worst |mass - k/T| = {worst:.1e}"),
    ))
}

/// Parses every `*.cfg` in `dir`. Each must be exactly one of a network,
/// data or training config; the network configs are returned sorted by name.
pub fn load_network_configs(dir: impl AsRef<Path>) -> Result<Vec<NetworkConfig>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cfg"))
        .collect();
    paths.sort();
    let mut configs = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        match NetworkConfig::from_toml(&text) {
            Ok(cfg) => configs.push(cfg),
            Err(net_err) => {
                if DataConfig::from_toml(&text).is_err() && TrainConfig::from_toml(&text).is_err() {
                    return Err(Error::Format {
                        path,
                        msg: net_err.to_string(),
                    });
                }
            }
        }
    }
    configs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(configs)
}

/// The whole suite over the configs shipped in `config_dir`.
pub fn run_suite(config_dir: impl AsRef<Path>) -> Result<Vec<Check>> {
    let configs = load_network_configs(config_dir)?;
    Ok(vec![
        map_normalization(MAP_TRIALS, 11)?,
        map_constant_input(MAP_TRIALS, 12)?,
        shape_contracts(&configs)?,
        flops_match_execution(&configs)?,
        cost_report_consistency(&configs)?,
        heatmap_round_trip(100, 13)?,
        uniform_attention_mass(14)?,
    ])
}
