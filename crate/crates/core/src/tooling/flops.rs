//! Analytic cost model.
//!
//! Walks the resolved plan of a configuration and lists every layer the
//! forward pass executes as a multiply-accumulate kernel, in execution order:
//! convolutions (`Cout * Cin/groups * kT*kH*kW * output elements`), the
//! attention matmuls, softmax (one MAC per output element) and the classifier.
//! Normalisation, pooling, activations and elementwise adds are free.
//! Costs are per clip (batch 1).

use std::fmt;

use crate::error::{Error, Result};
use crate::net::{BlockKind, FusionKind, HeadInput, NetworkConfig, StagePlan};

/// Which part of the network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Uniform,
    Nuta,
    Head,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Branch::Uniform => "uniform",
            Branch::Nuta => "nuta",
            Branch::Head => "head",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub branch: Branch,
    /// Output shape without the batch axis.
    pub output: Vec<usize>,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub config: String,
    /// `[T, H, W]` of the input clip.
    pub input: [usize; 3],
    pub layers: Vec<LayerCost>,
}

/// FLOP conventions: one per MAC, or two (multiply and add counted apart).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    Macs,
    TwoFlopsPerMac,
}

impl Convention {
    pub const ALL: [Convention; 2] = [Convention::Macs, Convention::TwoFlopsPerMac];

    pub fn factor(self) -> u64 {
        match self {
            Convention::Macs => 1,
            Convention::TwoFlopsPerMac => 2,
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Convention::Macs => "MAC",
            Convention::TwoFlopsPerMac => "2xMAC",
        })
    }
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn branch_macs(&self, branch: Branch) -> u64 {
        self.layers.iter().filter(|l| l.branch == branch).map(|l| l.macs).sum()
    }

    pub fn total(&self, convention: Convention) -> u64 {
        self.total_macs() * convention.factor()
    }

    pub fn giga(&self, convention: Convention) -> f64 {
        self.total(convention) as f64 / 1e9
    }

    /// `self / base` total cost (the same under either convention).
    pub fn ratio_to(&self, base: &CostReport) -> f64 {
        self.total_macs() as f64 / base.total_macs() as f64
    }

    /// Delimiter-separated per-layer records with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,branch,output,macs,flops_2x\n");
        for l in &self.layers {
            let shape: Vec<String> = l.output.iter().map(|d| d.to_string()).collect();
            s += &format!("{},{},{},{},{}\n", l.name, l.branch, shape.join("x"), l.macs, 2 * l.macs);
        }
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} @ {}x{}x{}", self.config, self.input[0], self.input[1], self.input[2])?;
        writeln!(f, "{:<34} {:<8} {:>20} {:>16}", "layer", "branch", "output", "MACs")?;
        for l in &self.layers {
            let shape: Vec<String> = l.output.iter().map(|d| d.to_string()).collect();
            writeln!(f, "{:<34} {:<8} {:>20} {:>16}", l.name, l.branch, shape.join("x"), l.macs)?;
        }
        for b in [Branch::Uniform, Branch::Nuta, Branch::Head] {
            writeln!(f, "{:<34} {:>10.3} GMAC", format!("total {b}"), self.branch_macs(b) as f64 / 1e9)?;
        }
        write!(
            f,
            "{:<34} {:>10.3} GMAC  {:>10.3} GFLOP (2xMAC)",
            "total",
            self.giga(Convention::Macs),
            self.giga(Convention::TwoFlopsPerMac)
        )
    }
}

struct Walker {
    layers: Vec<LayerCost>,
}

impl Walker {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, branch: Branch, cin: usize, cout: usize, groups: usize, k: [usize; 3], out: [usize; 3]) {
        let elems = (out[0] * out[1] * out[2]) as u64;
        let macs = cout as u64 * (cin / groups) as u64 * (k[0] * k[1] * k[2]) as u64 * elems;
        self.layers.push(LayerCost {
            name,
            branch,
            output: vec![cout, out[0], out[1], out[2]],
            macs,
        });
    }

    /// Batched `[b, m, k] x [b, k, n]`.
    fn matmul(&mut self, name: String, branch: Branch, b: usize, m: usize, k: usize, n: usize) {
        self.layers.push(LayerCost {
            name,
            branch,
            output: vec![b, m, n],
            macs: (b * m * k * n) as u64,
        });
    }

    fn softmax(&mut self, name: String, branch: Branch, shape: Vec<usize>) {
        let macs = shape.iter().product::<usize>() as u64;
        self.layers.push(LayerCost {
            name,
            branch,
            output: shape,
            macs,
        });
    }

    fn residual_stage(&mut self, cfg: &NetworkConfig, sp: &StagePlan) {
        let mut ext = sp.input;
        for (b, &kt) in sp.block_kernels.iter().enumerate() {
            let (cin, s, ts) = if b == 0 {
                (sp.in_channels, sp.spatial_stride, sp.temporal_stride)
            } else {
                (sp.out_channels, 1, 1)
            };
            let prefix = format!("stage{}.block{b}", sp.number);
            let t_out = [ext[0] / ts, ext[1], ext[2]];
            let out = [t_out[0], ext[1] / s, ext[2] / s];
            let (inner, cout) = (sp.inner_channels, sp.out_channels);
            match cfg.block {
                BlockKind::Basic => {
                    self.conv(format!("{prefix}.layer0"), Branch::Uniform, cin, cout, 1, [kt, 1, 1], t_out);
                    self.conv(format!("{prefix}.layer1"), Branch::Uniform, cout, cout, 1, [1, 3, 3], out);
                }
                BlockKind::Bottleneck => {
                    self.conv(format!("{prefix}.layer0"), Branch::Uniform, cin, inner, 1, [kt, 1, 1], t_out);
                    self.conv(format!("{prefix}.layer1"), Branch::Uniform, inner, inner, 1, [1, 3, 3], out);
                    self.conv(format!("{prefix}.layer2"), Branch::Uniform, inner, cout, 1, [1, 1, 1], out);
                }
            }
            if cin != cout || s != 1 || ts != 1 {
                self.conv(format!("{prefix}.shortcut"), Branch::Uniform, cin, cout, 1, [1, 1, 1], out);
            }
            ext = out;
        }
    }

    fn nuta_stage(&mut self, cfg: &NetworkConfig, sp: &StagePlan) {
        let np = sp.nuta.as_ref().expect("aggregation stage");
        let p = format!("nuta{}", sp.number);
        let c = sp.out_channels;
        let [t, h, w] = sp.output;
        let ext = sp.output;
        let half = [t / 2, h, w];
        let n = Branch::Nuta;
        let d = (c / np.heads) * h * w;
        match cfg.fusion {
            FusionKind::Concat => self.conv(format!("{p}.fusion.conv"), n, np.prev_channels + c, c, 1, [1, 1, 1], ext),
            FusionKind::Sum => self.conv(format!("{p}.fusion.conv"), n, np.prev_channels, c, 1, [1, 1, 1], ext),
            FusionKind::NonLocal => {
                self.conv(format!("{p}.fusion.query"), n, np.prev_channels, c, 1, [1, 1, 1], ext);
                self.conv(format!("{p}.fusion.key"), n, c, c, 1, [1, 1, 1], ext);
                self.conv(format!("{p}.fusion.value"), n, c, c, 1, [1, 1, 1], ext);
                self.matmul(format!("{p}.fusion.scores"), n, np.heads, t, d, t);
                self.softmax(format!("{p}.fusion.softmax"), n, vec![np.heads, t, t]);
                self.matmul(format!("{p}.fusion.attend"), n, np.heads, t, t, d);
                self.conv(format!("{p}.fusion.out"), n, c, c, 1, [1, 1, 1], ext);
            }
        }
        let g = np.groups;
        self.conv(format!("{p}.phi"), n, c, c, g, [3, 1, 1], half);
        self.conv(format!("{p}.theta"), n, c, c, g, [3, 1, 1], ext);
        self.matmul(format!("{p}.map_logits"), n, np.heads, t / 2, d, t);
        self.softmax(format!("{p}.map_softmax"), n, vec![np.heads, t / 2, t]);
        self.conv(format!("{p}.delta"), n, c, c, g, [3, 1, 1], ext);
        self.matmul(format!("{p}.aggregate"), n, np.heads, t / 2, t, d);
        self.conv(format!("{p}.compress"), n, c, np.out_channels, 1, [1, 1, 1], half);
        self.conv(format!("{p}.zeta"), n, c, c, g, [3, 1, 1], ext);
        self.matmul(format!("{p}.sync_aggregate"), n, np.heads, t / 2, t, d);
        self.conv(format!("{p}.sync"), n, c, c, 1, [1, 1, 1], half);
    }
}

/// Cost of one clip of extent `[T, H, W]` through `cfg`. Only the shape walk
/// runs; no tensors are allocated.
pub fn count_flops(cfg: &NetworkConfig, input: [usize; 3]) -> Result<CostReport> {
    let mut cfg = cfg.clone();
    [cfg.frames, cfg.height, cfg.width] = input;
    let plan = cfg.plan()?;
    let mut w = Walker { layers: Vec::new() };
    let stem_out = [
        input[0] / cfg.stem_stride[0],
        input[1] / cfg.stem_stride[1],
        input[2] / cfg.stem_stride[2],
    ];
    w.conv(
        "stem.conv".into(),
        Branch::Uniform,
        cfg.input_channels,
        cfg.stem_channels,
        1,
        cfg.stem_kernel,
        stem_out,
    );
    for sp in &plan.stages {
        w.residual_stage(&cfg, sp);
        if sp.nuta.is_some() {
            w.nuta_stage(&cfg, sp);
        }
    }
    let features = match cfg.head {
        HeadInput::Both => plan.head_features,
        HeadInput::Uniform => plan.uniform_features,
    };
    w.matmul("head".into(), Branch::Head, 1, 1, features, cfg.num_classes);
    if w.layers.iter().any(|l| l.macs == 0) {
        return Err(Error::Config(format!("{}: a layer has an empty output", cfg.name)));
    }
    Ok(CostReport {
        config: cfg.name.clone(),
        input,
        layers: w.layers,
    })
}

/// [`count_flops`] at the configuration's own input extent.
pub fn config_cost(cfg: &NetworkConfig) -> Result<CostReport> {
    count_flops(cfg, [cfg.frames, cfg.height, cfg.width])
}
