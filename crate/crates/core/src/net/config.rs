use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the previous aggregated feature is merged into a uniform-branch stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Temporal cross-attention, query from the aggregated feature.
    #[serde(rename = "nonlocal")]
    NonLocal,
    Sum,
    #[default]
    Concat,
}

/// Which pooled features reach the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadInput {
    #[default]
    Both,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// `(kt,1,1)` then `(1,3,3)` convolution.
    #[default]
    Basic,
    /// `(kt,1,1)` reduce, `(1,3,3)`, `1x1x1` expand.
    Bottleneck,
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlocal" => Ok(FusionKind::NonLocal),
            "sum" => Ok(FusionKind::Sum),
            "concat" => Ok(FusionKind::Concat),
            _ => Err(Error::Config(format!("unknown fusion `{s}` (nonlocal, sum, concat)"))),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            FusionKind::NonLocal => "nonlocal",
            FusionKind::Sum => "sum",
            FusionKind::Concat => "concat",
        })
    }
}

impl FromStr for HeadInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(HeadInput::Both),
            "uniform" => Ok(HeadInput::Uniform),
            _ => Err(Error::Config(format!("unknown head input `{s}` (both, uniform)"))),
        }
    }
}

impl fmt::Display for HeadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            HeadInput::Both => "both",
            HeadInput::Uniform => "uniform",
        })
    }
}

/// Network description, loaded from flat key/value TOML.
///
/// Stage `i` of the `stage_*` lists is stage number `i + 2`; the stem is
/// stage 1. `nuta_stages` lists stage numbers and the `nuta_*` lists run
/// parallel to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub name: String,
    #[serde(default = "three")]
    pub input_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,

    pub stem_channels: usize,
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    /// 2x2 spatial average pool after the stem.
    #[serde(default)]
    pub stem_pool: bool,

    #[serde(default)]
    pub block: BlockKind,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub stage_spatial_strides: Vec<usize>,
    /// Temporal stride of each stage's first block; all ones for the
    /// non-strided uniform branch.
    #[serde(default)]
    pub stage_temporal_strides: Vec<usize>,
    /// Temporal extent of the first convolution in inflated blocks.
    #[serde(default)]
    pub stage_temporal_kernels: Vec<usize>,
    /// Inflate every k-th block of a stage, starting from the first; 0 never.
    #[serde(default)]
    pub stage_inflate_every: Vec<usize>,
    #[serde(default = "four")]
    pub bottleneck_ratio: usize,

    #[serde(default)]
    pub nuta_stages: Vec<usize>,
    #[serde(default)]
    pub nuta_heads: Vec<usize>,
    #[serde(default)]
    pub nuta_groups: Vec<usize>,
    /// Width after each module's compression; defaults to the stage width.
    #[serde(default)]
    pub nuta_channels: Vec<usize>,

    #[serde(default)]
    pub fusion: FusionKind,
    #[serde(default)]
    pub head: HeadInput,
    pub num_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn three() -> usize {
    3
}

fn four() -> usize {
    4
}

fn default_dropout() -> f64 {
    0.6
}

/// Resolved geometry of one residual stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    /// Stage number (2 for the first residual stage).
    pub number: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Bottleneck width (equals `out_channels` for basic blocks).
    pub inner_channels: usize,
    pub blocks: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    /// Temporal kernel of each block's first convolution.
    pub block_kernels: Vec<usize>,
    /// `[T, H, W]` entering the stage.
    pub input: [usize; 3],
    /// `[T, H, W]` leaving the residual blocks.
    pub output: [usize; 3],
    pub nuta: Option<NutaPlan>,
}

impl StagePlan {
    /// Extent handed to the next stage (after synchronisation, if any).
    pub fn exit(&self) -> [usize; 3] {
        match &self.nuta {
            Some(_) => [self.output[0] / 2, self.output[1], self.output[2]],
            None => self.output,
        }
    }
}

/// Resolved geometry of the aggregation module attached to a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NutaPlan {
    pub heads: usize,
    pub groups: usize,
    /// Width of the previous aggregated feature.
    pub prev_channels: usize,
    /// `[T, H, W]` of the previous aggregated feature.
    pub prev_extent: [usize; 3],
    /// Spatial average-pool factor applied to it before fusion.
    pub pool_factor: usize,
    /// Width after compression.
    pub out_channels: usize,
}

/// Resolved geometry of the whole network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkPlan {
    pub stem_output: [usize; 3],
    pub stages: Vec<StagePlan>,
    pub head_features: usize,
    pub uniform_features: usize,
    pub nuta_features: usize,
}

impl NetworkConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Index into the `nuta_*` lists for a stage number.
    pub fn nuta_slot(&self, stage: usize) -> Option<usize> {
        self.nuta_stages.iter().position(|&s| s == stage)
    }

    fn per_stage(&self, list: &[usize], default: usize) -> Vec<usize> {
        if list.is_empty() {
            vec![default; self.stages()]
        } else {
            list.to_vec()
        }
    }

    /// Walks the configuration and resolves every stage's geometry, reporting
    /// the first divisibility or consistency failure.
    pub fn plan(&self) -> Result<NetworkPlan> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        let s = self.stages();
        if s == 0 {
            return fail("no stages".into());
        }
        let t_strides = self.per_stage(&self.stage_temporal_strides, 1);
        let t_kernels = self.per_stage(&self.stage_temporal_kernels, 1);
        let inflate = self.per_stage(&self.stage_inflate_every, 0);
        for (name, len) in [
            ("stage_blocks", self.stage_blocks.len()),
            ("stage_spatial_strides", self.stage_spatial_strides.len()),
            ("stage_temporal_strides", t_strides.len()),
            ("stage_temporal_kernels", t_kernels.len()),
            ("stage_inflate_every", inflate.len()),
        ] {
            if len != s {
                return fail(format!("{name} has {len} entries for {s} stages"));
            }
        }
        let k = self.nuta_stages.len();
        for (name, len) in [("nuta_heads", self.nuta_heads.len()), ("nuta_groups", self.nuta_groups.len())] {
            if len != k {
                return fail(format!("{name} has {len} entries for {k} aggregation stages"));
            }
        }
        if !self.nuta_channels.is_empty() && self.nuta_channels.len() != k {
            return fail(format!("nuta_channels has {} entries for {k} aggregation stages", self.nuta_channels.len()));
        }
        if k > 0 {
            let last = s + 1;
            let first = self.nuta_stages[0];
            let contiguous = self.nuta_stages.iter().enumerate().all(|(i, &st)| st == first + i);
            if !contiguous || *self.nuta_stages.last().unwrap() != last || first < 3 {
                return fail(format!(
                    "nuta_stages {:?} must be a contiguous suffix of stages 3..={last}",
                    self.nuta_stages
                ));
            }
        }
        if self.frames % (1 << k) != 0 {
            return fail(format!("{} frames not divisible by 2^{k}", self.frames));
        }
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.bottleneck_ratio == 0 {
            return fail("bottleneck_ratio must be positive".into());
        }
        let positive = |v: &[usize]| v.iter().all(|&x| x > 0);
        if !positive(&[self.input_channels, self.frames, self.height, self.width, self.stem_channels])
            || !positive(&self.stem_stride)
            || !positive(&self.stem_kernel)
            || !positive(&self.stage_channels)
            || !positive(&self.stage_blocks)
            || !positive(&self.stage_spatial_strides)
            || !positive(&t_strides)
            || !positive(&t_kernels)
        {
            return fail("extents, widths, strides and block counts must be positive".into());
        }
        if self.stem_kernel.iter().chain(&t_kernels).any(|k| k % 2 == 0) {
            return fail("kernel extents must be odd".into());
        }

        let conv_out = |i: usize, k: usize, s: usize| (i + 2 * (k / 2)).checked_sub(k).map(|v| v / s + 1);
        let mut ext = [self.frames, self.height, self.width];
        for a in 0..3 {
            match conv_out(ext[a], self.stem_kernel[a], self.stem_stride[a]) {
                Some(v) if ext[a] % self.stem_stride[a] == 0 => ext[a] = v,
                _ => return fail(format!("stem stride {:?} does not divide input {ext:?}", self.stem_stride)),
            }
        }
        if self.stem_pool {
            if ext[1] % 2 != 0 || ext[2] % 2 != 0 {
                return fail(format!("stem pool needs even spatial extents, got {ext:?}"));
            }
            ext = [ext[0], ext[1] / 2, ext[2] / 2];
        }
        let stem_output = ext;

        let mut stages = Vec::with_capacity(s);
        let mut cin = self.stem_channels;
        let mut prev_nuta: Option<(usize, [usize; 3])> = None;
        for i in 0..s {
            let number = i + 2;
            let (ss, ts) = (self.stage_spatial_strides[i], t_strides[i]);
            if ext[1] % ss != 0 || ext[2] % ss != 0 || ext[0] % ts != 0 {
                return fail(format!("stage {number}: strides ({ts}, {ss}) do not divide {ext:?}"));
            }
            let input = ext;
            let output = [ext[0] / ts, ext[1] / ss, ext[2] / ss];
            let cout = self.stage_channels[i];
            let inner = match self.block {
                BlockKind::Basic => cout,
                BlockKind::Bottleneck => {
                    if cout % self.bottleneck_ratio != 0 {
                        return fail(format!("stage {number}: width {cout} not divisible by bottleneck ratio"));
                    }
                    cout / self.bottleneck_ratio
                }
            };
            let block_kernels = (0..self.stage_blocks[i])
                .map(|b| if inflate[i] > 0 && b % inflate[i] == 0 { t_kernels[i] } else { 1 })
                .collect();

            let nuta = match self.nuta_slot(number) {
                None => None,
                Some(slot) => {
                    let (heads, groups) = (self.nuta_heads[slot], self.nuta_groups[slot]);
                    if heads == 0 || cout % heads != 0 {
                        return fail(format!("stage {number}: {heads} heads do not divide width {cout}"));
                    }
                    if groups == 0 || cout % groups != 0 {
                        return fail(format!("stage {number}: {groups} groups do not divide width {cout}"));
                    }
                    if output[0] % 2 != 0 {
                        return fail(format!("stage {number}: temporal extent {} is odd", output[0]));
                    }
                    let (prev_channels, prev_extent) = match prev_nuta {
                        Some(p) => p,
                        None => {
                            if input[1] % 2 != 0 || input[2] % 2 != 0 {
                                return fail(format!("stage {number}: cannot halve {input:?} to seed the aggregated branch"));
                            }
                            (cin, [input[0], input[1] / 2, input[2] / 2])
                        }
                    };
                    if prev_extent[0] != output[0] {
                        return fail(format!(
                            "stage {number}: aggregated branch has {} steps, uniform branch {}",
                            prev_extent[0], output[0]
                        ));
                    }
                    let pool_factor = prev_extent[1] / output[1];
                    if pool_factor == 0
                        || prev_extent[1] != output[1] * pool_factor
                        || prev_extent[2] != output[2] * pool_factor
                    {
                        return fail(format!(
                            "stage {number}: aggregated extent {prev_extent:?} does not pool onto {output:?}"
                        ));
                    }
                    let out_channels = self.nuta_channels.get(slot).copied().unwrap_or(cout);
                    if out_channels == 0 {
                        return fail(format!("stage {number}: zero aggregation width"));
                    }
                    prev_nuta = Some((out_channels, [output[0] / 2, output[1], output[2]]));
                    Some(NutaPlan {
                        heads,
                        groups,
                        prev_channels,
                        prev_extent,
                        pool_factor,
                        out_channels,
                    })
                }
            };
            let plan = StagePlan {
                number,
                in_channels: cin,
                out_channels: cout,
                inner_channels: inner,
                blocks: self.stage_blocks[i],
                spatial_stride: ss,
                temporal_stride: ts,
                block_kernels,
                input,
                output,
                nuta,
            };
            ext = plan.exit();
            cin = cout;
            stages.push(plan);
        }
        let uniform_features = cin;
        let nuta_features = prev_nuta.map_or(0, |(c, _)| c);
        let head_features = match self.head {
            HeadInput::Both => uniform_features + nuta_features,
            HeadInput::Uniform => uniform_features,
        };
        Ok(NetworkPlan {
            stem_output,
            stages,
            head_features,
            uniform_features,
            nuta_features,
        })
    }
}
