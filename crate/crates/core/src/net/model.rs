use rand::Rng;

use super::config::{BlockKind, FusionKind, HeadInput, NetworkConfig, NetworkPlan, StagePlan};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm3d, conv3d, global_avgpool, spatial_avgpool, spatial_avgpool2, BatchNorm3d, Conv3d, Linear, Mode,
    TemporalPad,
};
use crate::temporal::{gamma, gamma_inverse, nuta_forward, temporal_sync, HeadLayout, NutaParams, ProjectionMap};
use crate::tensor::{Scalar, Tensor};

/// Convolution followed by batch normalisation.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Scalar> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
}

impl<T: Scalar> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let padding = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        Ok(ConvBn {
            conv: Conv3d::init(cin, cout, kernel, stride, padding, 1, false, rng)?.with_temporal_pad(TemporalPad::Replicate),
            bn: BatchNorm3d::new(cout)?,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        batchnorm3d(&conv3d(x, &self.conv)?, &mut self.bn, train)
    }
}

/// Residual block: a chain of conv+bn layers with relu between them, added to
/// an identity or `1x1x1` conv+bn projection shortcut, then relu.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Scalar> {
    pub layers: Vec<ConvBn<T>>,
    pub shortcut: Option<ConvBn<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng + ?Sized>(
        kind: BlockKind,
        cin: usize,
        inner: usize,
        cout: usize,
        kt: usize,
        spatial_stride: usize,
        temporal_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (s, ts) = (spatial_stride, temporal_stride);
        let layers = match kind {
            BlockKind::Basic => vec![
                ConvBn::init(cin, cout, [kt, 1, 1], [ts, 1, 1], rng)?,
                ConvBn::init(cout, cout, [1, 3, 3], [1, s, s], rng)?,
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::init(cin, inner, [kt, 1, 1], [ts, 1, 1], rng)?,
                ConvBn::init(inner, inner, [1, 3, 3], [1, s, s], rng)?,
                ConvBn::init(inner, cout, [1, 1, 1], [1, 1, 1], rng)?,
            ],
        };
        let shortcut = if cin != cout || s != 1 || ts != 1 {
            Some(ConvBn::init(cin, cout, [1, 1, 1], [ts, s, s], rng)?)
        } else {
            None
        };
        Ok(ResidualBlock { layers, shortcut })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h, train)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let skip = match &mut self.shortcut {
            Some(proj) => proj.forward(x, train)?,
            None => x.clone(),
        };
        h.add(&skip)?.relu()
    }
}

#[derive(Clone, Debug)]
pub struct ResidualStage<T: Scalar> {
    pub blocks: Vec<ResidualBlock<T>>,
}

impl<T: Scalar> ResidualStage<T> {
    pub fn init<R: Rng + ?Sized>(kind: BlockKind, plan: &StagePlan, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(plan.blocks);
        for (b, &kt) in plan.block_kernels.iter().enumerate() {
            let (cin, s, ts) = if b == 0 {
                (plan.in_channels, plan.spatial_stride, plan.temporal_stride)
            } else {
                (plan.out_channels, 1, 1)
            };
            blocks.push(ResidualBlock::init(kind, cin, plan.inner_channels, plan.out_channels, kt, s, ts, rng)?);
        }
        Ok(ResidualStage { blocks })
    }

    pub fn in_channels(&self) -> usize {
        let first = &self.blocks[0];
        first.layers[0].conv.in_channels()
    }
}

/// Runs every block of a stage.
pub fn residual_stage<T: Scalar>(x: &Tensor<T>, stage: &mut ResidualStage<T>, train: bool) -> Result<Tensor<T>> {
    let c = x.shape().ncthw("residual_stage")?[1];
    if c != stage.in_channels() {
        return Err(Error::invalid(
            "residual_stage",
            format!("input has {c} channels, stage expects {}", stage.in_channels()),
        ));
    }
    let mut h = x.clone();
    for block in &mut stage.blocks {
        h = block.forward(&h, train)?;
    }
    Ok(h)
}

/// Seeds the aggregated branch from a uniform-branch feature.
pub fn init_nuta_feature<T: Scalar>(f_res: &Tensor<T>) -> Result<Tensor<T>> {
    spatial_avgpool2(f_res)
}

/// Parameters of the merge between the previous aggregated feature and the
/// current uniform-branch feature.
#[derive(Clone, Debug)]
pub enum Fusion<T: Scalar> {
    /// `conv(concat(F_nuta, F_res))`, back to the stage width.
    Concat { conv: Conv3d<T> },
    /// `F_res + conv(F_nuta)`.
    Sum { conv: Conv3d<T> },
    /// `F_res + out(attend(query(F_nuta), key(F_res), value(F_res)))`.
    NonLocal {
        query: Conv3d<T>,
        key: Conv3d<T>,
        value: Conv3d<T>,
        out: Conv3d<T>,
        layout: HeadLayout,
    },
}

impl<T: Scalar> Fusion<T> {
    pub fn init<R: Rng + ?Sized>(
        kind: FusionKind,
        nuta_channels: usize,
        res_channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            FusionKind::Concat => Fusion::Concat {
                conv: Conv3d::pointwise(nuta_channels + res_channels, res_channels, rng)?,
            },
            FusionKind::Sum => Fusion::Sum {
                conv: Conv3d::pointwise(nuta_channels, res_channels, rng)?,
            },
            FusionKind::NonLocal => {
                let layout = HeadLayout::new(heads)?;
                layout.per_head(res_channels)?;
                Fusion::NonLocal {
                    query: Conv3d::pointwise(nuta_channels, res_channels, rng)?,
                    key: Conv3d::pointwise(res_channels, res_channels, rng)?,
                    value: Conv3d::pointwise(res_channels, res_channels, rng)?,
                    out: Conv3d::pointwise(res_channels, res_channels, rng)?,
                    layout,
                }
            }
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Concat { .. } => FusionKind::Concat,
            Fusion::Sum { .. } => FusionKind::Sum,
            Fusion::NonLocal { .. } => FusionKind::NonLocal,
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Fusion::Concat { conv } | Fusion::Sum { conv } => conv.params_mut().into_iter().map(|p| ("conv", p)).collect(),
            Fusion::NonLocal {
                query, key, value, out, ..
            } => {
                let mut v = Vec::new();
                for (name, c) in [("query", query), ("key", key), ("value", value), ("out", out)] {
                    v.extend(c.params_mut().into_iter().map(|p| (name, p)));
                }
                v
            }
        }
    }
}

/// Merges `F_nuta_prev` into `F_res`. The aggregated feature is first average
/// pooled down to the uniform branch's spatial size.
pub fn fuse<T: Scalar>(f_nuta_prev: &Tensor<T>, f_res: &Tensor<T>, fusion: &Fusion<T>) -> Result<Tensor<T>> {
    let [na, _, ta, ha, wa] = f_nuta_prev.shape().ncthw("fuse")?;
    let [nr, _, tr, hr, wr] = f_res.shape().ncthw("fuse")?;
    if na != nr || ta != tr || ha % hr != 0 || wa % wr != 0 || ha / hr != wa / wr {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: f_nuta_prev.shape().clone(),
            rhs: f_res.shape().clone(),
        });
    }
    let prev = spatial_avgpool(f_nuta_prev, ha / hr)?;
    match fusion {
        Fusion::Concat { conv } => conv3d(&prev.concat_channels(f_res)?, conv),
        Fusion::Sum { conv } => f_res.add(&conv3d(&prev, conv)?),
        Fusion::NonLocal {
            query,
            key,
            value,
            out,
            layout,
        } => {
            let q = gamma(&conv3d(&prev, query)?, *layout)?;
            let k = gamma(&conv3d(f_res, key)?, *layout)?;
            let v = gamma(&conv3d(f_res, value)?, *layout)?;
            let attn = q.matmul(&k.transpose_last2()?)?.softmax_lastdim()?;
            let o = gamma_inverse(&attn.matmul(&v)?, *layout, [hr, wr])?;
            f_res.add(&conv3d(&o, out)?)
        }
    }
}

/// Fusion and aggregation module attached to one stage.
#[derive(Clone, Debug)]
pub struct NutaStage<T: Scalar> {
    pub fusion: Fusion<T>,
    /// Normalises the fused feature before it enters the module.
    pub fusion_norm: BatchNorm3d<T>,
    pub module: NutaParams<T>,
}

/// Per-stage extents recorded during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageTrace {
    pub stage: usize,
    /// `[C, T, H, W]` of the uniform branch after the residual blocks.
    pub residual: [usize; 4],
    /// `[C, T, H, W]` of the uniform branch handed to the next stage.
    pub uniform: [usize; 4],
    /// `[C, T, H, W]` of the aggregated branch, if the stage has a module.
    pub nuta: Option<[usize; 4]>,
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar> {
    pub logits: Tensor<T>,
    /// One map per aggregation stage, in stage order.
    pub maps: Vec<ProjectionMap<T>>,
    pub trace: Vec<StageTrace>,
    /// Globally pooled uniform-branch feature `[N, C_u]`.
    pub uniform_features: Tensor<T>,
    /// Globally pooled final aggregated feature `[N, C_nuta]`.
    pub nuta_features: Option<Tensor<T>>,
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    let d = x.dims();
    [d[1], d[2], d[3], d[4]]
}

/// Uniform 3D residual branch plus a chain of aggregation modules, with a
/// linear classifier over globally pooled features.
#[derive(Clone, Debug)]
pub struct TwoBranchNet<T: Scalar> {
    config: NetworkConfig,
    plan: NetworkPlan,
    pub stem: ConvBn<T>,
    pub stages: Vec<ResidualStage<T>>,
    /// Parallel to `config.nuta_stages`.
    pub nuta: Vec<NutaStage<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> TwoBranchNet<T> {
    /// Builds the network. The classifier is initialised last, so two
    /// configurations that differ only in `head` share every trunk weight.
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let plan = config.plan()?;
        let stem = ConvBn::init(
            config.input_channels,
            config.stem_channels,
            config.stem_kernel,
            config.stem_stride,
            rng,
        )?;
        let mut stages = Vec::with_capacity(plan.stages.len());
        let mut nuta = Vec::new();
        for sp in &plan.stages {
            stages.push(ResidualStage::init(config.block, sp, rng)?);
            if let Some(np) = &sp.nuta {
                let fusion = Fusion::init(config.fusion, np.prev_channels, sp.out_channels, np.heads, rng)?;
                let module =
                    NutaParams::init(sp.out_channels, np.out_channels, np.heads, np.groups, rng)?
                    .with_norm()?
                    .with_scaled_logits()
                    .with_uniform_start()?;
                let fusion_norm = BatchNorm3d::new(sp.out_channels)?;
                nuta.push(NutaStage {
                    fusion,
                    fusion_norm,
                    module,
                });
            }
        }
        let head = Linear::init(plan.head_features, config.num_classes, rng)?;
        Ok(TwoBranchNet {
            config: config.clone(),
            plan,
            stem,
            stages,
            nuta,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    /// Runs both branches and the classifier. `rng` drives dropout only.
    pub fn forward<R: Rng + ?Sized>(&mut self, clip: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<ForwardOutput<T>> {
        let [_, c, t, h, w] = clip.shape().ncthw("forward")?;
        let cfg = &self.config;
        if [c, t, h, w] != [cfg.input_channels, cfg.frames, cfg.height, cfg.width] {
            return Err(Error::invalid(
                "forward",
                format!(
                    "clip {} does not match config input [{}, {}, {}, {}]",
                    clip.shape(),
                    cfg.input_channels,
                    cfg.frames,
                    cfg.height,
                    cfg.width
                ),
            ));
        }
        let train = mode.is_train();
        let mut x = self.stem.forward(clip, train)?.relu()?;
        if cfg.stem_pool {
            x = spatial_avgpool2(&x)?;
        }
        let mut maps = Vec::new();
        let mut trace = Vec::with_capacity(self.stages.len());
        let mut nuta_prev: Option<Tensor<T>> = None;
        let mut slot = 0;
        for (stage, sp) in self.stages.iter_mut().zip(&self.plan.stages) {
            let stage_in = x;
            x = residual_stage(&stage_in, stage, train)?;
            let residual = dims4(&x);
            let mut nuta_dims = None;
            if sp.nuta.is_some() {
                let ns = &mut self.nuta[slot];
                slot += 1;
                let prev = match nuta_prev.take() {
                    Some(p) => p,
                    None => init_nuta_feature(&stage_in)?,
                };
                let fused = batchnorm3d(&fuse(&prev, &x, &ns.fusion)?, &mut ns.fusion_norm, train)?;
                let (f_nuta, m) = nuta_forward(&fused, &mut ns.module, mode)?;
                x = temporal_sync(&x, &m, &mut ns.module, mode)?;
                nuta_dims = Some(dims4(&f_nuta));
                maps.push(m);
                nuta_prev = Some(f_nuta);
            }
            trace.push(StageTrace {
                stage: sp.number,
                residual,
                uniform: dims4(&x),
                nuta: nuta_dims,
            });
        }
        let uniform_features = global_avgpool(&x)?;
        let nuta_features = nuta_prev.as_ref().map(global_avgpool).transpose()?;
        let logits = self.classify_from(&uniform_features, nuta_features.as_ref(), mode, rng)?;
        Ok(ForwardOutput {
            logits,
            maps,
            trace,
            uniform_features,
            nuta_features,
        })
    }

    /// Classifier over pooled features, honouring the configured head input:
    /// the uniform-only variant ignores the aggregated feature.
    pub fn classify_from<R: Rng + ?Sized>(
        &self,
        uniform: &Tensor<T>,
        nuta: Option<&Tensor<T>>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let features = match (self.config.head, nuta) {
            (HeadInput::Both, Some(n)) => uniform.concat_channels(n)?,
            _ => uniform.clone(),
        };
        if features.dims()[1] != self.head.in_features() {
            return Err(Error::invalid(
                "classify_from",
                format!("{} head features, classifier expects {}", features.dims()[1], self.head.in_features()),
            ));
        }
        self.head.forward(&features.dropout(self.config.dropout, mode.is_train(), rng)?)
    }

    /// Trainable tensors with stable dotted names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        fn conv_bn<'a, T: Scalar>(out: &mut Vec<(String, &'a mut Tensor<T>)>, prefix: &str, l: &'a mut ConvBn<T>) {
            for (i, p) in l.conv.params_mut().into_iter().enumerate() {
                out.push((format!("{prefix}.conv.{}", ["weight", "bias"][i]), p));
            }
            out.push((format!("{prefix}.bn.scale"), &mut l.bn.scale));
            out.push((format!("{prefix}.bn.shift"), &mut l.bn.shift));
        }
        conv_bn(&mut out, "stem", &mut self.stem);
        let numbers: Vec<usize> = self.plan.stages.iter().map(|s| s.number).collect();
        for (stage, number) in self.stages.iter_mut().zip(&numbers) {
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                for (l, layer) in block.layers.iter_mut().enumerate() {
                    conv_bn(&mut out, &format!("stage{number}.block{b}.layer{l}"), layer);
                }
                if let Some(sc) = &mut block.shortcut {
                    conv_bn(&mut out, &format!("stage{number}.block{b}.shortcut"), sc);
                }
            }
        }
        for (ns, number) in self.nuta.iter_mut().zip(&self.config.nuta_stages) {
            for (name, p) in ns.fusion.params_mut() {
                out.push((format!("nuta{number}.fusion.{name}.weight"), p));
            }
            out.push((format!("nuta{number}.fusion_norm.scale"), &mut ns.fusion_norm.scale));
            out.push((format!("nuta{number}.fusion_norm.shift"), &mut ns.fusion_norm.shift));
            let mut seen = std::collections::HashMap::new();
            for (name, p) in ns.module.params_mut() {
                let i = seen.entry(name).or_insert(0);
                let field = if name.ends_with("_norm") { ["scale", "shift"][*i] } else { "weight" };
                *i += 1;
                out.push((format!("nuta{number}.{name}.{field}"), p));
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Batch-norm running statistics with stable dotted names.
    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        let mut layers: Vec<(String, &mut ConvBn<T>)> = vec![("stem".into(), &mut self.stem)];
        let numbers: Vec<usize> = self.plan.stages.iter().map(|s| s.number).collect();
        for (stage, number) in self.stages.iter_mut().zip(&numbers) {
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                for (l, layer) in block.layers.iter_mut().enumerate() {
                    layers.push((format!("stage{number}.block{b}.layer{l}"), layer));
                }
                if let Some(sc) = &mut block.shortcut {
                    layers.push((format!("stage{number}.block{b}.shortcut"), sc));
                }
            }
        }
        let mut norms: Vec<(String, &mut BatchNorm3d<T>)> = layers.into_iter().map(|(p, l)| (format!("{p}.bn"), &mut l.bn)).collect();
        for (ns, number) in self.nuta.iter_mut().zip(&self.config.nuta_stages) {
            norms.push((format!("nuta{number}.fusion_norm"), &mut ns.fusion_norm));
            if let Some(bn) = &mut ns.module.compress_norm {
                norms.push((format!("nuta{number}.compress_norm"), bn));
            }
            if let Some(bn) = &mut ns.module.sync_norm {
                norms.push((format!("nuta{number}.sync_norm"), bn));
            }
        }
        for (prefix, bn) in norms {
            out.push((format!("{prefix}.running_mean"), &mut bn.running_mean));
            out.push((format!("{prefix}.running_var"), &mut bn.running_var));
        }
        out
    }

    pub fn parameter_count(&mut self) -> usize {
        self.named_params_mut().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}
