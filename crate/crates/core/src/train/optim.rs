use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Optimisation recipe, loadable from flat TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    #[serde(default = "momentum")]
    pub momentum: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_drop_epochs: Vec<usize>,
    #[serde(default = "drop_factor")]
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub temporal_offset: bool,
}

fn momentum() -> f64 {
    0.9
}

fn weight_decay() -> f64 {
    1e-4
}

fn drop_factor() -> f64 {
    10.0
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
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

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("need base_lr > 0, momentum in [0, 1), weight_decay >= 0".into());
        }
        if !(self.lr_drop_factor >= 1.0) {
            return fail("lr_drop_factor must be at least 1".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("lr_drop_epochs {:?} must be strictly increasing", self.lr_drop_epochs));
        }
        if self.lr_drop_epochs.iter().any(|&e| e >= self.epochs) {
            return fail(format!("lr_drop_epochs {:?} must all be below {}", self.lr_drop_epochs, self.epochs));
        }
        Ok(())
    }

    /// Step schedule: `base_lr / factor^(drops at or before epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr / self.lr_drop_factor.powi(drops as i32)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + (g + wd * p)`, `p = p - lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every named parameter in place. A parameter without a gradient
    /// counts as having a zero data gradient. The first non-finite result is
    /// reported by name.
    pub fn step<T: Scalar>(&mut self, params: Vec<(String, &mut Tensor<T>)>, lr: f64) -> Result<()> {
        for (name, p) in params {
            let grad = p.grad();
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let mut next = Vec::with_capacity(p.numel());
            for (i, &w) in p.data().iter().enumerate() {
                let w = w.as_f64();
                let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
                v[i] = self.momentum * v[i] + g + self.weight_decay * w;
                next.push(T::of(w - lr * v[i]));
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("sgd", format!("parameter `{name}` became non-finite")));
            }
            *p = Tensor::param(next, p.shape().clone())?;
        }
        Ok(())
    }
}
