//! The analytic cost model against the MAC counter inside the kernels.

use nuta::net::{FusionKind, NetworkConfig, TwoBranchNet};
use nuta::nn::Mode;
use nuta::tensor::{macs::count_macs, no_grad};
use nuta::tooling::flops::config_cost;
use nuta::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nuta::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = NetworkConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.cfg"))?;
    for fusion in [FusionKind::Concat, FusionKind::Sum, FusionKind::NonLocal] {
        let mut cfg = base.clone();
        cfg.fusion = fusion;
        let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng)?;
        let clip = Tensor::<f32>::zeros([1, 3, cfg.frames, cfg.height, cfg.width])?;
        let (out, counted) = count_macs(|| no_grad(|| net.forward(&clip, Mode::Eval, &mut rng)));
        out?;
        let model = config_cost(&cfg)?.total_macs();
        println!("{fusion:<9} executed {counted:>10}  model {model:>10}  {}", if counted == model { "exact" } else { "MISMATCH" });
    }
    Ok(())
}
