//! Exports the projection maps of an untrained toy net for one clip:
//! a full-precision text grid and a grey PGM per head.

use nuta::net::{NetworkConfig, TwoBranchNet};
use nuta::nn::Mode;
use nuta::tensor::no_grad;
use nuta::tooling::heatmap::export_heatmap;
use nuta::train::{generate_split, Augment, DataConfig, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nuta::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "heatmaps".into());
    let root = env!("CARGO_MANIFEST_DIR");
    let cfg = NetworkConfig::load(format!("{root}/configs/toy.cfg"))?;
    let mut data_cfg = DataConfig::load(format!("{root}/configs/data.cfg"))?;
    data_cfg.num_val = 1;
    let split = generate_split(&data_cfg, Split::Val, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng)?;
    let (x, _, _) = split.batch::<f32, _>(&[0], Augment::default(), &mut rng)?;
    let out = no_grad(|| net.forward(&x, Mode::Eval, &mut rng))?;
    for (m, stage) in out.maps.iter().zip(&cfg.nuta_stages) {
        for path in export_heatmap(m, 0, 0, &dir, &format!("stage{stage}"))? {
            println!("{}", path.display());
        }
    }
    Ok(())
}
