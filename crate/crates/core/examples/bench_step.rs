use std::time::Instant;

use nuta::net::{NetworkConfig, TwoBranchNet};
use nuta::nn::{cross_entropy, Mode};
use nuta::tensor::macs::count_macs;
use nuta::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nuta::Result<()> {
    let cfg = NetworkConfig::load("configs/toy.cfg")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng)?;
    println!("params {}", net.parameter_count());
    let n = 16;
    let clip: Vec<f32> = (0..n * 3 * 8 * 32 * 32).map(|_| rng.gen()).collect();
    let x = Tensor::new(clip, [n, 3, 8, 32, 32])?;
    let labels: Vec<usize> = (0..n).map(|i| i % 8).collect();
    let (_, macs) = count_macs(|| net.forward(&x, Mode::Eval, &mut rng));
    println!("forward MACs per clip {}", macs / n as u64);
    let t = Instant::now();
    for _ in 0..5 {
        let out = net.forward(&x, Mode::Train, &mut rng)?;
        let loss = cross_entropy(&out.logits, &labels)?;
        loss.backward()?;
        net.zero_grad();
    }
    let dt = t.elapsed().as_secs_f64() / 5.0;
    println!("{:.3}s per batch of {n}, {:.1} clips/s", dt, n as f64 / dt);
    Ok(())
}
