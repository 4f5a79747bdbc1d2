//! One aggregation module on a random feature: the map rows, their sums,
//! and the halved output extent.

use nuta::nn::Mode;
use nuta::temporal::{nuta_forward, NutaParams};
use nuta::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> nuta::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, t, hw) = (8, 8, 2);
    let mut p = NutaParams::<f64>::init(c, 16, 2, 2, &mut rng)?;
    let data: Vec<f64> = (0..c * t * hw * hw).map(|_| rng.sample(StandardNormal)).collect();
    let f = Tensor::new(data, [1, c, t, hw, hw])?;
    let (out, m) = nuta_forward(&f, &mut p, Mode::Eval)?;
    println!("input {}  ->  output {}", f.shape(), out.shape());
    for h in 0..m.heads() {
        println!("head {h}");
        for i in 0..m.out_steps() {
            let row = m.row(0, h, i);
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            println!("  {}  sum {:.6}", cells.join(" "), row.iter().sum::<f64>());
        }
    }
    Ok(())
}
