//! Finite-difference check of every differentiable operation.

fn main() -> nuta::Result<()> {
    let reports = nuta::tooling::gradcheck::run_suite(nuta::tooling::gradcheck::MIN_COORDS)?;
    for r in &reports {
        println!("{r}");
        for l in &r.leaves {
            if l.error >= r.tolerance {
                println!("    {:<40} {:.3e}", l.name, l.error);
            }
        }
    }
    Ok(())
}
