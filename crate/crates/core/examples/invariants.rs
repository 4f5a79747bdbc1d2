//! Runs the property suite over the shipped configs.

use nuta::tooling::invariants::run_suite;

fn main() -> nuta::Result<()> {
    let checks = run_suite(concat!(env!("CARGO_MANIFEST_DIR"), "/configs"))?;
    for c in &checks {
        println!("{c}");
    }
    if checks.iter().any(|c| !c.passed) {
        std::process::exit(1);
    }
    Ok(())
}
