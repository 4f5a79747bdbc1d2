//! Cost of every shipped full-scale config, relative to its baseline.

use nuta::net::NetworkConfig;
use nuta::tooling::flops::{config_cost, Branch, Convention};

const PAIRS: [(&str, &str); 4] = [
    ("i3d50", "nuta50"),
    ("i3d50", "nuta50_s345"),
    ("i3d50", "nuta50_s5"),
    ("i3d50_star", "nuta50_star"),
];

fn main() -> nuta::Result<()> {
    let load = |name: &str| NetworkConfig::load(format!("{}/configs/{name}.cfg", env!("CARGO_MANIFEST_DIR")));
    println!("{:<14} {:>10} {:>10} {:>10} {:>12} {:>8}", "config", "GMAC", "uniform", "nuta", "GFLOP(2x)", "ratio");
    for (base, other) in PAIRS {
        let b = config_cost(&load(base)?)?;
        let o = config_cost(&load(other)?)?;
        for r in [&b, &o] {
            println!(
                "{:<14} {:>10.2} {:>10.2} {:>10.2} {:>12.2} {:>8.4}",
                r.config,
                r.giga(Convention::Macs),
                r.branch_macs(Branch::Uniform) as f64 / 1e9,
                r.branch_macs(Branch::Nuta) as f64 / 1e9,
                r.giga(Convention::TwoFlopsPerMac),
                r.ratio_to(&b)
            );
        }
        println!();
    }
    Ok(())
}
