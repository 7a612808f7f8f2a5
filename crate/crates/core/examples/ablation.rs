//! Parameter and FLOP counts of every ELGCA branch combination and every
//! query/key pooling mode at the default configuration.

use elgcnet::analysis::cost_report;
use elgcnet::elgca::{Branches, PoolingMode};
use elgcnet::network::ModelConfig;

fn label(b: Branches) -> String {
    let parts: Vec<&str> = [(b.local, "local"), (b.multi_channel, "multi-channel"), (b.attention, "attention")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
    parts.join(" + ")
}

fn main() -> elgcnet::Result<()> {
    let base = ModelConfig::default();
    let full = cost_report(&base, base.input_size)?;
    println!("{:<38}  {:>10}  {:>9}  {:>10}", "branches", "params", "GFLOPs", "vs full");
    for b in Branches::combinations() {
        let cfg = ModelConfig { branches: b, ..base.clone() };
        let r = cost_report(&cfg, cfg.input_size)?;
        println!(
            "{:<38}  {:>10}  {:>9.2}  {:>+10}",
            label(b),
            r.total_params,
            r.total_flops as f64 / 1e9,
            r.total_params as i64 - full.total_params as i64
        );
    }
    println!();
    println!("{:<10}  {:>10}  {:>9}", "pooling", "params", "GFLOPs");
    for p in PoolingMode::ALL {
        let cfg = ModelConfig { pooling: p, ..base.clone() };
        let r = cost_report(&cfg, cfg.input_size)?;
        println!("{:<10}  {:>10}  {:>9.2}", format!("{p:?}"), r.total_params, r.total_flops as f64 / 1e9);
    }
    Ok(())
}
