//! Parameter, FLOPs and activation-memory report for the standard and
//! lightweight decoders, and for standard self-attention in place of PT.
//!
//! `cargo run --example cost_report [-- --table]`

use elgcnet::analysis::cost_report;
use elgcnet::elgca::AttentionKind;
use elgcnet::network::{DecoderKind, ModelConfig};

fn main() -> elgcnet::Result<()> {
    let table = std::env::args().any(|a| a == "--table");
    let base = ModelConfig::default();
    let variants = [
        ("standard", base.clone()),
        ("lw", ModelConfig { decoder: DecoderKind::Lw, ..base.clone() }),
        ("sa", ModelConfig { attention: AttentionKind::Sa, ..base.clone() }),
    ];
    for (name, cfg) in variants {
        let r = cost_report(&cfg, cfg.input_size)?;
        if table {
            println!("== {name}");
            print!("{}", r.to_table());
        }
        println!(
            "{name:<9} params {:>10} ({:.2}M)  GFLOPs {:>8.2}  decoder GFLOPs {:>7.2}  activations {:>7.1} MB",
            r.total_params,
            r.total_params as f64 / 1e6,
            r.total_flops as f64 / 1e9,
            2.0 * r.decoder_macs() as f64 / 1e9,
            r.activation_bytes as f64 / (1024.0 * 1024.0),
        );
    }
    Ok(())
}
