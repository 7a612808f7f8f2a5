//! Counted cost of pooled-transpose attention against token self-attention
//! as the number of tokens grows, at a fixed 64-channel block.

use elgcnet::analysis::{attention_macs, log_log_slope};
use elgcnet::elgca::{AttentionKind, PoolingMode};

fn main() {
    let channels = 64;
    println!("{:>7}  {:>14}  {:>14}  {:>8}", "tokens", "PT MACs", "SA MACs", "SA / PT");
    let mut pt = Vec::new();
    let mut sa = Vec::new();
    for side in [8usize, 16, 32, 64, 128] {
        let n = (side * side) as f64;
        let p = attention_macs(AttentionKind::Pt, PoolingMode::AvgQMaxK, side, side, channels);
        let s = attention_macs(AttentionKind::Sa, PoolingMode::AvgQMaxK, side, side, channels);
        println!("{:>7}  {p:>14}  {s:>14}  {:>8.1}", side * side, s as f64 / p as f64);
        pt.push((n, p as f64));
        sa.push((n, s as f64));
    }
    println!("log-log slope: PT {:.3}, SA {:.3}", log_log_slope(&pt), log_log_slope(&sa));
}
