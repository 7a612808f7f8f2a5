//! Overfits the reduced network on eight synthetic 64×64 pairs and reports
//! the training log and the final change-class scores.
//!
//! `cargo run --release --example overfit [-- EPOCHS]`

use std::time::Instant;

use elgcnet::data::synth;
use elgcnet::network::ModelConfig;
use elgcnet::train::{evaluate, train_loop, AugmentConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> elgcnet::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let model = ModelConfig::reduced();
    let data = synth(&mut ChaCha8Rng::seed_from_u64(7), 8, 64)?;
    let cfg = TrainConfig { epochs, batch_size: 8, augment: AugmentConfig::NONE, ..Default::default() };
    let start = Instant::now();
    let out = train_loop(&model, &cfg, &data, |r| {
        if r.epoch % 10 == 0 || r.epoch + 1 == epochs {
            println!("epoch {:>4}  lr {:.3e}  loss {:.4}  iou {:.3}  f1 {:.3}  oa {:.3}", r.epoch, r.lr, r.loss, r.iou, r.f1, r.oa);
        }
    })?;
    let eval = evaluate(&model, &out.params, &data)?;
    println!(
        "after training: loss {:.4}  iou {:.3}  f1 {:.3}  ({:.1}s)",
        eval.loss,
        eval.counts.iou(),
        eval.counts.f1(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
