//! Trains a small network with cross-entropy, focal and soft-IoU losses on
//! the same synthetic pairs and compares held-out change-class scores.
//!
//! `cargo run --release --example loss_comparison [-- EPOCHS]`

use elgcnet::data::synth;
use elgcnet::network::ModelConfig;
use elgcnet::train::{evaluate, train_loop, LossKind, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> elgcnet::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let model = ModelConfig {
        stage_depths: vec![1, 1],
        stage_channels: vec![16, 32],
        patch_strides: vec![2, 2],
        fusion_width: 64,
        decoder_width: 64,
        input_size: [32, 32, 3],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = synth(&mut rng, 32, 32)?;
    let test = synth(&mut rng, 8, 32)?;
    for loss in [LossKind::Ce, LossKind::Focal, LossKind::Miou] {
        let cfg = TrainConfig { epochs, batch_size: 4, lr: 1e-3, loss, ..Default::default() };
        let out = train_loop(&model, &cfg, &train, |_| {})?;
        let e = evaluate(&model, &out.params, &test)?;
        println!(
            "{:<6}  final train loss {:.4}  test iou {:.3}  f1 {:.3}  oa {:.3}",
            format!("{loss:?}"),
            out.log.last().map_or(f64::NAN, |r| r.loss),
            e.counts.iou(),
            e.counts.f1(),
            e.counts.oa()
        );
    }
    Ok(())
}
