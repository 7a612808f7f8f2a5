//! Trains briefly on synthetic pairs, then writes the predicted change map
//! of one pair next to its reference label.
//!
//! `cargo run --release --example change_map [-- OUT_DIR]`

use std::path::PathBuf;

use elgcnet::data::{synth, write_mask, write_rgb};
use elgcnet::metrics::confusion;
use elgcnet::network::{self, ModelConfig};
use elgcnet::train::{logits_to_mask, train_loop, AugmentConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> elgcnet::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("elgcnet_change_map"));
    std::fs::create_dir_all(&dir).map_err(|e| elgcnet::Error::io(&dir, e))?;
    let model = ModelConfig {
        stage_depths: vec![1, 1],
        stage_channels: vec![16, 32],
        patch_strides: vec![2, 2],
        fusion_width: 64,
        decoder_width: 64,
        input_size: [32, 32, 3],
        ..Default::default()
    };
    let data = synth(&mut ChaCha8Rng::seed_from_u64(5), 4, 32)?;
    let cfg = TrainConfig { epochs: 200, batch_size: 4, lr: 5e-3, augment: AugmentConfig::NONE, ..Default::default() };
    let out = train_loop(&model, &cfg, &data, |_| {})?;

    let s = &data[0];
    let mask = logits_to_mask(&network::predict(&model, &out.params, &s.pre, &s.post)?)?;
    write_rgb(&dir.join("pre.png"), &s.pre)?;
    write_rgb(&dir.join("post.png"), &s.post)?;
    write_mask(&dir.join("label.png"), &s.label)?;
    write_mask(&dir.join("predicted.png"), &mask)?;
    let c = confusion(&mask.data, &s.label.data)?;
    println!("iou {:.3}  f1 {:.3}  images in {}", c.iou(), c.f1(), dir.display());
    Ok(())
}
