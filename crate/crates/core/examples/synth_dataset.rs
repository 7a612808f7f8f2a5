//! Writes a synthetic change-detection split in the `A/`, `B/`, `label/`
//! layout, indexes it again and prints per-sample statistics.
//!
//! `cargo run --example synth_dataset [-- DEST [COUNT]]`

use std::path::PathBuf;

use elgcnet::data::{load_all, scan, synth_scene, write_split, SynthShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> elgcnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let dest = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("elgcnet_synth"));
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut samples = Vec::new();
    for i in 0..count {
        let (s, shapes) = synth_scene(&mut rng, 64)?;
        let rects = shapes.iter().filter(|s| matches!(s, SynthShape::Rect { .. })).count();
        println!("{i:04}: {rects} rectangles, {} ellipses", shapes.len() - rects);
        samples.push(s);
    }
    write_split(&dest, "train", &samples)?;

    let index = scan(&dest, "train")?;
    for (entry, s) in index.entries.iter().zip(load_all(&index)?) {
        let changed = s.label.changed() as f64 / s.label.data.len() as f64;
        println!("{}  changed {:5.1}%  {}", entry.stem, 100.0 * changed, entry.label.display());
    }
    Ok(())
}
