//! Saves a freshly built network, reloads it, and confirms the reloaded
//! weights give bit-identical logits.

use elgcnet::data::synth;
use elgcnet::network::{self, checkpoint, ModelConfig};
use elgcnet::params::ModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> elgcnet::Result<()> {
    let model = ModelConfig::reduced();
    let params: ModelParams<f32> = network::build(&model, 42)?;
    let path = std::env::temp_dir().join("elgcnet_example.elgc");
    checkpoint::save(&path, &model, &params)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    let reloaded = checkpoint::load_matching(&path, &model)?;

    let sample = synth(&mut ChaCha8Rng::seed_from_u64(1), 1, model.input_size[0])?.remove(0);
    let a = network::predict(&model, &params, &sample.pre, &sample.post)?;
    let b = network::predict(&model, &reloaded, &sample.pre, &sample.post)?;
    let identical = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("{} tensors, {} scalars, {size} bytes at {}", params.len(), params.num_scalars(), path.display());
    println!("logits after reload bit-identical: {identical}");

    let other = ModelConfig { decoder_width: 64, ..model };
    match checkpoint::load_matching(&path, &other) {
        Err(e) => println!("loading into a different config: {e}"),
        Ok(_) => println!("unexpectedly loaded into a different config"),
    }
    std::fs::remove_file(&path).ok();
    Ok(())
}
