//! One encoder block on a random feature map: forward shapes of each
//! ELGCA branch and the gradient norm reaching every parameter.

use elgcnet::elgca::{block_param_specs, channel_split, global_context, local_context, encoder_block, BlockConfig, ElgcaConfig};
use elgcnet::params::{ModelParams, Session};
use elgcnet::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> elgcnet::Result<()> {
    let cfg = BlockConfig { elgca: ElgcaConfig::new(32), mlp_ratio: 4 };
    let params: ModelParams<f32> = ModelParams::init(&block_param_specs("block", &cfg), 0)?;
    let x = Tensor::<f32>::randn(&[16, 16, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));

    let mut s = Session::new(&params);
    let xv = s.graph.constant(x.clone());
    let (global, local) = channel_split(&mut s.graph, xv)?;
    let gc = global_context(&mut s, "block.elgca", &cfg.elgca, global)?;
    let lo = local_context(&mut s, "block.elgca", local)?;
    println!("local context      {:?}", s.graph.shape(lo));
    println!("channel aggregate  {:?}", s.graph.shape(gc.z.expect("enabled")));
    println!("PT attention       {:?}", s.graph.shape(gc.a_att.expect("enabled")));

    let mut s = Session::new(&params);
    let xv = s.graph.constant(x);
    let y = encoder_block(&mut s, "block", &cfg, xv)?;
    println!("block output       {:?}", s.graph.shape(y));
    let loss = s.graph.mean(y)?;
    let grads = s.graph.backward(loss)?;
    for (name, g) in s.param_grads(&grads) {
        let norm = g.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("  {name:<28} |grad| {norm:.3e}");
    }
    Ok(())
}
