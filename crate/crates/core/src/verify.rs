//! The finite-difference gradient suite behind `elgcnet gradcheck`.
//!
//! Every check runs in f64. Single operations use a step of `1e-3` on inputs
//! kept away from kinks and ties; composite modules use a smaller step so a
//! probe is unlikely to straddle a ReLU or max-pool switch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::elgca::{self, AttentionKind, BlockConfig, Branches, ElgcaConfig, PoolingMode};
use crate::error::Result;
use crate::network::{self, DecoderKind, ModelConfig};
use crate::params::{ModelParams, Session};
use crate::tensor::gradcheck::{check_gradients, random_projection, relative_error, FdOptions};
use crate::tensor::kernels::Window;
use crate::tensor::{Graph, Tensor, Var};
use crate::train;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const OP_STEP: f64 = 1e-3;
const MODULE_STEP: f64 = 1e-5;
/// Smaller step for the full network: with thousands of ReLU and max-pool
/// kinks a wider stencil straddles one too often.
const MODEL_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub group: &'static str,
    pub name: String,
    /// Worst norm-wise relative error over the checked inputs.
    pub rel_err: f64,
    pub tolerance: f64,
    pub entries: usize,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(group: &'static str, name: impl Into<String>, rel_err: f64, entries: usize, tolerance: f64) -> Self {
        CheckOutcome { group, name: name.into(), rel_err, tolerance, entries, passed: rel_err <= tolerance }
    }
}

/// Values in `±[0.1, 1]` so that ReLU-like kinks are at least `0.1` away.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// A random permutation of evenly spaced values: no ties within `0.5/n`.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("shape matches")
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn op_check<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = FdOptions { step: OP_STEP, max_entries: 48, seed };
    let rep = check_gradients(&inputs, opts, |g, v| {
        let y = f(g, v)?;
        if g.shape(y).is_empty() {
            Ok(y)
        } else {
            random_projection(g, y, seed)
        }
    })?;
    let worst = rep.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let entries = rep.iter().map(|r| r.entries).sum();
    Ok(CheckOutcome::new("op", name, worst, entries, OP_TOLERANCE))
}

/// Central differences over sampled entries of every parameter tensor; the
/// error is norm-wise over all probed entries together.
pub fn check_param_gradients<F>(params: &ModelParams<f64>, step: f64, per_tensor: usize, seed: u64, f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut s = Session::new(p);
        let out = f(&mut s)?;
        Ok(s.graph.value(out).item())
    };
    let mut s = Session::new(params);
    let out = f(&mut s)?;
    let grads = s.graph.backward(out)?;
    let analytic_all = s.param_grads(&grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for _ in 0..per_tensor.min(n) {
            let j = rng.random_range(0..n);
            let orig = work.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(analytic_all[name].data()[j]);
        }
    }
    Ok((relative_error(&analytic, &numeric), analytic.len()))
}

/// Randomizes every parameter so that zero-initialized biases and unit norm
/// scales do not hide errors.
pub fn perturbed_params(specs: &[crate::params::ParamSpec], seed: u64) -> Result<ModelParams<f64>> {
    let mut p: ModelParams<f64> = ModelParams::init(specs, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (name, t) in p.iter_mut() {
        let shape = t.shape().to_vec();
        // Weights keep unit variance per fan-in; anything larger saturates
        // the logits of a deep stack and every gradient vanishes.
        let (base, scale) = match shape.len() {
            1 if name.ends_with(".gamma") => (1.0, 0.2),
            1 => (0.0, 0.3),
            3 => (0.0, (3.0 / (shape[0] * shape[1]) as f64).sqrt()),
            _ => (0.0, (3.0 * shape[shape.len() - 1] as f64 / t.numel() as f64).sqrt()),
        };
        for v in t.data_mut() {
            *v = base + scale * rng.random_range(-1.0..1.0);
        }
    }
    Ok(p)
}

fn module_check<F>(name: &str, specs: Vec<crate::params::ParamSpec>, inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let params = perturbed_params(&specs, seed)?;
    let run = |s: &mut Session<'_, f64>| -> Result<Var> {
        let xs: Vec<Var> = inputs.iter().map(|t| s.graph.constant(t.clone())).collect();
        let y = f(s, &xs)?;
        random_projection(&mut s.graph, y, seed)
    };
    let (param_err, n_params) = check_param_gradients(&params, MODULE_STEP, 3, seed, run)?;

    // Input gradients with the parameters held fixed.
    let opts = FdOptions { step: MODULE_STEP, max_entries: 24, seed };
    let rep = check_gradients(&inputs, opts, |g, v| {
        let mut s = Session::with_graph(&params, std::mem::take(g));
        let y = f(&mut s, v)?;
        let out = random_projection(&mut s.graph, y, seed)?;
        *g = s.graph;
        Ok(out)
    })?;
    let input_err = rep.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let entries = n_params + rep.iter().map(|r| r.entries).sum::<usize>();
    Ok(CheckOutcome::new("module", name, param_err.max(input_err), entries, OP_TOLERANCE))
}

pub fn op_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let labels: Vec<u8> = (0..16).map(|i| (i * 7 % 3 == 0) as u8).collect();

    out.push(op_check("matmul", vec![randn(&[4, 5], r), randn(&[5, 3], r)], seed, |g, v| g.matmul(v[0], v[1]))?);
    out.push(op_check("transpose", vec![randn(&[3, 4], r)], seed, |g, v| g.transpose(v[0]))?);
    out.push(op_check("conv2d k3 s1 p1", vec![randn(&[5, 5, 3], r), randn(&[3, 3, 3, 4], r), randn(&[4], r)], seed, |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), Window::new(3, 1, 1))
    })?);
    out.push(op_check("conv2d k7 s4 p3", vec![randn(&[8, 8, 2], r), randn(&[7, 7, 2, 3], r)], seed, |g, v| {
        g.conv2d(v[0], v[1], None, Window::new(7, 4, 3))
    })?);
    out.push(op_check("conv2d 1x1", vec![randn(&[4, 4, 3], r), randn(&[1, 1, 3, 5], r), randn(&[5], r)], seed, |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), Window::new(1, 1, 0))
    })?);
    out.push(op_check("depthwise_conv2d", vec![randn(&[5, 4, 3], r), randn(&[3, 3, 3], r), randn(&[3], r)], seed, |g, v| {
        g.depthwise_conv2d(v[0], v[1], Some(v[2]), Window::new(3, 1, 1))
    })?);
    out.push(op_check("transpose_conv2d", vec![randn(&[3, 3, 2], r), randn(&[4, 4, 2, 3], r), randn(&[3], r)], seed, |g, v| {
        g.transpose_conv2d(v[0], v[1], Some(v[2]), Window::new(4, 2, 1))
    })?);
    out.push(op_check("avg_pool", vec![randn(&[6, 4, 2], r)], seed, |g, v| g.avg_pool(v[0], Window::new(3, 2, 1)))?);
    out.push(op_check("max_pool", vec![distinct(&[6, 4, 2], r)], seed, |g, v| g.max_pool(v[0], 2, 2))?);
    out.push(op_check("bilinear_resize", vec![randn(&[3, 4, 2], r)], seed, |g, v| g.bilinear_resize(v[0], 7, 5))?);
    out.push(op_check("upsample", vec![randn(&[3, 3, 2], r)], seed, |g, v| g.upsample(v[0], 2))?);
    out.push(op_check("softmax axis 0", vec![randn(&[4, 3], r)], seed, |g, v| g.softmax(v[0], 0))?);
    out.push(op_check("softmax axis 1", vec![randn(&[4, 3], r)], seed, |g, v| g.softmax(v[0], 1))?);
    out.push(op_check("layer_norm", vec![randn(&[3, 3, 6], r), randn(&[6], r), randn(&[6], r)], seed, |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-6)
    })?);
    out.push(op_check("add", vec![randn(&[3, 4], r), randn(&[3, 4], r)], seed, |g, v| g.add(v[0], v[1]))?);
    out.push(op_check("sub", vec![randn(&[3, 4], r), randn(&[3, 4], r)], seed, |g, v| g.sub(v[0], v[1]))?);
    out.push(op_check("mul", vec![randn(&[3, 4], r), randn(&[3, 4], r)], seed, |g, v| g.mul(v[0], v[1]))?);
    out.push(op_check("mul_scalar", vec![randn(&[5], r)], seed, |g, v| g.mul_scalar(v[0], -1.7))?);
    out.push(op_check("relu", vec![away_from_zero(&[4, 4], r)], seed, |g, v| g.relu(v[0]))?);
    out.push(op_check("gelu", vec![randn(&[4, 4], r)], seed, |g, v| g.gelu(v[0]))?);
    out.push(op_check("sum", vec![randn(&[2, 3, 2], r)], seed, |g, v| g.sum(v[0]))?);
    out.push(op_check("mean", vec![randn(&[2, 3, 2], r)], seed, |g, v| g.mean(v[0]))?);
    out.push(op_check("reshape", vec![randn(&[2, 3, 2], r)], seed, |g, v| g.reshape(v[0], &[3, 4]))?);
    out.push(op_check("flatten_spatial", vec![randn(&[2, 3, 2], r)], seed, |g, v| g.flatten_spatial(v[0]))?);
    out.push(op_check("concat", vec![randn(&[2, 2, 3], r), randn(&[2, 2, 1], r)], seed, |g, v| g.concat(&[v[0], v[1]], 2))?);
    out.push(op_check("split", vec![randn(&[2, 2, 6], r)], seed, |g, v| {
        let parts = g.split(v[0], 2, 3)?;
        let a = g.mul_scalar(parts[0], 2.0)?;
        let b = g.mul_scalar(parts[2], -3.0)?;
        g.concat(&[b, parts[1], a], 2)
    })?);
    out.push(op_check("cross_entropy", vec![randn(&[4, 4, 2], r)], seed, |g, v| train::cross_entropy(g, v[0], &labels))?);
    out.push(op_check("focal_loss", vec![randn(&[4, 4, 2], r)], seed, |g, v| train::focal_loss(g, v[0], &labels, 2.0))?);
    out.push(op_check("miou_loss", vec![randn(&[4, 4, 2], r)], seed, |g, v| train::miou_loss(g, v[0], &labels))?);
    Ok(out)
}

pub fn module_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut out = Vec::new();
    let c = 16;
    let x = Tensor::randn(&[4, 4, c], 1.0, &mut rng);
    for (label, pooling, attention) in [
        ("pt_attention", PoolingMode::AvgQMaxK, AttentionKind::Pt),
        ("pt_attention avg/avg", PoolingMode::AvgAvg, AttentionKind::Pt),
        ("pt_attention no pooling", PoolingMode::None, AttentionKind::Pt),
        ("standard_self_attention", PoolingMode::AvgQMaxK, AttentionKind::Sa),
    ] {
        let cfg = ElgcaConfig { channels: c, branches: Branches::ALL, pooling, attention };
        let specs = elgca::param_specs("m", &cfg);
        let x_gl = Tensor::randn(&[4, 4, c / 2], 1.0, &mut rng);
        out.push(module_check(label, specs, vec![x_gl], seed, move |s, v| {
            let gc = elgca::global_context(s, "m", &cfg, v[0])?;
            s.graph.concat(&[gc.z.unwrap(), gc.a_att.unwrap()], 2)
        })?);
    }
    let cfg = ElgcaConfig::new(c);
    out.push(module_check("elgca_forward", elgca::param_specs("m", &cfg), vec![x.clone()], seed, move |s, v| {
        elgca::elgca_forward(s, "m", &cfg, v[0])
    })?);
    let block = BlockConfig { elgca: cfg, mlp_ratio: 2 };
    out.push(module_check("encoder_block", elgca::block_param_specs("b", &block), vec![x], seed, move |s, v| {
        elgca::encoder_block(s, "b", &block, v[0])
    })?);

    let model = ModelConfig {
        stage_depths: vec![1, 1],
        stage_channels: vec![8, 16],
        patch_strides: vec![2, 2],
        fusion_width: 8,
        decoder_width: 8,
        input_size: [8, 8, 3],
        ..Default::default()
    };
    let pre = Tensor::randn(&[4, 4, 8], 1.0, &mut rng);
    let post = Tensor::randn(&[4, 4, 8], 1.0, &mut rng);
    out.push(module_check("fuse", network::param_specs(&model), vec![pre, post], seed, |s, v| network::fuse(s, 0, v[0], v[1]))?);
    for decoder in [DecoderKind::Standard, DecoderKind::Lw] {
        let m = ModelConfig { decoder, ..model.clone() };
        let f1 = Tensor::randn(&[4, 4, 8], 1.0, &mut rng);
        let f2 = Tensor::randn(&[2, 2, 8], 1.0, &mut rng);
        let name = match decoder {
            DecoderKind::Standard => "decode_standard",
            DecoderKind::Lw => "decode_lw",
        };
        out.push(module_check(name, network::param_specs(&m), vec![f1, f2], seed, move |s, v| match decoder {
            DecoderKind::Standard => network::decode_standard(s, &m, v),
            DecoderKind::Lw => network::decode_lw(s, &m, v),
        })?);
    }
    Ok(out)
}

/// End-to-end check: cross-entropy of the full network on random images.
pub fn end_to_end(model: &ModelConfig, seed: u64, per_tensor: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let params = perturbed_params(&network::param_specs(model), seed)?;
    let pre = Tensor::<f64>::uniform(&model.input_size, 0.0, 1.0, &mut rng);
    let post = Tensor::<f64>::uniform(&model.input_size, 0.0, 1.0, &mut rng);
    let labels: Vec<u8> = (0..model.input_size[0] * model.input_size[1]).map(|_| rng.random_bool(0.3) as u8).collect();
    let (err, n) = check_param_gradients(&params, MODEL_STEP, per_tensor, seed, |s| {
        let a = s.graph.constant(pre.clone());
        let b = s.graph.constant(post.clone());
        let logits = network::forward(s, model, a, b)?;
        train::cross_entropy(&mut s.graph, logits, &labels)
    })?;
    let [h, w, _] = model.input_size;
    Ok(CheckOutcome::new("model", format!("forward + cross_entropy {h}x{w}"), err, n, MODEL_TOLERANCE))
}

/// Runs the whole suite: every operation, every module and the reduced
/// network end to end at 64×64.
pub fn full_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = op_suite(seed)?;
    out.extend(module_suite(seed)?);
    out.push(end_to_end(&ModelConfig::reduced(), seed, 1)?);
    Ok(out)
}

pub fn format_table(rows: &[CheckOutcome]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<6}  {:<width$}  {:>10}  {:>8}  {:>7}  result\n", "group", "check", "rel err", "tol", "entries");
    for r in rows {
        s.push_str(&format!(
            "{:<6}  {:<width$}  {:>10.3e}  {:>8.0e}  {:>7}  {}\n",
            r.group,
            r.name,
            r.rel_err,
            r.tolerance,
            r.entries,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
