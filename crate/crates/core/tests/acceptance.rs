//! Acceptance run: one `[PASS]` / `[FAIL]` line per criterion. Exits
//! non-zero when any criterion fails.

mod common;

use std::time::Instant;

use common::*;
use elgcnet::analysis::{attention_macs, cost_report, count_params, log_log_slope};
use elgcnet::data::synth;
use elgcnet::elgca::{pooled_transpose_attention, token_self_attention, AttentionKind, Branches, PoolingMode};
use elgcnet::metrics::confusion;
use elgcnet::network::{self, checkpoint, DecoderKind, ModelConfig};
use elgcnet::params::{ModelParams, Session};
use elgcnet::tensor::kernels::Window;
use elgcnet::tensor::{Graph, Tensor, Var};
use elgcnet::train::{self, evaluate, train_loop, AugmentConfig, TrainConfig};
use rand::Rng;

const OP_GRAD_TOL: f64 = 1e-5;
const MODEL_GRAD_TOL: f64 = 1e-4;
// Below this the probed gradient is saturated away and the comparison is vacuous.
const MIN_GRAD_NORM: f64 = 1e-6;
const OP_FD_STEP: f64 = 1e-3;
const MODEL_FD_STEP: f64 = 1e-6;
const GRAD_BUDGET_S: f64 = 300.0;
const ORACLE_TOL: f64 = 1e-5;
const ORACLE_CASES: usize = 20;
const ORACLE_BUDGET_S: f64 = 120.0;
const SLOPE_TOL: f64 = 0.1;
const DECODER_RATIO_MIN: f64 = 2.0;
const REFERENCE_PARAMS: f64 = 10.57e6;
const REFERENCE_LW_PARAMS: f64 = 6.78e6;
const PARAM_BAND: f64 = 0.20;
const OVERFIT_IOU: f64 = 0.9;
const OVERFIT_LOSS: f64 = 0.1;
const INITIAL_LOSS_BAND: f64 = 0.2;
const OVERFIT_BUDGET_S: f64 = 600.0;
const F1_TOL: f64 = 1e-12;
const FOCAL_CE_TOL: f64 = 1e-6;

type Outcome = Result<(bool, String), String>;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("oracle equivalence", oracle_equivalence),
        ("attention complexity", attention_complexity),
        ("efficiency direction", efficiency_direction),
        ("parameter totals", parameter_totals),
        ("learning sanity", learning_sanity),
        ("ablation constructibility", ablation_constructibility),
        ("metric correctness", metric_correctness),
        ("determinism and persistence", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {} {}: {} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            name,
            detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let labels: Vec<u8> = (0..12).map(|i| ((i * 7) % 3 == 0) as u8).collect();
    let (l1, l2, l3) = (labels.clone(), labels.clone(), labels);
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("transpose", vec![vec![3, 4]], Box::new(|g, v| g.transpose(v[0]).unwrap())),
        ("conv2d", vec![vec![5, 6, 3], vec![3, 3, 3, 4], vec![4]], Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), Window::new(3, 1, 1)).unwrap())),
        ("conv2d_strided", vec![vec![7, 6, 2], vec![3, 3, 2, 3], vec![3]], Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), Window::new(3, 2, 1)).unwrap())),
        ("depthwise_conv2d", vec![vec![5, 6, 3], vec![3, 3, 3], vec![3]], Box::new(|g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), Window::new(3, 1, 1)).unwrap())),
        ("transpose_conv2d", vec![vec![3, 4, 2], vec![4, 4, 2, 3], vec![3]], Box::new(|g, v| g.transpose_conv2d(v[0], v[1], Some(v[2]), Window::new(4, 2, 1)).unwrap())),
        ("avg_pool", vec![vec![6, 6, 2]], Box::new(|g, v| g.avg_pool(v[0], Window::new(3, 2, 1)).unwrap())),
        ("max_pool", vec![vec![6, 4, 2]], Box::new(|g, v| g.max_pool(v[0], 2, 2).unwrap())),
        ("bilinear_resize", vec![vec![3, 4, 2]], Box::new(|g, v| g.bilinear_resize(v[0], 7, 5).unwrap())),
        ("upsample", vec![vec![3, 2, 2]], Box::new(|g, v| g.upsample(v[0], 2).unwrap())),
        ("softmax_rows", vec![vec![4, 5]], Box::new(|g, v| g.softmax(v[0], 1).unwrap())),
        ("softmax_cols", vec![vec![4, 5]], Box::new(|g, v| g.softmax(v[0], 0).unwrap())),
        ("layer_norm", vec![vec![3, 2, 5], vec![5], vec![5]], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap())),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("mul_scalar", vec![vec![3, 4]], Box::new(|g, v| g.mul_scalar(v[0], -1.7).unwrap())),
        ("relu", vec![vec![3, 4]], Box::new(|g, v| g.relu(v[0]).unwrap())),
        ("gelu", vec![vec![3, 4]], Box::new(|g, v| g.gelu(v[0]).unwrap())),
        ("sum", vec![vec![3, 4]], Box::new(|g, v| g.sum(v[0]).unwrap())),
        ("mean", vec![vec![3, 4]], Box::new(|g, v| g.mean(v[0]).unwrap())),
        ("reshape", vec![vec![3, 4]], Box::new(|g, v| g.reshape(v[0], &[2, 6]).unwrap())),
        ("concat", vec![vec![2, 3, 2], vec![2, 3, 3]], Box::new(|g, v| g.concat(&[v[0], v[1]], 2).unwrap())),
        ("slice", vec![vec![2, 3, 5]], Box::new(|g, v| g.slice(v[0], 2, 1, 3).unwrap())),
        (
            "split",
            vec![vec![2, 3, 4]],
            Box::new(|g, v| {
                let p = g.split(v[0], 2, 2).unwrap();
                let t = g.mul_scalar(p[1], 3.0).unwrap();
                g.add(p[0], t).unwrap()
            }),
        ),
        ("pt_attention", vec![vec![4, 4, 3]; 3], Box::new(|g, v| pooled_transpose_attention(g, v[0], v[1], v[2], PoolingMode::AvgQMaxK).unwrap())),
        ("self_attention", vec![vec![2, 3, 4]; 3], Box::new(|g, v| token_self_attention(g, v[0], v[1], v[2]).unwrap())),
        ("cross_entropy", vec![vec![3, 4, 2]], Box::new(move |g, v| train::cross_entropy(g, v[0], &l1).unwrap())),
        ("focal_loss", vec![vec![3, 4, 2]], Box::new(move |g, v| train::focal_loss(g, v[0], &l2, 2.0).unwrap())),
        ("miou_loss", vec![vec![3, 4, 2]], Box::new(move |g, v| train::miou_loss(g, v[0], &l3).unwrap())),
    ]
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let mut r = rng(11);
    let mut worst_op = (0.0f64, "");
    for (name, shapes, f) in op_cases() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| tensor(s, &rand_vec(s.iter().product(), &mut r))).collect();
        let err = fd_inputs(&inputs, OP_FD_STEP, 64, 5, f);
        if err > worst_op.0 || worst_op.1.is_empty() {
            worst_op = (err, name);
        }
    }
    let model = ModelConfig::reduced();
    let mut params: ModelParams<f64> = network::build(&model, 3).map_err(e)?;
    randomize(&mut params, 4);
    let [h, w, c] = model.input_size;
    let pre = tensor(&[h, w, c], &rand_vec(h * w * c, &mut r));
    let post = tensor(&[h, w, c], &rand_vec(h * w * c, &mut r));
    let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(0..2u8)).collect();
    let (e2e, e2e_norm) = fd_params(&params, MODEL_FD_STEP, 1, 9, |s: &mut Session<'_, f64>| {
        let a = s.graph.constant(pre.clone());
        let b = s.graph.constant(post.clone());
        let logits = network::forward(s, &model, a, b).unwrap();
        train::cross_entropy(&mut s.graph, logits, &labels).unwrap()
    });
    let secs = t.elapsed().as_secs_f64();
    let ok = worst_op.0 <= OP_GRAD_TOL && e2e <= MODEL_GRAD_TOL && e2e_norm >= MIN_GRAD_NORM && secs <= GRAD_BUDGET_S;
    Ok((
        ok,
        format!(
            "worst op {} rel err {:.2e} (tol {OP_GRAD_TOL:.0e}), end-to-end {:.2e} (tol {MODEL_GRAD_TOL:.0e}) at |grad| {:.2e} (min {MIN_GRAD_NORM:.0e}), {:.0}s of {GRAD_BUDGET_S:.0}s",
            worst_op.1, worst_op.0, e2e, e2e_norm, secs
        ),
    ))
}

fn run1(shape: &[usize], data: &[f64], f: impl Fn(&mut Graph<f64>, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(tensor(shape, data));
    let y = f(&mut g, x);
    g.value(y).data().to_vec()
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut r = rng(21);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, d: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(d),
        None => worst.push((name, d)),
    };
    for _ in 0..ORACLE_CASES {
        let h = 2 * r.random_range(3..6usize);
        let w = 2 * r.random_range(3..6usize);
        let c = r.random_range(1..5usize);
        let cout = r.random_range(1..4usize);
        let k = [1usize, 3, 5][r.random_range(0..3)];
        let s = r.random_range(1..3usize);
        let p = r.random_range(0..=k / 2);
        let x = rand_vec(h * w * c, &mut r);

        let wt = rand_vec(k * k * c * cout, &mut r);
        let b = rand_vec(cout, &mut r);
        let got = {
            let mut g = Graph::new();
            let xv = g.constant(tensor(&[h, w, c], &x));
            let wv = g.constant(tensor(&[k, k, c, cout], &wt));
            let bv = g.constant(tensor(&[cout], &b));
            let y = g.conv2d(xv, wv, Some(bv), Window::new(k, s, p)).map_err(e)?;
            g.value(y).data().to_vec()
        };
        note("conv2d", max_abs_diff(&got, &conv2d(&x, h, w, c, &wt, Some(&b), k, cout, s, p).0));

        let dw = rand_vec(k * k * c, &mut r);
        let db = rand_vec(c, &mut r);
        let got = {
            let mut g = Graph::new();
            let xv = g.constant(tensor(&[h, w, c], &x));
            let wv = g.constant(tensor(&[k, k, c], &dw));
            let bv = g.constant(tensor(&[c], &db));
            let y = g.depthwise_conv2d(xv, wv, Some(bv), Window::new(k, s, p)).map_err(e)?;
            g.value(y).data().to_vec()
        };
        note("depthwise_conv2d", max_abs_diff(&got, &depthwise(&x, h, w, c, &dw, &db, k, s, p)));

        let (tk, ts, tp) = [(4, 2, 1), (3, 1, 1), (3, 2, 1), (2, 2, 0)][r.random_range(0..4)];
        let tw = rand_vec(tk * tk * c * cout, &mut r);
        let got = {
            let mut g = Graph::new();
            let xv = g.constant(tensor(&[h, w, c], &x));
            let wv = g.constant(tensor(&[tk, tk, c, cout], &tw));
            let bv = g.constant(tensor(&[cout], &b));
            let y = g.transpose_conv2d(xv, wv, Some(bv), Window::new(tk, ts, tp)).map_err(e)?;
            g.value(y).data().to_vec()
        };
        note("transpose_conv2d", max_abs_diff(&got, &transpose_conv(&x, h, w, c, &tw, &b, tk, cout, ts, tp).0));

        note("avg_pool", max_abs_diff(&run1(&[h, w, c], &x, |g, v| g.avg_pool(v, Window::new(3, 2, 1)).unwrap()), &avg_pool(&x, h, w, c)));
        note("max_pool", max_abs_diff(&run1(&[h, w, c], &x, |g, v| g.max_pool(v, 2, 2).unwrap()), &max_pool(&x, h, w, c)));

        let (rows, cols) = (r.random_range(1..7usize), r.random_range(1..7usize));
        let m = rand_vec(rows * cols, &mut r).iter().map(|v| 4.0 * v).collect::<Vec<_>>();
        for axis in 0..2 {
            note("softmax", max_abs_diff(&run1(&[rows, cols], &m, |g, v| g.softmax(v, axis).unwrap()), &softmax_rows(&m, rows, cols, axis)));
        }

        let ac = 4 * r.random_range(1..4usize);
        let qkv: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(h * w * ac, &mut r)).collect();
        let attn = |f: &dyn Fn(&mut Graph<f64>, Var, Var, Var) -> Var| {
            let mut g = Graph::new();
            let v: Vec<Var> = qkv.iter().map(|d| g.constant(tensor(&[h, w, ac], d))).collect();
            let y = f(&mut g, v[0], v[1], v[2]);
            g.value(y).data().to_vec()
        };
        let pt = attn(&|g, q, k, v| pooled_transpose_attention(g, q, k, v, PoolingMode::AvgQMaxK).unwrap());
        note("pt_attention", max_abs_diff(&pt, &pt_attention(&qkv[0], &qkv[1], &qkv[2], h, w, ac)));
        let sa = attn(&|g, q, k, v| token_self_attention(g, q, k, v).unwrap());
        note("self_attention", max_abs_diff(&sa, &self_attention(&qkv[0], &qkv[1], &qkv[2], h * w, ac)));

        let logits = rand_vec(h * w * 2, &mut r).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
        let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(0..2u8)).collect();
        let gamma = r.random_range(0.0..3.0);
        let lib = |kind: u8| -> f64 {
            let mut g = Graph::new();
            let l = g.constant(tensor(&[h, w, 2], &logits));
            let y = match kind {
                0 => train::cross_entropy(&mut g, l, &labels),
                1 => train::focal_loss(&mut g, l, &labels, gamma),
                _ => train::miou_loss(&mut g, l, &labels),
            }
            .unwrap();
            g.value(y).item()
        };
        note("cross_entropy", (lib(0) - cross_entropy(&logits, &labels)).abs());
        note("focal_loss", (lib(1) - focal(&logits, &labels, gamma)).abs());
        note("miou_loss", (lib(2) - miou(&logits, &labels)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    let (name, max) = worst.iter().fold(("", 0.0f64), |a, &(n, d)| if d >= a.1 { (n, d) } else { a });
    let ok = worst.len() == 11 && max <= ORACLE_TOL && secs <= ORACLE_BUDGET_S;
    Ok((ok, format!("{} ops × {ORACLE_CASES} cases, worst {name} max abs diff {max:.2e} (tol {ORACLE_TOL:.0e})", worst.len())))
}

fn attention_complexity() -> Outcome {
    const CHANNELS: usize = 64;
    let sides = [16usize, 32, 64];
    let slope = |kind| {
        let pts: Vec<(f64, f64)> = sides
            .iter()
            .map(|&s| ((s * s) as f64, 2.0 * attention_macs(kind, PoolingMode::AvgQMaxK, s, s, CHANNELS) as f64))
            .collect();
        log_log_slope(&pts)
    };
    let (pt, sa) = (slope(AttentionKind::Pt), slope(AttentionKind::Sa));
    let ok = (pt - 1.0).abs() <= SLOPE_TOL && (sa - 2.0).abs() <= SLOPE_TOL;
    Ok((ok, format!("tokens 256/1024/4096, C={CHANNELS}: slope PT {pt:.3} (1±{SLOPE_TOL}), SA {sa:.3} (2±{SLOPE_TOL})")))
}

fn efficiency_direction() -> Outcome {
    let base = ModelConfig::default();
    let input = base.input_size;
    let std = cost_report(&base, input).map_err(e)?;
    let sa = cost_report(&ModelConfig { attention: AttentionKind::Sa, ..base.clone() }, input).map_err(e)?;
    let lw = cost_report(&ModelConfig { decoder: DecoderKind::Lw, ..base.clone() }, input).map_err(e)?;
    let ratio = std.decoder_macs() as f64 / lw.decoder_macs() as f64;
    let ok = std.total_flops < sa.total_flops && ratio >= DECODER_RATIO_MIN && lw.activation_bytes < std.activation_bytes;
    let g = |f: u64| f as f64 / 1e9;
    Ok((
        ok,
        format!(
            "GFLOPs PT {:.2} < SA {:.2}; decoder standard/LW {ratio:.2}× (min {DECODER_RATIO_MIN}×); activations LW {} MB < standard {} MB",
            g(std.total_flops),
            g(sa.total_flops),
            lw.activation_bytes >> 20,
            std.activation_bytes >> 20
        ),
    ))
}

fn random_config(r: &mut impl Rng) -> ModelConfig {
    let n = r.random_range(1..5usize);
    let strides: Vec<usize> = (0..n).map(|i| if i == 0 { [1, 2, 4][r.random_range(0..3)] } else { r.random_range(1..3) }).collect();
    let reduction: usize = strides.iter().product::<usize>() * 2;
    let side = reduction * r.random_range(1..3usize);
    ModelConfig {
        stage_depths: (0..n).map(|_| r.random_range(0..3)).collect(),
        stage_channels: (0..n).map(|_| 4 * r.random_range(1..5)).collect(),
        patch_strides: strides,
        mlp_ratio: r.random_range(1..5),
        fusion_width: r.random_range(1..12),
        decoder_width: r.random_range(1..12),
        decoder: if r.random_bool(0.5) { DecoderKind::Standard } else { DecoderKind::Lw },
        attention: if r.random_bool(0.5) { AttentionKind::Pt } else { AttentionKind::Sa },
        pooling: PoolingMode::ALL[r.random_range(0..5)],
        branches: loop {
            let b = Branches { local: r.random_bool(0.5), multi_channel: r.random_bool(0.5), attention: r.random_bool(0.5) };
            if b.any() {
                break b;
            }
        },
        input_size: [side, side, r.random_range(1..4)],
        num_classes: r.random_range(2..4),
    }
}

fn parameter_totals() -> Outcome {
    let mut r = rng(31);
    let mut mismatches = 0;
    for i in 0..50 {
        let cfg = random_config(&mut r);
        let counted = count_params(&cfg).map_err(e)?;
        let built = network::build::<f32>(&cfg, i).map_err(e)?.num_scalars() as u64;
        if counted != built || counted != hand_count(&cfg) {
            mismatches += 1;
        }
    }
    let tiny = ModelConfig { stage_depths: vec![1, 1], stage_channels: vec![8, 12], patch_strides: vec![2, 2], fusion_width: 6, decoder_width: 5, input_size: [16, 16, 3], ..Default::default() };
    let tiny_ok = count_params(&tiny).map_err(e)? == hand_count(&tiny);

    let full = cost_report(&ModelConfig::default(), ModelConfig::default().input_size).map_err(e)?;
    let lw_cfg = ModelConfig { decoder: DecoderKind::Lw, ..Default::default() };
    let lw = cost_report(&lw_cfg, lw_cfg.input_size).map_err(e)?;
    let dev = |got: u64, want: f64| (got as f64 - want) / want;
    let (d_full, d_lw) = (dev(full.total_params, REFERENCE_PARAMS), dev(lw.total_params, REFERENCE_LW_PARAMS));
    let split = |rep: &elgcnet::analysis::CostReport| {
        let part = |p: &str| rep.rows.iter().filter(|r| r.name.starts_with(p)).map(|r| r.params).sum::<u64>();
        format!("encoder {} / fusion {} / decoder {}", part("encoder."), part("fusion."), part("decoder."))
    };
    let ok = mismatches == 0 && tiny_ok && d_full.abs() <= PARAM_BAND && d_lw.abs() <= PARAM_BAND;
    Ok((
        ok,
        format!(
            "50 random configs, {mismatches} mismatches; tiny hand count {}; full {} ({:+.1}% of 10.57M: {}); LW {} ({:+.1}% of 6.78M: {}); band ±{:.0}%",
            if tiny_ok { "exact" } else { "differs" },
            full.total_params,
            100.0 * d_full,
            split(&full),
            lw.total_params,
            100.0 * d_lw,
            split(&lw),
            100.0 * PARAM_BAND
        ),
    ))
}

fn overfit_setup() -> elgcnet::Result<(ModelConfig, TrainConfig, Vec<elgcnet::data::ChangeSample>)> {
    let model = ModelConfig::reduced();
    let data = synth(&mut rng(7), 8, model.input_size[0])?;
    let cfg = TrainConfig { epochs: 200, batch_size: 8, augment: AugmentConfig::NONE, ..Default::default() };
    Ok((model, cfg, data))
}

fn learning_sanity() -> Outcome {
    let t = Instant::now();
    let (model, cfg, data) = overfit_setup().map_err(e)?;
    let out = train_loop(&model, &cfg, &data, |_| {}).map_err(e)?;
    let eval = evaluate(&model, &out.params, &data).map_err(e)?;
    let secs = t.elapsed().as_secs_f64();
    let initial = out.step_losses[0];
    let iou = eval.counts.iou();
    let ok = out.step_losses.len() == 200
        && iou >= OVERFIT_IOU
        && eval.loss <= OVERFIT_LOSS
        && (initial - std::f64::consts::LN_2).abs() <= INITIAL_LOSS_BAND
        && secs <= OVERFIT_BUDGET_S;
    Ok((
        ok,
        format!(
            "{} steps: initial loss {initial:.4} (ln2±{INITIAL_LOSS_BAND}), final CE {:.4} (≤{OVERFIT_LOSS}), train IoU {iou:.3} (≥{OVERFIT_IOU}), {secs:.0}s of {OVERFIT_BUDGET_S:.0}s",
            out.step_losses.len(),
            eval.loss
        ),
    ))
}

fn ablation_constructibility() -> Outcome {
    let base = ModelConfig::reduced();
    let mut r = rng(41);
    let [h, w, c] = base.input_size;
    let pre = Tensor::<f32>::from_f64(&[h, w, c], &rand_vec(h * w * c, &mut r)).map_err(e)?;
    let post = Tensor::<f32>::from_f64(&[h, w, c], &rand_vec(h * w * c, &mut r)).map_err(e)?;
    let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(0..2u8)).collect();
    let shape_check = |cfg: &ModelConfig| -> Result<bool, String> {
        let params: ModelParams<f32> = network::build(cfg, 1).map_err(e)?;
        let mut s = Session::new(&params);
        let a = s.graph.constant(pre.clone());
        let b = s.graph.constant(post.clone());
        let logits = network::forward(&mut s, cfg, a, b).map_err(e)?;
        let shape_ok = s.graph.shape(logits) == [h, w, cfg.num_classes];
        let l = train::cross_entropy(&mut s.graph, logits, &labels).map_err(e)?;
        let grads = s.graph.backward(l).map_err(e)?;
        let pg = s.param_grads(&grads);
        Ok(shape_ok && pg.len() == params.len() && params.iter().all(|(k, t)| pg.get(k).is_some_and(|g| g.shape() == t.shape())))
    };
    let combos = Branches::combinations();
    let full = count_params(&base).map_err(e)?;
    let mut failures = Vec::new();
    for b in &combos {
        let cfg = ModelConfig { branches: *b, ..base.clone() };
        if !shape_check(&cfg)? {
            failures.push(format!("{b:?} shapes"));
        }
        let n = count_params(&cfg).map_err(e)?;
        let enabled = [b.local, b.multi_channel, b.attention].iter().filter(|&&x| x).count();
        if enabled == 1 && n >= full {
            failures.push(format!("{b:?} not below full"));
        }
        // What the full network carries beyond this combination, counted independently.
        if full - n != hand_count(&base) - hand_count(&cfg) || n != hand_count(&cfg) {
            failures.push(format!("{b:?} difference"));
        }
    }
    for p in PoolingMode::ALL {
        let cfg = ModelConfig { pooling: p, ..base.clone() };
        if !shape_check(&cfg)? || count_params(&cfg).map_err(e)? != full {
            failures.push(format!("{p:?}"));
        }
    }
    Ok((
        failures.is_empty() && combos.len() == 7,
        if failures.is_empty() {
            format!("{} branch combinations and 5 pooling modes build, shapes check, orderings hold", combos.len())
        } else {
            format!("failing: {}", failures.join(", "))
        },
    ))
}

fn metric_correctness() -> Outcome {
    let mut r = rng(51);
    let mut exact = true;
    let mut worst_f1: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..400usize);
        let p_change = r.random_range(0.0..1.0);
        let pred: Vec<u8> = (0..n).map(|_| r.random_bool(p_change) as u8).collect();
        let gt: Vec<u8> = (0..n).map(|_| r.random_bool(p_change) as u8).collect();
        let c = confusion(&pred, &gt).map_err(e)?;
        let (tp, fp, fn_, tn) = tallies(&pred, &gt);
        let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        let iou = if tp + fp + fn_ == 0 { 1.0 } else { tpf / (tpf + fpf + fnf) };
        let f1 = if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tpf / (2.0 * tpf + fpf + fnf) };
        let oa = (tpf + tnf) / n as f64;
        exact &= (c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn) && c.iou() == iou && c.f1() == f1 && c.oa() == oa;
        worst_f1 = worst_f1.max((c.f1() - 2.0 * c.iou() / (1.0 + c.iou())).abs());
    }
    let mut worst_focal: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(1..50usize);
        let logits = rand_vec(2 * n, &mut r).iter().map(|v| 5.0 * v).collect::<Vec<_>>();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
        let mut g = Graph::new();
        let l = g.constant(tensor(&[1, n, 2], &logits));
        let ce = train::cross_entropy(&mut g, l, &labels).map_err(e)?;
        let fo = train::focal_loss(&mut g, l, &labels, 0.0).map_err(e)?;
        worst_focal = worst_focal.max((g.value(ce).item() - g.value(fo).item()).abs());
    }
    let ok = exact && worst_f1 <= F1_TOL && worst_focal <= FOCAL_CE_TOL;
    Ok((
        ok,
        format!(
            "100 mask pairs {}; |f1 − 2iou/(1+iou)| ≤ {worst_f1:.1e} (tol {F1_TOL:.0e}); |focal(γ=0) − CE| ≤ {worst_focal:.1e} (tol {FOCAL_CE_TOL:.0e})",
            if exact { "match brute force exactly" } else { "DIFFER from brute force" }
        ),
    ))
}

fn determinism() -> Outcome {
    let model = ModelConfig::reduced();
    let data = synth(&mut rng(61), 4, model.input_size[0]).map_err(e)?;
    let cfg = TrainConfig { epochs: 2, batch_size: 2, seed: 5, ..Default::default() };
    let a = train_loop(&model, &cfg, &data, |_| {}).map_err(e)?;
    let b = train_loop(&model, &cfg, &data, |_| {}).map_err(e)?;
    let bytes_a = checkpoint::to_bytes(&model, &a.params).map_err(e)?;
    let bytes_b = checkpoint::to_bytes(&model, &b.params).map_err(e)?;
    let same_runs = bytes_a == bytes_b;

    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("model.elgc");
    checkpoint::save(&path, &model, &a.params).map_err(e)?;
    let (loaded_cfg, loaded) = checkpoint::load(&path).map_err(e)?;
    let before = network::predict(&model, &a.params, &data[0].pre, &data[0].post).map_err(e)?;
    let after = network::predict(&loaded_cfg, &loaded, &data[0].pre, &data[0].post).map_err(e)?;
    let same_forward = loaded_cfg == model && before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((
        same_runs && same_forward,
        format!(
            "two seeded runs {} ({} bytes); save→load→forward {}",
            if same_runs { "bit-identical" } else { "DIFFER" },
            bytes_a.len(),
            if same_forward { "bit-identical" } else { "DIFFERS" }
        ),
    ))
}
