//! Naive reference implementations used as oracles by the integration and
//! acceptance tests. Everything here is written with explicit loops over
//! plain `Vec<f64>` and shares no code with the library kernels.

#![allow(dead_code)]

use elgcnet::params::{ModelParams, Session};
use elgcnet::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Direct cross-correlation; `w` is `k × k × cin × cout`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], bias: Option<&[f64]>, k: usize, cout: usize, s: usize, p: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[(iy as usize * w + ix as usize) * cin + ci] * wt[((ky * k + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Per-channel direct convolution; `w` is `k × k × c`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise(x: &[f64], h: usize, w: usize, c: usize, wt: &[f64], bias: &[f64], k: usize, s: usize, p: usize) -> Vec<f64> {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = bias[ch];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            acc += x[(iy as usize * w + ix as usize) * c + ch] * wt[(ky * k + kx) * c + ch];
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc;
            }
        }
    }
    out
}

/// Transposed convolution as "insert zeros, pad by `k−1−p`, convolve with the
/// spatially flipped kernel". `w` is `k × k × cin × cout`.
#[allow(clippy::too_many_arguments)]
pub fn transpose_conv(x: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], bias: &[f64], k: usize, cout: usize, s: usize, p: usize) -> (Vec<f64>, usize, usize) {
    let zh = (h - 1) * s + 1;
    let zw = (w - 1) * s + 1;
    let mut z = vec![0.0; zh * zw * cin];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..cin {
                z[((y * s) * zw + xx * s) * cin + c] = x[(y * w + xx) * cin + c];
            }
        }
    }
    let mut flipped = vec![0.0; wt.len()];
    for ky in 0..k {
        for kx in 0..k {
            for ci in 0..cin {
                for co in 0..cout {
                    flipped[((ky * k + kx) * cin + ci) * cout + co] = wt[(((k - 1 - ky) * k + (k - 1 - kx)) * cin + ci) * cout + co];
                }
            }
        }
    }
    conv2d(&z, zh, zw, cin, &flipped, Some(bias), k, cout, 1, k - 1 - p)
}

/// 3×3 / stride 2 / pad 1 average pooling with a fixed divisor of 9.
pub fn avg_pool(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let iy = (oy * 2 + dy) as isize - 1;
                        let ix = (ox * 2 + dx) as isize - 1;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            s += x[(iy as usize * w + ix as usize) * c + ch];
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = s / 9.0;
            }
        }
    }
    out
}

/// 2×2 / stride 2 max pooling.
pub fn max_pool(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[((oy * 2 + dy) * w + ox * 2 + dx) * c + ch]);
                    }
                }
                out[(oy * ow + ox) * c + ch] = m;
            }
        }
    }
    out
}

/// Half-pixel bilinear interpolation with edge clamping.
pub fn bilinear(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, w, ow);
            for ch in 0..c {
                let at = |y: usize, xx: usize| x[(y * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Softmax of each run of `len` values spaced `stride` apart.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if axis == 1 {
        for r in 0..rows {
            let den: f64 = (0..cols).map(|j| x[r * cols + j].exp()).sum();
            for j in 0..cols {
                out[r * cols + j] = x[r * cols + j].exp() / den;
            }
        }
    } else {
        for j in 0..cols {
            let den: f64 = (0..rows).map(|r| x[r * cols + j].exp()).sum();
            for r in 0..rows {
                out[r * cols + j] = x[r * cols + j].exp() / den;
            }
        }
    }
    out
}

pub fn layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (px, o) in x.chunks(c).zip(out.chunks_mut(c)) {
        let mean = px.iter().sum::<f64>() / c as f64;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for i in 0..c {
            o[i] = (px[i] - mean) / (var + eps).sqrt() * gamma[i] + beta[i];
        }
    }
    out
}

/// Pooled transpose attention on `n = h·w` tokens of `c` channels:
/// `V · softmax_over_rows(avgpool(Q)ᵀ... )` computed entry by entry.
pub fn pt_attention(q: &[f64], k: &[f64], v: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let qp = avg_pool(q, h, w, c);
    let kp = max_pool(k, h, w, c);
    let np = (h / 2) * (w / 2);
    // logits[i][j] = Σ_t K̄[t][i] · Q̄[t][j]
    let mut logits = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..np {
                s += kp[t * c + i] * qp[t * c + j];
            }
            logits[i * c + j] = s;
        }
    }
    let m = softmax_rows(&logits, c, c, 0);
    matmul(v, &m, h * w, c, c)
}

/// Token attention `softmax_rows(Q Kᵀ / √c) V`.
pub fn self_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..c {
                acc += q[i * c + t] * k[j * c + t];
            }
            s[i * n + j] = acc / (c as f64).sqrt();
        }
    }
    let a = softmax_rows(&s, n, n, 1);
    matmul(&a, v, n, n, c)
}

fn probs2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    (e0 / (e0 + e1), e1 / (e0 + e1))
}

/// Two-class pixel losses on interleaved `[l0, l1]` logits.
pub fn cross_entropy(logits: &[f64], labels: &[u8]) -> f64 {
    focal(logits, labels, 0.0)
}

pub fn focal(logits: &[f64], labels: &[u8], gamma: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (p0, p1) = probs2(logits[2 * i], logits[2 * i + 1]);
        let pt = if y == 1 { p1 } else { p0 }.max(1e-7);
        total += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    total / labels.len() as f64
}

pub fn miou(logits: &[f64], labels: &[u8]) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let (_, p1) = probs2(logits[2 * i], logits[2 * i + 1]);
        inter += p1 * y as f64;
        sp += p1;
        sy += y as f64;
    }
    1.0 - (inter + 1.0) / (sp + sy - inter + 1.0)
}

/// Brute-force change-class tallies `(tp, fp, fn, tn)`.
pub fn tallies(pred: &[u8], gt: &[u8]) -> (u64, u64, u64, u64) {
    let mut t = (0, 0, 0, 0);
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            t.0 += 1;
        } else if pred[i] == 1 {
            t.1 += 1;
        } else if gt[i] == 1 {
            t.2 += 1;
        } else {
            t.3 += 1;
        }
    }
    t
}

/// Norm-wise relative error with an absolute fallback for vanishing norms.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nn);
    if den < 1e-12 {
        d
    } else {
        d / den
    }
}

/// Central-difference check of `f`'s gradient w.r.t. every input. Outputs
/// that are not scalar are reduced with a fixed random weighting. Returns the
/// worst per-input relative error.
pub fn fd_inputs(inputs: &[Tensor<f64>], h: f64, max_entries: usize, seed: u64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let reduce = |g: &mut Graph<f64>, y: Var| -> Var {
        if g.shape(y).is_empty() {
            return y;
        }
        let mut r = rng(seed ^ 77);
        let n: usize = g.shape(y).iter().product();
        let w = g.constant(Tensor::from_f64(g.shape(y), &rand_vec(n, &mut r)).unwrap());
        let p = g.mul(y, w).unwrap();
        g.sum(p).unwrap()
    };
    let value = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vs);
        let l = reduce(&mut g, y);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vs);
    let l = reduce(&mut g, y);
    let grads = g.backward(l).unwrap();

    let mut r = rng(seed);
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, v) in vs.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic_all: Vec<f64> = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]);
        let idx: Vec<usize> = if n <= max_entries { (0..n).collect() } else { (0..max_entries).map(|_| r.random_range(0..n)).collect() };
        let (mut an, mut nu) = (Vec::new(), Vec::new());
        for j in idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = value(&work);
            work[i].data_mut()[j] = orig - h;
            let fm = value(&work);
            work[i].data_mut()[j] = orig;
            nu.push((fp - fm) / (2.0 * h));
            an.push(analytic_all[j]);
        }
        worst = worst.max(rel_err(&an, &nu));
    }
    worst
}

/// Central differences over `per_tensor` random entries of every parameter;
/// one norm-wise relative error over all probed entries.
pub fn fd_params(params: &ModelParams<f64>, h: f64, per_tensor: usize, seed: u64, f: impl Fn(&mut Session<'_, f64>) -> Var) -> (f64, f64) {
    let value = |p: &ModelParams<f64>| -> f64 {
        let mut s = Session::new(p);
        let l = f(&mut s);
        s.graph.value(l).item()
    };
    let mut s = Session::new(params);
    let l = f(&mut s);
    let grads = s.graph.backward(l).unwrap();
    let analytic = s.param_grads(&grads);
    let mut r = rng(seed);
    let mut work = params.clone();
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        for _ in 0..per_tensor.min(n) {
            let j = r.random_range(0..n);
            let orig = work.get(&name).unwrap().data()[j];
            work.get_mut(&name).unwrap().data_mut()[j] = orig + h;
            let fp = value(&work);
            work.get_mut(&name).unwrap().data_mut()[j] = orig - h;
            let fm = value(&work);
            work.get_mut(&name).unwrap().data_mut()[j] = orig;
            nu.push((fp - fm) / (2.0 * h));
            an.push(analytic[&name].data()[j]);
        }
    }
    let norm = an.iter().map(|v| v * v).sum::<f64>().sqrt();
    (rel_err(&an, &nu), norm)
}

/// Replaces every parameter with a random value so zero biases and unit
/// norm scales do not mask errors. Weights get unit variance per fan-in so
/// deep stacks keep their logits in a range where softmax is not saturated.
pub fn randomize(params: &mut ModelParams<f64>, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in params.iter_mut() {
        let shape = t.shape().to_vec();
        let (base, scale) = match shape.len() {
            1 if name.ends_with(".gamma") => (1.0, 0.3),
            1 => (0.0, 0.3),
            3 => (0.0, (3.0 / (shape[0] * shape[1]) as f64).sqrt()),
            _ => (0.0, (3.0 * shape[shape.len() - 1] as f64 / t.numel() as f64).sqrt()),
        };
        for v in t.data_mut() {
            *v = base + scale * r.random_range(-1.0..1.0);
        }
    }
}

/// Hand count of every learnable scalar of the network, written from the
/// architecture description rather than from the library's parameter list.
pub fn hand_count(cfg: &elgcnet::network::ModelConfig) -> u64 {
    let conv = |k: u64, cin: u64, cout: u64| k * k * cin * cout + cout;
    let norm = |c: u64| 2 * c;
    let mut total = 0;
    let mut cin = cfg.input_size[2] as u64;
    for i in 0..cfg.stage_depths.len() {
        let c = cfg.stage_channels[i] as u64;
        let s = cfg.patch_strides[i] as u64;
        total += conv(2 * s - 1, cin, c) + norm(c) + norm(c);
        for _ in 0..cfg.stage_depths[i] {
            let b = cfg.branches;
            let (half, quarter) = (c / 2, c / 4);
            let pin = if b.multi_channel { quarter } else { 0 } + if b.attention { 3 * quarter } else { 0 };
            let cat = if b.local { half } else { 0 } + if b.multi_channel { quarter } else { 0 } + if b.attention { quarter } else { 0 };
            let mut elgca = conv(1, cat, c);
            if pin > 0 {
                elgca += conv(1, half, pin);
            }
            if b.local {
                elgca += 9 * half + half;
            }
            let hid = c * cfg.mlp_ratio as u64;
            let mlp = conv(1, c, hid) + (9 * hid + hid) + conv(1, hid, c);
            total += norm(c) + elgca + norm(c) + mlp;
        }
        cin = c;
    }
    let f = cfg.fusion_width as u64;
    for &c in &cfg.stage_channels {
        total += conv(1, c as u64, f) + conv(1, 2 * f, f);
    }
    let d = cfg.decoder_width as u64;
    total += conv(1, cfg.stage_channels.len() as u64 * f, d);
    let rounds = (cfg.patch_strides[0] as f64).log2().round() as u64;
    for _ in 0..rounds {
        total += match cfg.decoder {
            elgcnet::network::DecoderKind::Standard => conv(4, d, d) + 2 * conv(3, d, d),
            elgcnet::network::DecoderKind::Lw => (9 * d + d) + conv(1, d, d),
        };
    }
    total + conv(1, d, cfg.num_classes as u64)
}
