//! Losses, AdamW with linear learning-rate decay, geometric augmentation and
//! the training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ChangeSample, Mask};
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::network::{self, ModelConfig};
use crate::params::{ModelParams, Session};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};

/// Probabilities are clamped to at least this before taking logs.
pub const LOG_EPS: f64 = 1e-7;
/// Smoothing term of the soft IoU.
pub const IOU_SMOOTH: f64 = 1.0;
/// Index of the "change" class in the logits.
pub const CHANGE_CLASS: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Ce,
    Focal,
    Miou,
}

/// Per-pixel class probabilities of `H × W × K` logits, in f64.
fn pixel_probs<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, k) = logits.hwc("loss")?;
    let n = h * w;
    if labels.len() != n {
        return Err(Error::dim("loss", format!("{} labels for {h}×{w} logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k) {
        return Err(Error::Usage(format!("label value {bad} out of range for {k} classes")));
    }
    let x64: Tensor<f64> = logits.cast();
    let p = kernels::softmax(&x64, 2)?;
    Ok((n, k, p.into_data()))
}

fn record_loss<T: Scalar>(g: &mut Graph<T>, op: &'static str, logits: Var, value: f64, dlogits: Vec<f64>) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let d: Tensor<T> = Tensor::from_f64(&shape, &dlogits)?;
    g.record(
        op,
        Tensor::scalar(T::of(value)),
        &[logits],
        Box::new(move |gr, _, _| {
            let s = gr.item();
            vec![Some(d.map(|v| v * s))]
        }),
    )
}

/// Mean over pixels of `−ln max(p_y, ε)` after a softmax over channels.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    focal_loss_impl(g, "cross_entropy", logits, labels, 0.0)
}

/// Mean over pixels of `−(1 − p_t)^γ ln p_t`; `γ = 0` is cross-entropy.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8], gamma: f64) -> Result<Var> {
    focal_loss_impl(g, "focal_loss", logits, labels, gamma)
}

fn focal_loss_impl<T: Scalar>(g: &mut Graph<T>, op: &'static str, logits: Var, labels: &[u8], gamma: f64) -> Result<Var> {
    let (n, k, p) = pixel_probs(g.value(logits), labels)?;
    let mut total = 0.0;
    let mut d = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        let px = &p[i * k..(i + 1) * k];
        let py = px[y as usize];
        let pt = py.max(LOG_EPS);
        let q = 1.0 - pt;
        let weight = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        total -= weight * pt.ln();
        if py <= LOG_EPS {
            continue;
        }
        // d/dp_t of −(1−p)^γ ln p
        let mut dpt = -weight / pt;
        if gamma != 0.0 && q > 0.0 {
            dpt += gamma * q.powf(gamma - 1.0) * pt.ln();
        }
        for j in 0..k {
            let delta = if j == y as usize { 1.0 } else { 0.0 };
            d[i * k + j] = dpt * py * (delta - px[j]) / n as f64;
        }
    }
    record_loss(g, op, logits, total / n as f64, d)
}

/// `1 − (Σ p·y + ε) / (Σ p + Σ y − Σ p·y + ε)` on the change-class probability.
pub fn miou_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let (n, k, p) = pixel_probs(g.value(logits), labels)?;
    if k <= CHANGE_CLASS {
        return Err(Error::dim("miou_loss", format!("need at least {} classes, got {k}", CHANGE_CLASS + 1)));
    }
    let pc: Vec<f64> = (0..n).map(|i| p[i * k + CHANGE_CLASS]).collect();
    let y: Vec<f64> = labels.iter().map(|&v| if v as usize == CHANGE_CLASS { 1.0 } else { 0.0 }).collect();
    let inter: f64 = pc.iter().zip(&y).map(|(a, b)| a * b).sum();
    let union = pc.iter().sum::<f64>() + y.iter().sum::<f64>() - inter + IOU_SMOOTH;
    let soft = (inter + IOU_SMOOTH) / union;
    let mut d = vec![0.0; n * k];
    for i in 0..n {
        let dsoft = (y[i] * union - (inter + IOU_SMOOTH) * (1.0 - y[i])) / (union * union);
        let px = &p[i * k..(i + 1) * k];
        for j in 0..k {
            let delta = if j == CHANGE_CLASS { 1.0 } else { 0.0 };
            d[i * k + j] = -dsoft * pc[i] * (delta - px[j]);
        }
    }
    record_loss(g, "miou_loss", logits, 1.0 - soft, d)
}

pub fn loss<T: Scalar>(g: &mut Graph<T>, kind: LossKind, logits: Var, labels: &[u8], focal_gamma: f64) -> Result<Var> {
    match kind {
        LossKind::Ce => cross_entropy(g, logits, labels),
        LossKind::Focal => focal_loss(g, logits, labels, focal_gamma),
        LossKind::Miou => miou_loss(g, logits, labels),
    }
}

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        OptimizerState { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected AdamW update at learning rate `lr`.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    hp: &AdamW,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::Usage(format!("no gradient for parameter `{name}`")))?;
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) if m.shape() == p.shape() && g.shape() == p.shape() => (m, v),
            _ => return Err(Error::Usage(format!("optimizer state does not match parameter `{name}`"))),
        };
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gi = gi.f64();
            let mut wi = w.f64();
            wi -= lr * hp.weight_decay * wi;
            let mn = hp.beta1 * mi.f64() + (1.0 - hp.beta1) * gi;
            let vn = hp.beta2 * vi.f64() + (1.0 - hp.beta2) * gi * gi;
            wi -= lr * (mn / bc1) / ((vn / bc2).sqrt() + hp.eps);
            *mi = T::of(mn);
            *vi = T::of(vn);
            *w = T::of(wi);
        }
    }
    Ok(())
}

/// Linear decay to zero: `lr · (1 − epoch / epochs)` for `epoch` in `0..epochs`.
pub fn scheduled_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * (1.0 - epoch as f64 / epochs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub scale_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { hflip: true, vflip: true, scale_crop: true }
    }
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig { hflip: false, vflip: false, scale_crop: false };
}

/// Largest zoom factor of the scale crop.
pub const MAX_CROP_SCALE: f64 = 1.5;

fn remap_image(t: &Tensor<f32>, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let (h, w, c) = t.hwc("augment").expect("sample images are H×W×C");
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = f(y, x);
            out.extend_from_slice(&t.data()[(sy * w + sx) * c..][..c]);
        }
    }
    Tensor::new(&[h, w, c], out).expect("same shape")
}

fn remap_mask(m: &Mask, f: impl Fn(usize, usize) -> (usize, usize)) -> Mask {
    let mut out = Mask::zeros(m.height, m.width);
    for y in 0..m.height {
        for x in 0..m.width {
            let (sy, sx) = f(y, x);
            out.data[y * m.width + x] = m.get(sy, sx);
        }
    }
    out
}

fn remap(s: &ChangeSample, f: impl Fn(usize, usize) -> (usize, usize) + Copy) -> ChangeSample {
    ChangeSample { pre: remap_image(&s.pre, f), post: remap_image(&s.post, f), label: remap_mask(&s.label, f) }
}

pub fn hflip(s: &ChangeSample) -> ChangeSample {
    let w = s.label.width;
    remap(s, |y, x| (y, w - 1 - x))
}

pub fn vflip(s: &ChangeSample) -> ChangeSample {
    let h = s.label.height;
    remap(s, |y, x| (h - 1 - y, x))
}

/// Crops a `⌈H/scale⌉ × ⌈W/scale⌉` window at `(top, left)` and resizes it
/// back to `H × W`: bilinear for images, nearest neighbour for the label.
pub fn scale_crop(s: &ChangeSample, scale: f64, top: usize, left: usize) -> Result<ChangeSample> {
    let (h, w) = s.size();
    let ch = ((h as f64 / scale).ceil() as usize).clamp(1, h);
    let cw = ((w as f64 / scale).ceil() as usize).clamp(1, w);
    if top + ch > h || left + cw > w {
        return Err(Error::Usage(format!("crop {ch}×{cw} at ({top}, {left}) leaves the {h}×{w} tile")));
    }
    let crop = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let c = t.shape()[2];
        let mut out = Vec::with_capacity(ch * cw * c);
        for y in top..top + ch {
            out.extend_from_slice(&t.data()[(y * w + left) * c..][..cw * c]);
        }
        kernels::bilinear_resize(&Tensor::new(&[ch, cw, c], out)?, h, w)
    };
    let near = |o: usize, n_in: usize, n_out: usize| ((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize;
    let mut label = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let sy = top + near(y, ch, h).min(ch - 1);
            let sx = left + near(x, cw, w).min(cw - 1);
            label.data[y * w + x] = s.label.get(sy, sx);
        }
    }
    Ok(ChangeSample { pre: crop(&s.pre)?, post: crop(&s.post)?, label })
}

/// Applies each enabled transform with probability ½, identically to the
/// pre image, post image and label.
pub fn augment<R: Rng + ?Sized>(s: &ChangeSample, cfg: &AugmentConfig, rng: &mut R) -> Result<ChangeSample> {
    let mut out = s.clone();
    if cfg.hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if cfg.vflip && rng.random_bool(0.5) {
        out = vflip(&out);
    }
    if cfg.scale_crop && rng.random_bool(0.5) {
        let scale = rng.random_range(1.0..MAX_CROP_SCALE);
        let (h, w) = out.size();
        let ch = ((h as f64 / scale).ceil() as usize).clamp(1, h);
        let cw = ((w as f64 / scale).ceil() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        out = scale_crop(&out, scale, top, left)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub augment: AugmentConfig,
    /// Check every recorded value for NaN/Inf (slower).
    pub check_finite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3.1e-4,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            loss: LossKind::Ce,
            focal_gamma: 2.0,
            augment: AugmentConfig::default(),
            check_finite: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("betas must lie in [0, 1), adam_eps must be positive, weight_decay non-negative".into());
        }
        if self.focal_gamma < 0.0 {
            return bad("focal_gamma must be non-negative".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { beta1: self.betas[0], beta2: self.betas[1], eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    pub iou: f64,
    pub f1: f64,
    pub oa: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<EpochRecord>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

/// Binary change map from `H × W × K` logits.
pub fn logits_to_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Mask> {
    let (h, w, _) = logits.hwc("argmax")?;
    Ok(Mask { height: h, width: w, data: network::argmax_map(logits) })
}

struct SampleResult {
    loss: f64,
    grads: BTreeMap<String, Tensor<f32>>,
    counts: ConfusionCounts,
}

fn sample_step(
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &ModelParams<f32>,
    sample: &ChangeSample,
    check_finite: bool,
) -> Result<SampleResult> {
    let mut s = Session::with_graph(params, Graph::new().with_finite_checks(check_finite));
    let pre = s.graph.constant(sample.pre.clone());
    let post = s.graph.constant(sample.post.clone());
    let logits = network::forward(&mut s, model, pre, post)?;
    let l = s.scoped("loss", |s| loss(&mut s.graph, cfg.loss, logits, &sample.label.data, cfg.focal_gamma))?;
    let value = s.graph.value(l).item().f64();
    if !value.is_finite() {
        if !check_finite {
            // Replay with per-op checks to name the first offending layer.
            sample_step(model, cfg, params, sample, true)?;
        }
        return Err(Error::NonFinite { op: "loss", scope: "loss".into() });
    }
    let counts = crate::metrics::confusion(&logits_to_mask(s.graph.value(logits))?.data, &sample.label.data)?;
    let grads = s.graph.backward(l)?;
    Ok(SampleResult { loss: value, grads: s.param_grads(&grads), counts })
}

/// Trains from a fresh `build(model, cfg.seed)` on `data`, calling
/// `on_epoch` after every epoch. Fully determined by the seed.
pub fn train_loop(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[ChangeSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Ingestion("training set is empty".into()));
    }
    let mut params: ModelParams<f32> = network::build(model, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let hp = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut counts = ConfusionCounts::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<BTreeMap<String, Tensor<f32>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let sample = if cfg.augment == AugmentConfig::NONE {
                    data[i].clone()
                } else {
                    augment(&data[i], &cfg.augment, &mut rng)?
                };
                let r = sample_step(model, cfg, &params, &sample, cfg.check_finite)?;
                batch_loss += r.loss;
                counts = counts + r.counts;
                match acc.as_mut() {
                    None => acc = Some(r.grads),
                    Some(a) => {
                        for (k, g) in r.grads {
                            a.get_mut(&k).expect("same parameter set").add_assign(&g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            let mut grads = acc.expect("non-empty batch");
            for (name, g) in grads.iter_mut() {
                *g = g.map(|v| v * inv);
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward", scope: name.clone() });
                }
            }
            adamw_step(&mut params, &grads, &mut state, &hp, lr)?;
            loss_sum += batch_loss;
            step_losses.push(batch_loss / batch.len() as f64);
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            iou: counts.iou(),
            f1: counts.f1(),
            oa: counts.oa(),
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { params, log, step_losses })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub counts: ConfusionCounts,
    /// Mean per-sample cross-entropy.
    pub loss: f64,
}

/// Forward-only evaluation with summed confusion counts.
pub fn evaluate(model: &ModelConfig, params: &ModelParams<f32>, data: &[ChangeSample]) -> Result<EvalResult> {
    let mut counts = ConfusionCounts::default();
    let mut total = 0.0;
    for sample in data {
        let mut s = Session::new(params);
        let pre = s.graph.constant(sample.pre.clone());
        let post = s.graph.constant(sample.post.clone());
        let logits = network::forward(&mut s, model, pre, post)?;
        let l = cross_entropy(&mut s.graph, logits, &sample.label.data)?;
        total += s.graph.value(l).item().f64();
        counts.accumulate(&logits_to_mask(s.graph.value(logits))?.data, &sample.label.data)?;
    }
    Ok(EvalResult { counts, loss: if data.is_empty() { 0.0 } else { total / data.len() as f64 } })
}
