//! Static cost accounting: parameters, multiply-accumulates and FLOPs per
//! layer, plus an activation-memory estimate, for any [`ModelConfig`].
//!
//! The walk below mirrors the forward schedule of [`crate::network::forward`]
//! but never touches parameter values. Counting conventions:
//!
//! * convolution: `H'·W'·k²·Cin·Cout`; depthwise: `H'·W'·k²·C`;
//!   transposed convolution: `H·W·k²·Cin·Cout` over input pixels; biases free
//! * matrix product `M×K · K×N`: `M·K·N`
//! * pooling: `k²` per output element; bilinear resize: 4 per output element
//! * softmax 3, layer norm 5, GELU 8, ReLU / add / scale 1 per element
//! * split, concat and reshape are free data movement
//!
//! FLOPs are always `2 × MACs`. Encoder rows accumulate both Siamese passes
//! (`calls == 2`) while their parameters are counted once.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::elgca::{AttentionKind, BlockConfig, ElgcaConfig, Pool, PoolingMode};
use crate::error::Result;
use crate::network::{DecoderKind, ModelConfig};

const LN_OPS: u64 = 5;
const GELU_OPS: u64 = 8;
const SOFTMAX_OPS: u64 = 3;
const BYTES_PER_VALUE: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    /// How many times the layer runs per forward pass.
    pub calls: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub input_size: [usize; 3],
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_flops: u64,
    /// Peak simultaneously-live activation bytes (f32) over the forward schedule.
    pub activation_bytes: u64,
}

impl CostReport {
    /// Summed MACs of the rows whose name satisfies `pred`.
    pub fn macs_matching(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.rows.iter().filter(|r| pred(&r.name)).map(|r| r.macs).sum()
    }

    pub fn decoder_macs(&self) -> u64 {
        self.macs_matching(|n| n.starts_with("decoder."))
    }

    /// One JSON object per layer, then one `"name": "total"` record.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        let total = serde_json::json!({
            "name": "total",
            "input_size": self.input_size,
            "params": self.total_params,
            "macs": self.total_macs,
            "flops": self.total_flops,
            "activation_bytes": self.activation_bytes,
        });
        out.push_str(&total.to_string());
        out.push('\n');
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}  {:>16}  {:>5}", "layer", "params", "MACs", "FLOPs", "calls");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}  {:>16}  {:>5}", r.name, r.params, r.macs, r.flops, r.calls);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>16}  {:>16}",
            "total", self.total_params, self.total_macs, self.total_flops
        );
        let [h, w, c] = self.input_size;
        let _ = writeln!(
            out,
            "input {h}x{w}x{c}: {:.3}M params, {:.1} MFLOPs, {:.1} MB peak activations",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e6,
            self.activation_bytes as f64 / (1024.0 * 1024.0)
        );
        out
    }
}

/// `(params, macs)` of a `k×k` convolution with bias producing `out_h × out_w`.
pub fn conv_cost(kernel: usize, cin: usize, cout: usize, out_h: usize, out_w: usize) -> (u64, u64) {
    let k2 = (kernel * kernel) as u64;
    let params = k2 * (cin * cout) as u64 + cout as u64;
    (params, (out_h * out_w) as u64 * k2 * (cin * cout) as u64)
}

pub fn depthwise_cost(kernel: usize, channels: usize, out_h: usize, out_w: usize) -> (u64, u64) {
    let k2 = (kernel * kernel) as u64;
    (k2 * channels as u64 + channels as u64, (out_h * out_w * channels) as u64 * k2)
}

fn pool_macs(pool: Pool, h: usize, w: usize, c: usize) -> u64 {
    let per = match pool {
        Pool::Avg => 9,
        Pool::Max => 4,
    };
    ((h / 2) * (w / 2) * c) as u64 * per
}

/// MACs of the attention core alone (pooling, scores, softmax, value
/// mixing) on `h × w` tokens for an ELGCA module of `channels` channels.
/// The input projection is excluded.
pub fn attention_macs(kind: AttentionKind, pooling: PoolingMode, h: usize, w: usize, channels: usize) -> u64 {
    let c = (channels / 4) as u64;
    let n = (h * w) as u64;
    match kind {
        AttentionKind::Pt => {
            let (qp, kp) = pooling.kinds();
            let mut macs = 0;
            let mut nq = n;
            let mut nk = n;
            if let Some(p) = qp {
                macs += pool_macs(p, h, w, c as usize);
                nq = ((h / 2) * (w / 2)) as u64;
            }
            if let Some(p) = kp {
                macs += pool_macs(p, h, w, c as usize);
                nk = ((h / 2) * (w / 2)) as u64;
            }
            debug_assert_eq!(nq, nk, "mixed pooled/unpooled token counts");
            macs + c * nk * c + SOFTMAX_OPS * c * c + n * c * c
        }
        AttentionKind::Sa => n * c * n + n * n + SOFTMAX_OPS * n * n + n * n * c,
    }
}

#[derive(Clone, Copy, Debug)]
struct Map {
    h: usize,
    w: usize,
    c: usize,
}

impl Map {
    fn numel(self) -> u64 {
        (self.h * self.w * self.c) as u64
    }

    fn with_c(self, c: usize) -> Map {
        Map { c, ..self }
    }
}

#[derive(Default)]
struct Tracer {
    rows: Vec<CostRow>,
    index: HashMap<String, usize>,
    live: u64,
    peak: u64,
}

impl Tracer {
    fn record(&mut self, name: String, params: u64, macs: u64) {
        if let Some(&i) = self.index.get(&name) {
            let r = &mut self.rows[i];
            r.macs += macs;
            r.flops = 2 * r.macs;
            r.calls += 1;
        } else {
            self.index.insert(name.clone(), self.rows.len());
            self.rows.push(CostRow { name, params, macs, flops: 2 * macs, calls: 1 });
        }
    }

    fn alloc(&mut self, m: Map) {
        self.live += m.numel();
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, maps: &[Map]) {
        for m in maps {
            self.live -= m.numel();
        }
    }

    /// Records a layer producing `out`; `dead` inputs are released after it.
    fn op(&mut self, name: String, (params, macs): (u64, u64), out: Map, dead: &[Map]) -> Map {
        self.record(name, params, macs);
        self.alloc(out);
        self.free(dead);
        out
    }

    fn conv(&mut self, name: String, k: usize, stride: usize, x: Map, cout: usize) -> Map {
        let pad = (k - 1) / 2;
        let oh = (x.h + 2 * pad - k) / stride + 1;
        let ow = (x.w + 2 * pad - k) / stride + 1;
        let cost = conv_cost(k, x.c, cout, oh, ow);
        self.op(name, cost, Map { h: oh, w: ow, c: cout }, &[x])
    }

    fn pointwise(&mut self, name: String, x: Map, cout: usize) -> Map {
        self.conv(name, 1, 1, x, cout)
    }

    fn elementwise(&mut self, name: String, per: u64, x: Map) -> Map {
        self.op(name, (0, per * x.numel()), x, &[x])
    }

    fn layer_norm(&mut self, name: String, x: Map, free_input: bool) -> Map {
        let dead: &[Map] = if free_input { &[x] } else { &[] };
        self.op(name, (2 * x.c as u64, LN_OPS * x.numel()), x, dead)
    }

    fn add(&mut self, name: String, a: Map, b: Map) -> Map {
        self.op(name, (0, a.numel()), a, &[a, b])
    }
}

fn trace_elgca(t: &mut Tracer, p: &str, cfg: &ElgcaConfig, x: Map) -> Map {
    let half = x.with_c(cfg.half());
    if cfg.branches.local {
        let cost = depthwise_cost(3, half.c, x.h, x.w);
        t.op(format!("{p}.local"), cost, half, &[]);
    }
    let width = cfg.proj_in_width();
    let proj = (width > 0).then(|| {
        let cost = conv_cost(1, half.c, width, x.h, x.w);
        t.op(format!("{p}.proj_in"), cost, x.with_c(width), &[])
    });
    t.free(&[x]);
    let quarter = x.with_c(cfg.quarter());
    if cfg.branches.attention {
        let macs = attention_macs(cfg.attention, cfg.pooling, x.h, x.w, cfg.channels);
        let n = x.h * x.w;
        let scratch = match cfg.attention {
            AttentionKind::Pt => Map { h: quarter.c, w: quarter.c, c: 2 },
            AttentionKind::Sa => Map { h: n, w: n, c: 2 },
        };
        t.alloc(scratch);
        t.op(format!("{p}.attention"), (0, macs), quarter, &[scratch]);
    }
    let cat = x.with_c(cfg.concat_width());
    t.alloc(cat);
    // Z is a view into the projection output, so it is released with it.
    let mut owned = Vec::new();
    if cfg.branches.local {
        owned.push(half);
    }
    if cfg.branches.attention {
        owned.push(quarter);
    }
    owned.extend(proj);
    t.free(&owned);
    let cost = conv_cost(1, cat.c, cfg.channels, x.h, x.w);
    t.op(format!("{p}.proj_out"), cost, x, &[cat])
}

fn trace_block(t: &mut Tracer, p: &str, cfg: &BlockConfig, x: Map) -> Map {
    let n1 = t.layer_norm(format!("{p}.norm1"), x, false);
    let ctx = trace_elgca(t, &format!("{p}.elgca"), &cfg.elgca, n1);
    let y = t.add(format!("{p}.residual1"), x, ctx);
    let n2 = t.layer_norm(format!("{p}.norm2"), y, false);
    let h = t.pointwise(format!("{p}.mlp.fc1"), n2, cfg.hidden());
    let cost = depthwise_cost(3, h.c, h.h, h.w);
    let h = t.op(format!("{p}.mlp.dw"), cost, h, &[h]);
    let h = t.elementwise(format!("{p}.mlp.gelu"), GELU_OPS, h);
    let m = t.pointwise(format!("{p}.mlp.fc2"), h, cfg.elgca.channels);
    t.add(format!("{p}.residual2"), y, m)
}

fn trace_encoder(t: &mut Tracer, cfg: &ModelConfig, image: Map) -> Vec<Map> {
    let mut feats = Vec::new();
    for (i, st) in cfg.stages().iter().enumerate() {
        let p = crate::network::stage_prefix(i);
        let cost = conv_cost(st.embed.kernel, st.in_channels, st.channels, st.height, st.width);
        let emb = Map { h: st.height, w: st.width, c: st.channels };
        // The previous stage output is retained for fusion; only the image dies.
        let dead: &[Map] = if i == 0 { &[image] } else { &[] };
        let mut x = t.op(format!("{p}.patch_embed"), cost, emb, dead);
        x = t.layer_norm(format!("{p}.patch_norm"), x, true);
        let block = cfg.block_config(st.channels);
        for j in 0..st.depth {
            x = trace_block(t, &format!("{p}.block{j}"), &block, x);
        }
        x = t.layer_norm(format!("{p}.norm"), x, true);
        feats.push(x);
    }
    feats
}

fn trace_decoder(t: &mut Tracer, cfg: &ModelConfig, fused: &[Map]) -> Map {
    let first = fused[0];
    let mut aligned = vec![first];
    for (i, &f) in fused.iter().enumerate().skip(1) {
        let out = Map { h: first.h, w: first.w, c: f.c };
        aligned.push(t.op(format!("decoder.align{}", i + 1), (0, 4 * out.numel()), out, &[f]));
    }
    let cat = first.with_c(aligned.iter().map(|m| m.c).sum());
    t.alloc(cat);
    t.free(&aligned);
    let d = cfg.decoder_width;
    let mut x = t.pointwise("decoder.linear_fuse".into(), cat, d);
    x = t.elementwise("decoder.linear_fuse.relu".into(), 1, x);
    for r in 1..=cfg.decoder_rounds() {
        match cfg.decoder {
            DecoderKind::Standard => {
                let cost = conv_cost(4, d, d, x.h, x.w);
                let up = Map { h: 2 * x.h, w: 2 * x.w, c: d };
                x = t.op(format!("decoder.up{r}"), cost, up, &[x]);
                let h = t.op(format!("decoder.res{r}.conv1"), conv_cost(3, d, d, x.h, x.w), x, &[]);
                let h = t.elementwise(format!("decoder.res{r}.relu"), 1, h);
                let h = t.conv(format!("decoder.res{r}.conv2"), 3, 1, h, d);
                x = t.add(format!("decoder.res{r}.add"), x, h);
            }
            DecoderKind::Lw => {
                let up = Map { h: 2 * x.h, w: 2 * x.w, c: d };
                x = t.op(format!("decoder.lw{r}.upsample"), (0, 4 * up.numel()), up, &[x]);
                x = t.op(format!("decoder.lw{r}.dw"), depthwise_cost(3, d, x.h, x.w), x, &[x]);
                x = t.pointwise(format!("decoder.lw{r}.pw"), x, d);
                x = t.elementwise(format!("decoder.lw{r}.relu"), 1, x);
            }
        }
    }
    t.pointwise("decoder.head".into(), x, cfg.num_classes)
}

/// Per-layer costs of one full forward pass at `input` (`[H, W, C]`).
pub fn cost_report(cfg: &ModelConfig, input: [usize; 3]) -> Result<CostReport> {
    let cfg = ModelConfig { input_size: input, ..cfg.clone() };
    cfg.validate()?;
    let mut t = Tracer::default();
    let image = Map { h: input[0], w: input[1], c: input[2] };
    t.alloc(image);
    t.alloc(image);
    let pre = trace_encoder(&mut t, &cfg, image);
    let post = trace_encoder(&mut t, &cfg, image);
    let f = cfg.fusion_width;
    let mut fused = Vec::new();
    for (i, (&a, &b)) in pre.iter().zip(&post).enumerate() {
        let p = format!("fusion.stage{}", i + 1);
        let pa = t.pointwise(format!("{p}.proj"), a, f);
        let pb = t.pointwise(format!("{p}.proj"), b, f);
        let cat = pa.with_c(2 * f);
        t.alloc(cat);
        t.free(&[pa, pb]);
        let y = t.pointwise(format!("{p}.fuse"), cat, f);
        fused.push(t.elementwise(format!("{p}.relu"), 1, y));
    }
    let logits = trace_decoder(&mut t, &cfg, &fused);
    debug_assert_eq!(t.live, logits.numel(), "activation bookkeeping leaked");
    let total_params = t.rows.iter().map(|r| r.params).sum();
    let total_macs = t.rows.iter().map(|r| r.macs).sum();
    Ok(CostReport {
        input_size: input,
        total_params,
        total_macs,
        total_flops: 2 * total_macs,
        activation_bytes: t.peak * BYTES_PER_VALUE,
        rows: t.rows,
    })
}

/// Exact number of learnable scalars; independent of the input size.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(cost_report(cfg, cfg.input_size)?.total_params)
}

pub fn count_macs(cfg: &ModelConfig, input: [usize; 3]) -> Result<CostReport> {
    cost_report(cfg, input)
}

pub fn estimate_activation_memory(cfg: &ModelConfig, input: [usize; 3]) -> Result<u64> {
    Ok(cost_report(cfg, input)?.activation_bytes)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}
