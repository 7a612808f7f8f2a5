//! The Siamese change-detection network: a weight-shared four-stage
//! encoder, per-stage fusion of the two streams, and one of two decoders.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::elgca::{self, AttentionKind, BlockConfig, Branches, ElgcaConfig, PoolingMode};
use crate::error::{Error, Result};
use crate::params::{conv_specs, depthwise_specs, norm_specs, ModelParams, ParamSpec, Session};
use crate::tensor::kernels::Window;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Transposed-convolution upsampling followed by residual 3×3 blocks.
    #[default]
    Standard,
    /// Bilinear upsampling followed by depthwise + pointwise convolutions.
    Lw,
}

/// Every hyperparameter needed to build a network deterministically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub patch_strides: Vec<usize>,
    pub mlp_ratio: usize,
    pub fusion_width: usize,
    pub decoder_width: usize,
    pub decoder: DecoderKind,
    pub attention: AttentionKind,
    pub pooling: PoolingMode,
    pub branches: Branches,
    /// `[H, W, C]` of each input image.
    pub input_size: [usize; 3],
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_depths: vec![3, 3, 4, 3],
            stage_channels: vec![64, 96, 128, 256],
            patch_strides: vec![4, 2, 2, 2],
            mlp_ratio: 4,
            fusion_width: 512,
            decoder_width: 256,
            decoder: DecoderKind::Standard,
            attention: AttentionKind::Pt,
            pooling: PoolingMode::AvgQMaxK,
            branches: Branches::ALL,
            input_size: [256, 256, 3],
            num_classes: 2,
        }
    }
}

/// Geometry of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed: Window,
    pub in_channels: usize,
}

impl ModelConfig {
    /// Small network used for desk-scale training and gradient checks.
    pub fn reduced() -> Self {
        ModelConfig {
            stage_depths: vec![1, 1, 1, 1],
            stage_channels: vec![16, 24, 32, 64],
            fusion_width: 128,
            decoder_width: 128,
            input_size: [64, 64, 3],
            ..Default::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_depths.len();
        if n == 0 || self.stage_channels.len() != n || self.patch_strides.len() != n {
            return Err(Error::Config(format!(
                "stage_depths, stage_channels and patch_strides must have the same non-zero length ({}, {}, {})",
                n,
                self.stage_channels.len(),
                self.patch_strides.len()
            )));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return Err(Error::Config(format!("stage channels must be positive multiples of 4, got {c}")));
        }
        if self.patch_strides.contains(&0) {
            return Err(Error::Config("patch strides must be positive".into()));
        }
        if !self.patch_strides[0].is_power_of_two() {
            return Err(Error::Config(format!(
                "first patch stride must be a power of two, got {}",
                self.patch_strides[0]
            )));
        }
        if self.mlp_ratio == 0 || self.fusion_width == 0 || self.decoder_width == 0 || self.num_classes < 2 {
            return Err(Error::Config("mlp_ratio, widths must be positive and num_classes at least 2".into()));
        }
        if !self.branches.any() {
            return Err(Error::Config("at least one ELGCA branch must be enabled".into()));
        }
        let [h, w, c] = self.input_size;
        let reduction: usize = self.patch_strides.iter().product::<usize>() * 2;
        if c == 0 || h == 0 || w == 0 || h % reduction != 0 || w % reduction != 0 {
            return Err(Error::Config(format!(
                "input {h}×{w}×{c} must have H and W divisible by {reduction} (product of strides × 2)"
            )));
        }
        Ok(())
    }

    /// Stride-arithmetic table of every stage.
    pub fn stages(&self) -> Vec<StageShape> {
        let [mut h, mut w, mut cin] = self.input_size;
        let mut out = Vec::with_capacity(self.num_stages());
        for i in 0..self.num_stages() {
            let s = self.patch_strides[i];
            h /= s;
            w /= s;
            let c = self.stage_channels[i];
            out.push(StageShape {
                height: h,
                width: w,
                channels: c,
                depth: self.stage_depths[i],
                embed: Window::new(2 * s - 1, s, s - 1),
                in_channels: cin,
            });
            cin = c;
        }
        out
    }

    pub fn block_config(&self, channels: usize) -> BlockConfig {
        BlockConfig {
            elgca: ElgcaConfig { channels, branches: self.branches, pooling: self.pooling, attention: self.attention },
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Number of 2× upsampling rounds in the decoder.
    pub fn decoder_rounds(&self) -> usize {
        self.patch_strides[0].trailing_zeros() as usize
    }
}

pub const DECODER_UP: Window = Window::new(4, 2, 1);
const POINTWISE: Window = Window::new(1, 1, 0);
const CONV3: Window = Window::new(3, 1, 1);

pub fn stage_prefix(i: usize) -> String {
    format!("encoder.stage{}", i + 1)
}

/// Every learnable tensor of the network, in build order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for (i, st) in cfg.stages().iter().enumerate() {
        let p = stage_prefix(i);
        specs.extend(conv_specs(&format!("{p}.patch_embed"), st.embed.kernel, st.in_channels, st.channels));
        specs.extend(norm_specs(&format!("{p}.patch_norm"), st.channels));
        let block = cfg.block_config(st.channels);
        for j in 0..st.depth {
            specs.extend(elgca::block_param_specs(&format!("{p}.block{j}"), &block));
        }
        specs.extend(norm_specs(&format!("{p}.norm"), st.channels));
    }
    let f = cfg.fusion_width;
    for (i, st) in cfg.stages().iter().enumerate() {
        specs.extend(conv_specs(&format!("fusion.stage{}.proj", i + 1), 1, st.channels, f));
        specs.extend(conv_specs(&format!("fusion.stage{}.fuse", i + 1), 1, 2 * f, f));
    }
    let d = cfg.decoder_width;
    specs.extend(conv_specs("decoder.linear_fuse", 1, cfg.num_stages() * f, d));
    for r in 1..=cfg.decoder_rounds() {
        match cfg.decoder {
            DecoderKind::Standard => {
                specs.extend(conv_specs(&format!("decoder.up{r}"), 4, d, d));
                specs.extend(conv_specs(&format!("decoder.res{r}.conv1"), 3, d, d));
                specs.extend(conv_specs(&format!("decoder.res{r}.conv2"), 3, d, d));
            }
            DecoderKind::Lw => {
                specs.extend(depthwise_specs(&format!("decoder.lw{r}.dw"), 3, d));
                specs.extend(conv_specs(&format!("decoder.lw{r}.pw"), 1, d, d));
            }
        }
    }
    specs.extend(conv_specs("decoder.head", 1, d, cfg.num_classes));
    specs
}

/// Randomly initialized parameters (truncated normal σ=0.02 weights, zero
/// biases, unit/zero norm affine), fully determined by `seed`.
pub fn build<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    ModelParams::init(&param_specs(cfg), seed)
}

/// Runs one image through the shared encoder; returns the per-stage features.
pub fn encode<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, image: Var) -> Result<Vec<Var>> {
    if s.graph.shape(image) != cfg.input_size {
        return Err(Error::dim(
            "encode",
            format!("image shape {:?} does not match configured input {:?}", s.graph.shape(image), cfg.input_size),
        ));
    }
    let mut x = image;
    let mut feats = Vec::with_capacity(cfg.num_stages());
    for (i, st) in cfg.stages().iter().enumerate() {
        let p = stage_prefix(i);
        x = s.scoped(&p, |s| -> Result<Var> {
            let (w, b) = s.wb(&format!("{p}.patch_embed"))?;
            let mut x = s.graph.conv2d(x, w, Some(b), st.embed)?;
            x = elgca::layer_norm(s, &format!("{p}.patch_norm"), x)?;
            let block = cfg.block_config(st.channels);
            for j in 0..st.depth {
                let bp = format!("{p}.block{j}");
                x = s.scoped(&format!("block{j}"), |s| elgca::encoder_block(s, &bp, &block, x))?;
            }
            elgca::layer_norm(s, &format!("{p}.norm"), x)
        })?;
        feats.push(x);
    }
    Ok(feats)
}

/// Shared 1×1 projection of each stream, channel concat `[pre, post]`,
/// 1×1 convolution to the fusion width, ReLU.
pub fn fuse<T: Scalar>(s: &mut Session<'_, T>, stage: usize, pre: Var, post: Var) -> Result<Var> {
    let p = format!("fusion.stage{}", stage + 1);
    s.scoped(&p.clone(), |s| {
        let (pw, pb) = s.wb(&format!("{p}.proj"))?;
        let a = s.graph.conv2d(pre, pw, Some(pb), POINTWISE)?;
        let b = s.graph.conv2d(post, pw, Some(pb), POINTWISE)?;
        let cat = s.graph.concat(&[a, b], 2)?;
        let (fw, fb) = s.wb(&format!("{p}.fuse"))?;
        let y = s.graph.conv2d(cat, fw, Some(fb), POINTWISE)?;
        s.graph.relu(y)
    })
}

/// Aligns all fused maps to the first stage's resolution and concatenates.
fn merge_fused<T: Scalar>(s: &mut Session<'_, T>, fused: &[Var]) -> Result<Var> {
    let Some(&first) = fused.first() else {
        return Err(Error::dim("decoder", "no fused features"));
    };
    let (h, w, _) = s.graph.value(first).hwc("decoder")?;
    let mut aligned = vec![first];
    for &f in &fused[1..] {
        aligned.push(s.graph.bilinear_resize(f, h, w)?);
    }
    let cat = s.graph.concat(&aligned, 2)?;
    let (lw, lb) = s.wb("decoder.linear_fuse")?;
    let y = s.graph.conv2d(cat, lw, Some(lb), POINTWISE)?;
    s.graph.relu(y)
}

fn head<T: Scalar>(s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let (w, b) = s.wb("decoder.head")?;
    s.graph.conv2d(x, w, Some(b), POINTWISE)
}

pub fn decode_standard<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, fused: &[Var]) -> Result<Var> {
    s.scoped("decoder", |s| {
        let mut x = merge_fused(s, fused)?;
        for r in 1..=cfg.decoder_rounds() {
            let (uw, ub) = s.wb(&format!("decoder.up{r}"))?;
            x = s.graph.transpose_conv2d(x, uw, Some(ub), DECODER_UP)?;
            let (w1, b1) = s.wb(&format!("decoder.res{r}.conv1"))?;
            let h = s.graph.conv2d(x, w1, Some(b1), CONV3)?;
            let h = s.graph.relu(h)?;
            let (w2, b2) = s.wb(&format!("decoder.res{r}.conv2"))?;
            let h = s.graph.conv2d(h, w2, Some(b2), CONV3)?;
            x = s.graph.add(x, h)?;
        }
        head(s, x)
    })
}

pub fn decode_lw<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, fused: &[Var]) -> Result<Var> {
    s.scoped("decoder", |s| {
        let mut x = merge_fused(s, fused)?;
        for r in 1..=cfg.decoder_rounds() {
            x = s.graph.upsample(x, 2)?;
            let (dw, db) = s.wb(&format!("decoder.lw{r}.dw"))?;
            x = s.graph.depthwise_conv2d(x, dw, Some(db), CONV3)?;
            let (pw, pb) = s.wb(&format!("decoder.lw{r}.pw"))?;
            x = s.graph.conv2d(x, pw, Some(pb), POINTWISE)?;
            x = s.graph.relu(x)?;
        }
        head(s, x)
    })
}

/// Full pipeline: both images through the shared encoder, per-stage fusion,
/// decoder. Returns `H × W × num_classes` logits.
pub fn forward<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, pre: Var, post: Var) -> Result<Var> {
    let fa = encode(s, cfg, pre)?;
    let fb = encode(s, cfg, post)?;
    let fused = fa
        .iter()
        .zip(&fb)
        .enumerate()
        .map(|(i, (&a, &b))| fuse(s, i, a, b))
        .collect::<Result<Vec<_>>>()?;
    match cfg.decoder {
        DecoderKind::Standard => decode_standard(s, cfg, &fused),
        DecoderKind::Lw => decode_lw(s, cfg, &fused),
    }
}

/// Forward pass on plain tensors, discarding the tape.
pub fn predict<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>, pre: &Tensor<T>, post: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = Session::with_graph(params, Graph::new());
    let a = s.graph.constant(pre.clone());
    let b = s.graph.constant(post.clone());
    let y = forward(&mut s, cfg, a, b)?;
    Ok(s.graph.value(y).clone())
}

/// Per-pixel argmax over the class axis of `H × W × K` logits.
pub fn argmax_map<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks_exact(k)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}
