//! Efficient local-global context aggregation (ELGCA) and the encoder
//! block that wraps it.
//!
//! The input `X ∈ R^{H×W×C}` is split along channels into a global half
//! `X_gl` and a local half `X_lo`. The local half goes through a 3×3
//! depthwise convolution. The global half is projected by one 1×1
//! convolution to `[Z, Q, K, V]`, each `C/4` wide. `Z` is kept as-is
//! (multi-channel aggregation); `Q`, `K`, `V` feed pooled-transpose
//! attention
//!
//! ```text
//! Q̄ = avgpool₃ₓ₃,s2(Q)   K̄ = maxpool₂ₓ₂,s2(K)
//! A_att = V · softmax₀(K̄ᵀ · Q̄)
//! ```
//!
//! where the `C/4 × C/4` attention matrix is normalized over its first
//! (contracted) axis. The three outputs are concatenated back to `C`
//! channels and mixed by a final 1×1 convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{conv_specs, depthwise_specs, norm_specs, ParamSpec, Session};
use crate::tensor::kernels::Window;
use crate::tensor::{Graph, Scalar, Var};

pub const NORM_EPS: f64 = 1e-6;

const POINTWISE: Window = Window::new(1, 1, 0);
const DW3: Window = Window::new(3, 1, 1);
const QUERY_AVG: Window = Window::new(3, 2, 1);

/// Which pooling is applied to queries and keys before transposed attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    #[default]
    AvgQMaxK,
    AvgAvg,
    MaxMax,
    MaxQAvgK,
    None,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 5] =
        [PoolingMode::AvgQMaxK, PoolingMode::AvgAvg, PoolingMode::MaxMax, PoolingMode::MaxQAvgK, PoolingMode::None];

    /// `(query, key)` pooling kinds.
    pub fn kinds(self) -> (Option<Pool>, Option<Pool>) {
        use Pool::*;
        match self {
            PoolingMode::AvgQMaxK => (Some(Avg), Some(Max)),
            PoolingMode::AvgAvg => (Some(Avg), Some(Avg)),
            PoolingMode::MaxMax => (Some(Max), Some(Max)),
            PoolingMode::MaxQAvgK => (Some(Max), Some(Avg)),
            PoolingMode::None => (None, None),
        }
    }
}

/// Average pooling is 3×3 / stride 2 / pad 1; max pooling is 2×2 / stride 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Avg,
    Max,
}

impl Pool {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Pool::Avg => g.avg_pool(x, QUERY_AVG),
            Pool::Max => g.max_pool(x, 2, 2),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Pooled-transpose (channel) attention.
    #[default]
    Pt,
    /// Token-by-token scaled dot-product attention, for comparison only.
    Sa,
}

/// Which context aggregators are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branches {
    pub local: bool,
    pub multi_channel: bool,
    pub attention: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Branches::ALL
    }
}

impl Branches {
    pub const ALL: Branches = Branches { local: true, multi_channel: true, attention: true };

    /// The seven non-empty combinations, singles first and the full set last.
    pub fn combinations() -> Vec<Branches> {
        let order = [0b100, 0b010, 0b001, 0b110, 0b101, 0b011, 0b111];
        order
            .iter()
            .map(|&m| Branches { local: m & 0b100 != 0, multi_channel: m & 0b010 != 0, attention: m & 0b001 != 0 })
            .collect()
    }

    pub fn any(self) -> bool {
        self.local || self.multi_channel || self.attention
    }
}

/// Shape and variant of one ELGCA module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElgcaConfig {
    pub channels: usize,
    pub branches: Branches,
    pub pooling: PoolingMode,
    pub attention: AttentionKind,
}

impl ElgcaConfig {
    pub fn new(channels: usize) -> Self {
        ElgcaConfig {
            channels,
            branches: Branches::ALL,
            pooling: PoolingMode::default(),
            attention: AttentionKind::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!("ELGCA channels must be a positive multiple of 4, got {}", self.channels)));
        }
        if !self.branches.any() {
            return Err(Error::Config("ELGCA needs at least one enabled branch".into()));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.channels / 2
    }

    pub fn quarter(&self) -> usize {
        self.channels / 4
    }

    /// Output width of the input projection: `C/4` for Z plus `3·C/4` for Q, K, V.
    pub fn proj_in_width(&self) -> usize {
        let q = self.quarter();
        (if self.branches.multi_channel { q } else { 0 }) + (if self.branches.attention { 3 * q } else { 0 })
    }

    /// Channel count entering the output projection.
    pub fn concat_width(&self) -> usize {
        let q = self.quarter();
        (if self.branches.local { self.half() } else { 0 })
            + (if self.branches.multi_channel { q } else { 0 })
            + (if self.branches.attention { q } else { 0 })
    }
}

pub fn param_specs(prefix: &str, cfg: &ElgcaConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    if cfg.proj_in_width() > 0 {
        specs.extend(conv_specs(&format!("{prefix}.proj_in"), 1, cfg.half(), cfg.proj_in_width()));
    }
    if cfg.branches.local {
        specs.extend(depthwise_specs(&format!("{prefix}.local"), 3, cfg.half()));
    }
    specs.extend(conv_specs(&format!("{prefix}.proj_out"), 1, cfg.concat_width(), cfg.channels));
    specs
}

/// First `C/2` channels become the global input, the rest the local input.
pub fn channel_split<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
    let (_, _, c) = g.value(x).hwc("channel_split")?;
    if c % 2 != 0 {
        return Err(Error::dim("channel_split", format!("channel count {c} is odd")));
    }
    let parts = g.split(x, 2, 2)?;
    Ok((parts[0], parts[1]))
}

/// `A_att = V · softmax₀(K̄ᵀ Q̄)` with `Q`, `K`, `V` all `H × W × c`.
pub fn pooled_transpose_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    pooling: PoolingMode,
) -> Result<Var> {
    let (h, w, c) = g.value(v).hwc("pt_attention")?;
    let (qp, kp) = pooling.kinds();
    if (qp.is_some() || kp.is_some()) && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::dim("pt_attention", format!("pooled attention needs even extents, got {h}×{w}")));
    }
    let q = match qp {
        Some(p) => p.apply(g, q)?,
        None => q,
    };
    let k = match kp {
        Some(p) => p.apply(g, k)?,
        None => k,
    };
    let qf = g.flatten_spatial(q)?;
    let kf = g.flatten_spatial(k)?;
    let kt = g.transpose(kf)?;
    let logits = g.matmul(kt, qf)?;
    let m = g.softmax(logits, 0)?;
    let vf = g.flatten_spatial(v)?;
    let a = g.matmul(vf, m)?;
    g.reshape(a, &[h, w, c])
}

/// `softmax₁(Q Kᵀ / √c) · V` over all `HW` tokens.
pub fn token_self_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (h, w, c) = g.value(v).hwc("self_attention")?;
    let qf = g.flatten_spatial(q)?;
    let kf = g.flatten_spatial(k)?;
    let vf = g.flatten_spatial(v)?;
    let kt = g.transpose(kf)?;
    let s = g.matmul(qf, kt)?;
    let s = g.mul_scalar(s, 1.0 / (c as f64).sqrt())?;
    let a = g.softmax(s, 1)?;
    let o = g.matmul(a, vf)?;
    g.reshape(o, &[h, w, c])
}

/// Global-half outputs: `Z` (multi-channel aggregation) and `A_att`.
#[derive(Clone, Copy, Debug)]
pub struct GlobalContext {
    pub z: Option<Var>,
    pub a_att: Option<Var>,
}

/// 1×1 projection of `X_gl` into `Z, Q, K, V`, then attention.
pub fn global_context<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, cfg: &ElgcaConfig, x_gl: Var) -> Result<GlobalContext> {
    let width = cfg.proj_in_width();
    if width == 0 {
        return Ok(GlobalContext { z: None, a_att: None });
    }
    let (w, b) = s.wb(&format!("{prefix}.proj_in"))?;
    let proj = s.graph.conv2d(x_gl, w, Some(b), POINTWISE)?;
    let q4 = cfg.quarter();
    let pieces = s.graph.split_sizes(proj, 2, &vec![q4; width / q4])?;
    let mut it = pieces.into_iter();
    let z = if cfg.branches.multi_channel { it.next() } else { None };
    let a_att = if cfg.branches.attention {
        let (q, k, v) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        Some(match cfg.attention {
            AttentionKind::Pt => pooled_transpose_attention(&mut s.graph, q, k, v, cfg.pooling)?,
            AttentionKind::Sa => token_self_attention(&mut s.graph, q, k, v)?,
        })
    } else {
        None
    };
    Ok(GlobalContext { z, a_att })
}

/// Full-branch pooled-transpose attention on `X_gl`, returning `(Z, A_att)`.
pub fn pt_attention<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, cfg: &ElgcaConfig, x_gl: Var) -> Result<(Var, Var)> {
    let cfg = ElgcaConfig { branches: Branches::ALL, attention: AttentionKind::Pt, ..*cfg };
    let gc = global_context(s, prefix, &cfg, x_gl)?;
    Ok((gc.z.unwrap(), gc.a_att.unwrap()))
}

/// 3×3 depthwise convolution on `X_lo`.
pub fn local_context<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x_lo: Var) -> Result<Var> {
    let (w, b) = s.wb(&format!("{prefix}.local"))?;
    s.graph.depthwise_conv2d(x_lo, w, Some(b), DW3)
}

pub fn elgca_forward<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, cfg: &ElgcaConfig, x: Var) -> Result<Var> {
    cfg.validate()?;
    let (_, _, c) = s.graph.value(x).hwc("elgca")?;
    if c != cfg.channels {
        return Err(Error::dim("elgca", format!("input has {c} channels, module expects {}", cfg.channels)));
    }
    let (x_gl, x_lo) = channel_split(&mut s.graph, x)?;
    let mut merged = Vec::with_capacity(3);
    if cfg.branches.local {
        merged.push(local_context(s, prefix, x_lo)?);
    }
    let gc = global_context(s, prefix, cfg, x_gl)?;
    merged.extend(gc.z);
    merged.extend(gc.a_att);
    let cat = if merged.len() == 1 { merged[0] } else { s.graph.concat(&merged, 2)? };
    let (w, b) = s.wb(&format!("{prefix}.proj_out"))?;
    s.graph.conv2d(cat, w, Some(b), POINTWISE)
}

/// Encoder block: pre-norm ELGCA residual followed by a pre-norm
/// convolutional MLP residual (1×1 expand, 3×3 depthwise, GELU, 1×1 project).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub elgca: ElgcaConfig,
    pub mlp_ratio: usize,
}

impl BlockConfig {
    pub fn hidden(&self) -> usize {
        self.elgca.channels * self.mlp_ratio
    }
}

pub fn block_param_specs(prefix: &str, cfg: &BlockConfig) -> Vec<ParamSpec> {
    let c = cfg.elgca.channels;
    let hidden = cfg.hidden();
    let mut specs = Vec::new();
    specs.extend(norm_specs(&format!("{prefix}.norm1"), c));
    specs.extend(param_specs(&format!("{prefix}.elgca"), &cfg.elgca));
    specs.extend(norm_specs(&format!("{prefix}.norm2"), c));
    specs.extend(conv_specs(&format!("{prefix}.mlp.fc1"), 1, c, hidden));
    specs.extend(depthwise_specs(&format!("{prefix}.mlp.dw"), 3, hidden));
    specs.extend(conv_specs(&format!("{prefix}.mlp.fc2"), 1, hidden, c));
    specs
}

pub fn layer_norm<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = s.p(&format!("{prefix}.gamma"))?;
    let beta = s.p(&format!("{prefix}.beta"))?;
    s.graph.layer_norm(x, gamma, beta, NORM_EPS)
}

pub fn conv_mlp<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let (w1, b1) = s.wb(&format!("{prefix}.fc1"))?;
    let h = s.graph.conv2d(x, w1, Some(b1), POINTWISE)?;
    let (wd, bd) = s.wb(&format!("{prefix}.dw"))?;
    let h = s.graph.depthwise_conv2d(h, wd, Some(bd), DW3)?;
    let h = s.graph.gelu(h)?;
    let (w2, b2) = s.wb(&format!("{prefix}.fc2"))?;
    s.graph.conv2d(h, w2, Some(b2), POINTWISE)
}

pub fn encoder_block<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, cfg: &BlockConfig, x: Var) -> Result<Var> {
    let n1 = layer_norm(s, &format!("{prefix}.norm1"), x)?;
    let ctx = s.scoped("elgca", |s| elgca_forward(s, &format!("{prefix}.elgca"), &cfg.elgca, n1))?;
    let y = s.graph.add(x, ctx)?;
    let n2 = layer_norm(s, &format!("{prefix}.norm2"), y)?;
    let m = s.scoped("mlp", |s| conv_mlp(s, &format!("{prefix}.mlp"), n2))?;
    s.graph.add(y, m)
}
