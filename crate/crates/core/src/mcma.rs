//! Mutual cross-modal attention and the context-vector builder.
//!
//! Feature maps travel through the tape as `[B·64, C]` matrices: one row per
//! spatial token in row-major order. 1×1 convolutions are therefore plain
//! matrix products, and their kernels are stored as `[Cin, Cout]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{FEATURE_CHANNELS, FEATURE_SIDE};
use crate::error::{Error, Result};
use crate::nn::{he_normal, BatchNorm, BufferStore, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TOKENS: usize = FEATURE_SIDE * FEATURE_SIDE;
pub const RMS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    None,
    SelfImage,
    SelfContext,
    CrossContextQueries,
    CrossImageQueries,
    Mutual,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 6] = [
        AttentionMode::None,
        AttentionMode::SelfImage,
        AttentionMode::SelfContext,
        AttentionMode::CrossContextQueries,
        AttentionMode::CrossImageQueries,
        AttentionMode::Mutual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::SelfImage => "self-image",
            AttentionMode::SelfContext => "self-context",
            AttentionMode::CrossContextQueries => "cross-context-queries",
            AttentionMode::CrossImageQueries => "cross-image-queries",
            AttentionMode::Mutual => "mutual",
        }
    }

    pub fn needs_image(self) -> bool {
        !matches!(self, AttentionMode::None | AttentionMode::SelfContext)
    }

    pub fn needs_context(self) -> bool {
        !matches!(self, AttentionMode::None | AttentionMode::SelfImage)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub mode: AttentionMode,
    /// Adaptive pooling size `P`; the context vector has `context_channels·P²` entries.
    pub pool: usize,
    /// Width of `p` and `t` outputs.
    pub fused_channels: usize,
    /// Output width of the strided downsampling convolution.
    pub context_channels: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 8,
            head_dim: 64,
            mode: AttentionMode::Mutual,
            pool: 2,
            fused_channels: 512,
            context_channels: 512,
        }
    }
}

impl AttentionConfig {
    pub fn embed(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn context_len(&self) -> usize {
        self.context_channels * self.pool * self.pool
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.fused_channels == 0 || self.context_channels == 0 {
            return Err(Error::Config("attention widths must be positive".into()));
        }
        if self.pool == 0 || self.pool > 4 {
            return Err(Error::Config(format!("pool size must be in 1..=4, got {}", self.pool)));
        }
        Ok(())
    }
}

/// Which feature maps feed a context vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Global,
    /// Global map plus patches A and B, concatenated in that channel order.
    Combined,
}

impl Scope {
    pub fn maps(self) -> usize {
        match self {
            Scope::Global => 1,
            Scope::Combined => 3,
        }
    }
}

/// Per-modality attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct ModalityParams {
    pub gamma: ParamId,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub p: ParamId,
}

impl ModalityParams {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let (c, e) = (FEATURE_CHANNELS, cfg.embed());
        ModalityParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([c])),
            q: store.add(format!("{name}.q"), he_normal([c, e], c, rng)),
            k: store.add(format!("{name}.k"), he_normal([c, e], c, rng)),
            v: store.add(format!("{name}.v"), he_normal([c, e], c, rng)),
            p: store.add(format!("{name}.p"), he_normal([e, cfg.fused_channels], e, rng)),
        }
    }
}

/// The attention block. Projections carry no bias.
#[derive(Clone, Debug)]
pub struct Mcma {
    pub config: AttentionConfig,
    pub image: ModalityParams,
    pub context: ModalityParams,
    pub t: ParamId,
}

impl Mcma {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let image = ModalityParams::new(store, &format!("{name}.image"), &config, rng);
        let context = ModalityParams::new(store, &format!("{name}.context"), &config, rng);
        let c = config.fused_channels;
        let t = store.add(format!("{name}.t"), he_normal([2 * c, c], 2 * c, rng));
        Ok(Mcma { config, image, context, t })
    }

    /// Multi-head attention of `fq` tokens over `fkv` tokens. Inputs are
    /// normalized `[B·64, 512]` maps; the result is `[B·64, embed]` before `p`.
    /// Channel index of the merged heads is `head·head_dim + dim`.
    pub fn attend<T: Scalar>(
        &self,
        s: &mut Session<T>,
        fq: Var,
        fkv: Var,
        q_from: &ModalityParams,
        kv_from: &ModalityParams,
    ) -> Result<Var> {
        self.attend_tokens(s, fq, fkv, q_from, kv_from, TOKENS)
    }

    /// [`Mcma::attend`] over maps of `tokens` positions each.
    pub fn attend_tokens<T: Scalar>(
        &self,
        s: &mut Session<T>,
        fq: Var,
        fkv: Var,
        q_from: &ModalityParams,
        kv_from: &ModalityParams,
        tokens: usize,
    ) -> Result<Var> {
        let rows = s.graph.shape(fq)[0];
        if tokens == 0 || s.graph.shape(fq) != s.graph.shape(fkv) || rows % tokens != 0 {
            return Err(Error::Dimension(format!(
                "attention inputs {:?} and {:?} must both be [B*{tokens}, C]",
                s.graph.shape(fq),
                s.graph.shape(fkv)
            )));
        }
        let b = rows / tokens;
        let (h, d) = (self.config.heads, self.config.head_dim);
        let (wq, wk, wv) = (s.p(q_from.q), s.p(kv_from.k), s.p(kv_from.v));
        let g = &mut s.graph;
        let q = g.matmul(fq, wq)?;
        let k = g.matmul(fkv, wk)?;
        let v = g.matmul(fkv, wv)?;
        let split = |g: &mut crate::Graph<T>, x: Var| -> Result<Var> {
            let x = g.reshape(x, &[b, tokens, h, d])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * h, tokens, d])
        };
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let logits = g.bmm(q, k, true)?;
        let logits = g.scale(logits, T::lit(1.0 / (d as f64).sqrt()));
        let att = g.softmax(logits);
        let out = g.bmm(att, v, false)?;
        let out = g.reshape(out, &[b, h, tokens, d])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        g.reshape(out, &[b * tokens, h * d])
    }

    fn norm<T: Scalar>(&self, s: &mut Session<T>, x: Var, m: &ModalityParams) -> Result<Var> {
        let gamma = s.p(m.gamma);
        s.graph.rms_norm(x, gamma, T::lit(RMS_EPS))
    }

    /// Fused `[B·64, fused_channels]` map for the configured mode.
    /// `image`/`context` are raw backbone features as `[B·64, 512]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, image: Option<Var>, context: Option<Var>) -> Result<Var> {
        let mode = self.config.mode;
        let need = |v: Option<Var>, what: &str| {
            v.ok_or_else(|| Error::Config(format!("attention mode {mode} needs the {what} modality")))
        };
        let rows = match (image, context) {
            (Some(v), _) | (None, Some(v)) => s.graph.shape(v)[0],
            (None, None) => return Err(Error::Config(format!("attention mode {mode} received no inputs"))),
        };
        let (ip, cp) = (self.image, self.context);
        let project = |s: &mut Session<T>, x: Var, m: &ModalityParams| {
            let p = s.p(m.p);
            s.graph.matmul(x, p)
        };
        match mode {
            AttentionMode::None => Ok(s.graph.input(Tensor::zeros([rows, self.config.fused_channels]))),
            AttentionMode::SelfImage => {
                let x = self.norm(s, need(image, "image")?, &ip)?;
                let a = self.attend(s, x, x, &ip, &ip)?;
                project(s, a, &ip)
            }
            AttentionMode::SelfContext => {
                let x = self.norm(s, need(context, "context")?, &cp)?;
                let a = self.attend(s, x, x, &cp, &cp)?;
                project(s, a, &cp)
            }
            AttentionMode::CrossContextQueries | AttentionMode::CrossImageQueries | AttentionMode::Mutual => {
                let ni = self.norm(s, need(image, "image")?, &ip)?;
                let nc = self.norm(s, need(context, "context")?, &cp)?;
                let star_i = |s: &mut Session<T>| -> Result<Var> {
                    let a = self.attend(s, ni, nc, &ip, &cp)?;
                    project(s, a, &ip)
                };
                let star_c = |s: &mut Session<T>| -> Result<Var> {
                    let a = self.attend(s, nc, ni, &cp, &ip)?;
                    project(s, a, &cp)
                };
                match mode {
                    AttentionMode::CrossImageQueries => star_i(s),
                    AttentionMode::CrossContextQueries => star_c(s),
                    _ => {
                        let fi = star_i(s)?;
                        let fc = star_c(s)?;
                        let cat = s.graph.concat(&[fi, fc])?;
                        let t = s.p(self.t);
                        s.graph.matmul(cat, t)
                    }
                }
            }
        }
    }
}

/// Strided conv → batchnorm → ReLU → adaptive pool → flatten.
#[derive(Clone, Debug)]
pub struct ContextBuilder {
    pub scope: Scope,
    pub in_channels: usize,
    pub out_channels: usize,
    pub pool: usize,
    pub kernel: ParamId,
    pub bn: BatchNorm,
}

impl ContextBuilder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        buffers: &mut BufferStore<T>,
        name: &str,
        config: &AttentionConfig,
        scope: Scope,
        rng: &mut impl Rng,
    ) -> Self {
        let cin = config.fused_channels * scope.maps();
        let cout = config.context_channels;
        let kernel = store.add(format!("{name}.down"), he_normal([4, 4, cin, cout], 16 * cin, rng));
        let bn = BatchNorm::new(store, buffers, &format!("{name}.bn"), cout);
        let stats = buffers.get_mut(bn.stats);
        stats.mean = Some(vec![T::zero(); cout]);
        stats.var = Some(vec![T::one(); cout]);
        ContextBuilder { scope, in_channels: cin, out_channels: cout, pool: config.pool, kernel, bn }
    }

    pub fn len(&self) -> usize {
        self.out_channels * self.pool * self.pool
    }

    /// `x` is `[B·64, Cin]` or `[B, 8, 8, Cin]`; returns `[B, Cout·P²]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let cin = *shape.last().expect("non-empty shape");
        if cin != self.in_channels {
            return Err(Error::Dimension(format!(
                "context builder expects {} input channels, got {cin}",
                self.in_channels
            )));
        }
        let b = shape.iter().product::<usize>() / (TOKENS * cin);
        let x = s.graph.reshape(x, &[b, FEATURE_SIDE, FEATURE_SIDE, cin])?;
        let k = s.p(self.kernel);
        let y = s.graph.conv2d(x, k, 2, 1)?;
        let y = self.bn.forward(s, y)?;
        let y = s.graph.relu(y);
        let y = s.graph.adaptive_avg_pool(y, self.pool)?;
        s.graph.reshape(y, &[b, self.len()])
    }
}

/// Attention block plus context builder. For the combined scope the three
/// maps (global, A, B) share one attention block and are concatenated along
/// channels before downsampling.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub mcma: Mcma,
    pub builder: ContextBuilder,
}

impl ContextEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        buffers: &mut BufferStore<T>,
        name: &str,
        config: &AttentionConfig,
        scope: Scope,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mcma = Mcma::new(store, &format!("{name}.mcma"), config.clone(), rng)?;
        let builder = ContextBuilder::new(store, buffers, &format!("{name}.ctx"), config, scope, rng);
        Ok(ContextEncoder { mcma, builder })
    }

    pub fn scope(&self) -> Scope {
        self.builder.scope
    }

    /// `image`/`context` stack the scope's maps map-major: `[maps·B·64, 512]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, image: Option<Var>, context: Option<Var>) -> Result<Var> {
        let fused = self.mcma.forward(s, image, context)?;
        let maps = self.scope().maps();
        let c = self.mcma.config.fused_channels;
        let fused = if maps == 1 {
            fused
        } else {
            let rows = s.graph.shape(fused)[0] / maps;
            let x = s.graph.reshape(fused, &[maps, rows, c])?;
            let x = s.graph.permute(x, &[1, 0, 2])?;
            s.graph.reshape(x, &[rows, maps * c])?
        };
        self.builder.forward(s, fused)
    }
}
