//! The four trainable heads: location, template classifier, scale and
//! deformation, each with its own context encoder.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::backbone::FEATURE_CHANNELS;
use crate::mcma::{AttentionConfig, ContextEncoder, Scope, TOKENS};
use crate::nn::{BufferStore, Linear, ParamStore, Session};
use crate::optim::{AdamConfig, AdamState};
use crate::pose::POSE_DIM;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transform::FRAME;

pub const LOG_SIGMA_LIMIT: f64 = 10.0;
pub const CCE_FLOOR: f64 = 1e-12;
pub const LOCATION_MAX: f64 = FRAME - 1e-6;
pub const SCALE_RANGE: (f64, f64) = (4.0, 256.0);
pub const DEFORM_LIMIT: f64 = 64.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Location,
    Classifier,
    Scale,
    Deform,
    /// Scale and deformation predicted jointly as one 34-dim vector.
    Unified,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Location => "location",
            HeadKind::Classifier => "classifier",
            HeadKind::Scale => "scale",
            HeadKind::Deform => "deform",
            HeadKind::Unified => "unified",
        }
    }

    pub fn scope(self) -> Scope {
        match self {
            HeadKind::Location => Scope::Global,
            _ => Scope::Combined,
        }
    }

    pub fn needs_class(self) -> bool {
        matches!(self, HeadKind::Scale | HeadKind::Deform | HeadKind::Unified)
    }

    /// Length of the data vector (or of the class distribution).
    pub fn data_dim(self, m: usize) -> usize {
        match self {
            HeadKind::Location | HeadKind::Scale => 2,
            HeadKind::Deform => POSE_DIM,
            HeadKind::Unified => POSE_DIM + 2,
            HeadKind::Classifier => m,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [HeadKind::Location, HeadKind::Classifier, HeadKind::Scale, HeadKind::Deform, HeadKind::Unified]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Template count.
    pub m: usize,
    pub attention: AttentionConfig,
    pub hidden: usize,
    pub latent: usize,
    pub kl_weight: f64,
    /// Squared L2 reconstruction loss; `false` uses the plain L2 norm.
    pub squared_mse: bool,
}

impl HeadSpec {
    pub fn new(kind: HeadKind, m: usize, attention: AttentionConfig) -> Self {
        HeadSpec { kind, m, attention, hidden: 128, latent: 32, kl_weight: 1.0, squared_mse: true }
    }

    pub fn data_dim(&self) -> usize {
        self.kind.data_dim(self.m)
    }
}

/// Condition builder feeding both encoder and decoder.
#[derive(Clone, Debug)]
pub enum Condition {
    Global { fc: Linear },
    WithClass { y1: Linear, y2: Linear, joint: Linear },
}

#[derive(Clone, Debug)]
pub struct Cvae {
    pub condition: Condition,
    pub enc1: Linear,
    pub enc2: Linear,
    pub mu: Linear,
    pub log_sigma: Linear,
    pub dec_z1: Linear,
    pub dec_z2: Linear,
    pub dec_cond: Linear,
    pub dec_joint: Linear,
    pub dec_out: Linear,
}

#[derive(Clone, Debug)]
pub enum HeadNet {
    Cvae(Cvae),
    Classifier { fc: Linear },
}

/// Backbone features and labels for one mini-batch.
///
/// Feature maps are stacked map-major (`[maps·B·64, 512]`): for the combined
/// scope all global maps come first, then patch A, then patch B.
#[derive(Clone, Debug)]
pub struct HeadInput<T> {
    pub batch: usize,
    pub image: Option<Tensor<T>>,
    pub context: Option<Tensor<T>>,
    /// `[B, m]` one-hot template classes.
    pub class: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    /// Reconstruction or cross-entropy term.
    pub main: Var,
    pub kld: Option<Var>,
}

/// Layer layout of one head. Graph-building methods take the parameter
/// values from the session, so the layout never borrows the weights.
#[derive(Clone, Debug)]
pub struct HeadArch {
    pub spec: HeadSpec,
    pub encoder: ContextEncoder,
    pub net: HeadNet,
}

pub struct HeadModel<T: Scalar> {
    pub arch: HeadArch,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Scalar> HeadModel<T> {
    pub fn new(spec: HeadSpec, seed: u64) -> Result<Self> {
        if spec.m == 0 || spec.hidden == 0 || spec.latent == 0 {
            return Err(Error::Config("head widths and template count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let name = spec.kind.name();
        let encoder = ContextEncoder::new(&mut params, &mut buffers, name, &spec.attention, spec.kind.scope(), &mut rng)?;
        let (ctx, h, l, dim) = (spec.attention.context_len(), spec.hidden, spec.latent, spec.data_dim());
        let net = match spec.kind {
            HeadKind::Classifier => HeadNet::Classifier { fc: Linear::new(&mut params, &format!("{name}.fc"), ctx, dim, &mut rng) },
            kind => {
                let mut fc = |n: &str, i: usize, o: usize| Linear::new(&mut params, &format!("{name}.{n}"), i, o, &mut rng);
                let condition = if kind.needs_class() {
                    Condition::WithClass { y1: fc("cond.y1", spec.m, h), y2: fc("cond.y2", h, h), joint: fc("cond.joint", h + ctx, h) }
                } else {
                    Condition::Global { fc: fc("cond.fc", ctx, h) }
                };
                HeadNet::Cvae(Cvae {
                    condition,
                    enc1: fc("enc.fc1", dim, h),
                    enc2: fc("enc.fc2", h, h),
                    mu: fc("enc.mu", 2 * h, l),
                    log_sigma: fc("enc.log_sigma", 2 * h, l),
                    dec_z1: fc("dec.z1", l, h),
                    dec_z2: fc("dec.z2", h, h),
                    dec_cond: fc("dec.cond", h, h),
                    dec_joint: fc("dec.joint", 2 * h, h),
                    dec_out: fc("dec.out", h, dim),
                })
            }
        };
        Ok(HeadModel { arch: HeadArch { spec, encoder, net }, params, buffers, adam: None })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.arch.spec
    }

    pub fn kind(&self) -> HeadKind {
        self.arch.spec.kind
    }

    /// Fresh training-mode session over this model's parameters.
    pub fn session(&mut self, train: bool) -> (&HeadArch, Session<'_, T>) {
        (&self.arch, Session::new(&self.params, &mut self.buffers, train))
    }

    /// Decode prior draws `η ~ N(0, 1)`; returns `[B, data_dim]` in model space.
    pub fn sample_raw(&self, input: &HeadInput<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let mut buffers = self.buffers.clone();
        let mut s = Session::with_graph(Graph::new(), &self.params, &mut buffers, false, false);
        let a = &self.arch;
        let ctx = a.context_vector(&mut s, input)?;
        let class = input.class.clone().map(|t| s.graph.input(t));
        let cond = a.shared_condition(&mut s, ctx, class)?;
        let eta = Tensor::from_fn([input.batch, a.spec.latent], |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let z = s.graph.input(eta);
        let out = a.decode(&mut s, z, cond)?;
        Ok(s.graph.value(out).clone())
    }

    /// Class probabilities `[B, m]` in eval mode.
    pub fn predict_proba(&self, input: &HeadInput<T>) -> Result<Tensor<T>> {
        let mut buffers = self.buffers.clone();
        let mut s = Session::with_graph(Graph::new(), &self.params, &mut buffers, false, false);
        let ctx = self.arch.context_vector(&mut s, input)?;
        let p = self.arch.classify(&mut s, ctx)?;
        Ok(s.graph.value(p).clone())
    }

    /// One Adam step on a mini-batch; returns `[total, main, kld]`.
    pub fn train_step(&mut self, input: &HeadInput<T>, target: &Tensor<T>, eps: Option<&Tensor<T>>) -> Result<[f64; 3]> {
        let adam = self.adam.get_or_insert_with(|| AdamState::new(&self.params, AdamConfig::default()));
        // non-finite values must reach the divergence check below instead of panicking
        let graph = Graph::new().with_finite_checks(false);
        let mut s = Session::with_graph(graph, &self.params, &mut self.buffers, true, true);
        let parts = self.arch.loss(&mut s, input, target, eps)?;
        let value = |v: Var| s.graph.value(v).data()[0].as_f64();
        let out = [value(parts.total), value(parts.main), parts.kld.map(value).unwrap_or(0.0)];
        if !out[0].is_finite() {
            return Err(Error::Divergence { head: self.arch.spec.kind.name().into(), step: adam.t as usize });
        }
        let grads = s.graph.backward(parts.total)?;
        let grads = s.param_grads(&grads);
        drop(s);
        adam.step(&mut self.params, &grads)?;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(&self.params, &self.buffers, self.adam.as_ref())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuild from `spec` and load stored values.
    pub fn load(spec: HeadSpec, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::State(format!("no checkpoint for the {} head at {}", spec.kind, path.display())));
        }
        let mut model = Self::new(spec, 0)?;
        let ck = Checkpoint::<T>::load(path)?;
        model.adam = ck.restore(&mut model.params, &mut model.buffers, AdamConfig::default())?;
        Ok(model)
    }
}

impl HeadArch {
    pub fn cvae(&self) -> Option<&Cvae> {
        match &self.net {
            HeadNet::Cvae(c) => Some(c),
            HeadNet::Classifier { .. } => None,
        }
    }

    fn check_input<T: Scalar>(&self, input: &HeadInput<T>) -> Result<()> {
        let rows = self.spec.kind.scope().maps() * input.batch * TOKENS;
        for (what, t) in [("image", &input.image), ("context", &input.context)] {
            if let Some(t) = t {
                if t.shape() != [rows, FEATURE_CHANNELS] {
                    return Err(Error::Dimension(format!(
                        "{} head {what} features must be [{rows}, {FEATURE_CHANNELS}], got {:?}",
                        self.spec.kind,
                        t.shape()
                    )));
                }
            }
        }
        if self.spec.kind.needs_class() {
            let y = input
                .class
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("{} head needs a template class", self.spec.kind)))?;
            if y.shape() != [input.batch, self.spec.m] {
                return Err(Error::Contract(format!(
                    "class one-hot must be [{}, {}], got {:?}",
                    input.batch,
                    self.spec.m,
                    y.shape()
                )));
            }
        }
        Ok(())
    }

    /// Context vector `[B, context_len]`.
    pub fn context_vector<T: Scalar>(&self, s: &mut Session<T>, input: &HeadInput<T>) -> Result<Var> {
        self.check_input(input)?;
        let mode = self.spec.attention.mode;
        let image = if mode.needs_image() { input.image.clone().map(|t| s.graph.input(t)) } else { None };
        let context = if mode.needs_context() { input.context.clone().map(|t| s.graph.input(t)) } else { None };
        let (image, context) = match (image, context) {
            (None, None) if !mode.needs_image() && !mode.needs_context() => {
                // attention disabled: only the row count is read
                let rows = self.spec.kind.scope().maps() * input.batch * TOKENS;
                (Some(s.graph.input(Tensor::zeros([rows, 1]))), None)
            }
            other => other,
        };
        self.encoder.forward(s, image, context)
    }

    /// Shared condition `[B, hidden]`.
    pub fn shared_condition<T: Scalar>(&self, s: &mut Session<T>, ctx: Var, class: Option<Var>) -> Result<Var> {
        let cvae = self.cvae().ok_or_else(|| Error::Contract("the classifier has no shared condition".into()))?;
        match &cvae.condition {
            Condition::Global { fc } => fc.forward_relu(s, ctx),
            Condition::WithClass { y1, y2, joint } => {
                let y = class.ok_or_else(|| Error::Contract(format!("{} head needs a template class", self.spec.kind)))?;
                let y = y1.forward_relu(s, y)?;
                let y = y2.forward_relu(s, y)?;
                let cat = s.graph.concat(&[y, ctx])?;
                joint.forward_relu(s, cat)
            }
        }
    }

    /// `(μ, logσ)` with logσ clamped to `[-10, 10]`.
    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, x: Var, cond: Var) -> Result<(Var, Var)> {
        let c = self.cvae().ok_or_else(|| Error::Contract("the classifier has no encoder".into()))?;
        let dim = self.spec.data_dim();
        if s.graph.shape(x).last() != Some(&dim) {
            return Err(Error::Contract(format!(
                "{} head data must have {dim} entries, got {:?}",
                self.spec.kind,
                s.graph.shape(x)
            )));
        }
        let h = c.enc1.forward_relu(s, x)?;
        let h = c.enc2.forward_relu(s, h)?;
        let cat = s.graph.concat(&[h, cond])?;
        let mu = c.mu.forward(s, cat)?;
        let ls = c.log_sigma.forward(s, cat)?;
        let lim = T::lit(LOG_SIGMA_LIMIT);
        Ok((mu, s.graph.clamp(ls, -lim, lim)))
    }

    pub fn decode<T: Scalar>(&self, s: &mut Session<T>, z: Var, cond: Var) -> Result<Var> {
        let c = self.cvae().ok_or_else(|| Error::Contract("the classifier has no decoder".into()))?;
        if s.graph.shape(z).last() != Some(&self.spec.latent) {
            return Err(Error::Contract(format!(
                "latent must have {} entries, got {:?}",
                self.spec.latent,
                s.graph.shape(z)
            )));
        }
        let a = c.dec_z1.forward_relu(s, z)?;
        let a = c.dec_z2.forward_relu(s, a)?;
        let b = c.dec_cond.forward_relu(s, cond)?;
        let cat = s.graph.concat(&[a, b])?;
        let j = c.dec_joint.forward_relu(s, cat)?;
        c.dec_out.forward(s, j)
    }

    /// Class probabilities `[B, m]`.
    pub fn classify<T: Scalar>(&self, s: &mut Session<T>, ctx: Var) -> Result<Var> {
        let HeadNet::Classifier { fc } = &self.net else {
            return Err(Error::Contract(format!("{} head is not a classifier", self.spec.kind)));
        };
        let logits = fc.forward(s, ctx)?;
        Ok(s.graph.softmax(logits))
    }

    /// Training objective. `target` is `[B, data_dim]` in model space (one-hot
    /// for the classifier); `eps` is the reparameterization noise, zero if absent.
    pub fn loss<T: Scalar>(
        &self,
        s: &mut Session<T>,
        input: &HeadInput<T>,
        target: &Tensor<T>,
        eps: Option<&Tensor<T>>,
    ) -> Result<LossVars> {
        let ctx = self.context_vector(s, input)?;
        if let HeadNet::Classifier { .. } = self.net {
            check_one_hot(target)?;
            let y = s.graph.input(target.clone());
            let probs = self.classify(s, ctx)?;
            let main = cce_loss(&mut s.graph, probs, y)?;
            return Ok(LossVars { total: main, main, kld: None });
        }
        let y = s.graph.input(target.clone());
        let class = input.class.clone().map(|t| s.graph.input(t));
        let cond = self.shared_condition(s, ctx, class)?;
        let (mu, ls) = self.encode(s, y, cond)?;
        let eps = match eps {
            Some(e) => e.clone(),
            None => Tensor::zeros([input.batch, self.spec.latent]),
        };
        let z = reparameterize(&mut s.graph, mu, ls, eps)?;
        let recon = self.decode(s, z, cond)?;
        let main = reconstruction_loss(&mut s.graph, recon, y, self.spec.squared_mse)?;
        let kld = kld_loss(&mut s.graph, mu, ls)?;
        let weighted = s.graph.scale(kld, T::lit(self.spec.kl_weight));
        let total = s.graph.add(main, weighted)?;
        Ok(LossVars { total, main, kld: Some(kld) })
    }
}

/// `z = μ + exp(logσ) ⊙ ε`; `ε` is a constant.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, mu: Var, log_sigma: Var, eps: Tensor<T>) -> Result<Var> {
    let sigma = g.exp(log_sigma);
    let e = g.input(eps);
    let noise = g.mul(sigma, e)?;
    g.add(mu, noise)
}

/// `−½ Σ (1 + 2logσ − μ² − e^{2logσ})`, averaged over the batch rows.
pub fn kld_loss<T: Scalar>(g: &mut Graph<T>, mu: Var, log_sigma: Var) -> Result<Var> {
    let rows = batch_rows(g.shape(mu));
    let two_ls = g.scale(log_sigma, T::lit(2.0));
    let var = g.exp(two_ls);
    let mu2 = g.mul(mu, mu)?;
    let a = g.sub(two_ls, mu2)?;
    let a = g.sub(a, var)?;
    let a = g.add_scalar(a, T::one());
    let total = g.sum(a);
    Ok(g.scale(total, T::lit(-0.5 / rows as f64)))
}

/// Squared (or plain) L2 distance per row, averaged over the batch.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, squared: bool) -> Result<Var> {
    let rows = batch_rows(g.shape(pred));
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let total = if squared {
        g.sum(sq)
    } else {
        let width = *g.shape(sq).last().expect("non-empty shape");
        let ones = g.input(Tensor::ones([width, 1]));
        let per_row = g.matmul(sq, ones)?;
        let log = g.log_clamped(per_row, T::lit(1e-24));
        let half = g.scale(log, T::lit(0.5));
        let norms = g.exp(half);
        g.sum(norms)
    };
    Ok(g.scale(total, T::lit(1.0 / rows as f64)))
}

/// `−Σ y log max(p, 1e-12)`, averaged over the batch rows.
pub fn cce_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: Var) -> Result<Var> {
    let rows = batch_rows(g.shape(probs));
    let logp = g.log_clamped(probs, T::lit(CCE_FLOOR));
    let picked = g.mul(logp, target)?;
    let total = g.sum(picked);
    Ok(g.scale(total, T::lit(-1.0 / rows as f64)))
}

fn batch_rows(shape: &[usize]) -> usize {
    if shape.len() > 1 { shape[..shape.len() - 1].iter().product() } else { 1 }
}

pub fn check_one_hot<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    let m = *t.shape().last().expect("non-empty shape");
    for row in t.data().chunks(m) {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != m - 1 {
            return Err(Error::Contract("classifier target must be one-hot".into()));
        }
    }
    Ok(())
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn clamp_location(v: [f64; 2]) -> [f64; 2] {
    v.map(|x| x.clamp(0.0, LOCATION_MAX))
}

pub fn clamp_scale(v: [f64; 2]) -> [f64; 2] {
    v.map(|x| x.clamp(SCALE_RANGE.0, SCALE_RANGE.1))
}

pub fn clamp_deform(v: f64) -> f64 {
    v.clamp(-DEFORM_LIMIT, DEFORM_LIMIT)
}

/// Mini-batch training options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 200, batch: 32, seed: 0 }
    }
}

/// Per-epoch mean losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub head: HeadKind,
    pub total: f64,
    pub main: f64,
    pub kld: f64,
}

pub const LOG_HEADER: &str = "epoch,head,loss_total,loss_mse_or_cce,loss_kld";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.8},{:.8},{:.8}\n", r.epoch, r.head, r.total, r.main, r.kld));
    }
    s
}

/// Source of mini-batches for [`train_head`].
pub trait HeadData<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs and model-space targets for the given example indices.
    fn batch(&self, indices: &[usize]) -> Result<(HeadInput<T>, Tensor<T>)>;
}

/// Mini-batch Adam over shuffled epochs. Noise and shuffling come from one
/// generator seeded by `opts.seed`.
pub fn train_head<T: Scalar>(model: &mut HeadModel<T>, data: &impl HeadData<T>, opts: TrainOptions) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Input(format!("no training examples for the {} head", model.kind())));
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for chunk in order.chunks(opts.batch) {
            let (input, target) = data.batch(chunk)?;
            let eps = model.cvae_latent().map(|l| Tensor::from_fn([chunk.len(), l], |_| T::lit(rng.sample::<f64, _>(StandardNormal))));
            let parts = model.train_step(&input, &target, eps.as_ref())?;
            for (acc, v) in sums.iter_mut().zip(parts) {
                *acc += v * chunk.len() as f64;
            }
        }
        let n = data.len() as f64;
        log.push(EpochLog { epoch, head: model.kind(), total: sums[0] / n, main: sums[1] / n, kld: sums[2] / n });
    }
    Ok(log)
}

impl<T: Scalar> HeadModel<T> {
    fn cvae_latent(&self) -> Option<usize> {
        self.arch.cvae().map(|_| self.arch.spec.latent)
    }
}
