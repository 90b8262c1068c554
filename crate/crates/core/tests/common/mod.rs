#![allow(dead_code)]

use affordance::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Central finite-difference gradient oracle.
///
/// `build` records a scalar loss from the leaves it is handed; it is
/// re-run from scratch for every perturbed input, so the oracle never
/// touches the reverse-mode path it checks.
pub fn finite_difference<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            grad.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        out.push(grad);
    }
    out
}

pub fn reverse_mode<F>(inputs: &[Tensor<f64>], build: F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode and finite differences.
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var + Copy,
{
    let analytic = reverse_mode(inputs, build);
    let numeric = finite_difference(inputs, 1e-5, build);
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted sum `Σ wᵢ·yᵢ` with fixed pseudo-random weights, so every output
/// element contributes a distinct gradient.
pub fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = randn(g.shape(y), &mut r);
    let w = g.input(w);
    let prod = g.mul(y, w).unwrap();
    g.sum(prod)
}

use affordance::backbone::FEATURE_CHANNELS;
use affordance::heads::{HeadInput, HeadKind, HeadModel, HeadSpec};
use affordance::mcma::{AttentionConfig, AttentionMode, TOKENS};
use affordance::nn::{ParamStore, Session};

/// Smallest widths the heads accept, for finite-difference checks.
pub fn tiny_spec(kind: HeadKind, mode: AttentionMode, squared: bool) -> HeadSpec {
    let attention = AttentionConfig { heads: 2, head_dim: 2, mode, pool: 2, fused_channels: 4, context_channels: 4 };
    HeadSpec { hidden: 8, latent: 4, squared_mse: squared, ..HeadSpec::new(kind, 3, attention) }
}

/// Random input batch and model-space target for `spec`.
pub fn head_batch(spec: &HeadSpec, batch: usize, r: &mut ChaCha8Rng) -> (HeadInput<f64>, Tensor<f64>) {
    let rows = spec.kind.scope().maps() * batch * TOKENS;
    let class_of = |i: usize| (i * 7 + 1) % spec.m;
    let one_hot = |b: usize| Tensor::from_fn([b, spec.m], |j| if j % spec.m == class_of(j / spec.m) { 1.0 } else { 0.0 });
    let input = HeadInput {
        batch,
        image: Some(randn(&[rows, FEATURE_CHANNELS], r)),
        context: Some(randn(&[rows, FEATURE_CHANNELS], r)),
        class: spec.kind.needs_class().then(|| one_hot(batch)),
    };
    let target = match spec.kind {
        HeadKind::Classifier => one_hot(batch),
        _ => randn(&[batch, spec.data_dim()], r).map(|v| 0.5 * v),
    };
    (input, target)
}

/// Largest relative error between reverse-mode parameter gradients of a
/// head's training loss and central differences, probing up to `per_tensor`
/// random coordinates of every parameter tensor. Parameters are jittered off
/// their initial values first: zero biases put ReLUs exactly on the kink,
/// where a central difference straddles two slopes.
pub fn head_grad_error(spec: HeadSpec, seed: u64, per_tensor: usize) -> f64 {
    let mut model = HeadModel::<f64>::new(spec.clone(), seed).unwrap();
    let mut r = rng(seed ^ 0x5EED);
    for t in model.params.values_mut() {
        for v in t.data_mut() {
            *v += 0.1 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let model = model;
    let (input, target) = head_batch(&spec, 2, &mut r);
    let eps = randn(&[2, spec.latent], &mut r);
    let loss = |params: &ParamStore<f64>| {
        let mut buffers = model.buffers.clone();
        let mut s = Session::new(params, &mut buffers, true);
        let l = model.arch.loss(&mut s, &input, &target, Some(&eps)).unwrap();
        s.graph.value(l.total).data()[0]
    };
    let analytic = {
        let mut buffers = model.buffers.clone();
        let mut s = Session::new(&model.params, &mut buffers, true);
        let l = model.arch.loss(&mut s, &input, &target, Some(&eps)).unwrap();
        let g = s.graph.backward(l.total).unwrap();
        s.param_grads(&g)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let coords: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| r.random_range(0..n)).collect() };
        for j in coords {
            let mut plus = model.params.clone();
            plus.values_mut()[i].data_mut()[j] += h;
            let mut minus = model.params.clone();
            minus.values_mut()[i].data_mut()[j] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let e = rel_error(grad.data()[j], numeric);
            if std::env::var("GRAD_DEBUG").is_ok() && e > 1e-4 {
                eprintln!("{} [{j}] analytic {:.6e} numeric {:.6e}", model.params.iter().nth(i).unwrap().0, grad.data()[j], numeric);
            }
            worst = worst.max(e);
        }
    }
    worst
}
