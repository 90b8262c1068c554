mod common;

use affordance::heads::{
    argmax, cce_loss, check_one_hot, kld_loss, reparameterize, train_head, HeadData, HeadInput, HeadKind, HeadModel,
    HeadNet, HeadSpec, TrainOptions,
};
use affordance::mcma::{AttentionMode, TOKENS};
use affordance::nn::Session;
use affordance::{Error, Graph, Tensor};
use common::{head_batch, head_grad_error, randn, rng, tiny_spec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn scalar(g: &Graph<f64>, v: affordance::Var) -> f64 {
    g.value(v).data()[0]
}

#[test]
fn kld_closed_forms() {
    let mut g = Graph::new();
    let (mu, ls) = (g.input(Tensor::zeros([1, 32])), g.input(Tensor::zeros([1, 32])));
    let k = kld_loss(&mut g, mu, ls).unwrap();
    assert_eq!(scalar(&g, k), 0.0);
    // σ = 1 and μ = 1 in every dimension: ½·μ² per dimension
    let (mu, ls) = (g.input(Tensor::ones([1, 32])), g.input(Tensor::zeros([1, 32])));
    let k = kld_loss(&mut g, mu, ls).unwrap();
    assert!((scalar(&g, k) - 16.0).abs() < 1e-12);
    let (mu, ls) = (g.input(Tensor::zeros([2, 32])), g.input(Tensor::full([2, 32], -10.0)));
    let k = kld_loss(&mut g, mu, ls).unwrap();
    assert!(scalar(&g, k).is_finite() && scalar(&g, k) > 0.0);
}

#[test]
fn cce_cases() {
    let mut g = Graph::new();
    let onehot = Tensor::from_f64([1, 4], &[0.0, 0.0, 1.0, 0.0]).unwrap();
    let perfect = g.input(onehot.clone());
    let t = g.input(onehot.clone());
    let l = cce_loss(&mut g, perfect, t).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    let uniform = g.input(Tensor::full([1, 4], 0.25));
    let l = cce_loss(&mut g, uniform, t).unwrap();
    assert!((scalar(&g, l) - 4f64.ln()).abs() < 1e-12);
    let tiny = g.input(Tensor::from_f64([1, 4], &[0.5, 0.5, 1e-15, 0.0]).unwrap());
    let l = cce_loss(&mut g, tiny, t).unwrap();
    assert!((scalar(&g, l) + 1e-12f64.ln()).abs() < 1e-9);
    let soft = Tensor::<f64>::from_f64([1, 4], &[0.5, 0.5, 0.0, 0.0]).unwrap();
    assert!(matches!(check_one_hot(&soft), Err(Error::Contract(_))));
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
}

#[test]
fn reparameterize_contract() {
    let mut g = Graph::<f64>::new();
    let mu = g.param(Tensor::from_f64([1, 3], &[0.5, -1.25, 2.0]).unwrap());
    let ls = g.param(Tensor::zeros([1, 3]));
    let z = reparameterize(&mut g, mu, ls, Tensor::zeros([1, 3])).unwrap();
    assert_eq!(g.value(z).data(), g.value(mu).data());
    // affine in ε; dyadic values keep every operation exact
    let (e1, e2) = ([0.25, -0.5, 1.0], [0.125, 0.75, -2.0]);
    let run = |g: &mut Graph<f64>, e: [f64; 3]| {
        let z = reparameterize(g, mu, ls, Tensor::from_f64([1, 3], &e).unwrap()).unwrap();
        g.value(z).data().to_vec()
    };
    let (a, b, zero) = (run(&mut g, e1), run(&mut g, e2), run(&mut g, [0.0; 3]));
    let both = run(&mut g, [e1[0] + e2[0], e1[1] + e2[1], e1[2] + e2[2]]);
    for i in 0..3 {
        assert_eq!(a[i] + b[i] - zero[i], both[i]);
    }
    let eps = Tensor::from_f64([1, 3], &[0.3, 0.1, -0.2]).unwrap();
    let z = reparameterize(&mut g, mu, ls, eps).unwrap();
    let l = g.sum(z);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(mu).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!((grads.get(ls).unwrap().data()[0] - 0.3).abs() < 1e-15);
}

#[test]
fn reparameterized_draws_have_the_right_moments() {
    const N: usize = 100_000;
    let mut r = rng(3);
    let mut g = Graph::<f64>::new();
    let mu = g.input(Tensor::ones([N, 1]));
    let ls = g.input(Tensor::full([N, 1], 2f64.ln()));
    let z = reparameterize(&mut g, mu, ls, randn(&[N, 1], &mut r)).unwrap();
    let d = g.value(z).data();
    let mean = d.iter().sum::<f64>() / N as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
    let (se_mean, se_std) = (2.0 / (N as f64).sqrt(), 2.0 / (2.0 * N as f64).sqrt());
    assert!((mean - 1.0).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var.sqrt() - 2.0).abs() < 3.0 * se_std, "std {}", var.sqrt());
}

#[test]
fn every_head_matches_finite_differences() {
    for kind in [HeadKind::Location, HeadKind::Classifier, HeadKind::Scale, HeadKind::Deform, HeadKind::Unified] {
        let e = head_grad_error(tiny_spec(kind, AttentionMode::Mutual, true), 5, 3);
        assert!(e < 1e-4, "{kind}: {e}");
    }
}

#[test]
fn zero_initialized_layers() {
    let spec = tiny_spec(HeadKind::Scale, AttentionMode::Mutual, true);
    let mut model = HeadModel::<f64>::new(spec.clone(), 1).unwrap();
    let HeadNet::Cvae(c) = model.arch.net.clone() else { panic!("scale head is a CVAE") };
    for l in [c.mu, c.log_sigma, c.dec_out] {
        l.zero_init(&mut model.params);
    }
    let (input, target) = head_batch(&spec, 3, &mut rng(2));
    let out = model.sample_raw(&input, &mut rng(9)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    let mut buffers = model.buffers.clone();
    let mut s = Session::new(&model.params, &mut buffers, true);
    let ctx = model.arch.context_vector(&mut s, &input).unwrap();
    let class = s.graph.input(input.class.clone().unwrap());
    let cond = model.arch.shared_condition(&mut s, ctx, Some(class)).unwrap();
    assert_eq!(s.graph.shape(cond), &[3, spec.hidden]);
    let y = s.graph.input(target);
    let (mu, ls) = model.arch.encode(&mut s, y, cond).unwrap();
    assert!(s.graph.value(mu).data().iter().all(|&v| v == 0.0));
    assert!(s.graph.value(ls).data().iter().all(|&v| v == 0.0));

    let cspec = tiny_spec(HeadKind::Classifier, AttentionMode::Mutual, true);
    let mut clf = HeadModel::<f64>::new(cspec.clone(), 1).unwrap();
    let HeadNet::Classifier { fc } = clf.arch.net.clone() else { panic!() };
    fc.zero_init(&mut clf.params);
    let (input, _) = head_batch(&cspec, 2, &mut rng(4));
    let p = clf.predict_proba(&input).unwrap();
    assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn class_is_required_exactly_when_conditioning_on_it() {
    let spec = tiny_spec(HeadKind::Deform, AttentionMode::Mutual, true);
    let model = HeadModel::<f64>::new(spec.clone(), 1).unwrap();
    let (mut input, _) = head_batch(&spec, 2, &mut rng(1));
    input.class = None;
    assert!(matches!(model.sample_raw(&input, &mut rng(1)), Err(Error::Contract(_))));
    let lspec = tiny_spec(HeadKind::Location, AttentionMode::Mutual, true);
    let loc = HeadModel::<f64>::new(lspec.clone(), 1).unwrap();
    let (input, _) = head_batch(&lspec, 2, &mut rng(1));
    let wrong = HeadInput { image: Some(Tensor::zeros([TOKENS, 7])), ..input };
    assert!(loc.sample_raw(&wrong, &mut rng(1)).is_err());
}

#[test]
fn classifier_outputs_are_simplex_points() {
    let spec = tiny_spec(HeadKind::Classifier, AttentionMode::SelfContext, true);
    let model = HeadModel::<f64>::new(spec.clone(), 8).unwrap();
    let (input, _) = head_batch(&spec, 5, &mut rng(6));
    let p = model.predict_proba(&input).unwrap();
    for row in p.data().chunks(spec.m) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

/// Features that encode a class in a block of channels, plus noise.
struct Separable {
    spec: HeadSpec,
    classes: Vec<usize>,
    noise: Vec<Tensor<f64>>,
}

impl Separable {
    fn new(spec: HeadSpec, n: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let rows = spec.kind.scope().maps() * TOKENS;
        let classes = (0..n).map(|_| r.random_range(0..spec.m)).collect();
        let noise = (0..n).map(|_| randn(&[rows, 512], &mut r).map(|v| 0.3 * v)).collect();
        Separable { spec, classes, noise }
    }

    fn features(&self, i: usize) -> Tensor<f64> {
        let mut t = self.noise[i].clone();
        let c = self.classes[i];
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            if (j % 512) / 128 == c {
                *v += 2.0;
            }
        }
        t
    }
}

impl HeadData<f64> for Separable {
    fn len(&self) -> usize {
        self.classes.len()
    }

    fn batch(&self, idx: &[usize]) -> affordance::Result<(HeadInput<f64>, Tensor<f64>)> {
        let maps = self.spec.kind.scope().maps();
        let rows = TOKENS * 512;
        let mut data = Vec::new();
        for k in 0..maps {
            for &i in idx {
                data.extend_from_slice(&self.features(i).data()[k * rows..(k + 1) * rows]);
            }
        }
        let x = Tensor::new([maps * idx.len() * TOKENS, 512], data).unwrap();
        let m = self.spec.m;
        let y = Tensor::from_fn([idx.len(), m], |j| if self.classes[idx[j / m]] == j % m { 1.0 } else { 0.0 });
        let target = match self.spec.kind {
            HeadKind::Classifier => y,
            _ => Tensor::from_fn([idx.len(), 2], |j| 0.2 + 0.15 * self.classes[idx[j / 2]] as f64),
        };
        Ok((HeadInput { batch: idx.len(), image: Some(x.clone()), context: Some(x), class: None }, target))
    }
}

#[test]
fn classifier_learns_a_separable_four_class_set() {
    let spec = HeadSpec { m: 4, ..tiny_spec(HeadKind::Classifier, AttentionMode::Mutual, true) };
    let (train, test) = (Separable::new(spec.clone(), 96, 1), Separable::new(spec.clone(), 64, 2));
    let mut model = HeadModel::<f64>::new(spec.clone(), 3).unwrap();
    let logs = train_head(&mut model, &train, TrainOptions { epochs: 25, batch: 16, seed: 0 }).unwrap();
    assert!(logs.last().unwrap().total < logs[0].total);
    let all: Vec<usize> = (0..test.len()).collect();
    let (input, _) = test.batch(&all).unwrap();
    let p = model.predict_proba(&input).unwrap();
    let hits = p.data().chunks(4).zip(&test.classes).filter(|(row, &c)| argmax(row) == c).count();
    assert!(hits as f64 / test.len() as f64 >= 0.9, "accuracy {hits}/{}", test.len());
}

#[test]
fn location_training_keeps_the_kl_term_bounded_and_is_reproducible() {
    let spec = tiny_spec(HeadKind::Location, AttentionMode::Mutual, true);
    let data = Separable::new(HeadSpec { m: 4, ..spec.clone() }, 64, 4);
    let opts = TrainOptions { epochs: 8, batch: 16, seed: 5 };
    let mut a = HeadModel::<f64>::new(spec.clone(), 6).unwrap();
    let logs = train_head(&mut a, &data, opts).unwrap();
    let (first, last) = (logs[0].kld, logs.last().unwrap().kld);
    assert!(last < 10.0 * first, "kld {first} -> {last}");
    assert!(logs.last().unwrap().total < logs[0].total);
    let mut b = HeadModel::<f64>::new(spec, 6).unwrap();
    train_head(&mut b, &data, opts).unwrap();
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
}

struct Nan;

impl HeadData<f64> for Nan {
    fn len(&self) -> usize {
        4
    }

    fn batch(&self, idx: &[usize]) -> affordance::Result<(HeadInput<f64>, Tensor<f64>)> {
        let rows = idx.len() * TOKENS;
        let x = Tensor::zeros([rows, 512]);
        let input = HeadInput { batch: idx.len(), image: Some(x.clone()), context: Some(x), class: None };
        Ok((input, Tensor::full([idx.len(), 2], f64::NAN)))
    }
}

struct Empty;

impl HeadData<f64> for Empty {
    fn len(&self) -> usize {
        0
    }

    fn batch(&self, _: &[usize]) -> affordance::Result<(HeadInput<f64>, Tensor<f64>)> {
        unreachable!()
    }
}

#[test]
fn training_errors() {
    let spec = tiny_spec(HeadKind::Location, AttentionMode::Mutual, true);
    let mut m = HeadModel::<f64>::new(spec, 0).unwrap();
    let opts = TrainOptions { epochs: 1, batch: 2, seed: 0 };
    match train_head(&mut m, &Nan, opts) {
        Err(Error::Divergence { head, step }) => assert_eq!((head.as_str(), step), ("location", 0)),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(matches!(train_head(&mut m, &Empty, opts), Err(Error::Input(_))));
}

#[test]
fn checkpoint_roundtrip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(HeadKind::Unified, AttentionMode::CrossContextQueries, false);
    let model = HeadModel::<f32>::new(spec.clone(), 12).unwrap();
    let path = dir.path().join("unified.ckpt");
    model.save(&path).unwrap();
    let back = HeadModel::<f32>::load(spec.clone(), &path).unwrap();
    let (input, _) = head_batch(&spec, 2, &mut rng(3));
    let input = HeadInput {
        batch: input.batch,
        image: input.image.map(|t| t.cast()),
        context: input.context.map(|t| t.cast()),
        class: input.class.map(|t| t.cast()),
    };
    let draw = |m: &HeadModel<f32>| m.sample_raw(&input, &mut ChaCha8Rng::from_seed([7; 32])).unwrap();
    assert_eq!(draw(&model).data(), draw(&back).data());
    match HeadModel::<f32>::load(spec, &dir.path().join("absent.ckpt")) {
        Err(e @ Error::State(_)) => assert!(e.to_string().contains("unified")),
        other => panic!("expected state error, got {:?}", other.err()),
    }
}

use rand::SeedableRng;
