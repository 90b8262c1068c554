use crate::error::{dim_err, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        Self::for_tensors(params.values(), config)
    }

    pub fn for_tensors(params: &[Tensor<T>], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        adam_step(params.values_mut(), grads, self)
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(dim_err!("adam: param {i} shape {:?} vs grad {:?}", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let corr1 = T::one() - T::lit(c.beta1.powi(state.t as i32));
    let corr2 = T::one() - T::lit(c.beta2.powi(state.t as i32));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / corr1;
            let vhat = v[j] / corr2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(g: f64) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>, AdamState<f64>) {
        let p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(g)];
        let s = AdamState::for_tensors(&p, AdamConfig::default());
        (p, g, s)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, g, mut s) = scalar_state(0.0);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g0 in [-3.0, 1e-4, 7.5] {
            let (mut p, g, mut s) = scalar_state(g0);
            adam_step(&mut p, &g, &mut s).unwrap();
            let delta = (1.0 - p[0].data()[0]).abs();
            let want = 1e-3 * g0.abs() / (g0.abs() + 1e-8);
            assert!((delta - want).abs() < 1e-15, "{delta} vs {want}");
        }
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let g = 0.3;
        let (mut p, grads, mut s) = scalar_state(g);
        adam_step(&mut p, &grads, &mut s).unwrap();
        adam_step(&mut p, &grads, &mut s).unwrap();
        let (b1, b2, lr, eps) = (0.5f64, 0.999f64, 1e-3, 1e-8);
        let mut theta = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0].data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = vec![Tensor::<f64>::zeros([2])];
        let g = vec![Tensor::<f64>::zeros([3])];
        let mut s = AdamState::for_tensors(&p, AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &g, &mut s), Err(crate::Error::Dimension(_))));
    }
}
