use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let step_size = T::from_f64_lossy(lr / bc1);
    let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
    let eps = T::from_f64_lossy(cfg.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::dim(format!(
                "adam: parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let denom = vv.sqrt() / bc2_sqrt + eps;
            *w = *w - step_size * *mv / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(g: &[f64], lr: f64) -> (f64, AdamState<f64>) {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        for &gv in g {
            let grad = Tensor::scalar(gv);
            adam_step(&mut [&mut p], &[&grad], &mut st, lr, &AdamConfig::default()).unwrap();
        }
        (p.data()[0], st)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::scalar(1.5);
        let mut st = AdamState::new(&[&p]);
        st.m[0].data_mut()[0] = 0.2;
        st.v[0].data_mut()[0] = 0.04;
        let g = Tensor::scalar(0.0);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.1, &AdamConfig::default()).unwrap();
        // Moments decay; the update uses the decayed (nonzero) moment.
        assert!((st.m[0].data()[0] - 0.18).abs() < 1e-12);
        assert!((st.v[0].data()[0] - 0.04 * 0.999).abs() < 1e-12);

        let mut q = Tensor::<f64>::scalar(1.5);
        let mut fresh = AdamState::new(&[&q]);
        adam_step(&mut [&mut q], &[&g], &mut fresh, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(q.data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (p, _) = run(&[1.0], 0.1);
        // m_hat = 1, v_hat = 1 -> delta = -0.1 / (1 + eps)
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn two_step_hand_trace() {
        // step 1: m=0.1, v=0.001, m_hat=1, v_hat=1 -> p = -0.1/(1+1e-8)
        // step 2: m=0.19, v=0.001999, m_hat=0.19/0.19=1, v_hat=0.001999/0.001999=1
        let (p, st) = run(&[1.0, 1.0], 0.1);
        let expected = -2.0 * 0.1 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
        assert!((st.m[0].data()[0] - 0.19).abs() < 1e-12);
        assert!((st.v[0].data()[0] - 0.001999).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }
}
