//! AdamW with decoupled weight decay.
//!
//! Update order per step `t` (1-based), per parameter:
//!
//! ```text
//! theta <- theta - lr * wd * theta
//! m     <- b1 * m + (1 - b1) * g
//! v     <- b2 * v + (1 - b2) * g^2
//! theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW step. On a non-finite gradient nothing is modified.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, hyper: &AdamWConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.first.len() != n || state.second.len() != n {
        return Err(Error::Shape(format!(
            "params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.first.len(),
            state.second.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {} at optimizer step {}",
            grads[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let decay = hyper.lr * hyper.weight_decay;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *p -= decay * *p;
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut s = OptimizerState::new(3);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        adamw_step(&mut p, &[0.0; 3], &mut s, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut s = OptimizerState::new(1);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        adamw_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = vec![1.0];
        let mut s = OptimizerState::new(1);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::with_lr(0.1)
        };
        adamw_step(&mut p, &[0.0], &mut s, &cfg).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![1.0, 2.0];
        let mut s = OptimizerState::new(2);
        let err = adamw_step(&mut p, &[0.5, f64::INFINITY], &mut s, &AdamWConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    /// Straight-line transcription of the published recurrence, scalar by
    /// scalar.
    fn reference(theta: f64, grads: &[f64], c: &AdamWConfig) -> f64 {
        let (mut th, mut m, mut v) = (theta, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            th *= 1.0 - c.lr * c.weight_decay;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powf(t));
            let vh = v / (1.0 - c.beta2.powf(t));
            th -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        th
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = AdamWConfig {
            lr: 0.01,
            ..AdamWConfig::default()
        };
        let n = 64;
        let steps = 25;
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let grads: Vec<Vec<f64>> = (0..steps).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut p = init.clone();
        let mut s = OptimizerState::new(n);
        for g in &grads {
            adamw_step(&mut p, g, &mut s, &cfg).unwrap();
        }
        for i in 0..n {
            let gi: Vec<f64> = grads.iter().map(|g| g[i]).collect();
            let want = reference(init[i], &gi, &cfg);
            assert!((p[i] - want).abs() <= 1e-12, "{i}: {} vs {want}", p[i]);
        }
    }
}
