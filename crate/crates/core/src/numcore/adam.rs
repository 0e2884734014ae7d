use serde::{Deserialize, Serialize};

use super::{Matrix, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to the value rather than through the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.01,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Matrix,
    second: Matrix,
}

/// Adam with bias correction. Moment buffers are bound to parameters by
/// position, so every call must pass the same parameters in the same order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter. The effective learning rate of a
    /// parameter is `lr · lr_scale · lr_factor`; `lr_factor` carries the
    /// schedule. Gradients are zeroed afterwards.
    ///
    /// A non-finite gradient aborts the step before any value changes.
    pub fn step(&mut self, params: &mut [&mut Param], lr_factor: f64) -> Result<()> {
        for p in params.iter() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::shape(
                    "Adam::step (grad)",
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", p.grad.shape()),
                ));
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    first: Matrix::zeros(p.value.rows(), p.value.cols()),
                    second: Matrix::zeros(p.value.rows(), p.value.cols()),
                })
                .collect();
        }
        if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.first.shape() != p.value.shape())
        {
            return Err(Error::shape(
                "Adam::step (state)",
                format!("{} parameters", self.moments.len()),
                format!("{} parameters", params.len()),
            ));
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.t as i32);
        let bias2 = 1.0 - beta2.powi(self.t as i32);

        for (p, m) in params.iter_mut().zip(self.moments.iter_mut()) {
            let step_lr = lr * p.lr_scale * lr_factor;
            let grads = p.grad.as_slice();
            let values = p.value.as_mut_slice();
            let first = m.first.as_mut_slice();
            let second = m.second.as_mut_slice();
            for k in 0..values.len() {
                let g = grads[k];
                first[k] = beta1 * first[k] + (1.0 - beta1) * g;
                second[k] = beta2 * second[k] + (1.0 - beta2) * g * g;
                let m_hat = first[k] / bias1;
                let v_hat = second[k] / bias2;
                values[k] -= step_lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * values[k]);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// `lr0 · (1 + cos(π t / T)) / 2`
pub fn cosine_anneal(lr0: f64, t: usize, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("annealing horizon must be >= 1".into()));
    }
    if t > horizon {
        return Err(Error::InvalidArgument(format!(
            "annealing step {t} exceeds horizon {horizon}"
        )));
    }
    let phase = std::f64::consts::PI * t as f64 / horizon as f64;
    Ok(lr0 * (1.0 + phase.cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(name: &str, v: f64) -> Param {
        Param::new(name, Matrix::from_vec(1, 1, vec![v]).unwrap())
    }

    #[test]
    fn first_step_hand_value() {
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut p = scalar("x", 0.0);
        p.grad[(0, 0)] = 1.0;
        adam.step(&mut [&mut p], 1.0).unwrap();
        let expected = -1e-4 / 1.01;
        assert!((p.value[(0, 0)] - expected).abs() < 1e-15);
        assert!((p.value[(0, 0)] + 9.901e-5).abs() < 1e-8);
        assert_eq!(p.grad[(0, 0)], 0.0);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut p = Param::new("w", Matrix::from_fn(2, 3, |i, j| i as f64 - 0.5 * j as f64));
        let before = p.value.clone();
        for _ in 0..5 {
            adam.step(&mut [&mut p], 1.0).unwrap();
        }
        assert_eq!(p.value, before);
    }

    #[test]
    fn lr_scale_multiplies_step() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut a = scalar("slow", 0.0);
        let mut b = scalar("fast", 0.0).with_lr_scale(10.0);
        a.grad[(0, 0)] = 0.3;
        b.grad[(0, 0)] = 0.3;
        adam.step(&mut [&mut a, &mut b], 1.0).unwrap();
        let ratio = b.value[(0, 0)] / a.value[(0, 0)];
        assert!((ratio - 10.0).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_value() {
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        });
        let mut p = scalar("x", 2.0);
        adam.step(&mut [&mut p], 1.0).unwrap();
        assert!((p.value[(0, 0)] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut a = scalar("ok", 1.0);
        let mut b = scalar("bad", 1.0);
        a.grad[(0, 0)] = 1.0;
        b.grad[(0, 0)] = f64::NAN;
        let err = adam.step(&mut [&mut a, &mut b], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "bad"));
        assert_eq!(a.value[(0, 0)], 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_anneal(0.5, 0, 10).unwrap(), 0.5);
        assert!(cosine_anneal(0.5, 10, 10).unwrap().abs() < 1e-16);
        assert!((cosine_anneal(0.5, 5, 10).unwrap() - 0.25).abs() < 1e-15);
        assert!(cosine_anneal(0.5, 11, 10).is_err());
        assert!(cosine_anneal(0.5, 0, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cosine_monotone_and_symmetric(horizon in 1usize..500, lr0 in 1e-6f64..1.0) {
            let mut prev = f64::INFINITY;
            for t in 0..=horizon {
                let lr = cosine_anneal(lr0, t, horizon).unwrap();
                proptest::prop_assert!(lr <= prev + 1e-15);
                let mirrored = cosine_anneal(lr0, horizon - t, horizon).unwrap();
                proptest::prop_assert!((lr + mirrored - lr0).abs() < 1e-12);
                prev = lr;
            }
        }
    }
}
