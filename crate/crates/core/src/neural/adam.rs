use serde::{Deserialize, Serialize};

use super::{Matrix, Param};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(5.0),
        }
    }
}

/// Adam with bias correction. Moment buffers are created on the first step
/// and must keep seeing the same parameter list in the same order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Matrix, Matrix)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    let (r, c) = p.value.shape();
                    (Matrix::zeros(r, c), Matrix::zeros(r, c))
                })
                .collect();
        } else if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|((m, _), p)| m.shape() != p.value.shape())
        {
            return Err(Error::Shape(
                "parameter list changed between optimizer steps".into(),
            ));
        }

        let scale = match self.config.clip {
            Some(max_norm) => {
                let norm = params
                    .iter()
                    .map(|p| p.grad.squared_norm())
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let values = p.value.as_mut_slice();
            let grads = p.grad.as_slice();
            for (k, value) in values.iter_mut().enumerate() {
                let g = grads[k] * scale;
                let mk = &mut m.as_mut_slice()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * g;
                let vk = &mut v.as_mut_slice()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * g * g;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                *value -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Param {
        Param::new("x", Matrix::from_vec(1, 1, vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar(2.5);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.get(0, 0), 2.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(1.0);
        p.grad.set(0, 0, 1.0);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value.get(0, 0) - 0.9).abs() < 1e-9);
        assert_eq!(p.grad.get(0, 0), 0.0);
    }

    #[test]
    fn clipping_matches_prescaled_gradient() {
        // gradient (30, 40) has norm 50; clip 5 scales it by 1/10
        let mut a = Param::new("a", Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        a.grad = Matrix::from_vec(1, 2, vec![30.0, 40.0]).unwrap();
        let mut b = a.clone();
        b.grad = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();

        let mut clipped = Adam::new(AdamConfig::default());
        clipped.step(&mut [&mut a]).unwrap();
        let mut plain = Adam::new(AdamConfig {
            clip: None,
            ..AdamConfig::default()
        });
        plain.step(&mut [&mut b]).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn zero_learning_rate_never_changes_parameters() {
        let mut p = scalar(0.3);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        for k in 0..10 {
            p.grad.set(0, 0, k as f64 - 4.5);
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.value.get(0, 0), 0.3);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar(0.0);
        p.name = "emission.weight".into();
        p.grad.set(0, 0, f64::NAN);
        let err = Adam::new(AdamConfig::default())
            .step(&mut [&mut p])
            .unwrap_err();
        assert!(err.to_string().contains("emission.weight"));
    }
}
