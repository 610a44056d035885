//! Small dense numeric kernel: matrices, affine layers, LSTM, Adam and a
//! finite-difference gradient checker. Everything is `f64` and single
//! threaded; gradients are accumulated by hand-written backward passes.

mod adam;
mod gradcheck;
mod lstm;
mod matrix;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, grad_check_piecewise, relative_error, GradCheckReport};
pub use lstm::{lstm_step, BiLstm, BiLstmCache, LstmParams};
pub use matrix::{argmax, axpy, dot, log_sum_exp, sigmoid, softmax, Matrix};

use rand::Rng;

use crate::error::{Error, Result};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Param::new(name, Matrix::zeros(rows, cols))
    }

    /// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn fan_in_uniform<R: Rng>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        Param::new(name, Matrix::uniform(rows, cols, bound, rng))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns trainable parameters in a fixed, declared order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Param,
    pub bias: Param,
}

impl Affine {
    pub fn new<R: Rng>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Affine {
            weight: Param::fan_in_uniform(format!("{name}.weight"), input, output, input, rng),
            bias: Param::zeros(format!("{name}.bias"), 1, output),
        }
    }

    pub fn from_parts(name: &str, weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Shape(format!(
                "{name}: bias length {} vs {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        let n = bias.len();
        Ok(Affine {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Matrix::from_vec(1, n, bias)?),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "{}: input length {} vs {}",
                self.weight.name,
                x.len(),
                self.input_dim()
            )));
        }
        let mut y = self.bias.value.row(0).to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, self.weight.value.row(i), &mut y);
            }
        }
        Ok(y)
    }

    /// Accumulates `dW`, `db` and, when requested, adds `dL/dx` into `dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        debug_assert_eq!(dy.len(), self.output_dim());
        axpy(1.0, dy, self.bias.grad.row_mut(0));
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, dy, self.weight.grad.row_mut(i));
            }
        }
        if let Some(dx) = dx {
            for (i, d) in dx.iter_mut().enumerate() {
                *d += dot(self.weight.value.row(i), dy);
            }
        }
    }
}

impl Parameterized for Affine {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Length of the `true` prefix of a padding mask. Errors when a `true`
/// follows a `false`.
pub fn prefix_len(mask: &[bool]) -> Result<usize> {
    let len = mask.iter().take_while(|m| **m).count();
    if mask[len..].iter().any(|m| *m) {
        return Err(Error::Shape(format!(
            "mask is not a true-prefix (first padding at {len})"
        )));
    }
    Ok(len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_identity_passes_input_through() {
        let a = Affine::from_parts("id", Matrix::identity(3), vec![0.0; 3]).unwrap();
        assert_eq!(a.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn affine_hand_example() {
        let a = Affine::from_parts("a", Matrix::identity(2), vec![3.0, 4.0]).unwrap();
        assert_eq!(a.forward(&[1.0, 2.0]).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn affine_rejects_wrong_input() {
        let a = Affine::from_parts("a", Matrix::identity(2), vec![0.0; 2]).unwrap();
        assert!(a.forward(&[1.0]).is_err());
    }

    struct AffineProbe {
        layer: Affine,
        x: Vec<f64>,
        coeffs: Vec<f64>,
    }

    impl Parameterized for AffineProbe {
        fn params(&self) -> Vec<&Param> {
            self.layer.params()
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            self.layer.params_mut()
        }
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut probe = AffineProbe {
                layer: Affine::new("a", 3, 4, &mut rng),
                x: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                coeffs: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            probe.layer.bias.value = Matrix::uniform(1, 4, 0.5, &mut rng);
            // loss = sum_j c_j * tanh(y_j)
            let report = grad_check(
                &mut probe,
                |p| {
                    let y = p.layer.forward(&p.x).unwrap();
                    let loss: f64 = y.iter().zip(&p.coeffs).map(|(v, c)| c * v.tanh()).sum();
                    let dy: Vec<f64> = y
                        .iter()
                        .zip(&p.coeffs)
                        .map(|(v, c)| c * (1.0 - v.tanh().powi(2)))
                        .collect();
                    let x = p.x.clone();
                    p.layer.backward(&x, &dy, None);
                    loss
                },
                1e-5,
            );
            assert!(report.max_rel_error < 1e-6, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn affine_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Affine::new("a", 3, 4, &mut rng);
        let x: Vec<f64> = vec![0.3, -0.7, 1.1];
        let dy = vec![1.0, -0.5, 0.25, 2.0];
        let f = |l: &Affine, x: &[f64]| dot(&l.forward(x).unwrap(), &dy);
        let mut dx = vec![0.0; 3];
        layer.backward(&x, &dy, Some(&mut dx));
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let num = (f(&layer, &xp) - f(&layer, &xm)) / 2e-6;
            assert!(relative_error(dx[i], num) < 1e-6);
        }
    }

    #[test]
    fn prefix_len_validates_mask() {
        assert_eq!(prefix_len(&[true, true, false]).unwrap(), 2);
        assert_eq!(prefix_len(&[false, false]).unwrap(), 0);
        assert!(prefix_len(&[true, false, true]).is_err());
    }
}
