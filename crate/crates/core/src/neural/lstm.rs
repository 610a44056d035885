use rand::Rng;

use super::{axpy, dot, prefix_len, sigmoid, Matrix, Param, Parameterized};
use crate::error::{Error, Result};

/// One LSTM direction. Gate blocks are stacked in the order
/// input, forget, cell candidate, output; `w` is `4h x d`, `u` is `4h x h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w: Param,
    pub u: Param,
    pub b: Param,
}

impl LstmParams {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = Param::fan_in_uniform(format!("{name}.w"), 4 * hidden, input, input, rng);
        let u = Param::fan_in_uniform(format!("{name}.u"), 4 * hidden, hidden, hidden, rng);
        let mut b = Matrix::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.set(0, j, 1.0);
        }
        LstmParams {
            w,
            u,
            b: Param::new(format!("{name}.b"), b),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.value.cols()
    }

    pub fn input(&self) -> usize {
        self.w.value.cols()
    }

    fn check(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<()> {
        let h = self.hidden();
        if x.len() != self.input() || h_prev.len() != h || c_prev.len() != h {
            return Err(Error::Shape(format!(
                "{}: lstm step with x={}, h={}, c={} (expected {}, {h}, {h})",
                self.w.name,
                x.len(),
                h_prev.len(),
                c_prev.len(),
                self.input()
            )));
        }
        Ok(())
    }

    fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
        let h = self.hidden();
        let bias = self.b.value.row(0);
        let mut z = vec![0.0; 4 * h];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = bias[j] + dot(self.w.value.row(j), x) + dot(self.u.value.row(j), h_prev);
        }
        let i: Vec<f64> = z[..h].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * h..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hidden: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        StepCache {
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            tanh_c,
            c,
            h: hidden,
        }
    }

    /// Backward through one step. `dh`/`dc` are the total gradients on this
    /// step's outputs; returns gradients on `h_prev` and `c_prev` and adds
    /// `dL/dx` into `dx`.
    fn step_backward(
        &mut self,
        x: &[f64],
        cache: &StepCache,
        dh: &[f64],
        dc_in: &[f64],
        dx: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden();
        let mut dz = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let (i, f, g, o, th) = (
                cache.i[k],
                cache.f[k],
                cache.g[k],
                cache.o[k],
                cache.tanh_c[k],
            );
            let d_o = dh[k] * th;
            let dc = dc_in[k] + dh[k] * o * (1.0 - th * th);
            dz[k] = dc * g * i * (1.0 - i);
            dz[h + k] = dc * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dc * i * (1.0 - g * g);
            dz[3 * h + k] = d_o * o * (1.0 - o);
            dc_prev[k] = dc * f;
        }
        axpy(1.0, &dz, self.b.grad.row_mut(0));
        let mut dh_prev = vec![0.0; h];
        for (j, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, x, self.w.grad.row_mut(j));
            axpy(d, &cache.h_prev, self.u.grad.row_mut(j));
            axpy(d, self.w.value.row(j), dx);
            axpy(d, self.u.value.row(j), &mut dh_prev);
        }
        (dh_prev, dc_prev)
    }
}

impl Parameterized for LstmParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.u, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

#[derive(Clone, Debug)]
struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

/// Single LSTM step returning `(h, c)`.
pub fn lstm_step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check(x, h_prev, c_prev)?;
    let cache = params.step(x, h_prev, c_prev);
    Ok((cache.h, cache.c))
}

/// Bidirectional LSTM over a padded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub fw: LstmParams,
    pub bw: LstmParams,
}

/// Forward-pass state needed by [`BiLstm::backward`].
#[derive(Clone, Debug)]
pub struct BiLstmCache {
    len: usize,
    padded_len: usize,
    fw: Vec<StepCache>,
    // indexed by time step, not by processing order
    bw: Vec<StepCache>,
}

impl BiLstm {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            fw: LstmParams::new(&format!("{name}.fw"), input, hidden, rng),
            bw: LstmParams::new(&format!("{name}.bw"), input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fw.hidden()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }

    /// Runs both directions over the unmasked prefix. Output `t` is
    /// `h_fw[t] ++ h_bw[t]`; padded positions get zero vectors.
    pub fn forward(&self, seq: &[Vec<f64>], mask: &[bool]) -> Result<(Vec<Vec<f64>>, BiLstmCache)> {
        if seq.len() != mask.len() {
            return Err(Error::Shape(format!(
                "sequence length {} vs mask length {}",
                seq.len(),
                mask.len()
            )));
        }
        let len = prefix_len(mask)?;
        let h = self.hidden();
        for x in &seq[..len] {
            if x.len() != self.fw.input() {
                return Err(Error::Shape(format!(
                    "bilstm input length {} vs {}",
                    x.len(),
                    self.fw.input()
                )));
            }
        }

        let mut fw = Vec::with_capacity(len);
        let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
        for x in &seq[..len] {
            let s = self.fw.step(x, &hp, &cp);
            hp.clone_from(&s.h);
            cp.clone_from(&s.c);
            fw.push(s);
        }

        let mut bw_rev = Vec::with_capacity(len);
        let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
        for x in seq[..len].iter().rev() {
            let s = self.bw.step(x, &hp, &cp);
            hp.clone_from(&s.h);
            cp.clone_from(&s.c);
            bw_rev.push(s);
        }
        bw_rev.reverse();

        let mut out = Vec::with_capacity(seq.len());
        for t in 0..len {
            let mut v = fw[t].h.clone();
            v.extend_from_slice(&bw_rev[t].h);
            out.push(v);
        }
        out.resize(seq.len(), vec![0.0; 2 * h]);
        Ok((
            out,
            BiLstmCache {
                len,
                padded_len: seq.len(),
                fw,
                bw: bw_rev,
            },
        ))
    }

    /// Backpropagates `d_out` (one row per padded step) and returns the
    /// gradient with respect to every input row.
    pub fn backward(
        &mut self,
        seq: &[Vec<f64>],
        cache: &BiLstmCache,
        d_out: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let h = self.hidden();
        let d_in = self.fw.input();
        let mut dx = vec![vec![0.0; d_in]; cache.padded_len];

        let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
        for t in (0..cache.len).rev() {
            let dh: Vec<f64> = (0..h).map(|k| d_out[t][k] + dh_next[k]).collect();
            let (a, b) = self
                .fw
                .step_backward(&seq[t], &cache.fw[t], &dh, &dc_next, &mut dx[t]);
            dh_next = a;
            dc_next = b;
        }

        let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
        for t in 0..cache.len {
            let dh: Vec<f64> = (0..h).map(|k| d_out[t][h + k] + dh_next[k]).collect();
            let (a, b) = self
                .bw
                .step_backward(&seq[t], &cache.bw[t], &dh, &dc_next, &mut dx[t]);
            dh_next = a;
            dc_next = b;
        }
        dx
    }
}

impl Parameterized for BiLstm {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.fw.params();
        v.extend(self.bw.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fw.params_mut();
        v.extend(self.bw.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(d: usize, h: usize) -> LstmParams {
        LstmParams {
            w: Param::zeros("w", 4 * h, d),
            u: Param::zeros("u", 4 * h, h),
            b: Param::zeros("b", 1, 4 * h),
        }
    }

    #[test]
    fn zero_network_gives_zero_state() {
        let p = zero_params(3, 2);
        let (h, c) = lstm_step(&[1.0, -4.0, 2.0], &[0.0; 2], &[0.0; 2], &p).unwrap();
        assert_eq!(h, vec![0.0; 2]);
        assert_eq!(c, vec![0.0; 2]);
    }

    #[test]
    fn saturated_forget_gate_hand_trace() {
        // i = sigmoid(0) = 0.5, g = tanh(0) = 0, f = sigmoid(50), o = 0.5
        let mut p = zero_params(1, 1);
        p.b.value.set(0, 1, 50.0);
        let (h, c) = lstm_step(&[0.7], &[0.0], &[1.0], &p).unwrap();
        let f = 1.0 / (1.0 + (-50.0f64).exp());
        let expected_c = f * 1.0 + 0.5 * 0.0;
        assert_eq!(c[0], expected_c);
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!((h[0] - 0.5 * expected_c.tanh()).abs() < 1e-15);

        // cell at half its previous value when candidate and input vanish
        let mut p = zero_params(1, 1);
        p.b.value.set(0, 1, 0.0);
        let (_, c) = lstm_step(&[0.0], &[0.0], &[1.0], &p).unwrap();
        assert_eq!(c[0], 0.5);
    }

    #[test]
    fn step_rejects_bad_shapes() {
        let p = zero_params(3, 2);
        assert!(lstm_step(&[1.0], &[0.0; 2], &[0.0; 2], &p).is_err());
    }

    struct StepProbe {
        p: LstmParams,
        x: Vec<f64>,
        h0: Vec<f64>,
        c0: Vec<f64>,
    }

    impl Parameterized for StepProbe {
        fn params(&self) -> Vec<&Param> {
            self.p.params()
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            self.p.params_mut()
        }
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut probe = StepProbe {
                p: LstmParams::new("l", 3, 2, &mut rng),
                x: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                h0: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                c0: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let report = grad_check(
                &mut probe,
                |s| {
                    let cache = s.p.step(&s.x, &s.h0, &s.c0);
                    let loss: f64 = cache.h.iter().sum();
                    let mut dx = vec![0.0; 3];
                    let x = s.x.clone();
                    s.p.step_backward(&x, &cache, &[1.0, 1.0], &[0.0, 0.0], &mut dx);
                    loss
                },
                1e-5,
            );
            assert!(report.max_rel_error < 1e-6, "seed {seed}: {report:?}");
        }
    }

    struct BiProbe {
        net: BiLstm,
        seq: Vec<Vec<f64>>,
        mask: Vec<bool>,
        coeffs: Vec<Vec<f64>>,
    }

    impl Parameterized for BiProbe {
        fn params(&self) -> Vec<&Param> {
            self.net.params()
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            self.net.params_mut()
        }
    }

    fn bi_loss(p: &mut BiProbe) -> f64 {
        let (out, cache) = p.net.forward(&p.seq, &p.mask).unwrap();
        let loss: f64 = out.iter().zip(&p.coeffs).map(|(o, c)| dot(o, c)).sum();
        let seq = p.seq.clone();
        let coeffs = p.coeffs.clone();
        p.net.backward(&seq, &cache, &coeffs);
        loss
    }

    #[test]
    fn bilstm_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let t = 1 + (seed as usize % 4);
            let mut probe = BiProbe {
                net: BiLstm::new("bi", 3, 2, &mut rng),
                seq: (0..t + 2)
                    .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                mask: (0..t + 2).map(|i| i < t).collect(),
                coeffs: (0..t + 2)
                    .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            };
            let report = grad_check(&mut probe, bi_loss, 1e-5);
            // tiny recurrent gradients sit near the roundoff floor of h = 1e-5
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn bilstm_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = BiLstm::new("bi", 2, 3, &mut rng);
        let seq: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mask = vec![true; 3];
        let coeffs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let f = |net: &BiLstm, s: &[Vec<f64>]| -> f64 {
            let (out, _) = net.forward(s, &mask).unwrap();
            out.iter().zip(&coeffs).map(|(o, c)| dot(o, c)).sum()
        };
        let (_, cache) = net.forward(&seq, &mask).unwrap();
        let dx = net.backward(&seq, &cache, &coeffs);
        for t in 0..3 {
            for k in 0..2 {
                let mut sp = seq.clone();
                sp[t][k] += 1e-6;
                let mut sm = seq.clone();
                sm[t][k] -= 1e-6;
                let num = (f(&net, &sp) - f(&net, &sm)) / 2e-6;
                assert!(crate::neural::relative_error(dx[t][k], num) < 1e-6);
            }
        }
    }

    #[test]
    fn length_one_output_is_concat_of_single_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = BiLstm::new("bi", 2, 3, &mut rng);
        let x = vec![0.4, -0.2];
        let (out, _) = net.forward(std::slice::from_ref(&x), &[true]).unwrap();
        let (hf, _) = lstm_step(&x, &[0.0; 3], &[0.0; 3], &net.fw).unwrap();
        let (hb, _) = lstm_step(&x, &[0.0; 3], &[0.0; 3], &net.bw).unwrap();
        let mut expected = hf;
        expected.extend(hb);
        assert_eq!(out[0], expected);
    }

    #[test]
    fn trailing_padding_leaves_outputs_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = BiLstm::new("bi", 2, 3, &mut rng);
        let seq: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let (base, _) = net.forward(&seq, &[true; 4]).unwrap();
        for pad in 1..=10 {
            let mut padded = seq.clone();
            let mut mask = vec![true; 4];
            for _ in 0..pad {
                padded.push(vec![rng.gen_range(-5.0..5.0), 1.0]);
                mask.push(false);
            }
            let (out, _) = net.forward(&padded, &mask).unwrap();
            assert_eq!(&out[..4], &base[..]);
            assert!(out[4..].iter().all(|v| v.iter().all(|x| *x == 0.0)));
        }
    }

    #[test]
    fn palindrome_with_shared_weights_mirrors_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = BiLstm::new("bi", 2, 3, &mut rng);
        net.bw = net.fw.clone();
        let a = vec![0.3, -0.8];
        let b = vec![-0.1, 0.9];
        let c = vec![0.5, 0.5];
        let seq = vec![a.clone(), b.clone(), c, b, a];
        let (out, _) = net.forward(&seq, &[true; 5]).unwrap();
        for t in 0..5 {
            assert_eq!(&out[t][..3], &out[4 - t][3..]);
        }
    }

    #[test]
    fn non_prefix_mask_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = BiLstm::new("bi", 1, 1, &mut rng);
        let seq = vec![vec![0.0]; 3];
        assert!(net.forward(&seq, &[true, false, true]).is_err());
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::new("l", 4, 3, &mut rng);
        let b = p.b.value.row(0);
        assert!(b[3..6].iter().all(|v| *v == 1.0));
        assert!(b[..3].iter().chain(&b[6..]).all(|v| *v == 0.0));
    }
}
