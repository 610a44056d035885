//! Brute-force references for the CRF and the full-model gradient check,
//! shared by the test suites and the `oracle-test` / `gradcheck` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BoundingBox, FieldLabel, Invoice, LabeledInvoice};
use crate::error::Result;
use crate::neural::{grad_check_piecewise, log_sum_exp, Matrix, Param, Parameterized};
use crate::tagger::crf::{self, CrfParams};
use crate::tagger::{Encoded, TaggerConfig, TaggerModel};
use crate::text_features::FrequencyTable;
use crate::visual_features::{Raster, VisualEncoderConfig};

/// Quantities computed by walking all `L^T` label paths.
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub log_z: f64,
    pub best_path: Vec<usize>,
    pub best_score: f64,
    pub marginals: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

pub fn enumerate_paths(emissions: &[Vec<f64>], crf: &CrfParams) -> Enumeration {
    let t = emissions.len();
    let l = crf.labels();
    let total = l.pow(t as u32);
    let mut scores = Vec::with_capacity(total);
    let mut paths = Vec::with_capacity(total);
    let mut path = vec![0usize; t];
    for code in 0..total {
        let mut c = code;
        // most significant digit first so paths come out in lexicographic order
        for k in (0..t).rev() {
            path[k] = c % l;
            c /= l;
        }
        scores.push(crf::sequence_score(emissions, crf, &path));
        paths.push(path.clone());
    }
    let log_z = log_sum_exp(&scores);
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let mut marginals = vec![vec![0.0; l]; t];
    for (p, s) in paths.iter().zip(&scores) {
        let w = (s - log_z).exp();
        for (k, &y) in p.iter().enumerate() {
            marginals[k][y] += w;
        }
    }
    Enumeration {
        log_z,
        best_path: paths[best].clone(),
        best_score: scores[best],
        marginals,
        scores,
    }
}

/// Emissions and CRF parameters drawn uniformly from `[-2, 2]`.
pub fn random_instance<R: Rng>(t: usize, l: usize, rng: &mut R) -> (Vec<Vec<f64>>, CrfParams) {
    let em = (0..t)
        .map(|_| (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let mut crf = CrfParams::zeros(l);
    crf.transitions.value = Matrix::uniform(l, l, 2.0, rng);
    crf.start.value = Matrix::uniform(1, l, 2.0, rng);
    crf.end.value = Matrix::uniform(1, l, 2.0, rng);
    (em, crf)
}

/// Worst-case discrepancies against enumeration over a batch of instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub instances: usize,
    pub max_log_z_error: f64,
    pub max_marginal_error: f64,
    pub max_marginal_sum_error: f64,
    pub viterbi_mismatches: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_log_z_error < 1e-8
            && self.max_marginal_error < 1e-9
            && self.max_marginal_sum_error < 1e-9
            && self.viterbi_mismatches == 0
    }
}

/// Random instances with `T` cycling over `1..=6` and five labels.
pub fn run_crf_oracle(instances: usize, seed: u64) -> Result<OracleReport> {
    let l = FieldLabel::COUNT;
    let mut rep = OracleReport {
        instances,
        max_log_z_error: 0.0,
        max_marginal_error: 0.0,
        max_marginal_sum_error: 0.0,
        viterbi_mismatches: 0,
    };
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let t = 1 + i % 6;
        let (em, crf_params) = random_instance(t, l, &mut rng);
        let mask = vec![true; t];
        let e = enumerate_paths(&em, &crf_params);
        let z = crf::log_partition(&em, &crf_params, &mask)?;
        rep.max_log_z_error = rep.max_log_z_error.max((z - e.log_z).abs());
        let (path, score) = crf::viterbi(&em, &crf_params, &mask)?;
        if path != e.best_path || score != e.best_score {
            rep.viterbi_mismatches += 1;
        }
        for (row, want) in crf::marginals(&em, &crf_params, &mask)?
            .iter()
            .zip(&e.marginals)
        {
            rep.max_marginal_sum_error = rep
                .max_marginal_sum_error
                .max((row.iter().sum::<f64>() - 1.0).abs());
            for (a, b) in row.iter().zip(want) {
                rep.max_marginal_error = rep.max_marginal_error.max((a - b).abs());
            }
        }
    }
    Ok(rep)
}

/// Tiny model configuration: hidden 8, 4x4 crops, 8-dim text, 16-row table.
pub fn toy_config(seed: u64) -> TaggerConfig {
    let mut c = TaggerConfig {
        hidden: 8,
        vocab_size: 16,
        seed,
        ..Default::default()
    };
    c.text.dim = 8;
    c.visual = VisualEncoderConfig {
        crop_h: 4,
        crop_w: 4,
        out_dim: 4,
        ..Default::default()
    };
    c
}

/// Three boxes on a textured page so every conv weight sees signal.
pub fn toy_invoice(seed: u64) -> LabeledInvoice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut img = Raster::filled(64, 64, 1, 255);
    for y in 0..64 {
        for x in 0..64 {
            img.set(x, y, 0, rng.gen_range(0..=255));
        }
    }
    let boxes = vec![
        BoundingBox::rect(4.0, 4.0, 40.0, 10.0, "ACME TRADING SDN BHD"),
        BoundingBox::rect(4.0, 24.0, 28.0, 8.0, "26/02/1998"),
        BoundingBox::rect(30.0, 48.0, 24.0, 8.0, "TOTAL 7.50"),
    ];
    let invoice =
        Invoice::new(format!("toy{seed}"), 64.0, 64.0, boxes, Some(img)).expect("valid toy");
    LabeledInvoice::new(
        invoice,
        vec![FieldLabel::Company, FieldLabel::Date, FieldLabel::Total],
    )
    .expect("labels")
}

/// Steps for [`grad_check_piecewise`] on the full model. Plain h = 1e-5
/// differences sit at the roundoff floor for recurrent gradients near 1e-8.
pub const CHECK_H_MAX: f64 = 1e-2;
pub const CHECK_H_MIN: f64 = 1e-6;

struct Probe {
    model: TaggerModel,
    enc: Encoded,
}

impl Parameterized for Probe {
    fn params(&self) -> Vec<&Param> {
        self.model.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.model.params_mut()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradReport {
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Finite-difference check of the full tagger loss (text table, conv
/// stack, BiLSTM, projection and CRF) on the T = 3 toy, every coordinate.
pub fn model_grad_check(seed: u64) -> Result<ModelGradReport> {
    check_model(toy_config(seed), seed, None)
}

/// The same check at the default model sizes, on `per_tensor` randomly
/// chosen coordinates of each tensor (all of them when smaller). Sampling
/// favours coordinates with a non-zero gradient, so untouched embedding
/// rows do not crowd out the informative ones.
pub fn desk_grad_check(seed: u64, per_tensor: usize) -> Result<ModelGradReport> {
    let cfg = TaggerConfig {
        seed,
        ..TaggerConfig::default()
    };
    check_model(cfg, seed, Some(per_tensor))
}

fn check_model(cfg: TaggerConfig, seed: u64, per_tensor: Option<usize>) -> Result<ModelGradReport> {
    let li = toy_invoice(seed);
    let mut model = TaggerModel::new(cfg, FrequencyTable::default())?;
    // non-zero CRF and biases so their gradients are generic
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    for p in model.tensors_mut() {
        if p.name.starts_with("crf") || p.name.starts_with("visual") && p.name.ends_with("bias") {
            p.value = Matrix::uniform(p.value.rows(), p.value.cols(), 0.5, &mut rng);
        }
    }
    let enc = model.encode_labeled(&li)?;
    let coords = match per_tensor {
        None => None,
        Some(n) => {
            model.zero_grads();
            model.loss_and_backward(&enc, 3, 1.0)?;
            let picked = sample_coordinates(&model, n, &mut rng);
            model.zero_grads();
            Some(picked)
        }
    };
    let mut probe = Probe { model, enc };
    let mut failure = None;
    let mut backward_failure = None;
    let rep = grad_check_piecewise(
        &mut probe,
        |p| {
            if let Err(e) = p.model.loss_and_backward(&p.enc, 3, 1.0) {
                backward_failure = Some(e);
            }
        },
        |p| {
            p.model.loss_with_pattern(&p.enc, 3).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                (f64::NAN, Vec::new())
            })
        },
        coords.as_deref(),
        CHECK_H_MAX,
        CHECK_H_MIN,
    );
    if let Some(e) = backward_failure.or(failure) {
        return Err(e);
    }
    Ok(ModelGradReport {
        seed,
        max_rel_error: rep.max_rel_error,
        worst: rep.worst,
        coordinates: rep.coordinates,
    })
}

fn sample_coordinates<R: Rng>(model: &TaggerModel, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    use rand::seq::SliceRandom;
    let mut out = Vec::new();
    for (pi, p) in model.params().iter().enumerate() {
        let g = p.grad.as_slice();
        let (mut live, mut dead): (Vec<usize>, Vec<usize>) =
            (0..g.len()).partition(|&k| g[k] != 0.0);
        live.shuffle(rng);
        dead.shuffle(rng);
        let take_live = live.len().min(n);
        out.extend(live[..take_live].iter().map(|&k| (pi, k)));
        let take_dead = dead.len().min(n - take_live).min(2);
        out.extend(dead[..take_dead].iter().map(|&k| (pi, k)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_of_uniform_instance() {
        let crf = CrfParams::zeros(5);
        let e = enumerate_paths(&vec![vec![0.0; 5]; 3], &crf);
        assert_eq!(e.scores.len(), 125);
        assert!((e.log_z - 3.0 * 5f64.ln()).abs() < 1e-12);
        assert_eq!(e.best_path, vec![0, 0, 0]);
        for row in &e.marginals {
            assert!(row.iter().all(|m| (m - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn oracle_suite_passes() {
        let rep = run_crf_oracle(100, 0).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn desk_model_gradient_sample() {
        for seed in 0..3 {
            let rep = desk_grad_check(seed, 24).unwrap();
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
            assert!(rep.coordinates > 300);
        }
    }

    #[test]
    fn corrupted_model_gradient_is_caught() {
        let model = TaggerModel::new(toy_config(1), FrequencyTable::default()).unwrap();
        let enc = model.encode_labeled(&toy_invoice(1)).unwrap();
        let mut probe = Probe { model, enc };
        let rep = grad_check_piecewise(
            &mut probe,
            |p| {
                p.model.loss_and_backward(&p.enc, 3, 1.0).unwrap();
                for q in p.model.params_mut() {
                    if q.name == "projection.weight" {
                        let g = q.grad.get(0, 0);
                        q.grad.set(0, 0, 1.5 * g);
                    }
                }
            },
            |p| p.model.loss_with_pattern(&p.enc, 3).unwrap(),
            None,
            CHECK_H_MAX,
            CHECK_H_MIN,
        );
        assert!(rep.max_rel_error > 0.3, "{rep:?}");
        assert_eq!(rep.worst, Some(("projection.weight".to_string(), 0)));
    }

    #[test]
    fn full_model_gradient() {
        for seed in 0..20 {
            let rep = model_grad_check(seed).unwrap();
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
            assert!(rep.coordinates > 1000);
        }
    }
}
