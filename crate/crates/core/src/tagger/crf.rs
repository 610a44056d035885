//! Linear-chain CRF over per-step emission scores.
//!
//! All functions take emissions as one row of `L` scores per padded step
//! together with a true-prefix mask; only the unmasked prefix is read.

use crate::error::{Error, Result};
use crate::neural::{argmax, log_sum_exp, prefix_len, Param, Parameterized};

/// Transition scores `transitions[u][v]` for label `u` followed by `v`,
/// plus start and end scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub transitions: Param,
    pub start: Param,
    pub end: Param,
}

impl CrfParams {
    pub fn zeros(labels: usize) -> Self {
        CrfParams {
            transitions: Param::zeros("crf.transitions", labels, labels),
            start: Param::zeros("crf.start", 1, labels),
            end: Param::zeros("crf.end", 1, labels),
        }
    }

    pub fn labels(&self) -> usize {
        self.start.value.cols()
    }

    fn trans(&self, u: usize, v: usize) -> f64 {
        self.transitions.value.get(u, v)
    }

    fn start_score(&self, v: usize) -> f64 {
        self.start.value.get(0, v)
    }

    fn end_score(&self, v: usize) -> f64 {
        self.end.value.get(0, v)
    }
}

impl Parameterized for CrfParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.transitions, &self.start, &self.end]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.transitions, &mut self.start, &mut self.end]
    }
}

fn checked_len(emissions: &[Vec<f64>], crf: Option<&CrfParams>, mask: &[bool]) -> Result<usize> {
    if emissions.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} emission rows vs mask length {}",
            emissions.len(),
            mask.len()
        )));
    }
    let len = prefix_len(mask)?;
    if len == 0 {
        return Err(Error::Shape("empty mask".into()));
    }
    let labels = crf.map_or(emissions[0].len(), CrfParams::labels);
    if let Some(row) = emissions[..len].iter().find(|r| r.len() != labels) {
        return Err(Error::Shape(format!(
            "emission row of length {} vs {labels} labels",
            row.len()
        )));
    }
    Ok(len)
}

/// `alpha[t][v]`: log-sum of scores of all prefixes ending in `v` at `t`.
fn forward_table(emissions: &[Vec<f64>], crf: &CrfParams, len: usize) -> Vec<Vec<f64>> {
    let l = crf.labels();
    let mut alpha = Vec::with_capacity(len);
    alpha.push(
        (0..l)
            .map(|v| crf.start_score(v) + emissions[0][v])
            .collect::<Vec<_>>(),
    );
    let mut buf = vec![0.0; l];
    for t in 1..len {
        let prev = &alpha[t - 1];
        let row = (0..l)
            .map(|v| {
                for u in 0..l {
                    buf[u] = prev[u] + crf.trans(u, v);
                }
                log_sum_exp(&buf) + emissions[t][v]
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

/// `beta[t][u]`: log-sum of scores of all suffixes after `u` at `t`.
fn backward_table(emissions: &[Vec<f64>], crf: &CrfParams, len: usize) -> Vec<Vec<f64>> {
    let l = crf.labels();
    let mut beta = vec![vec![0.0; l]; len];
    beta[len - 1] = (0..l).map(|u| crf.end_score(u)).collect();
    let mut buf = vec![0.0; l];
    for t in (0..len - 1).rev() {
        for u in 0..l {
            for v in 0..l {
                buf[v] = crf.trans(u, v) + emissions[t + 1][v] + beta[t + 1][v];
            }
            beta[t][u] = log_sum_exp(&buf);
        }
    }
    beta
}

fn log_z(alpha: &[Vec<f64>], crf: &CrfParams) -> f64 {
    let last = alpha.last().expect("non-empty");
    let terms: Vec<f64> = (0..crf.labels())
        .map(|v| last[v] + crf.end_score(v))
        .collect();
    log_sum_exp(&terms)
}

/// Log-partition over all label sequences of the unmasked prefix.
pub fn log_partition(emissions: &[Vec<f64>], crf: &CrfParams, mask: &[bool]) -> Result<f64> {
    let len = checked_len(emissions, Some(crf), mask)?;
    Ok(log_z(&forward_table(emissions, crf, len), crf))
}

/// Per-step posterior label marginals, one row per unmasked step.
pub fn marginals(emissions: &[Vec<f64>], crf: &CrfParams, mask: &[bool]) -> Result<Vec<Vec<f64>>> {
    let len = checked_len(emissions, Some(crf), mask)?;
    let alpha = forward_table(emissions, crf, len);
    let beta = backward_table(emissions, crf, len);
    let z = log_z(&alpha, crf);
    Ok((0..len)
        .map(|t| {
            (0..crf.labels())
                .map(|v| (alpha[t][v] + beta[t][v] - z).exp())
                .collect()
        })
        .collect())
}

/// Unnormalized score of a label path. Additions happen in the same order
/// as the Viterbi recursion so the two agree bit for bit.
pub fn sequence_score(emissions: &[Vec<f64>], crf: &CrfParams, labels: &[usize]) -> f64 {
    let mut s = crf.start_score(labels[0]) + emissions[0][labels[0]];
    for t in 1..labels.len() {
        s = s + crf.trans(labels[t - 1], labels[t]) + emissions[t][labels[t]];
    }
    s + crf.end_score(labels[labels.len() - 1])
}

/// Loss value and the gradient with respect to every padded emission row
/// (zero on masked rows). CRF parameter gradients are accumulated in place
/// when requested.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfLoss {
    pub loss: f64,
    pub d_emissions: Vec<Vec<f64>>,
}

/// `logZ - score(gold)` scaled by `scale`, with gradients scaled alike.
pub fn nll(
    emissions: &[Vec<f64>],
    crf: &mut CrfParams,
    gold: &[usize],
    mask: &[bool],
    scale: f64,
) -> Result<CrfLoss> {
    let len = checked_len(emissions, Some(crf), mask)?;
    let l = crf.labels();
    if gold.len() < len {
        return Err(Error::Shape(format!(
            "{} gold labels for {len} steps",
            gold.len()
        )));
    }
    if let Some(&bad) = gold[..len].iter().find(|&&g| g >= l) {
        return Err(Error::Shape(format!(
            "gold label id {bad} out of range 0..{l}"
        )));
    }
    let gold = &gold[..len];
    let alpha = forward_table(emissions, crf, len);
    let beta = backward_table(emissions, crf, len);
    let z = log_z(&alpha, crf);
    let loss = z - sequence_score(emissions, crf, gold);

    let mut d_em = vec![vec![0.0; l]; emissions.len()];
    for t in 0..len {
        for v in 0..l {
            d_em[t][v] = scale * (alpha[t][v] + beta[t][v] - z).exp();
        }
        d_em[t][gold[t]] -= scale;
    }
    for v in 0..l {
        crf.start.grad.add_at(0, v, d_em[0][v]);
        crf.end.grad.add_at(0, v, d_em[len - 1][v]);
    }
    for t in 0..len - 1 {
        for u in 0..l {
            for v in 0..l {
                let p = (alpha[t][u] + crf.trans(u, v) + emissions[t + 1][v] + beta[t + 1][v] - z)
                    .exp();
                crf.transitions.grad.add_at(u, v, scale * p);
            }
        }
        crf.transitions.grad.add_at(gold[t], gold[t + 1], -scale);
    }
    Ok(CrfLoss {
        loss: scale * loss,
        d_emissions: d_em,
    })
}

/// Maximum-score path over the unmasked prefix and its score. Ties go to
/// the lower label id at every decision.
pub fn viterbi(
    emissions: &[Vec<f64>],
    crf: &CrfParams,
    mask: &[bool],
) -> Result<(Vec<usize>, f64)> {
    let len = checked_len(emissions, Some(crf), mask)?;
    let l = crf.labels();
    let mut delta: Vec<f64> = (0..l)
        .map(|v| crf.start_score(v) + emissions[0][v])
        .collect();
    let mut back = vec![vec![0usize; l]; len];
    for t in 1..len {
        let mut next = vec![0.0; l];
        for v in 0..l {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for u in 0..l {
                let s = delta[u] + crf.trans(u, v);
                if s > best {
                    best = s;
                    arg = u;
                }
            }
            next[v] = best + emissions[t][v];
            back[t][v] = arg;
        }
        delta = next;
    }
    let finals: Vec<f64> = (0..l).map(|v| delta[v] + crf.end_score(v)).collect();
    let last = argmax(&finals);
    let score = finals[last];
    let mut path = vec![last; len];
    for t in (1..len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok((path, score))
}

/// Per-step argmax of the emissions, ignoring transitions.
pub fn softmax_decode(emissions: &[Vec<f64>], mask: &[bool]) -> Result<Vec<usize>> {
    let len = checked_len(emissions, None, mask)?;
    Ok(emissions[..len].iter().map(|r| argmax(r)).collect())
}
