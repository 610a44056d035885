use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{frequency_table, Encoded, PaddedBatch, TaggerModel};
use super::TaggerConfig;
use crate::corpus::{FieldLabel, LabeledInvoice};
use crate::error::{Error, Result};
use crate::neural::{Adam, AdamConfig, Parameterized};
use crate::posteval::evaluate_boxes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-invoice loss over the epoch.
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model from the epoch with the best validation macro-F1.
    pub model: TaggerModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Box-level macro-F1 of `model` on already encoded invoices.
pub fn macro_f1(model: &TaggerModel, encoded: &[Encoded]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for enc in encoded {
        let (labels, _) = model.decode_boxes(enc)?;
        pred.extend(
            labels
                .into_iter()
                .map(|l| FieldLabel::from_id(l).expect("label id")),
        );
        gold.extend(
            enc.box_labels
                .as_ref()
                .ok_or_else(|| Error::Shape(format!("{}: no gold labels", enc.id)))?
                .iter()
                .map(|&l| FieldLabel::from_id(l).expect("label id")),
        );
    }
    Ok(evaluate_boxes(&pred, &gold)?.macro_f1)
}

/// Mini-batch Adam on the mean per-invoice loss with early stopping on
/// validation box macro-F1.
pub fn train(
    train_set: &[LabeledInvoice],
    val_set: &[LabeledInvoice],
    config: &TaggerConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let freq = frequency_table(train_set, config);
    let mut model = TaggerModel::new(config.clone(), freq)?;
    let train_enc = train_set
        .iter()
        .map(|li| model.encode_labeled(li))
        .collect::<Result<Vec<_>>>()?;
    let val_enc = val_set
        .iter()
        .map(|li| model.encode_labeled(li))
        .collect::<Result<Vec<_>>>()?;
    let global_max = if config.global_max_padding {
        train_enc.iter().map(Encoded::len).max().unwrap_or(0)
    } else {
        0
    };

    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        clip: config.clip,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train_enc.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TaggerModel)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; train_enc.len()];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = PaddedBatch::new(&train_enc, chunk, global_max);
            let scale = 1.0 / chunk.len() as f64;
            model.zero_grads();
            for &i in &batch.indices {
                let loss = model.loss_and_backward(&train_enc[i], batch.t_max, scale)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {loss} at epoch {epoch}, batch {b}, invoice {}",
                        train_enc[i].id
                    )));
                }
                losses[i] = loss / scale;
            }
            adam.step(&mut model.params_mut()).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val = macro_f1(&model, &val_enc)?;
        log::info!("epoch {epoch}: loss {train_loss:.6}, val macro-F1 {val:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_macro_f1: val,
        });
        match &best {
            Some((f, _, _)) if val <= *f => {}
            _ => best = Some((val, epoch, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= config.patience {
            log::info!("early stop at epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
