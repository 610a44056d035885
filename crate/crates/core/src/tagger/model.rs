use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::crf::{self, CrfParams};
use super::{Decoder, Granularity, Head, TaggerConfig};
use crate::corpus::{reading_order, FieldLabel, Invoice, LabeledInvoice};
use crate::error::{Error, Result};
use crate::neural::{softmax, Affine, BiLstm, BiLstmCache, Param, Parameterized};
use crate::spatial_features::{spatial_vector, SpatialVector, SPATIAL_DIM};
use crate::text_features::{
    hashed_provider, load_vector_file_with, normalize_tokens, token_weights, EmbeddingProvider,
    FrequencyTable, HashedEmbedding, Token, VectorFileEmbedding,
};
use crate::visual_features::{
    crop_and_resize, load_precomputed, ImageCrop, PrecomputedVisual, VisualCache, VisualEncoder,
};

/// Label id used under a false mask.
pub const PAD_LABEL: usize = FieldLabel::COUNT;

/// Concatenates `text ‖ visual ‖ spatial` after checking each length.
pub fn fuse(
    text: &[f64],
    visual: &[f64],
    spatial: &[f64],
    text_dim: usize,
    visual_dim: usize,
) -> Result<Vec<f64>> {
    for (name, got, want) in [
        ("text", text.len(), text_dim),
        ("visual", visual.len(), visual_dim),
        ("spatial", spatial.len(), SPATIAL_DIM),
    ] {
        if got != want {
            return Err(Error::Shape(format!(
                "{name} vector of length {got}, expected {want}"
            )));
        }
    }
    let mut v = Vec::with_capacity(text_dim + visual_dim + SPATIAL_DIM);
    v.extend_from_slice(text);
    v.extend_from_slice(visual);
    v.extend_from_slice(spatial);
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextProvider {
    Hashed(HashedEmbedding),
    Frozen(VectorFileEmbedding),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextInput {
    /// Hashed-table rows with normalized pooling weights.
    Rows(Vec<(usize, f64)>),
    Fixed(Vec<f64>),
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VisualInput {
    Crop(ImageCrop),
    Fixed(Vec<f64>),
    Zero,
}

/// One tagging step: a box, or one token of a box.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub text: TextInput,
    pub visual: VisualInput,
    pub spatial: SpatialVector,
    /// Position of the owning box in reading order.
    pub box_pos: usize,
}

/// An invoice turned into model inputs, in reading order.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub id: String,
    /// `order[p]` is the original index of the box at reading position `p`.
    pub order: Vec<usize>,
    pub units: Vec<Unit>,
    /// Gold label id per unit.
    pub labels: Option<Vec<usize>>,
    /// Gold label id per box, reading order.
    pub box_labels: Option<Vec<usize>>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn n_boxes(&self) -> usize {
        self.order.len()
    }
}

/// Per-box decode in original box order.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<FieldLabel>,
    pub confidences: Vec<f64>,
}

/// Forward state for one invoice.
pub struct ForwardState {
    pub fused: Vec<Vec<f64>>,
    pub emissions: Vec<Vec<f64>>,
    visual: Vec<Option<VisualCache>>,
    head: Option<(Vec<Vec<f64>>, BiLstmCache)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerModel {
    pub config: TaggerConfig,
    pub text: TextProvider,
    pub visual: VisualEncoder,
    pub bilstm: BiLstm,
    pub projection: Affine,
    pub crf: CrfParams,
    pub freq: FrequencyTable,
    pub precomputed: Option<PrecomputedVisual>,
}

/// Token frequencies over a set of invoices, using the configured
/// normalization.
pub fn frequency_table(invoices: &[LabeledInvoice], cfg: &TaggerConfig) -> FrequencyTable {
    let tokens: Vec<Token> = invoices
        .iter()
        .flat_map(|li| li.invoice.boxes.iter())
        .flat_map(|b| normalize_tokens(&b.text, &cfg.text))
        .collect();
    FrequencyTable::from_tokens(tokens.iter().map(|t| t.surface.as_str()))
}

impl TaggerModel {
    /// Fresh model; all randomness derives from `config.seed`.
    pub fn new(config: TaggerConfig, freq: FrequencyTable) -> Result<Self> {
        config.validate()?;
        let text = match &config.embeddings {
            Some(path) => {
                let f = load_vector_file_with(path, config.vocab_size, config.seed)?;
                if f.dim() != config.text.dim {
                    return Err(Error::Config(format!(
                        "{} has {}-dim vectors but text dim is {}",
                        path.display(),
                        f.dim(),
                        config.text.dim
                    )));
                }
                TextProvider::Frozen(f)
            }
            None => TextProvider::Hashed(hashed_provider(
                config.text.dim,
                config.vocab_size,
                config.seed,
            )?),
        };
        let precomputed = match &config.visual_precomputed {
            Some(path) => {
                let p = load_precomputed(path)?;
                if p.dim != config.visual.out_dim {
                    return Err(Error::Config(format!(
                        "{} has {}-dim vectors but visual out_dim is {}",
                        path.display(),
                        p.dim,
                        config.visual.out_dim
                    )));
                }
                Some(p)
            }
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let visual = VisualEncoder::new(config.visual.clone(), &mut rng)?;
        let bilstm = BiLstm::new("bilstm", config.fused_dim(), config.hidden, &mut rng);
        let proj_in = match config.head {
            Head::Sequence => bilstm.output_dim(),
            Head::PerBox => config.fused_dim(),
        };
        let projection = Affine::new("projection", proj_in, FieldLabel::COUNT, &mut rng);
        Ok(TaggerModel {
            config,
            text,
            visual,
            bilstm,
            projection,
            crf: CrfParams::zeros(FieldLabel::COUNT),
            freq,
            precomputed,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.config.fused_dim()
    }

    /// Every stored tensor, including frozen and unused ones, in checkpoint
    /// order.
    pub fn tensors(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        match &self.text {
            TextProvider::Hashed(h) => v.push(&h.table),
            TextProvider::Frozen(f) => v.push(&f.fallback.table),
        }
        v.extend(self.visual.params());
        v.extend(self.bilstm.params());
        v.extend(self.projection.params());
        v.extend(self.crf.params());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        match &mut self.text {
            TextProvider::Hashed(h) => v.push(&mut h.table),
            TextProvider::Frozen(f) => v.push(&mut f.fallback.table),
        }
        v.extend(self.visual.params_mut());
        v.extend(self.bilstm.params_mut());
        v.extend(self.projection.params_mut());
        v.extend(self.crf.params_mut());
        v
    }

    fn text_input(&self, text: &str) -> TextInput {
        if !self.config.features.text {
            return TextInput::Zero;
        }
        let tokens = normalize_tokens(text, &self.config.text);
        let weights = token_weights(&tokens, &self.config.text, Some(&self.freq));
        let total: f64 = weights.iter().sum();
        if tokens.is_empty() || total == 0.0 {
            return TextInput::Zero;
        }
        match &self.text {
            TextProvider::Hashed(h) => TextInput::Rows(
                tokens
                    .iter()
                    .zip(&weights)
                    .map(|(t, w)| (h.row_index(&t.surface), w / total))
                    .collect(),
            ),
            TextProvider::Frozen(f) => {
                let mut v = vec![0.0; f.dim()];
                for (t, w) in tokens.iter().zip(&weights) {
                    for (o, x) in v.iter_mut().zip(f.embed(&t.surface)) {
                        *o += w / total * x;
                    }
                }
                TextInput::Fixed(v)
            }
        }
    }

    fn visual_input(&self, invoice: &Invoice, idx: usize) -> VisualInput {
        if !self.config.features.visual {
            return VisualInput::Zero;
        }
        if let Some(v) = self
            .precomputed
            .as_ref()
            .and_then(|p| p.get(&invoice.id, idx))
        {
            return VisualInput::Fixed(v.to_vec());
        }
        let crop = crop_and_resize(
            invoice.image.as_ref(),
            &invoice.boxes[idx],
            &self.config.visual,
        );
        if crop.present {
            VisualInput::Crop(crop)
        } else {
            VisualInput::Zero
        }
    }

    /// Turns an invoice into reading-ordered units. Crops are computed here
    /// once so training epochs never touch the raster again.
    pub fn encode(&self, invoice: &Invoice, labels: Option<&[FieldLabel]>) -> Result<Encoded> {
        if let Some(l) = labels {
            if l.len() != invoice.boxes.len() {
                return Err(Error::Shape(format!(
                    "{}: {} labels for {} boxes",
                    invoice.id,
                    l.len(),
                    invoice.boxes.len()
                )));
            }
        }
        let order = reading_order(&invoice.boxes);
        let mut units = Vec::new();
        let mut unit_labels = Vec::new();
        for (pos, &idx) in order.iter().enumerate() {
            let b = &invoice.boxes[idx];
            let spatial = if self.config.features.spatial {
                spatial_vector(b, invoice.page_width, invoice.page_height)
            } else {
                [0.0; SPATIAL_DIM]
            };
            let visual = self.visual_input(invoice, idx);
            let texts: Vec<String> = match self.config.granularity {
                Granularity::Box => vec![b.text.clone()],
                Granularity::Word => {
                    let words: Vec<String> =
                        b.text.split_whitespace().map(str::to_string).collect();
                    if words.is_empty() {
                        vec![String::new()]
                    } else {
                        words
                    }
                }
            };
            for t in texts {
                units.push(Unit {
                    text: self.text_input(&t),
                    visual: visual.clone(),
                    spatial,
                    box_pos: pos,
                });
                if let Some(l) = labels {
                    unit_labels.push(l[idx].id());
                }
            }
        }
        Ok(Encoded {
            id: invoice.id.clone(),
            box_labels: labels.map(|l| order.iter().map(|&i| l[i].id()).collect()),
            labels: labels.map(|_| unit_labels),
            order,
            units,
        })
    }

    pub fn encode_labeled(&self, li: &LabeledInvoice) -> Result<Encoded> {
        self.encode(&li.invoice, Some(&li.labels))
    }

    fn text_vector(&self, input: &TextInput) -> Vec<f64> {
        let dim = self.config.text.dim;
        match (input, &self.text) {
            (TextInput::Rows(rows), TextProvider::Hashed(h)) => {
                let mut v = vec![0.0; dim];
                for &(r, w) in rows {
                    crate::neural::axpy(w, h.table.value.row(r), &mut v);
                }
                v
            }
            (TextInput::Fixed(v), _) => v.clone(),
            _ => vec![0.0; dim],
        }
    }

    /// Fused feature rows for every unit of an encoded invoice.
    pub fn fused_features(&self, enc: &Encoded) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_features(enc)?.0)
    }

    fn forward_features(&self, enc: &Encoded) -> Result<(Vec<Vec<f64>>, Vec<Option<VisualCache>>)> {
        let vdim = self.config.visual.out_dim;
        let mut fused = Vec::with_capacity(enc.len());
        let mut caches = Vec::with_capacity(enc.len());
        for u in &enc.units {
            let tv = self.text_vector(&u.text);
            let (vv, cache) = match &u.visual {
                VisualInput::Crop(c) => self.visual.forward(c)?,
                VisualInput::Fixed(v) => (v.clone(), None),
                VisualInput::Zero => (vec![0.0; vdim], None),
            };
            fused.push(fuse(&tv, &vv, &u.spatial, self.config.text.dim, vdim)?);
            caches.push(cache);
        }
        Ok((fused, caches))
    }

    /// Emission scores for fused rows under a true-prefix mask.
    pub fn emissions(&self, fused: &[Vec<f64>], mask: &[bool]) -> Result<Vec<Vec<f64>>> {
        Ok(self.head_forward(fused, mask)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn head_forward(
        &self,
        fused: &[Vec<f64>],
        mask: &[bool],
    ) -> Result<(Vec<Vec<f64>>, Option<(Vec<Vec<f64>>, BiLstmCache)>)> {
        if fused.is_empty() || !mask.first().copied().unwrap_or(false) {
            return Err(Error::Shape(
                "emissions need at least one unmasked step".into(),
            ));
        }
        if let Some(r) = fused.iter().find(|r| r.len() != self.fused_dim()) {
            return Err(Error::Shape(format!(
                "fused vector of length {} vs model {}",
                r.len(),
                self.fused_dim()
            )));
        }
        let len = crate::neural::prefix_len(mask)?;
        match self.config.head {
            Head::Sequence => {
                let (out, cache) = self.bilstm.forward(fused, mask)?;
                let mut em = Vec::with_capacity(fused.len());
                for (t, o) in out.iter().enumerate() {
                    em.push(if t < len {
                        self.projection.forward(o)?
                    } else {
                        vec![0.0; FieldLabel::COUNT]
                    });
                }
                Ok((em, Some((out, cache))))
            }
            Head::PerBox => {
                let mut em = Vec::with_capacity(fused.len());
                for (t, x) in fused.iter().enumerate() {
                    em.push(if t < len {
                        self.projection.forward(x)?
                    } else {
                        vec![0.0; FieldLabel::COUNT]
                    });
                }
                Ok((em, None))
            }
        }
    }

    /// Full forward pass over an encoded invoice padded to `padded_len`.
    pub fn forward(&self, enc: &Encoded, padded_len: usize) -> Result<ForwardState> {
        let (mut fused, visual) = self.forward_features(enc)?;
        fused.resize(padded_len.max(enc.len()), vec![0.0; self.fused_dim()]);
        let mask = mask_for(enc.len(), fused.len());
        let (emissions, head) = self.head_forward(&fused, &mask)?;
        Ok(ForwardState {
            fused,
            emissions,
            visual,
            head,
        })
    }

    /// Loss for one invoice scaled by `scale`, with gradients accumulated
    /// into every trainable parameter.
    pub fn loss_and_backward(
        &mut self,
        enc: &Encoded,
        padded_len: usize,
        scale: f64,
    ) -> Result<f64> {
        let gold = enc
            .labels
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: no gold labels", enc.id)))?;
        let state = self.forward(enc, padded_len)?;
        let mask = mask_for(enc.len(), state.fused.len());
        let mut padded_gold = gold.clone();
        padded_gold.resize(state.fused.len(), PAD_LABEL);
        let (loss, d_em) = match self.config.decoder {
            Decoder::Crf => {
                let out = crf::nll(&state.emissions, &mut self.crf, &padded_gold, &mask, scale)?;
                (out.loss, out.d_emissions)
            }
            Decoder::Softmax => softmax_loss(&state.emissions, &padded_gold, enc.len(), scale),
        };
        self.backward(enc, &state, &d_em);
        Ok(loss)
    }

    /// The loss of [`TaggerModel::loss_and_backward`] without touching any
    /// gradient, plus the visual activation pattern of the same pass.
    pub fn loss_with_pattern(&self, enc: &Encoded, padded_len: usize) -> Result<(f64, Vec<usize>)> {
        let gold = enc
            .labels
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: no gold labels", enc.id)))?;
        let state = self.forward(enc, padded_len)?;
        let mask = mask_for(enc.len(), state.fused.len());
        let mut padded_gold = gold.clone();
        padded_gold.resize(state.fused.len(), PAD_LABEL);
        let loss = match self.config.decoder {
            Decoder::Crf => {
                crf::nll(
                    &state.emissions,
                    &mut self.crf.clone(),
                    &padded_gold,
                    &mask,
                    1.0,
                )?
                .loss
            }
            Decoder::Softmax => softmax_loss(&state.emissions, &padded_gold, enc.len(), 1.0).0,
        };
        let pattern = state
            .visual
            .iter()
            .flatten()
            .flat_map(|c| c.activation_pattern())
            .collect();
        Ok((loss, pattern))
    }

    fn backward(&mut self, enc: &Encoded, state: &ForwardState, d_em: &[Vec<f64>]) {
        let len = enc.len();
        let fdim = self.fused_dim();
        let d_fused: Vec<Vec<f64>> = match &state.head {
            Some((out, cache)) => {
                let mut d_out = vec![vec![0.0; self.bilstm.output_dim()]; state.fused.len()];
                for t in 0..len {
                    self.projection
                        .backward(&out[t], &d_em[t], Some(&mut d_out[t]));
                }
                self.bilstm.backward(&state.fused, cache, &d_out)
            }
            None => {
                let mut d = vec![vec![0.0; fdim]; state.fused.len()];
                for t in 0..len {
                    self.projection
                        .backward(&state.fused[t], &d_em[t], Some(&mut d[t]));
                }
                d
            }
        };
        let tdim = self.config.text.dim;
        let vdim = self.config.visual.out_dim;
        for (t, u) in enc.units.iter().enumerate() {
            if let (TextInput::Rows(rows), TextProvider::Hashed(h)) = (&u.text, &mut self.text) {
                for &(r, w) in rows {
                    crate::neural::axpy(w, &d_fused[t][..tdim], h.table.grad.row_mut(r));
                }
            }
            if let Some(cache) = &state.visual[t] {
                self.visual.backward(cache, &d_fused[t][tdim..tdim + vdim]);
            }
        }
    }

    /// Per-unit label ids and label distributions.
    pub fn decode_units(&self, enc: &Encoded) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let state = self.forward(enc, enc.len())?;
        let mask = vec![true; enc.len()];
        match self.config.decoder {
            Decoder::Crf => {
                let (path, _) = crf::viterbi(&state.emissions, &self.crf, &mask)?;
                let dists = crf::marginals(&state.emissions, &self.crf, &mask)?;
                Ok((path, dists))
            }
            Decoder::Softmax => {
                let dists: Vec<Vec<f64>> = state.emissions.iter().map(|e| softmax(e)).collect();
                let labels = crf::softmax_decode(&state.emissions, &mask)?;
                Ok((labels, dists))
            }
        }
    }

    /// Box label ids and confidences in reading order.
    pub fn decode_boxes(&self, enc: &Encoded) -> Result<(Vec<usize>, Vec<f64>)> {
        let (labels, dists) = self.decode_units(enc)?;
        match self.config.granularity {
            Granularity::Box => {
                let conf = labels.iter().zip(&dists).map(|(&l, d)| d[l]).collect();
                Ok((labels, conf))
            }
            Granularity::Word => {
                let n = enc.n_boxes();
                let mut votes: Vec<Vec<usize>> = vec![Vec::new(); n];
                let mut box_dists: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); n];
                for (u, (&l, d)) in enc.units.iter().zip(labels.iter().zip(&dists)) {
                    votes[u.box_pos].push(l);
                    box_dists[u.box_pos].push(d);
                }
                let mut out_l = Vec::with_capacity(n);
                let mut out_c = Vec::with_capacity(n);
                for p in 0..n {
                    let win = majority_vote(&votes[p]);
                    let c = box_dists[p].iter().map(|d| d[win]).sum::<f64>()
                        / box_dists[p].len() as f64;
                    out_l.push(win);
                    out_c.push(c);
                }
                Ok((out_l, out_c))
            }
        }
    }

    pub fn predict(&self, invoice: &Invoice) -> Result<Prediction> {
        let enc = self.encode(invoice, None)?;
        self.predict_encoded(&enc)
    }

    /// Decodes and permutes back to the original box order.
    pub fn predict_encoded(&self, enc: &Encoded) -> Result<Prediction> {
        let (labels, conf) = self.decode_boxes(enc)?;
        let mut out_l = vec![FieldLabel::None; enc.n_boxes()];
        let mut out_c = vec![0.0; enc.n_boxes()];
        for (p, &orig) in enc.order.iter().enumerate() {
            out_l[orig] = FieldLabel::from_id(labels[p]).expect("label id in range");
            out_c[orig] = conf[p];
        }
        Ok(Prediction {
            labels: out_l,
            confidences: out_c,
        })
    }
}

impl Parameterized for TaggerModel {
    /// Parameters that receive gradients under the current configuration.
    fn params(&self) -> Vec<&Param> {
        let c = &self.config;
        let mut v = Vec::new();
        if let (true, TextProvider::Hashed(h)) = (c.features.text, &self.text) {
            v.push(&h.table);
        }
        if c.features.visual {
            v.extend(self.visual.params());
        }
        if c.head == Head::Sequence {
            v.extend(self.bilstm.params());
        }
        v.extend(self.projection.params());
        if c.decoder == Decoder::Crf {
            v.extend(self.crf.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let c = self.config.clone();
        let mut v = Vec::new();
        if let (true, TextProvider::Hashed(h)) = (c.features.text, &mut self.text) {
            v.push(&mut h.table);
        }
        if c.features.visual {
            v.extend(self.visual.params_mut());
        }
        if c.head == Head::Sequence {
            v.extend(self.bilstm.params_mut());
        }
        v.extend(self.projection.params_mut());
        if c.decoder == Decoder::Crf {
            v.extend(self.crf.params_mut());
        }
        v
    }
}

pub fn mask_for(len: usize, padded: usize) -> Vec<bool> {
    (0..padded).map(|i| i < len).collect()
}

/// Summed per-step cross-entropy over the first `len` steps.
fn softmax_loss(em: &[Vec<f64>], gold: &[usize], len: usize, scale: f64) -> (f64, Vec<Vec<f64>>) {
    let mut d = vec![vec![0.0; FieldLabel::COUNT]; em.len()];
    let mut loss = 0.0;
    for t in 0..len {
        let p = softmax(&em[t]);
        loss -= p[gold[t]].max(f64::MIN_POSITIVE).ln();
        for (k, pk) in p.iter().enumerate() {
            d[t][k] = scale * pk;
        }
        d[t][gold[t]] -= scale;
    }
    (scale * loss, d)
}

/// Most frequent label; ties go to the lower id.
pub fn majority_vote(labels: &[usize]) -> usize {
    let mut counts = [0usize; FieldLabel::COUNT];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = FieldLabel::None.id();
    let mut best_n = 0;
    for (l, &n) in counts.iter().enumerate() {
        if n > best_n {
            best = l;
            best_n = n;
        }
    }
    best
}

/// Padded training batch: rows share `t_max`, masks are true-prefixes and
/// padded labels carry [`PAD_LABEL`].
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub indices: Vec<usize>,
    pub t_max: usize,
    pub masks: Vec<Vec<bool>>,
    pub labels: Vec<Vec<usize>>,
}

impl PaddedBatch {
    pub fn new(encoded: &[Encoded], indices: &[usize], min_len: usize) -> Self {
        let t_max = indices
            .iter()
            .map(|&i| encoded[i].len())
            .max()
            .unwrap_or(0)
            .max(min_len);
        let masks = indices
            .iter()
            .map(|&i| mask_for(encoded[i].len(), t_max))
            .collect();
        let labels = indices
            .iter()
            .map(|&i| {
                let mut l = encoded[i].labels.clone().unwrap_or_default();
                l.resize(t_max, PAD_LABEL);
                l
            })
            .collect();
        PaddedBatch {
            indices: indices.to_vec(),
            t_max,
            masks,
            labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BoundingBox;
    use crate::neural::{grad_check_piecewise, Matrix};
    use crate::oracle::{CHECK_H_MAX, CHECK_H_MIN};
    use crate::tagger::FeatureSet;
    use crate::visual_features::{Raster, VisualEncoderConfig};

    pub(crate) fn toy_config(seed: u64) -> TaggerConfig {
        let mut c = TaggerConfig {
            hidden: 4,
            vocab_size: 16,
            seed,
            ..Default::default()
        };
        c.text.dim = 4;
        c.visual = VisualEncoderConfig {
            crop_h: 4,
            crop_w: 4,
            out_dim: 3,
            ..Default::default()
        };
        c
    }

    fn toy_invoice() -> LabeledInvoice {
        let mut img = Raster::filled(60, 60, 1, 255);
        for y in 0..60 {
            for x in 0..60 {
                img.set(x, y, 0, ((x * 7 + y * 13) % 251) as u8);
            }
        }
        let boxes = vec![
            BoundingBox::rect(5.0, 5.0, 40.0, 8.0, "ACME TRADING"),
            BoundingBox::rect(5.0, 20.0, 30.0, 6.0, "26/02/1998"),
            BoundingBox::rect(30.0, 40.0, 20.0, 6.0, "TOTAL 7.50"),
        ];
        let inv = Invoice::new("toy", 60.0, 60.0, boxes, Some(img)).unwrap();
        LabeledInvoice::new(
            inv,
            vec![FieldLabel::Company, FieldLabel::Date, FieldLabel::Total],
        )
        .unwrap()
    }

    #[test]
    fn fuse_examples() {
        let v = fuse(&[1.0, 2.0], &[3.0], &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0], 2, 1).unwrap();
        assert_eq!(v, (1..=9).map(f64::from).collect::<Vec<_>>());
        assert_eq!(
            fuse(&[0.0; 2], &[0.0], &[0.0; 6], 2, 1).unwrap(),
            vec![0.0; 9]
        );
        assert!(fuse(&[0.0; 63], &[0.0; 32], &[0.0; 6], 64, 32).is_err());
    }

    #[test]
    fn default_fused_dim() {
        assert_eq!(TaggerConfig::default().fused_dim(), 102);
    }

    #[test]
    fn zero_model_gives_zero_emissions() {
        let mut m = TaggerModel::new(toy_config(0), FrequencyTable::default()).unwrap();
        for p in m.tensors_mut() {
            p.value.fill(0.0);
        }
        let li = toy_invoice();
        let enc = m.encode_labeled(&li).unwrap();
        let st = m.forward(&enc, 3).unwrap();
        assert!(st.emissions.iter().flatten().all(|v| *v == 0.0));
        let again = m.forward(&enc, 3).unwrap();
        assert_eq!(st.emissions, again.emissions);
    }

    #[test]
    fn single_box_prediction_confidence_in_range() {
        let m = TaggerModel::new(toy_config(1), FrequencyTable::default()).unwrap();
        let inv = Invoice::new(
            "one",
            50.0,
            50.0,
            vec![BoundingBox::rect(1.0, 1.0, 9.0, 5.0, "HELLO")],
            None,
        )
        .unwrap();
        let p = m.predict(&inv).unwrap();
        assert_eq!(p.labels.len(), 1);
        assert!(p.confidences[0] > 0.0 && p.confidences[0] <= 1.0);
    }

    #[test]
    fn predictions_return_to_original_order() {
        let m = TaggerModel::new(toy_config(2), FrequencyTable::default()).unwrap();
        let li = toy_invoice();
        let mut shuffled = li.invoice.clone();
        shuffled.boxes.reverse();
        let a = m.predict(&li.invoice).unwrap();
        let b = m.predict(&shuffled).unwrap();
        let mut rev_labels = b.labels.clone();
        rev_labels.reverse();
        assert_eq!(a.labels, rev_labels);
    }

    struct ModelProbe {
        model: TaggerModel,
        enc: Encoded,
    }

    impl Parameterized for ModelProbe {
        fn params(&self) -> Vec<&Param> {
            self.model.params()
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            self.model.params_mut()
        }
    }

    fn randomize(model: &mut TaggerModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.tensors_mut() {
            if p.name.starts_with("crf") || p.name.ends_with("bias") {
                p.value = Matrix::uniform(p.value.rows(), p.value.cols(), 0.5, &mut rng);
            }
        }
    }

    #[test]
    fn projection_gradient_on_t3() {
        for decoder in [Decoder::Crf, Decoder::Softmax] {
            let mut cfg = toy_config(3);
            cfg.decoder = decoder;
            let mut model = TaggerModel::new(cfg, FrequencyTable::default()).unwrap();
            randomize(&mut model, 3);
            let enc = model.encode_labeled(&toy_invoice()).unwrap();
            let mut probe = ModelProbe { model, enc };
            let report = grad_check_piecewise(
                &mut probe,
                |p| {
                    p.model.loss_and_backward(&p.enc, 5, 1.0).unwrap();
                },
                |p| p.model.loss_with_pattern(&p.enc, 5).unwrap(),
                None,
                CHECK_H_MAX,
                CHECK_H_MIN,
            );
            assert!(report.max_rel_error < 1e-4, "{decoder:?}: {report:?}");
        }
    }

    #[test]
    fn per_box_head_is_context_free() {
        let mut cfg = toy_config(4);
        cfg.head = Head::PerBox;
        cfg.decoder = Decoder::Softmax;
        let m = TaggerModel::new(cfg, FrequencyTable::default()).unwrap();
        let li = toy_invoice();
        let a = m.encode_labeled(&li).unwrap();
        let mut b = a.clone();
        // replace a neighbour of the last unit with something else
        b.units[0].text = TextInput::Zero;
        let ea = m.forward(&a, 3).unwrap().emissions;
        let eb = m.forward(&b, 3).unwrap().emissions;
        assert_eq!(ea[2], eb[2]);
    }

    #[test]
    fn word_units_follow_tokens() {
        let mut cfg = toy_config(5);
        cfg.granularity = Granularity::Word;
        cfg.decoder = Decoder::Softmax;
        cfg.features = FeatureSet {
            visual: false,
            ..FeatureSet::ALL
        };
        let m = TaggerModel::new(cfg, FrequencyTable::default()).unwrap();
        let enc = m.encode_labeled(&toy_invoice()).unwrap();
        assert_eq!(enc.len(), 5);
        assert_eq!(enc.labels.as_ref().unwrap(), &vec![0, 0, 2, 3, 3]);
        let p = m.predict_encoded(&enc).unwrap();
        assert_eq!(p.labels.len(), 3);
    }

    #[test]
    fn one_word_boxes_reduce_to_box_level() {
        let boxes = vec![
            BoundingBox::rect(5.0, 5.0, 40.0, 8.0, "ACME"),
            BoundingBox::rect(5.0, 20.0, 30.0, 6.0, "26/02/1998"),
            BoundingBox::rect(30.0, 40.0, 20.0, 6.0, "7.50"),
        ];
        let inv = Invoice::new("w", 60.0, 60.0, boxes, None).unwrap();
        let mut cfg = toy_config(6);
        cfg.decoder = Decoder::Softmax;
        cfg.features.visual = false;
        let boxm = TaggerModel::new(cfg.clone(), FrequencyTable::default()).unwrap();
        cfg.granularity = Granularity::Word;
        let wordm = TaggerModel::new(cfg, FrequencyTable::default()).unwrap();
        assert_eq!(boxm.predict(&inv).unwrap(), wordm.predict(&inv).unwrap());
    }

    #[test]
    fn majority_vote_examples() {
        assert_eq!(majority_vote(&[2, 2, 4]), 2);
        assert_eq!(majority_vote(&[3, 1]), 1);
        assert_eq!(majority_vote(&[4, 0, 4, 0]), 0);
    }

    #[test]
    fn padded_batch_shapes() {
        let m = TaggerModel::new(toy_config(7), FrequencyTable::default()).unwrap();
        let enc = vec![m.encode_labeled(&toy_invoice()).unwrap()];
        let b = PaddedBatch::new(&enc, &[0], 6);
        assert_eq!(b.t_max, 6);
        assert_eq!(b.masks[0], vec![true, true, true, false, false, false]);
        assert_eq!(b.labels[0][3..], [PAD_LABEL; 3]);
    }
}
