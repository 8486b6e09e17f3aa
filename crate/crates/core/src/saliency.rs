//! Adaptive word importance: per-word, per-class attribution matrices
//! computed with four methods over one victim model.
//!
//! Every matrix has shape `[MAX_LEN, n_classes]` and nonnegative entries.
//! The methods differ in how the per-embedding-component attributions are
//! produced; the per-word reduction is a mean over the embedding dimension
//! for the gradient methods and a sum for relevance and integrated
//! gradients (the sum preserves the completeness property).

use std::fmt;

use rayon::prelude::*;

use crate::text::{EncodedExample, MAX_LEN};
use crate::victim::{EmbHandles, ForwardHandles, ModelError, VictimModel};
use crate::{BackwardMode, GradMap, Real, Tape, Tensor};

/// Attribution method tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    Vg,
    Gbp,
    Lrp,
    Ig,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vg, Method::Gbp, Method::Lrp, Method::Ig];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Vg => "vg",
            Method::Gbp => "gbp",
            Method::Lrp => "lrp",
            Method::Ig => "ig",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Method::Vg => 0,
            Method::Gbp => 1,
            Method::Lrp => 2,
            Method::Ig => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Per-sentence word importance matrix for one attribution method.
#[derive(Debug, Clone, PartialEq)]
pub struct AwiMatrix {
    values: Vec<Real>,
    pub n_classes: usize,
    pub method: Method,
    /// The victim's predicted label for the sentence.
    pub predicted: usize,
}

impl AwiMatrix {
    fn from_signed(signed: Vec<Real>, n_classes: usize, method: Method, predicted: usize) -> Self {
        let values = signed.into_iter().map(Real::abs).collect();
        AwiMatrix { values, n_classes, method, predicted }
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn rows(&self) -> usize {
        MAX_LEN
    }

    /// Importance of word `i` toward class `j`.
    pub fn at(&self, word: usize, class: usize) -> Real {
        self.values[word * self.n_classes + class]
    }

    /// One class column, over all padded positions.
    pub fn column(&self, class: usize) -> Vec<Real> {
        (0..MAX_LEN).map(|i| self.at(i, class)).collect()
    }

    /// Binary record: method tag, predicted label, shape, row-major values.
    pub fn to_bytes(&self, out: &mut Vec<u8>) {
        out.push(self.method.index() as u8);
        out.extend_from_slice(&(self.predicted as u32).to_le_bytes());
        out.extend_from_slice(&(MAX_LEN as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Inverse of [`AwiMatrix::to_bytes`]; returns the record and the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Option<(Self, usize)> {
        if bytes.len() < 13 {
            return None;
        }
        let method = match bytes[0] {
            0 => Method::Vg,
            1 => Method::Gbp,
            2 => Method::Lrp,
            3 => Method::Ig,
            _ => return None,
        };
        let predicted = u32::from_le_bytes(bytes[1..5].try_into().ok()?) as usize;
        let rows = u32::from_le_bytes(bytes[5..9].try_into().ok()?) as usize;
        let n_classes = u32::from_le_bytes(bytes[9..13].try_into().ok()?) as usize;
        if rows != MAX_LEN {
            return None;
        }
        let n = rows * n_classes;
        let need = 13 + 8 * n;
        if bytes.len() < need {
            return None;
        }
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let off = 13 + 8 * i;
            values.push(Real::from_le_bytes(bytes[off..off + 8].try_into().ok()?));
        }
        Some((AwiMatrix { values, n_classes, method, predicted }, need))
    }
}

/// The four matrices produced for one sentence, indexed by [`Method`].
#[derive(Debug, Clone, PartialEq)]
pub struct AwiSet {
    pub vg: AwiMatrix,
    pub gbp: AwiMatrix,
    pub lrp: AwiMatrix,
    pub ig: AwiMatrix,
}

impl AwiSet {
    pub fn get(&self, m: Method) -> &AwiMatrix {
        match m {
            Method::Vg => &self.vg,
            Method::Gbp => &self.gbp,
            Method::Lrp => &self.lrp,
            Method::Ig => &self.ig,
        }
    }
}

/// What the gradient methods differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSource {
    /// The softmax confidence of each class. Near-boundary inputs get large
    /// gradients, confident ones small: the signature the detector learns.
    Probability,
    /// The raw class logit, which ignores boundary proximity. Used by the
    /// closed-form tests.
    Logit,
}

/// Knobs for the attribution computations.
#[derive(Debug, Clone)]
pub struct SaliencyConfig {
    /// Midpoint steps for integrated gradients.
    pub ig_steps: usize,
    /// Stabilizer for relevance propagation.
    pub lrp_epsilon: Real,
    /// Differentiation target for the gradient methods (relevance always
    /// propagates from the logit).
    pub source: GradientSource,
    /// Take absolute values of gradient components before the per-word mean
    /// instead of after (ablation variant).
    pub abs_before_mean: bool,
    /// Zero matrix rows at and beyond the true sentence length.
    pub mask_pad: bool,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            ig_steps: 32,
            lrp_epsilon: 1e-6,
            source: GradientSource::Probability,
            abs_before_mean: false,
            mask_pad: false,
        }
    }
}

fn class_node(handles: &ForwardHandles, source: GradientSource, j: usize) -> crate::NodeId {
    match source {
        GradientSource::Probability => handles.prob_class[j],
        GradientSource::Logit => handles.logit_class[j],
    }
}

/// What the attribution passes need from a model. Implemented by
/// [`VictimModel`]; test doubles implement it for closed-form checks.
pub trait AttributionModel: Sync {
    fn n_classes(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn embed_example(&self, ex: &EncodedExample) -> Tensor;
    fn graph_from_embedding(&self, emb: &Tensor, true_length: usize)
        -> Result<(Tape, ForwardHandles), ModelError>;
}

impl AttributionModel for VictimModel {
    fn n_classes(&self) -> usize {
        self.n_classes
    }
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }
    fn embed_example(&self, ex: &EncodedExample) -> Tensor {
        VictimModel::embed_example(self, ex)
    }
    fn graph_from_embedding(
        &self,
        emb: &Tensor,
        true_length: usize,
    ) -> Result<(Tape, ForwardHandles), ModelError> {
        VictimModel::graph_from_embedding(self, emb, true_length)
    }
}

/// Flatten a leaf-gradient map into a dense `[MAX_LEN, k]` matrix of
/// embedding gradients, regardless of how the graph exposed the embeddings.
pub fn embedding_gradient(map: &GradMap, emb: &EmbHandles, k: usize) -> Vec<Real> {
    let mut out = vec![0.0; MAX_LEN * k];
    match emb {
        EmbHandles::Whole(id) => {
            if let Some(t) = map.get(id) {
                out.copy_from_slice(t.values());
            }
        }
        EmbHandles::PerRow(rows) => {
            for (i, id) in rows.iter().enumerate() {
                if let Some(t) = map.get(id) {
                    out[i * k..(i + 1) * k].copy_from_slice(t.values());
                }
            }
        }
        EmbHandles::Table => panic!("attribution graphs expose embedding leaves, not the table"),
    }
    out
}

/// Signed per-word scores from a `[MAX_LEN, k]` component matrix.
fn reduce_words(grid: &[Real], k: usize, mean: bool, abs_first: bool) -> Vec<Real> {
    (0..MAX_LEN)
        .map(|i| {
            let row = &grid[i * k..(i + 1) * k];
            let sum: Real = if abs_first {
                row.iter().map(|v| v.abs()).sum()
            } else {
                row.iter().sum()
            };
            if mean {
                sum / k as Real
            } else {
                sum
            }
        })
        .collect()
}

fn apply_pad_mask(signed: &mut [Real], n_classes: usize, true_length: usize) {
    for i in true_length..MAX_LEN {
        for j in 0..n_classes {
            signed[i * n_classes + j] = 0.0;
        }
    }
}

/// Signed gradient scores, one column per class, before the absolute value.
/// Each class gets one backward pass.
pub fn gradient_signed(
    model: &impl AttributionModel,
    ex: &EncodedExample,
    mode: BackwardMode,
    source: GradientSource,
) -> Result<Vec<Real>, ModelError> {
    let emb = model.embed_example(ex);
    let (tape, handles) = model.graph_from_embedding(&emb, ex.true_length)?;
    let (k, c) = (model.embed_dim(), model.n_classes());
    let mut signed = vec![0.0; MAX_LEN * c];
    for j in 0..c {
        let grads = tape.backward(class_node(&handles, source, j), mode)?;
        let grid = embedding_gradient(&grads, &handles.emb, k);
        let words = reduce_words(&grid, k, true, false);
        for i in 0..MAX_LEN {
            signed[i * c + j] = words[i];
        }
    }
    Ok(signed)
}

/// Vanilla-gradient AWI: per class, the mean embedding gradient per word,
/// absolute value taken after the mean.
pub fn awi_vg(
    model: &impl AttributionModel,
    ex: &EncodedExample,
    cfg: &SaliencyConfig,
) -> Result<AwiMatrix, ModelError> {
    let emb = model.embed_example(ex);
    let (tape, handles) = model.graph_from_embedding(&emb, ex.true_length)?;
    awi_gradient_on(&tape, &handles, model, ex, cfg, BackwardMode::Standard, Method::Vg)
}

/// Guided-backpropagation AWI: as VG but rectifiers pass only positive
/// gradients backward.
pub fn awi_gbp(
    model: &impl AttributionModel,
    ex: &EncodedExample,
    cfg: &SaliencyConfig,
) -> Result<AwiMatrix, ModelError> {
    let emb = model.embed_example(ex);
    let (tape, handles) = model.graph_from_embedding(&emb, ex.true_length)?;
    awi_gradient_on(&tape, &handles, model, ex, cfg, BackwardMode::Guided, Method::Gbp)
}

fn awi_gradient_on(
    tape: &Tape,
    handles: &ForwardHandles,
    model: &impl AttributionModel,
    ex: &EncodedExample,
    cfg: &SaliencyConfig,
    mode: BackwardMode,
    method: Method,
) -> Result<AwiMatrix, ModelError> {
    let (k, c) = (model.embed_dim(), model.n_classes());
    let mut signed = vec![0.0; MAX_LEN * c];
    for j in 0..c {
        let grads = tape.backward(class_node(handles, cfg.source, j), mode)?;
        let grid = embedding_gradient(&grads, &handles.emb, k);
        let words = reduce_words(&grid, k, true, cfg.abs_before_mean);
        for i in 0..MAX_LEN {
            signed[i * c + j] = words[i];
        }
    }
    if cfg.mask_pad {
        apply_pad_mask(&mut signed, c, ex.true_length);
    }
    let predicted = predicted_class(tape, handles);
    Ok(AwiMatrix::from_signed(signed, c, method, predicted))
}

/// Relevance-propagation AWI: per class, epsilon-rule relevance from the
/// logit, summed over embedding components per word.
pub fn awi_lrp(
    model: &impl AttributionModel,
    ex: &EncodedExample,
    cfg: &SaliencyConfig,
) -> Result<AwiMatrix, ModelError> {
    let emb = model.embed_example(ex);
    let (tape, handles) = model.graph_from_embedding(&emb, ex.true_length)?;
    awi_lrp_on(&tape, &handles, model, ex, cfg)
}

fn awi_lrp_on(
    tape: &Tape,
    handles: &ForwardHandles,
    model: &impl AttributionModel,
    ex: &EncodedExample,
    cfg: &SaliencyConfig,
) -> Result<AwiMatrix, ModelError> {
    let (k, c) = (model.embed_dim(), model.n_classes());
    let mut signed = vec![0.0; MAX_LEN * c];
    for j in 0..c {
        let rel = tape.relevance(handles.logit_class[j], cfg.lrp_epsilon)?;
        let grid = embedding_gradient(&rel, &handles.emb, k);
        let words = reduce_words(&grid, k, false, false);
        for i in 0..MAX_LEN {
            signed[i * c + j] = words[i];
        }
    }
    if cfg.mask_pad {
        apply_pad_mask(&mut signed, c, ex.true_length);
    }
    let predicted = predicted_class(tape, handles);
    Ok(AwiMatrix::from_signed(signed, c, Method::Lrp, predicted))
}

/// Signed per-word integrated-gradients attributions (before the absolute
/// value): a midpoint Riemann sum over the straight path from the zero
/// embedding to the input, all words moved jointly.
pub fn ig_signed(
    model: &impl AttributionModel,
    ex: &EncodedExample,
    steps: usize,
    source: GradientSource,
) -> Result<Vec<Real>, ModelError> {
    let (k, c) = (model.embed_dim(), model.n_classes());
    let emb = model.embed_example(ex);
    let m = steps.max(1);

    let step_grids: Vec<Result<Vec<Vec<Real>>, ModelError>> = (0..m)
        .into_par_iter()
        .map(|s| {
            let alpha = (s as Real + 0.5) / m as Real;
            let mut scaled = emb.clone();
            for v in scaled.values_mut() {
                *v *= alpha;
            }
            let (tape, handles) = model.graph_from_embedding(&scaled, ex.true_length)?;
            let mut per_class = Vec::with_capacity(c);
            for j in 0..c {
                let grads = tape.backward(class_node(&handles, source, j), BackwardMode::Standard)?;
                per_class.push(embedding_gradient(&grads, &handles.emb, k));
            }
            Ok(per_class)
        })
        .collect();

    let mut avg = vec![vec![0.0; MAX_LEN * k]; c];
    for grids in step_grids {
        let grids = grids?;
        for (j, grid) in grids.into_iter().enumerate() {
            for (a, g) in avg[j].iter_mut().zip(grid) {
                *a += g;
            }
        }
    }
    let mut signed = vec![0.0; MAX_LEN * c];
    for (j, grid) in avg.iter_mut().enumerate() {
        for (a, &e) in grid.iter_mut().zip(emb.values()) {
            *a = *a / m as Real * e; // (w - w') * average gradient, w' = 0
        }
        let words = reduce_words(grid, k, false, false);
        for i in 0..MAX_LEN {
            signed[i * c + j] = words[i];
        }
    }
    Ok(signed)
}

/// Integrated-gradients AWI.
pub fn awi_ig(
    model: &impl AttributionModel,
    ex: &EncodedExample,
    cfg: &SaliencyConfig,
) -> Result<AwiMatrix, ModelError> {
    let c = model.n_classes();
    let mut signed = ig_signed(model, ex, cfg.ig_steps, cfg.source)?;
    if cfg.mask_pad {
        apply_pad_mask(&mut signed, c, ex.true_length);
    }
    let emb = model.embed_example(ex);
    let (tape, handles) = model.graph_from_embedding(&emb, ex.true_length)?;
    let predicted = predicted_class(&tape, &handles);
    Ok(AwiMatrix::from_signed(signed, c, Method::Ig, predicted))
}

/// All four matrices for one sentence. VG, GBP, and LRP share one forward
/// tape; IG builds its own scaled-path tapes.
pub fn awi_all(
    model: &impl AttributionModel,
    ex: &EncodedExample,
    cfg: &SaliencyConfig,
) -> Result<AwiSet, ModelError> {
    let (k, c) = (model.embed_dim(), model.n_classes());
    let _ = k;
    let emb = model.embed_example(ex);
    let (tape, handles) = model.graph_from_embedding(&emb, ex.true_length)?;
    let vg = awi_gradient_on(&tape, &handles, model, ex, cfg, BackwardMode::Standard, Method::Vg)?;
    let gbp = awi_gradient_on(&tape, &handles, model, ex, cfg, BackwardMode::Guided, Method::Gbp)?;
    let lrp = awi_lrp_on(&tape, &handles, model, ex, cfg)?;
    let mut ig_signed_vals = ig_signed(model, ex, cfg.ig_steps, cfg.source)?;
    if cfg.mask_pad {
        apply_pad_mask(&mut ig_signed_vals, c, ex.true_length);
    }
    let predicted = predicted_class(&tape, &handles);
    let ig = AwiMatrix::from_signed(ig_signed_vals, c, Method::Ig, predicted);
    Ok(AwiSet { vg, gbp, lrp, ig })
}

fn predicted_class(tape: &Tape, handles: &ForwardHandles) -> usize {
    crate::victim::argmax(tape.value(handles.probs).values()).0
}
