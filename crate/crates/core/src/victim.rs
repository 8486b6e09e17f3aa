//! Trainable victim text classifiers: a Kim-style TextCNN and a single-layer
//! LSTM, both built on the tape engine so every saliency pass can traverse
//! them uniformly.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{self, CheckpointError};
use crate::grad::GradError;
use crate::opt::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::text::{EmbeddingTable, EncodedExample, MAX_LEN, PAD};
use crate::{NodeId, Real, Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    TextCnn,
    Lstm,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::TextCnn => "textcnn",
            Arch::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Option<Arch> {
        match s {
            "textcnn" => Some(Arch::TextCnn),
            "lstm" => Some(Arch::Lstm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: Real,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub dropout: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    tensor: Tensor,
}

/// How the encoder receives its input embeddings.
enum EmbSource {
    /// One `[MAX_LEN, k]` node (TextCNN).
    Whole(NodeId),
    /// One `[k]` node per real token (LSTM).
    Rows(Vec<NodeId>),
}

/// Where the input-embedding gradient lives on a built graph.
pub enum EmbHandles {
    /// Gradients land on the embedding table parameter (training path).
    Table,
    /// One `[MAX_LEN, k]` leaf (TextCNN attribution path).
    Whole(NodeId),
    /// One `[k]` leaf per position below `true_length` (LSTM attribution path).
    PerRow(Vec<NodeId>),
}

/// Node ids of interest on a freshly built forward graph.
pub struct ForwardHandles {
    pub logits: NodeId,
    pub probs: NodeId,
    pub logit_class: Vec<NodeId>,
    pub prob_class: Vec<NodeId>,
    pub emb: EmbHandles,
    /// Leaf per parameter, aligned with the model's parameter order.
    /// `None` for the embedding slot on attribution graphs.
    pub param_leaves: Vec<Option<NodeId>>,
}

/// TextCNN or LSTM classifier over fixed-length token sequences.
#[derive(Debug, Clone)]
pub struct VictimModel {
    pub arch: Arch,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Filters per width (TextCNN) or hidden size (LSTM).
    pub hidden: usize,
    pub filter_widths: Vec<usize>,
    params: Vec<Param>,
}

const LSTM_GATES: [&str; 4] = ["i", "f", "g", "o"];

impl VictimModel {
    /// Kim-style TextCNN: one convolution per width, rectifier, max-pool over
    /// time, concatenation, affine to the class count. The output layer is
    /// zero-initialized so an untrained model predicts the uniform
    /// distribution.
    pub fn new_textcnn(
        vocab_size: usize,
        embed_dim: usize,
        n_classes: usize,
        filter_widths: &[usize],
        filters: usize,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = vec![Param {
            name: "embed".into(),
            tensor: init_uniform(&mut rng, vec![vocab_size, embed_dim], 0.1),
        }];
        zero_pad_row(&mut params[0].tensor, embed_dim);
        for &w in filter_widths {
            let bound = 1.0 / ((w * embed_dim) as Real).sqrt();
            params.push(Param {
                name: format!("conv_w{w}"),
                tensor: init_uniform(&mut rng, vec![filters, w * embed_dim], bound),
            });
            params.push(Param { name: format!("conv_b{w}"), tensor: Tensor::zeros(vec![filters]) });
        }
        params.push(Param {
            name: "out_w".into(),
            tensor: Tensor::zeros(vec![n_classes, filter_widths.len() * filters]),
        });
        params.push(Param { name: "out_b".into(), tensor: Tensor::zeros(vec![n_classes]) });
        VictimModel {
            arch: Arch::TextCnn,
            n_classes,
            vocab_size,
            embed_dim,
            hidden: filters,
            filter_widths: filter_widths.to_vec(),
            params,
        }
    }

    pub fn default_textcnn(vocab_size: usize, embed_dim: usize, n_classes: usize, seed: u64) -> Self {
        Self::new_textcnn(vocab_size, embed_dim, n_classes, &[3, 4, 5], 100, seed)
    }

    /// Single-layer LSTM; the final hidden state at the last real token feeds
    /// an affine output layer. Forget-gate biases start at one.
    pub fn new_lstm(
        vocab_size: usize,
        embed_dim: usize,
        n_classes: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = vec![Param {
            name: "embed".into(),
            tensor: init_uniform(&mut rng, vec![vocab_size, embed_dim], 0.1),
        }];
        zero_pad_row(&mut params[0].tensor, embed_dim);
        let bound = 1.0 / (hidden as Real).sqrt();
        for gate in LSTM_GATES {
            params.push(Param {
                name: format!("wx_{gate}"),
                tensor: init_uniform(&mut rng, vec![hidden, embed_dim], bound),
            });
            params.push(Param {
                name: format!("wh_{gate}"),
                tensor: init_uniform(&mut rng, vec![hidden, hidden], bound),
            });
            let mut b = Tensor::zeros(vec![hidden]);
            if gate == "f" {
                for v in b.values_mut() {
                    *v = 1.0;
                }
            }
            params.push(Param { name: format!("b_{gate}"), tensor: b });
        }
        params.push(Param { name: "out_w".into(), tensor: Tensor::zeros(vec![n_classes, hidden]) });
        params.push(Param { name: "out_b".into(), tensor: Tensor::zeros(vec![n_classes]) });
        VictimModel {
            arch: Arch::Lstm,
            n_classes,
            vocab_size,
            embed_dim,
            hidden,
            filter_widths: vec![],
            params,
        }
    }

    pub fn default_lstm(vocab_size: usize, embed_dim: usize, n_classes: usize, seed: u64) -> Self {
        Self::new_lstm(vocab_size, embed_dim, n_classes, 128, seed)
    }

    /// Copy a pretrained embedding table into the model (PAD row forced to
    /// zero). Dimensions must match the construction sizes.
    pub fn set_embedding(&mut self, table: &EmbeddingTable) {
        assert_eq!(table.vocab_size(), self.vocab_size);
        assert_eq!(table.dim, self.embed_dim);
        let mut t = table.tensor();
        zero_pad_row(&mut t, self.embed_dim);
        self.params[0].tensor = t;
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    fn param_idx(&self, name: &str) -> usize {
        self.params.iter().position(|p| p.name == name).expect("parameter exists")
    }

    /// The feature width entering the output layer.
    fn feature_width(&self) -> usize {
        match self.arch {
            Arch::TextCnn => self.filter_widths.len() * self.hidden,
            Arch::Lstm => self.hidden,
        }
    }

    /// Embedded input rows for an example, as a `[MAX_LEN, k]` tensor.
    pub fn embed_example(&self, ex: &EncodedExample) -> Tensor {
        let table = &self.params[0].tensor;
        let k = self.embed_dim;
        let mut values = Vec::with_capacity(MAX_LEN * k);
        for &id in &ex.ids {
            values.extend_from_slice(&table.values()[id as usize * k..(id as usize + 1) * k]);
        }
        Tensor::new(vec![MAX_LEN, k], values).expect("dense")
    }

    /// Build the forward graph with gradients flowing to the embedding table
    /// (the training path).
    pub fn graph_from_ids(
        &self,
        ex: &EncodedExample,
        dropout_mask: Option<&[Real]>,
    ) -> Result<(Tape, ForwardHandles), ModelError> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        let table = leaves[0];
        let source = match self.arch {
            Arch::TextCnn => {
                let ids: Vec<usize> = ex.ids.iter().map(|&i| i as usize).collect();
                EmbSource::Whole(tape.embedding_lookup(table, &ids)?)
            }
            Arch::Lstm => {
                let mut rows = Vec::with_capacity(ex.true_length);
                for &id in ex.ids.iter().take(ex.true_length) {
                    let row = tape.embedding_lookup(table, &[id as usize])?;
                    rows.push(tape.reshape(row, vec![self.embed_dim])?);
                }
                EmbSource::Rows(rows)
            }
        };
        let handles = self.finish_graph(
            &mut tape,
            source,
            &leaves.iter().copied().map(Some).collect::<Vec<_>>(),
            EmbHandles::Table,
            dropout_mask,
        )?;
        Ok((tape, handles))
    }

    /// Build the forward graph from externally supplied embeddings (the
    /// attribution path): gradients and relevances land on the embedding
    /// leaves, not the table.
    pub fn graph_from_embedding(
        &self,
        emb: &Tensor,
        true_length: usize,
    ) -> Result<(Tape, ForwardHandles), ModelError> {
        assert_eq!(emb.shape(), &[MAX_LEN, self.embed_dim]);
        let mut tape = Tape::new();
        let mut leaves: Vec<Option<NodeId>> = Vec::with_capacity(self.params.len());
        leaves.push(None); // embedding table not present on this path
        for p in &self.params[1..] {
            leaves.push(Some(tape.leaf(p.tensor.clone())));
        }
        let (source, emb_handles) = match self.arch {
            Arch::TextCnn => {
                let node = tape.leaf(emb.clone());
                (EmbSource::Whole(node), EmbHandles::Whole(node))
            }
            Arch::Lstm => {
                let k = self.embed_dim;
                let mut rows = Vec::with_capacity(true_length);
                for t in 0..true_length.min(MAX_LEN) {
                    let row = Tensor::vector(emb.values()[t * k..(t + 1) * k].to_vec());
                    rows.push(tape.leaf(row));
                }
                (EmbSource::Rows(rows.clone()), EmbHandles::PerRow(rows))
            }
        };
        let handles = self.finish_graph(&mut tape, source, &leaves, emb_handles, None)?;
        Ok((tape, handles))
    }

    fn finish_graph(
        &self,
        tape: &mut Tape,
        source: EmbSource,
        leaves: &[Option<NodeId>],
        emb: EmbHandles,
        dropout_mask: Option<&[Real]>,
    ) -> Result<ForwardHandles, ModelError> {
        let leaf = |name: &str| leaves[self.param_idx(name)].expect("parameter leaf present");
        let mut feature = match (self.arch, source) {
            (Arch::TextCnn, EmbSource::Whole(x)) => {
                let mut pooled = Vec::new();
                for &w in &self.filter_widths {
                    let conv = tape.conv1d(leaf(&format!("conv_w{w}")), leaf(&format!("conv_b{w}")), x, w)?;
                    let act = tape.relu(conv)?;
                    pooled.push(tape.max_pool_time(act)?);
                }
                tape.concat(&pooled)?
            }
            (Arch::Lstm, EmbSource::Rows(rows)) => {
                let mut h = tape.leaf(Tensor::zeros(vec![self.hidden]));
                let mut c = tape.leaf(Tensor::zeros(vec![self.hidden]));
                let zero_b = tape.leaf(Tensor::zeros(vec![self.hidden]));
                for &x_t in &rows {
                    let mut gates = Vec::with_capacity(4);
                    for gate in LSTM_GATES {
                        let from_x = tape.affine(leaf(&format!("wx_{gate}")), leaf(&format!("b_{gate}")), x_t)?;
                        let from_h = tape.affine(leaf(&format!("wh_{gate}")), zero_b, h)?;
                        let pre = tape.add(from_x, from_h)?;
                        let act = if gate == "g" { tape.tanh(pre)? } else { tape.sigmoid(pre)? };
                        gates.push(act);
                    }
                    let (i, f, g, o) = (gates[0], gates[1], gates[2], gates[3]);
                    let keep = tape.mul(f, c)?;
                    let write = tape.mul(i, g)?;
                    c = tape.add(keep, write)?;
                    let c_act = tape.tanh(c)?;
                    h = tape.mul(o, c_act)?;
                }
                h
            }
            _ => unreachable!("architecture and embedding source always agree"),
        };
        if let Some(mask) = dropout_mask {
            debug_assert_eq!(mask.len(), self.feature_width());
            let m = tape.leaf(Tensor::vector(mask.to_vec()));
            feature = tape.mul(feature, m)?;
        }
        let logits = tape.affine(leaf("out_w"), leaf("out_b"), feature)?;
        let probs = tape.softmax(logits)?;
        let mut logit_class = Vec::with_capacity(self.n_classes);
        let mut prob_class = Vec::with_capacity(self.n_classes);
        for j in 0..self.n_classes {
            logit_class.push(tape.select(logits, j)?);
            prob_class.push(tape.select(probs, j)?);
        }
        Ok(ForwardHandles {
            logits,
            probs,
            logit_class,
            prob_class,
            emb,
            param_leaves: leaves.to_vec(),
        })
    }

    /// Class probability vector `F(X)`.
    pub fn forward_probs(&self, ex: &EncodedExample) -> Vec<Real> {
        let (tape, h) = self.graph_from_ids(ex, None).expect("model shapes are consistent");
        tape.value(h.probs).values().to_vec()
    }

    /// Raw class logits.
    pub fn forward_logits(&self, ex: &EncodedExample) -> Vec<Real> {
        let (tape, h) = self.graph_from_ids(ex, None).expect("model shapes are consistent");
        tape.value(h.logits).values().to_vec()
    }

    /// Predicted label and its confidence; ties break toward the smaller id.
    pub fn predict(&self, ex: &EncodedExample) -> (usize, Real) {
        let probs = self.forward_probs(ex);
        argmax(&probs)
    }

    /// Train with Adam on cross-entropy. Returns the per-epoch mean loss.
    pub fn train(&mut self, data: &[EncodedExample], cfg: &TrainConfig) -> Result<Vec<Real>, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if let Some(ex) = data.iter().find(|ex| ex.label >= self.n_classes) {
            return Err(ModelError::LabelOutOfRange { label: ex.label, classes: self.n_classes });
        }
        let sizes: Vec<usize> = self.params.iter().map(|p| p.tensor.len()).collect();
        let mut adam = Adam::new(
            AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8 },
            &sizes,
        );
        let mut rng = Rng::new(cfg.seed);
        let feature_width = self.feature_width();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
                // Masks are drawn sequentially so thread count cannot change the run.
                let masks: Vec<Option<Vec<Real>>> = batch
                    .iter()
                    .map(|_| {
                        if cfg.dropout > 0.0 {
                            Some(sample_dropout(&mut rng, feature_width, cfg.dropout))
                        } else {
                            None
                        }
                    })
                    .collect();
                let results: Vec<Result<(Real, Vec<Vec<Real>>), ModelError>> = batch
                    .par_iter()
                    .zip(masks.par_iter())
                    .map(|(&idx, mask)| self.example_grads(&data[idx], mask.as_deref()))
                    .collect();

                let mut grand: Vec<Vec<Real>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
                let mut batch_loss = 0.0;
                for r in results {
                    let (loss, grads) = r?;
                    if !loss.is_finite() {
                        return Err(ModelError::NonFiniteLoss { epoch, step });
                    }
                    batch_loss += loss;
                    for (gi, g) in grads.into_iter().enumerate() {
                        if g.is_empty() {
                            continue;
                        }
                        for (acc, v) in grand[gi].iter_mut().zip(g) {
                            *acc += v;
                        }
                    }
                }
                let scale = 1.0 / batch.len() as Real;
                for g in &mut grand {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
                // The PAD embedding row stays frozen at zero.
                for c in 0..self.embed_dim {
                    grand[0][PAD as usize * self.embed_dim + c] = 0.0;
                }
                let mut refs: Vec<&mut Tensor> = self.params.iter_mut().map(|p| &mut p.tensor).collect();
                adam.step(&mut refs, &grand);
                epoch_loss += batch_loss;
            }
            losses.push(epoch_loss / data.len() as Real);
        }
        Ok(losses)
    }

    fn example_grads(
        &self,
        ex: &EncodedExample,
        dropout_mask: Option<&[Real]>,
    ) -> Result<(Real, Vec<Vec<Real>>), ModelError> {
        let (mut tape, handles) = self.graph_from_ids(ex, dropout_mask)?;
        let loss = tape.cross_entropy(handles.logits, ex.label)?;
        let grads = tape.backward(loss, crate::BackwardMode::Standard)?;
        let mut out = Vec::with_capacity(self.params.len());
        for leaf in &handles.param_leaves {
            let g = leaf
                .and_then(|id| grads.get(&id))
                .map(|t| t.values().to_vec())
                .unwrap_or_default();
            out.push(g);
        }
        Ok((tape.value(loss).item(), out))
    }

    /// Accuracy over a labeled set.
    pub fn accuracy(&self, data: &[EncodedExample]) -> Real {
        if data.is_empty() {
            return 0.0;
        }
        let hits: usize = data
            .par_iter()
            .map(|ex| usize::from(self.predict(ex).0 == ex.label))
            .sum();
        hits as Real / data.len() as Real
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let kind = format!("victim-{}", self.arch.tag());
        let mut meta = vec![
            ("n_classes".to_string(), self.n_classes as i64),
            ("vocab_size".to_string(), self.vocab_size as i64),
            ("embed_dim".to_string(), self.embed_dim as i64),
            ("hidden".to_string(), self.hidden as i64),
            ("n_widths".to_string(), self.filter_widths.len() as i64),
        ];
        for (i, w) in self.filter_widths.iter().enumerate() {
            meta.push((format!("width{i}"), *w as i64));
        }
        let params: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        checkpoint::save(path, &kind, &meta, &params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut ckpt = checkpoint::load(path)?;
        let arch = match ckpt.kind.as_str() {
            "victim-textcnn" => Arch::TextCnn,
            "victim-lstm" => Arch::Lstm,
            other => {
                return Err(CheckpointError::KindMismatch {
                    want: "victim-*".to_string(),
                    got: other.to_string(),
                }
                .into())
            }
        };
        let get = |key: &str| {
            ckpt.meta_value(key)
                .ok_or_else(|| CheckpointError::MissingParam(format!("meta {key}")))
        };
        let n_classes = get("n_classes")? as usize;
        let vocab_size = get("vocab_size")? as usize;
        let embed_dim = get("embed_dim")? as usize;
        let hidden = get("hidden")? as usize;
        let n_widths = get("n_widths")? as usize;
        let mut filter_widths = Vec::with_capacity(n_widths);
        for i in 0..n_widths {
            filter_widths.push(get(&format!("width{i}"))? as usize);
        }

        let skeleton = match arch {
            Arch::TextCnn => {
                VictimModel::new_textcnn(vocab_size, embed_dim, n_classes, &filter_widths, hidden, 0)
            }
            Arch::Lstm => VictimModel::new_lstm(vocab_size, embed_dim, n_classes, hidden, 0),
        };
        let mut params = Vec::with_capacity(skeleton.params.len());
        for p in &skeleton.params {
            let t = ckpt.take_param(&p.name)?;
            if t.shape() != p.tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expect: p.tensor.shape().to_vec(),
                    got: t.shape().to_vec(),
                }
                .into());
            }
            params.push(Param { name: p.name.clone(), tensor: t });
        }
        Ok(VictimModel { params, ..skeleton })
    }
}

/// Argmax with ties broken toward the smaller index.
pub fn argmax(xs: &[Real]) -> (usize, Real) {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    (best, xs[best])
}

fn init_uniform(rng: &mut Rng, shape: Vec<usize>, bound: Real) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.fill_uniform(rng, -bound, bound);
    t
}

fn zero_pad_row(t: &mut Tensor, dim: usize) {
    for c in 0..dim {
        t.values_mut()[PAD as usize * dim + c] = 0.0;
    }
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else 1/(1-p).
fn sample_dropout(rng: &mut Rng, n: usize, p: Real) -> Vec<Real> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.chance(p) { 0.0 } else { keep }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode, tokenize, Vocabulary};

    fn toy_vocab() -> Vocabulary {
        let texts: Vec<Vec<String>> = ["alpha beta gamma delta", "one two three four"]
            .iter()
            .map(|s| tokenize(s).unwrap())
            .collect();
        Vocabulary::build(&texts)
    }

    #[test]
    fn untrained_model_is_uniform() {
        let vocab = toy_vocab();
        let model = VictimModel::new_textcnn(vocab.len(), 8, 2, &[2, 3], 4, 7);
        let ex = encode(&tokenize("alpha two gamma").unwrap(), &vocab, 0);
        let probs = model.forward_probs(&ex);
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let vocab = toy_vocab();
        let mut model = VictimModel::new_lstm(vocab.len(), 6, 3, 5, 3);
        // Give the output layer some structure.
        let mut rng = Rng::new(4);
        model.param_mut("out_w").unwrap().fill_uniform(&mut rng, -0.5, 0.5);
        for seed in 0..50u64 {
            let mut r = Rng::new(seed);
            let toks: Vec<String> = (0..(1 + r.below(6)))
                .map(|_| ["alpha", "beta", "two", "four"][r.below(4)].to_string())
                .collect();
            let ex = encode(&toks, &vocab, 0);
            let sum: Real = model.forward_probs(&ex).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_set_logits_give_softmax_closed_form() {
        let vocab = toy_vocab();
        let mut model = VictimModel::new_textcnn(vocab.len(), 4, 2, &[2], 3, 0);
        // Zero conv output plus bias (2, 0) forces logits (2, 0).
        let out_b = model.param_mut("out_b").unwrap();
        out_b.values_mut()[0] = 2.0;
        let ex = encode(&tokenize("alpha beta").unwrap(), &vocab, 0);
        let probs = model.forward_probs(&ex);
        assert!((probs[0] - 0.8808).abs() < 1e-4, "{probs:?}");
        assert!((probs[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn predict_breaks_ties_toward_smaller_class() {
        assert_eq!(argmax(&[0.5, 0.5]), (0, 0.5));
        assert_eq!(argmax(&[0.9, 0.1]), (0, 0.9));
        assert_eq!(argmax(&[0.1, 0.9]), (1, 0.9));
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let vocab = toy_vocab();
        let mut model = VictimModel::new_textcnn(vocab.len(), 4, 2, &[2], 3, 1);
        let before = model.param("embed").unwrap().values().to_vec();
        let ex = encode(&tokenize("alpha beta").unwrap(), &vocab, 0);
        let losses = model
            .train(&[ex], &TrainConfig { epochs: 0, ..Default::default() })
            .unwrap();
        assert!(losses.is_empty());
        assert_eq!(model.param("embed").unwrap().values(), before.as_slice());
    }

    #[test]
    fn same_seed_gives_identical_training_runs() {
        let vocab = toy_vocab();
        let data: Vec<EncodedExample> = [("alpha beta gamma", 0), ("one two three", 1)]
            .iter()
            .map(|(s, l)| encode(&tokenize(s).unwrap(), &vocab, *l))
            .collect();
        let cfg = TrainConfig { epochs: 3, seed: 11, ..Default::default() };
        let mut m1 = VictimModel::new_textcnn(vocab.len(), 4, 2, &[2], 3, 5);
        let mut m2 = VictimModel::new_textcnn(vocab.len(), 4, 2, &[2], 3, 5);
        let l1 = m1.train(&data, &cfg).unwrap();
        let l2 = m2.train(&data, &cfg).unwrap();
        assert_eq!(l1, l2);
        for name in m1.param_names() {
            assert_eq!(m1.param(name).unwrap().values(), m2.param(name).unwrap().values());
        }
    }

    #[test]
    fn pad_row_stays_zero_through_training() {
        let vocab = toy_vocab();
        let mut model = VictimModel::new_textcnn(vocab.len(), 4, 2, &[2], 3, 1);
        let data: Vec<EncodedExample> = [("alpha beta", 0), ("one two", 1)]
            .iter()
            .map(|(s, l)| encode(&tokenize(s).unwrap(), &vocab, *l))
            .collect();
        model
            .train(&data, &TrainConfig { epochs: 3, ..Default::default() })
            .unwrap();
        let embed = model.param("embed").unwrap();
        assert!(embed.values()[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn separable_corpus_trains_to_high_accuracy_with_monotone_loss() {
        // Two classes over disjoint vocabularies.
        let class0 = ["alpha", "beta", "gamma", "delta"];
        let class1 = ["one", "two", "three", "four"];
        let mut texts: Vec<(usize, String)> = Vec::new();
        let mut rng = Rng::new(12);
        for _ in 0..12 {
            for (label, words) in [(0usize, &class0), (1, &class1)] {
                let n = 3 + rng.below(2);
                let s: Vec<&str> = (0..n).map(|_| words[rng.below(4)]).collect();
                texts.push((label, s.join(" ")));
            }
        }
        let tokenized: Vec<Vec<String>> =
            texts.iter().map(|(_, s)| tokenize(s).unwrap()).collect();
        let vocab = Vocabulary::build(&tokenized);
        let data: Vec<EncodedExample> = texts
            .iter()
            .map(|(l, s)| encode(&tokenize(s).unwrap(), &vocab, *l))
            .collect();
        let mut model = VictimModel::new_textcnn(vocab.len(), 8, 2, &[2, 3], 8, 3);
        let cfg = TrainConfig { epochs: 5, batch_size: 4, dropout: 0.0, ..Default::default() };
        let losses = model.train(&data, &cfg).unwrap();
        assert!(model.accuracy(&data) >= 0.99, "accuracy {}", model.accuracy(&data));
        for w in losses[1..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased after epoch 2: {losses:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = toy_vocab();
        let mut model = VictimModel::new_lstm(vocab.len(), 4, 2, 6, 9);
        let data: Vec<EncodedExample> = [("alpha beta gamma", 0), ("one two three", 1)]
            .iter()
            .map(|(s, l)| encode(&tokenize(s).unwrap(), &vocab, *l))
            .collect();
        model
            .train(&data, &TrainConfig { epochs: 2, ..Default::default() })
            .unwrap();
        let p1 = dir.path().join("m1.ckpt");
        let p2 = dir.path().join("m2.ckpt");
        model.save(&p1).unwrap();
        let loaded = VictimModel::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let ex = encode(&tokenize("alpha two").unwrap(), &vocab, 0);
        assert_eq!(model.forward_probs(&ex), loaded.forward_probs(&ex));
    }

    #[test]
    fn textcnn_pooled_features_ignore_distant_swaps() {
        // Two marked tokens separated by more than the max filter width and
        // surrounded by identical filler: swapping them permutes the window
        // multiset, so the max-pooled features cannot change.
        let vocab = toy_vocab();
        let model = VictimModel::new_textcnn(vocab.len(), 4, 2, &[2, 3], 5, 13);
        let filler = "alpha";
        let mut a: Vec<String> = vec![filler.to_string(); 12];
        a[3] = "beta".to_string();
        a[9] = "two".to_string();
        let mut b = a.clone();
        b.swap(3, 9);
        let ex_a = encode(&a, &vocab, 0);
        let ex_b = encode(&b, &vocab, 0);
        assert_eq!(model.forward_logits(&ex_a), model.forward_logits(&ex_b));
    }
}
