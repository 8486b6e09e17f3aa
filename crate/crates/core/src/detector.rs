//! Saliency-based adversarial detector: one LSTM sub-detector per
//! attribution method plus an MLP combiner, trained jointly on balanced
//! benign/adversarial data with the evaluation attack held out.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{
    generate_adversarial_corpus, AttackConfig, AttackContext, AttackError, AttackKind, CorpusReport,
};
use crate::checkpoint::{self, CheckpointError};
use crate::grad::GradError;
use crate::metrics::{Confusion, DetectionMetrics};
use crate::opt::{Adam, AdamConfig};
use crate::rng::{derive_seed, Rng};
use crate::saliency::{awi_all, AwiMatrix, AwiSet, Method, SaliencyConfig};
use crate::text::{encode, MAX_LEN};
use crate::victim::{argmax, ModelError, VictimModel};
use crate::{NodeId, Real, Tape, Tensor};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("held-out attack {0} must not appear in the training attack list")]
    HeldOutInTraining(AttackKind),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("train or dev split is empty")]
    EmptySplit,
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("no sub-detector is active")]
    NoActiveSubDetector,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt detection dataset: {0}")]
    CorruptDataset(String),
}

/// Which view of the AWI matrix feeds the sub-detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixView {
    /// The full `[MAX_LEN, n_classes]` matrix, one row per step.
    Full,
    /// Only the predicted class column, one scalar per step.
    Column,
}

impl MatrixView {
    pub fn tag(self) -> &'static str {
        match self {
            MatrixView::Full => "full",
            MatrixView::Column => "column",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(MatrixView::Full),
            "column" => Some(MatrixView::Column),
            _ => None,
        }
    }
}

/// What the combiner consumes from the sub-detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombinerInput {
    /// Concatenated 2-wide sub-detector logits (8 inputs).
    Logits,
    /// Concatenated 128-wide final hidden states (512 inputs).
    Hidden,
}

impl CombinerInput {
    pub fn tag(self) -> &'static str {
        match self {
            CombinerInput::Logits => "logits",
            CombinerInput::Hidden => "hidden",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "logits" => Some(CombinerInput::Logits),
            "hidden" => Some(CombinerInput::Hidden),
            _ => None,
        }
    }
}

impl fmt::Display for MatrixView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl fmt::Display for CombinerInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Debug, Clone)]
struct Param {
    name: String,
    tensor: Tensor,
}

/// One LSTM over an AWI sequence with a 2-way affine head.
#[derive(Debug, Clone)]
pub struct SubDetector {
    pub method: Method,
    pub input_width: usize,
    pub hidden: usize,
    params: Vec<Param>,
}

impl SubDetector {
    fn new(method: Method, input_width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let bound = 1.0 / (hidden as Real).sqrt();
        let mut params = Vec::new();
        for gate in GATES {
            params.push(Param {
                name: format!("wx_{gate}"),
                tensor: uniform(&mut rng, vec![hidden, input_width], bound),
            });
            params.push(Param {
                name: format!("wh_{gate}"),
                tensor: uniform(&mut rng, vec![hidden, hidden], bound),
            });
            let mut b = Tensor::zeros(vec![hidden]);
            if gate == "f" {
                for v in b.values_mut() {
                    *v = 1.0;
                }
            }
            params.push(Param { name: format!("b_{gate}"), tensor: b });
        }
        params.push(Param { name: "head_w".into(), tensor: uniform(&mut rng, vec![2, hidden], bound) });
        params.push(Param { name: "head_b".into(), tensor: Tensor::zeros(vec![2]) });
        SubDetector { method, input_width, hidden, params }
    }
}

/// Two-layer MLP head over the concatenated sub-detector outputs.
#[derive(Debug, Clone)]
pub struct Combiner {
    pub input_width: usize,
    pub hidden: usize,
    params: Vec<Param>,
}

impl Combiner {
    fn new(input_width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let bound = 1.0 / (input_width as Real).sqrt();
        let out_bound = 1.0 / (hidden as Real).sqrt();
        let params = vec![
            Param { name: "w1".into(), tensor: uniform(&mut rng, vec![hidden, input_width], bound) },
            Param { name: "b1".into(), tensor: Tensor::zeros(vec![hidden]) },
            Param { name: "w2".into(), tensor: uniform(&mut rng, vec![2, hidden], out_bound) },
            Param { name: "b2".into(), tensor: Tensor::zeros(vec![2]) },
        ];
        Combiner { input_width, hidden, params }
    }
}

fn uniform(rng: &mut Rng, shape: Vec<usize>, bound: Real) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.fill_uniform(rng, -bound, bound);
    t
}

/// Four sub-detectors plus the combiner.
#[derive(Debug, Clone)]
pub struct DetectorEnsemble {
    pub subs: Vec<SubDetector>,
    pub combiner: Combiner,
    pub view: MatrixView,
    pub combiner_input: CombinerInput,
    pub active: [bool; 4],
    pub n_classes: usize,
    pub hidden: usize,
    /// Per-method input standardization (shift, scale), fitted on the
    /// training split; raw attribution magnitudes vary by orders of
    /// magnitude between methods.
    norm: [(Real, Real); 4],
}

/// One forward outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub adversarial: bool,
    pub sub_logits: [[Real; 2]; 4],
    pub probs: [Real; 2],
}

pub const COMBINER_HIDDEN: usize = 64;

impl DetectorEnsemble {
    pub fn new(
        n_classes: usize,
        view: MatrixView,
        combiner_input: CombinerInput,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let input_width = match view {
            MatrixView::Full => n_classes,
            MatrixView::Column => 1,
        };
        let subs: Vec<SubDetector> = Method::ALL
            .iter()
            .enumerate()
            .map(|(i, &m)| SubDetector::new(m, input_width, hidden, derive_seed(seed, &format!("sub-{i}"))))
            .collect();
        let comb_width = match combiner_input {
            CombinerInput::Logits => 8,
            CombinerInput::Hidden => 4 * hidden,
        };
        let combiner = Combiner::new(comb_width, COMBINER_HIDDEN, derive_seed(seed, "combiner"));
        DetectorEnsemble {
            subs,
            combiner,
            view,
            combiner_input,
            active: [true; 4],
            n_classes,
            hidden,
            norm: [(0.0, 1.0); 4],
        }
    }

    /// Fit the per-method input scaling on training items: divide by the
    /// mean per-matrix maximum so typical peaks sit near one. Zero stays
    /// zero (padding rows), and nothing saturates the recurrent gates.
    pub fn fit_normalization(&mut self, items: &[DetectionItem]) {
        for m in Method::ALL {
            let mut sum_max = 0.0;
            let mut n = 0usize;
            for item in items {
                let mx = item.awi.get(m).values().iter().cloned().fold(0.0, Real::max);
                sum_max += mx;
                n += 1;
            }
            if n == 0 {
                continue;
            }
            let scale = sum_max / n as Real;
            self.norm[m.index()] = if scale > 0.0 { (0.0, scale) } else { (0.0, 1.0) };
        }
    }

    /// Deactivate one sub-detector (its combiner segment becomes zeros).
    pub fn with_mask(&self, active: [bool; 4]) -> Self {
        let mut e = self.clone();
        e.active = active;
        e
    }

    /// Ensemble whose combiner ignores its input and always emits the given
    /// verdict: zero weights with a one-hot output bias.
    pub fn constant_verdict(n_classes: usize, adversarial: bool) -> Self {
        let mut ens = DetectorEnsemble::new(n_classes, MatrixView::Full, CombinerInput::Logits, 4, 0);
        for p in &mut ens.combiner.params {
            for v in p.tensor.values_mut() {
                *v = 0.0;
            }
        }
        let bias = ens.combiner.params.last_mut().expect("combiner has params");
        bias.tensor.values_mut()[usize::from(adversarial)] = 1.0;
        ens
    }

    fn check_active(&self) -> Result<(), DetectorError> {
        if self.active.iter().any(|&a| a) {
            Ok(())
        } else {
            Err(DetectorError::NoActiveSubDetector)
        }
    }

    /// Sequence of per-step input vectors a sub-detector sees, standardized
    /// with the fitted per-method statistics.
    fn rows_for(&self, awi: &AwiMatrix) -> Vec<Vec<Real>> {
        let (shift, scale) = self.norm[awi.method.index()];
        let z = |v: Real| (v - shift) / scale;
        match self.view {
            MatrixView::Full => (0..MAX_LEN)
                .map(|i| (0..self.n_classes).map(|j| z(awi.at(i, j))).collect())
                .collect(),
            MatrixView::Column => {
                let col = awi.predicted.min(self.n_classes - 1);
                (0..MAX_LEN).map(|i| vec![z(awi.at(i, col))]).collect()
            }
        }
    }

    /// Build the joint forward graph for one example.
    fn build_graph(&self, tape: &mut Tape, set: &AwiSet) -> Result<GraphHandles, DetectorError> {
        self.check_active()?;
        let mut sub_logits: Vec<Option<NodeId>> = vec![None; 4];
        let mut sub_hidden: Vec<Option<NodeId>> = vec![None; 4];
        let mut param_leaves: Vec<Option<NodeId>> = Vec::new();

        for (si, sub) in self.subs.iter().enumerate() {
            if !self.active[si] {
                for _ in &sub.params {
                    param_leaves.push(None);
                }
                continue;
            }
            let leaves: Vec<NodeId> = sub.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
            param_leaves.extend(leaves.iter().copied().map(Some));
            let leaf = |name: &str| {
                leaves[sub.params.iter().position(|p| p.name == name).expect("param name")]
            };
            // The padded tail of an AWI matrix is near zero; reading the
            // sequence back to front keeps the informative early rows next
            // to the final-state readout instead of a hundred steps away.
            let mut rows = self.rows_for(set.get(sub.method));
            rows.reverse();
            let mut h = tape.leaf(Tensor::zeros(vec![sub.hidden]));
            let mut c = tape.leaf(Tensor::zeros(vec![sub.hidden]));
            let zero_b = tape.leaf(Tensor::zeros(vec![sub.hidden]));
            for row in rows {
                let x_t = tape.leaf(Tensor::vector(row));
                let mut gates = Vec::with_capacity(4);
                for gate in GATES {
                    let from_x = tape.affine(leaf(&format!("wx_{gate}")), leaf(&format!("b_{gate}")), x_t)?;
                    let from_h = tape.affine(leaf(&format!("wh_{gate}")), zero_b, h)?;
                    let pre = tape.add(from_x, from_h)?;
                    gates.push(if gate == "g" { tape.tanh(pre)? } else { tape.sigmoid(pre)? });
                }
                let (i, f, g, o) = (gates[0], gates[1], gates[2], gates[3]);
                let keep = tape.mul(f, c)?;
                let write = tape.mul(i, g)?;
                c = tape.add(keep, write)?;
                let c_act = tape.tanh(c)?;
                h = tape.mul(o, c_act)?;
            }
            let logits = tape.affine(leaf("head_w"), leaf("head_b"), h)?;
            sub_logits[si] = Some(logits);
            sub_hidden[si] = Some(h);
        }

        // Combiner input: active segments in method order, zeros elsewhere.
        let mut segments = Vec::with_capacity(4);
        for si in 0..4 {
            let seg = match self.combiner_input {
                CombinerInput::Logits => match sub_logits[si] {
                    Some(id) => id,
                    None => tape.leaf(Tensor::zeros(vec![2])),
                },
                CombinerInput::Hidden => match sub_hidden[si] {
                    Some(id) => id,
                    None => tape.leaf(Tensor::zeros(vec![self.hidden])),
                },
            };
            segments.push(seg);
        }
        let cat = tape.concat(&segments)?;
        let c_leaves: Vec<NodeId> =
            self.combiner.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        param_leaves.extend(c_leaves.iter().copied().map(Some));
        let h1 = tape.affine(c_leaves[0], c_leaves[1], cat)?;
        let a1 = tape.relu(h1)?;
        let logits = tape.affine(c_leaves[2], c_leaves[3], a1)?;
        let probs = tape.softmax(logits)?;
        Ok(GraphHandles { sub_logits, logits, probs, param_leaves })
    }

    /// Run the detector on one sentence's AWI matrices.
    /// Class 1 is adversarial, class 0 benign.
    pub fn forward(&self, set: &AwiSet) -> Result<DetectorVerdict, DetectorError> {
        let mut tape = Tape::new();
        let handles = self.build_graph(&mut tape, set)?;
        let probs = tape.value(handles.probs).values();
        let mut sub_logits = [[0.0; 2]; 4];
        for (si, node) in handles.sub_logits.iter().enumerate() {
            if let Some(id) = node {
                let v = tape.value(*id).values();
                sub_logits[si] = [v[0], v[1]];
            }
        }
        Ok(DetectorVerdict {
            adversarial: argmax(probs).0 == 1,
            sub_logits,
            probs: [probs[0], probs[1]],
        })
    }

    fn all_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (si, sub) in self.subs.iter().enumerate() {
            for p in &sub.params {
                out.push((format!("sub{si}_{}", p.name), &p.tensor));
            }
        }
        for p in &self.combiner.params {
            out.push((format!("comb_{}", p.name), &p.tensor));
        }
        out
    }

    fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for sub in &mut self.subs {
            for p in &mut sub.params {
                out.push(&mut p.tensor);
            }
        }
        for p in &mut self.combiner.params {
            out.push(&mut p.tensor);
        }
        out
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = Vec::new();
        for sub in &self.subs {
            out.extend(sub.params.iter().map(|p| p.tensor.clone()));
        }
        out.extend(self.combiner.params.iter().map(|p| p.tensor.clone()));
        out
    }

    fn restore(&mut self, snap: &[Tensor]) {
        for (dst, src) in self.all_params_mut().into_iter().zip(snap) {
            *dst = src.clone();
        }
    }

    /// Joint end-to-end training with Adam and cross-entropy; the parameters
    /// of the best dev-accuracy epoch are kept. Returns the dev curve.
    pub fn train(
        &mut self,
        dataset: &DetectionDataset,
        cfg: &DetectorTrainConfig,
    ) -> Result<TrainRecord, DetectorError> {
        if dataset.train.is_empty() || dataset.dev.is_empty() {
            return Err(DetectorError::EmptySplit);
        }
        self.check_active()?;
        self.fit_normalization(&dataset.train);
        let sizes: Vec<usize> = {
            let mut s = Vec::new();
            for sub in &self.subs {
                s.extend(sub.params.iter().map(|p| p.tensor.len()));
            }
            s.extend(self.combiner.params.iter().map(|p| p.tensor.len()));
            s
        };
        let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &sizes);
        let mut rng = Rng::new(cfg.seed);
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();

        let mut record = TrainRecord { dev_accuracy: Vec::new(), best_epoch: 0 };
        let mut best_acc = -1.0;
        let mut best_params = self.snapshot();
        let mut stale = 0;

        for epoch in 0..cfg.max_epochs {
            rng.shuffle(&mut order);
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let results: Vec<Result<(Real, Vec<Vec<Real>>), DetectorError>> = batch
                    .par_iter()
                    .map(|&idx| {
                        let item = &dataset.train[idx];
                        self.example_grads(&item.awi, item.label)
                    })
                    .collect();
                let mut grand: Vec<Vec<Real>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
                for r in results {
                    let (loss, grads) = r?;
                    if !loss.is_finite() {
                        return Err(DetectorError::NonFiniteLoss(epoch));
                    }
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
                let mut refs = self.all_params_mut();
                adam.step(&mut refs, &grand);
            }
            let dev_acc = self.evaluate(&dataset.dev)?.accuracy;
            record.dev_accuracy.push(dev_acc);
            if dev_acc > best_acc {
                best_acc = dev_acc;
                best_params = self.snapshot();
                record.best_epoch = epoch;
                stale = 0;
            } else {
                if dev_acc == best_acc {
                    // Among equally good epochs keep the latest: margins keep
                    // growing after dev accuracy saturates.
                    best_params = self.snapshot();
                    record.best_epoch = epoch;
                }
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        if !record.dev_accuracy.is_empty() {
            self.restore(&best_params);
        }
        Ok(record)
    }

    fn example_grads(&self, set: &AwiSet, adversarial: bool) -> Result<(Real, Vec<Vec<Real>>), DetectorError> {
        let mut tape = Tape::new();
        let handles = self.build_graph(&mut tape, set)?;
        let loss = tape.cross_entropy(handles.logits, usize::from(adversarial))?;
        let grads = tape.backward(loss, crate::BackwardMode::Standard)?;
        let mut out = Vec::with_capacity(handles.param_leaves.len());
        for leaf in &handles.param_leaves {
            out.push(
                leaf.and_then(|id| grads.get(&id))
                    .map(|t| t.values().to_vec())
                    .unwrap_or_default(),
            );
        }
        Ok((tape.value(loss).item(), out))
    }

    /// Standard binary metrics over a labeled item set; adversarial is the
    /// positive class.
    pub fn evaluate(&self, items: &[DetectionItem]) -> Result<DetectionMetrics, DetectorError> {
        if items.is_empty() {
            return Err(DetectorError::EmptyTestSet);
        }
        let verdicts: Vec<Result<bool, DetectorError>> = items
            .par_iter()
            .map(|item| Ok(self.forward(&item.awi)?.adversarial))
            .collect();
        let mut confusion = Confusion::default();
        for (item, v) in items.iter().zip(verdicts) {
            confusion.record(v?, item.label);
        }
        Ok(confusion.metrics())
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        let mut meta = vec![
            ("n_classes".to_string(), self.n_classes as i64),
            ("hidden".to_string(), self.hidden as i64),
            ("view".to_string(), matches!(self.view, MatrixView::Column) as i64),
            ("combiner_input".to_string(), matches!(self.combiner_input, CombinerInput::Hidden) as i64),
            ("active".to_string(), self.active.iter().enumerate().map(|(i, &a)| (a as i64) << i).sum()),
        ];
        for (i, (shift, scale)) in self.norm.iter().enumerate() {
            meta.push((format!("norm_shift{i}"), shift.to_bits() as i64));
            meta.push((format!("norm_scale{i}"), scale.to_bits() as i64));
        }
        let params: Vec<(String, Tensor)> = self
            .all_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        checkpoint::save(path, "detector-ensemble", &meta, &params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let mut ckpt = checkpoint::load(path)?;
        checkpoint::expect_kind(&ckpt, "detector-ensemble")?;
        let get = |key: &str| {
            ckpt.meta_value(key)
                .ok_or_else(|| CheckpointError::MissingParam(format!("meta {key}")))
        };
        let n_classes = get("n_classes")? as usize;
        let hidden = get("hidden")? as usize;
        let view = if get("view")? == 1 { MatrixView::Column } else { MatrixView::Full };
        let combiner_input = if get("combiner_input")? == 1 {
            CombinerInput::Hidden
        } else {
            CombinerInput::Logits
        };
        let active_bits = get("active")?;
        let mut ens = DetectorEnsemble::new(n_classes, view, combiner_input, hidden, 0);
        ens.active = [0, 1, 2, 3].map(|i| active_bits >> i & 1 == 1);
        for i in 0..4 {
            let shift = Real::from_bits(get(&format!("norm_shift{i}"))? as u64);
            let scale = Real::from_bits(get(&format!("norm_scale{i}"))? as u64);
            ens.norm[i] = (shift, scale);
        }
        for (si, sub) in ens.subs.iter_mut().enumerate() {
            for p in &mut sub.params {
                let t = ckpt.take_param(&format!("sub{si}_{}", p.name))?;
                if t.shape() != p.tensor.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: p.name.clone(),
                        expect: p.tensor.shape().to_vec(),
                        got: t.shape().to_vec(),
                    }
                    .into());
                }
                p.tensor = t;
            }
        }
        for p in &mut ens.combiner.params {
            p.tensor = ckpt.take_param(&format!("comb_{}", p.name))?;
        }
        Ok(ens)
    }
}

struct GraphHandles {
    sub_logits: Vec<Option<NodeId>>,
    logits: NodeId,
    probs: NodeId,
    param_leaves: Vec<Option<NodeId>>,
}

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub lr: Real,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig { lr: 5e-4, batch_size: 32, max_epochs: 30, patience: 5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub dev_accuracy: Vec<Real>,
    pub best_epoch: usize,
}

/// One labeled sentence with its cached AWI matrices.
#[derive(Debug, Clone)]
pub struct DetectionItem {
    pub tokens: Vec<String>,
    /// True for adversarial.
    pub label: bool,
    /// Generating attack, `None` for benign sentences.
    pub attack: Option<AttackKind>,
    pub awi: AwiSet,
}

/// Balanced benign/adversarial data split 7:2:1.
#[derive(Debug, Clone, Default)]
pub struct DetectionDataset {
    pub train: Vec<DetectionItem>,
    pub dev: Vec<DetectionItem>,
    pub test: Vec<DetectionItem>,
}

impl DetectionDataset {
    pub fn all_items(&self) -> impl Iterator<Item = (&'static str, &DetectionItem)> {
        self.train
            .iter()
            .map(|i| ("train", i))
            .chain(self.dev.iter().map(|i| ("dev", i)))
            .chain(self.test.iter().map(|i| ("test", i)))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildReport {
    pub corpus: CorpusReport,
    pub n_adversarial: usize,
    pub n_benign: usize,
}

/// Inputs shared by the detection-data builder.
pub struct BuildInputs<'a> {
    pub attack_ctx: AttackContext<'a>,
    pub saliency: &'a SaliencyConfig,
    pub attack_cfg: &'a AttackConfig,
}

/// Generate balanced detection data: successful adversarial sentences from
/// the training attacks (the held-out evaluation attack is refused), paired
/// with their benign originals, with AWI matrices cached for every sentence
/// and a seeded 7:2:1 split.
pub fn build_detection_data(
    inputs: &BuildInputs,
    corpus: &[(usize, String)],
    train_attacks: &[AttackKind],
    held_out: Option<AttackKind>,
    k_per_class: usize,
    n_classes: usize,
    seed: u64,
) -> Result<(DetectionDataset, BuildReport), DetectorError> {
    if let Some(h) = held_out {
        if train_attacks.contains(&h) {
            return Err(DetectorError::HeldOutInTraining(h));
        }
    }
    let (results, corpus_report) = generate_adversarial_corpus(
        &inputs.attack_ctx,
        corpus,
        train_attacks,
        k_per_class,
        n_classes,
        inputs.attack_cfg,
        derive_seed(seed, "detector-adv"),
    )?;

    // One benign original per adversarial sentence keeps the classes
    // balanced exactly.
    let victim = inputs.attack_ctx.victim;
    let vocab = inputs.attack_ctx.vocab;
    let items: Vec<DetectionItem> = results
        .par_iter()
        .flat_map(|r| {
            let adv_ex = encode(&r.adversarial_tokens, vocab, r.label);
            let ben_ex = encode(&r.original_tokens, vocab, r.label);
            let adv_awi = awi_all(victim, &adv_ex, inputs.saliency).expect("consistent shapes");
            let ben_awi = awi_all(victim, &ben_ex, inputs.saliency).expect("consistent shapes");
            vec![
                DetectionItem {
                    tokens: r.adversarial_tokens.clone(),
                    label: true,
                    attack: Some(r.kind),
                    awi: adv_awi,
                },
                DetectionItem {
                    tokens: r.original_tokens.clone(),
                    label: false,
                    attack: None,
                    awi: ben_awi,
                },
            ]
        })
        .collect();

    let n_adversarial = items.iter().filter(|i| i.label).count();
    let n_benign = items.len() - n_adversarial;
    let dataset = split_items(items, seed);
    Ok((dataset, BuildReport { corpus: corpus_report, n_adversarial, n_benign }))
}

/// Seeded shuffle and 7:2:1 split.
pub fn split_items(mut items: Vec<DetectionItem>, seed: u64) -> DetectionDataset {
    let mut rng = Rng::new(derive_seed(seed, "detector-split"));
    let mut order: Vec<usize> = (0..items.len()).collect();
    rng.shuffle(&mut order);
    let reordered: Vec<DetectionItem> = {
        let mut slot: Vec<Option<DetectionItem>> = items.drain(..).map(Some).collect();
        order.iter().map(|&i| slot[i].take().expect("each index once")).collect()
    };
    let n = reordered.len();
    let n_train = n * 7 / 10;
    let n_dev = n * 2 / 10;
    let mut dataset = DetectionDataset::default();
    for (i, item) in reordered.into_iter().enumerate() {
        if i < n_train {
            dataset.train.push(item);
        } else if i < n_train + n_dev {
            dataset.dev.push(item);
        } else {
            dataset.test.push(item);
        }
    }
    dataset
}

/// Build detection items from already generated (adversarial, original)
/// sentence pairs, computing and caching AWI matrices for both sides. An
/// existing AWI cache (keyed by the joined token string) is consulted first.
pub fn assemble_detection_items(
    victim: &VictimModel,
    vocab: &crate::text::Vocabulary,
    saliency: &SaliencyConfig,
    pairs: &[(Vec<String>, Vec<String>, usize, AttackKind)],
    cache: &HashMap<String, AwiSet>,
) -> Vec<DetectionItem> {
    pairs
        .par_iter()
        .flat_map(|(adv_tokens, orig_tokens, label, kind)| {
            let awi_of = |tokens: &Vec<String>| -> AwiSet {
                if let Some(hit) = cache.get(&tokens.join(" ")) {
                    return hit.clone();
                }
                let ex = encode(tokens, vocab, *label);
                awi_all(victim, &ex, saliency).expect("consistent shapes")
            };
            vec![
                DetectionItem {
                    tokens: adv_tokens.clone(),
                    label: true,
                    attack: Some(*kind),
                    awi: awi_of(adv_tokens),
                },
                DetectionItem {
                    tokens: orig_tokens.clone(),
                    label: false,
                    attack: None,
                    awi: awi_of(orig_tokens),
                },
            ]
        })
        .collect()
}

/// Compute AWI matrices for externally supplied labeled sentences (used to
/// evaluate a trained detector on a held-out attack).
pub fn items_from_sentences(
    victim: &VictimModel,
    vocab: &crate::text::Vocabulary,
    saliency: &SaliencyConfig,
    sentences: &[(Vec<String>, bool, Option<AttackKind>)],
) -> Vec<DetectionItem> {
    sentences
        .par_iter()
        .map(|(tokens, label, attack)| {
            let ex = encode(tokens, vocab, 0);
            let awi = awi_all(victim, &ex, saliency).expect("consistent shapes");
            DetectionItem { tokens: tokens.clone(), label: *label, attack: *attack, awi }
        })
        .collect()
}

/// Manifest row plus AWI records for each item, so baselines can consume the
/// exact same sentences.
pub fn save_dataset(dir: &Path, dataset: &DetectionDataset) -> Result<(), DetectorError> {
    let io = |source: std::io::Error| DetectorError::Io {
        path: dir.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    for (split, item) in dataset.all_items() {
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            split,
            if item.label { "adversarial" } else { "benign" },
            item.attack.map(|a| a.tag()).unwrap_or("-"),
            item.tokens.join(" ")
        ));
        for m in Method::ALL {
            item.awi.get(m).to_bytes(&mut blob);
        }
    }
    fs::write(dir.join("manifest.tsv"), manifest).map_err(io)?;
    fs::write(dir.join("awi.bin"), blob).map_err(io)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DetectionDataset, DetectorError> {
    let io = |source: std::io::Error| DetectorError::Io {
        path: dir.display().to_string(),
        source,
    };
    let manifest = fs::read_to_string(dir.join("manifest.tsv")).map_err(io)?;
    let blob = fs::read(dir.join("awi.bin")).map_err(io)?;
    let mut offset = 0;
    let mut dataset = DetectionDataset::default();
    for (ln, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DetectorError::CorruptDataset(format!("manifest line {}", ln + 1)));
        }
        let label = match fields[1] {
            "adversarial" => true,
            "benign" => false,
            other => return Err(DetectorError::CorruptDataset(format!("label {other:?}"))),
        };
        let attack = match fields[2] {
            "-" => None,
            tag => Some(
                AttackKind::parse(tag)
                    .ok_or_else(|| DetectorError::CorruptDataset(format!("attack {tag:?}")))?,
            ),
        };
        let tokens: Vec<String> = fields[3].split(' ').map(str::to_string).collect();
        let mut mats: HashMap<usize, AwiMatrix> = HashMap::new();
        for _ in 0..4 {
            let (m, used) = AwiMatrix::from_bytes(&blob[offset..])
                .ok_or_else(|| DetectorError::CorruptDataset("awi record".into()))?;
            offset += used;
            mats.insert(m.method.index(), m);
        }
        let mut take = |i: usize| mats.remove(&i).ok_or_else(|| DetectorError::CorruptDataset("method set".into()));
        let item = DetectionItem {
            tokens,
            label,
            attack,
            awi: AwiSet { vg: take(0)?, gbp: take(1)?, lrp: take(2)?, ig: take(3)? },
        };
        match fields[0] {
            "train" => dataset.train.push(item),
            "dev" => dataset.dev.push(item),
            "test" => dataset.test.push(item),
            other => return Err(DetectorError::CorruptDataset(format!("split {other:?}"))),
        }
    }
    Ok(dataset)
}

/// Synthetic separable detection data: adversarial AWI entries uniform in
/// (0.5, 1), benign uniform in (0, 0.5). Exercises the training loop without
/// a victim model.
pub fn synthetic_dataset(n_per_class: usize, n_classes: usize, seed: u64) -> DetectionDataset {
    let mut rng = Rng::new(seed);
    let mut items = Vec::with_capacity(2 * n_per_class);
    for adversarial in [true, false] {
        for _ in 0..n_per_class {
            let (lo, hi) = if adversarial { (0.5, 1.0) } else { (0.0, 0.5) };
            let mk = |rng: &mut Rng, method: Method| {
                let values: Vec<Real> =
                    (0..MAX_LEN * n_classes).map(|_| rng.range(lo, hi)).collect();
                // Entries are already nonnegative; reuse the byte round-trip
                // constructor to keep AwiMatrix construction in one place.
                let mut bytes = vec![method.index() as u8];
                bytes.extend_from_slice(&0u32.to_le_bytes());
                bytes.extend_from_slice(&(MAX_LEN as u32).to_le_bytes());
                bytes.extend_from_slice(&(n_classes as u32).to_le_bytes());
                for v in &values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                AwiMatrix::from_bytes(&bytes).expect("well-formed record").0
            };
            items.push(DetectionItem {
                tokens: vec!["synthetic".into()],
                label: adversarial,
                attack: adversarial.then_some(AttackKind::Pwws),
                awi: AwiSet {
                    vg: mk(&mut rng, Method::Vg),
                    gbp: mk(&mut rng, Method::Gbp),
                    lrp: mk(&mut rng, Method::Lrp),
                    ig: mk(&mut rng, Method::Ig),
                },
            });
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    rng.shuffle(&mut order);
    let reordered: Vec<DetectionItem> = {
        let mut slot: Vec<Option<DetectionItem>> = items.drain(..).map(Some).collect();
        order.iter().map(|&i| slot[i].take().expect("each index once")).collect()
    };
    let n = reordered.len();
    let mut dataset = DetectionDataset::default();
    for (i, item) in reordered.into_iter().enumerate() {
        if i < n * 7 / 10 {
            dataset.train.push(item);
        } else if i < n * 9 / 10 {
            dataset.dev.push(item);
        } else {
            dataset.test.push(item);
        }
    }
    dataset
}
