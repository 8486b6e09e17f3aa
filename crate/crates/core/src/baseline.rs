//! Reference detectors: FGWS (frequency-based word substitution) and WDR
//! (word-level differential reaction over prediction logits).
//!
//! Both consume the same detection-dataset sentences as the saliency
//! detector so comparisons stay apples to apples.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{self, CheckpointError};
use crate::detector::{DetectionDataset, DetectorError};
use crate::metrics::{Confusion, DetectionMetrics};
use crate::opt::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::text::{
    encode, synonyms_in_vocab, EncodedExample, FrequencyTable, SynonymLexicon, Vocabulary, MAX_LEN,
    UNK,
};
use crate::victim::{argmax, VictimModel};
use crate::{Real, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct FgwsConfig {
    /// Words under this quantile of the distinct-count distribution count as
    /// low-frequency.
    pub delta_percentile: Real,
    /// Confidence-drop threshold; a score above it is adversarial.
    pub gamma: Real,
}

impl Default for FgwsConfig {
    fn default() -> Self {
        FgwsConfig { delta_percentile: 0.1, gamma: 0.0 }
    }
}

/// Replace every low-frequency word with its most frequent strictly more
/// frequent synonym; words without one stay put.
pub fn fgws_substitute(
    tokens: &[String],
    lexicon: &SynonymLexicon,
    freq: &FrequencyTable,
    vocab: &Vocabulary,
    delta_percentile: Real,
) -> Vec<String> {
    let threshold = freq.percentile_threshold(delta_percentile);
    let mut out = tokens.to_vec();
    for (i, tok) in tokens.iter().enumerate() {
        let count = freq.count(tok);
        if count >= threshold {
            continue;
        }
        let replacement = synonyms_in_vocab(tok, lexicon, vocab, None)
            .into_iter()
            .filter(|s| freq.count(s) > count)
            .max_by(|a, b| freq.count(a).cmp(&freq.count(b)).then_with(|| b.cmp(a)));
        if let Some(w) = replacement {
            out[i] = w;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct FgwsVerdict {
    pub adversarial: bool,
    /// Confidence drop `F_y(X) - F_y(X')` for the original prediction `y`.
    pub score: Real,
}

/// Score a sentence by the confidence drop after frequency-driven
/// substitution and compare against the tuned threshold.
pub fn fgws_detect(
    victim: &VictimModel,
    vocab: &Vocabulary,
    lexicon: &SynonymLexicon,
    freq: &FrequencyTable,
    tokens: &[String],
    cfg: &FgwsConfig,
) -> FgwsVerdict {
    let ex = encode(tokens, vocab, 0);
    let probs = victim.forward_probs(&ex);
    let y = argmax(&probs).0;
    let substituted = fgws_substitute(tokens, lexicon, freq, vocab, cfg.delta_percentile);
    let ex2 = encode(&substituted, vocab, 0);
    let probs2 = victim.forward_probs(&ex2);
    let score = probs[y] - probs2[y];
    FgwsVerdict { adversarial: score > cfg.gamma, score }
}

/// Pick the threshold maximizing F1 on labeled dev sentences. Candidates are
/// the observed nonnegative dev scores plus zero; the smallest maximizer
/// wins.
pub fn fgws_tune_gamma(
    victim: &VictimModel,
    vocab: &Vocabulary,
    lexicon: &SynonymLexicon,
    freq: &FrequencyTable,
    delta_percentile: Real,
    dev: &[(Vec<String>, bool)],
) -> Real {
    let scores: Vec<Real> = dev
        .par_iter()
        .map(|(tokens, _)| {
            fgws_detect(
                victim,
                vocab,
                lexicon,
                freq,
                tokens,
                &FgwsConfig { delta_percentile, gamma: 0.0 },
            )
            .score
        })
        .collect();
    let mut candidates: Vec<Real> = scores.iter().copied().filter(|s| *s >= 0.0).collect();
    candidates.push(0.0);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut best = (0.0, -1.0);
    for &gamma in &candidates {
        let mut confusion = Confusion::default();
        for ((_, label), &score) in dev.iter().zip(&scores) {
            confusion.record(score > gamma, *label);
        }
        let f1 = confusion.metrics().f1;
        if f1 > best.1 {
            best = (gamma, f1);
        }
    }
    best.0
}

/// Evaluate FGWS over labeled sentences.
pub fn fgws_evaluate(
    victim: &VictimModel,
    vocab: &Vocabulary,
    lexicon: &SynonymLexicon,
    freq: &FrequencyTable,
    cfg: &FgwsConfig,
    items: &[(Vec<String>, bool)],
) -> DetectionMetrics {
    let verdicts: Vec<bool> = items
        .par_iter()
        .map(|(tokens, _)| fgws_detect(victim, vocab, lexicon, freq, tokens, cfg).adversarial)
        .collect();
    let mut confusion = Confusion::default();
    for ((_, label), v) in items.iter().zip(verdicts) {
        confusion.record(v, *label);
    }
    confusion.metrics()
}

/// Per-position logit-margin reactions under UNK deletion, sorted
/// descending and zero-padded to [`MAX_LEN`].
pub fn wdr_features(victim: &VictimModel, ex: &EncodedExample) -> Vec<Real> {
    let logits = victim.forward_logits(ex);
    let y = argmax(&logits).0;
    let mut scores: Vec<Real> = (0..ex.true_length)
        .into_par_iter()
        .map(|i| {
            let mut probe = ex.clone();
            probe.ids[i] = UNK;
            let l = victim.forward_logits(&probe);
            let other = l
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != y)
                .map(|(_, v)| *v)
                .fold(Real::NEG_INFINITY, Real::max);
            l[y] - other
        })
        .collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.resize(MAX_LEN, 0.0);
    scores
}

/// Affine head over sorted WDR feature vectors.
#[derive(Debug, Clone)]
pub struct WdrModel {
    w: Tensor,
    b: Tensor,
}

#[derive(Debug, Clone)]
pub struct WdrTrainConfig {
    pub lr: Real,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for WdrTrainConfig {
    fn default() -> Self {
        WdrTrainConfig { lr: 5e-4, batch_size: 32, max_epochs: 30, patience: 5, seed: 0 }
    }
}

impl Default for WdrModel {
    fn default() -> Self {
        Self::new()
    }
}

impl WdrModel {
    pub fn new() -> Self {
        WdrModel { w: Tensor::zeros(vec![2, MAX_LEN]), b: Tensor::zeros(vec![2]) }
    }

    fn logits(&self, features: &[Real]) -> [Real; 2] {
        let mut out = [self.b.values()[0], self.b.values()[1]];
        for j in 0..2 {
            let row = &self.w.values()[j * MAX_LEN..(j + 1) * MAX_LEN];
            out[j] += row.iter().zip(features).map(|(w, f)| w * f).sum::<Real>();
        }
        out
    }

    pub fn detect(&self, features: &[Real]) -> bool {
        let l = self.logits(features);
        l[1] > l[0]
    }

    /// Supervised training of the head on precomputed features with the
    /// detector protocol: Adam, cross-entropy, dev-selected checkpoint.
    /// Returns the dev accuracy curve.
    pub fn train(
        &mut self,
        train: &[(Vec<Real>, bool)],
        dev: &[(Vec<Real>, bool)],
        cfg: &WdrTrainConfig,
    ) -> Result<Vec<Real>, DetectorError> {
        if train.is_empty() || dev.is_empty() {
            return Err(DetectorError::EmptySplit);
        }
        let mut adam = Adam::new(
            AdamConfig { lr: cfg.lr, ..Default::default() },
            &[self.w.len(), self.b.len()],
        );
        let mut rng = Rng::new(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut curve = Vec::new();
        let mut best = (-1.0, self.w.clone(), self.b.clone());
        let mut stale = 0;
        for epoch in 0..cfg.max_epochs {
            rng.shuffle(&mut order);
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut gw = vec![0.0; self.w.len()];
                let mut gb = vec![0.0; 2];
                for &idx in batch {
                    let (features, label) = &train[idx];
                    let mut tape = Tape::new();
                    let wl = tape.leaf(self.w.clone());
                    let bl = tape.leaf(self.b.clone());
                    let xl = tape.leaf(Tensor::vector(features.clone()));
                    let logits = tape.affine(wl, bl, xl).expect("fixed shapes");
                    let loss = tape.cross_entropy(logits, usize::from(*label)).expect("binary target");
                    if !tape.value(loss).item().is_finite() {
                        return Err(DetectorError::NonFiniteLoss(epoch));
                    }
                    let grads = tape.backward(loss, crate::BackwardMode::Standard).expect("scalar loss");
                    if let Some(g) = grads.get(&wl) {
                        for (acc, v) in gw.iter_mut().zip(g.values()) {
                            *acc += v;
                        }
                    }
                    if let Some(g) = grads.get(&bl) {
                        for (acc, v) in gb.iter_mut().zip(g.values()) {
                            *acc += v;
                        }
                    }
                }
                let scale = 1.0 / batch.len() as Real;
                gw.iter_mut().for_each(|v| *v *= scale);
                gb.iter_mut().for_each(|v| *v *= scale);
                adam.step(&mut [&mut self.w, &mut self.b], &[gw, gb]);
            }
            let acc = self.accuracy(dev);
            curve.push(acc);
            if acc > best.0 {
                best = (acc, self.w.clone(), self.b.clone());
                stale = 0;
            } else {
                if acc == best.0 {
                    best = (acc, self.w.clone(), self.b.clone());
                }
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        if !curve.is_empty() {
            self.w = best.1;
            self.b = best.2;
        }
        Ok(curve)
    }

    pub fn accuracy(&self, items: &[(Vec<Real>, bool)]) -> Real {
        if items.is_empty() {
            return 0.0;
        }
        let hits: usize = items
            .iter()
            .map(|(f, l)| usize::from(self.detect(f) == *l))
            .sum();
        hits as Real / items.len() as Real
    }

    pub fn evaluate(&self, items: &[(Vec<Real>, bool)]) -> DetectionMetrics {
        let mut confusion = Confusion::default();
        for (f, l) in items {
            confusion.record(self.detect(f), *l);
        }
        confusion.metrics()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        checkpoint::save(
            path,
            "wdr-head",
            &[],
            &[("w".to_string(), self.w.clone()), ("b".to_string(), self.b.clone())],
        )
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut ckpt = checkpoint::load(path)?;
        checkpoint::expect_kind(&ckpt, "wdr-head")?;
        Ok(WdrModel { w: ckpt.take_param("w")?, b: ckpt.take_param("b")? })
    }
}

/// Featurize the shared detection dataset for WDR.
pub fn wdr_featurize(
    victim: &VictimModel,
    vocab: &Vocabulary,
    dataset: &DetectionDataset,
) -> (Vec<(Vec<Real>, bool)>, Vec<(Vec<Real>, bool)>, Vec<(Vec<Real>, bool)>) {
    let run = |items: &[crate::detector::DetectionItem]| -> Vec<(Vec<Real>, bool)> {
        items
            .par_iter()
            .map(|item| {
                let ex = encode(&item.tokens, vocab, 0);
                (wdr_features(victim, &ex), item.label)
            })
            .collect()
    };
    (run(&dataset.train), run(&dataset.dev), run(&dataset.test))
}
