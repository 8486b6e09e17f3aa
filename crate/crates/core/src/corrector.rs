//! Corrector and the full detect-then-correct pipeline.
//!
//! A flagged sentence has its suspect words replaced by their most frequent
//! in-vocabulary synonyms, then is re-classified. Suspects come from the
//! vanilla-gradient importance column of the predicted class by default;
//! part-of-speech and low-frequency selection strategies are kept as
//! reference baselines.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectorEnsemble, DetectorError};
use crate::saliency::{awi_all, SaliencyConfig};
use crate::text::{
    encode, synonyms_in_vocab, tokenize, DataError, FrequencyTable, Pos, SynonymLexicon,
    Vocabulary, MAX_LEN,
};
use crate::victim::{ModelError, VictimModel};
use crate::Real;

#[derive(Debug, Error)]
pub enum DefendError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("strategy {0} needs a lexicon with part-of-speech tags")]
    StrategyNeedsPos(Strategy),
}

/// How suspects are chosen for correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Words whose predicted-class importance exceeds the beta threshold.
    Saliency,
    PosVerb,
    PosNoun,
    PosNounVerb,
    FreqLow,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Saliency => "saliency",
            Strategy::PosVerb => "pos_verb",
            Strategy::PosNoun => "pos_noun",
            Strategy::PosNounVerb => "pos_noun_verb",
            Strategy::FreqLow => "freq_low",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "saliency" => Some(Strategy::Saliency),
            "pos_verb" => Some(Strategy::PosVerb),
            "pos_noun" => Some(Strategy::PosNoun),
            "pos_noun_verb" => Some(Strategy::PosNounVerb),
            "freq_low" => Some(Strategy::FreqLow),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone)]
pub struct CorrectorConfig {
    /// Threshold position between the column minimum and maximum.
    pub beta: Real,
    pub strategy: Strategy,
    /// Quantile of the distinct-token count distribution under which a word
    /// counts as low-frequency for [`Strategy::FreqLow`].
    pub freq_low_percentile: Real,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig { beta: 0.4, strategy: Strategy::Saliency, freq_low_percentile: 0.25 }
    }
}

/// Indices whose importance strictly exceeds
/// `beta * (max - min) + min` over the given column. The caller passes only
/// real-token positions; padding never participates.
pub fn select_suspects(column: &[Real], beta: Real) -> Vec<usize> {
    if column.is_empty() {
        return vec![];
    }
    let max = column.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let min = column.iter().cloned().fold(Real::INFINITY, Real::min);
    // Convex-combination form of beta * (max - min) + min: equal
    // algebraically, and bit-exact at beta = 0 and beta = 1, where the
    // strict comparison must select everything above the minimum and
    // nothing at all.
    let threshold = beta * max + (1.0 - beta) * min;
    column
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Replace each suspect with its most frequent in-vocabulary synonym.
/// Frequency ties break toward the lexicographically smaller token; a word
/// with no usable synonym is kept.
pub fn correct(
    tokens: &[String],
    suspects: &[usize],
    lexicon: &SynonymLexicon,
    freq: &FrequencyTable,
    vocab: &Vocabulary,
) -> Vec<String> {
    let mut out = tokens.to_vec();
    for &i in suspects {
        let candidates = synonyms_in_vocab(&tokens[i], lexicon, vocab, None);
        let best = candidates.into_iter().max_by(|a, b| {
            freq.count(a)
                .cmp(&freq.count(b))
                .then_with(|| b.cmp(a)) // prefer the smaller token on ties
        });
        if let Some(w) = best {
            out[i] = w;
        }
    }
    out
}

/// Suspect positions for the reference strategies.
pub fn baseline_suspects(
    tokens: &[String],
    strategy: Strategy,
    lexicon: &SynonymLexicon,
    freq: &FrequencyTable,
    cfg: &CorrectorConfig,
) -> Result<Vec<usize>, DefendError> {
    let wanted: &[Pos] = match strategy {
        Strategy::PosVerb => &[Pos::Verb],
        Strategy::PosNoun => &[Pos::Noun],
        Strategy::PosNounVerb => &[Pos::Noun, Pos::Verb],
        Strategy::FreqLow => {
            let threshold = freq.percentile_threshold(cfg.freq_low_percentile);
            return Ok(tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| freq.count(t) < threshold)
                .map(|(i, _)| i)
                .collect());
        }
        Strategy::Saliency => return Ok(vec![]),
    };
    if !lexicon.has_pos_tags() {
        return Err(DefendError::StrategyNeedsPos(strategy));
    }
    Ok(tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| lexicon.pos_tags(t).iter().any(|p| wanted.contains(p)))
        .map(|(i, _)| i)
        .collect())
}

/// One suspect with the importance score that selected it (saliency
/// strategy only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suspect {
    pub position: usize,
    pub word: String,
    pub importance: Option<Real>,
}

/// Audit record of one defended prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub input: String,
    pub victim_label: usize,
    pub victim_confidence: Real,
    pub verdict_adversarial: bool,
    pub detector_probs: Option<[Real; 2]>,
    pub suspects: Vec<Suspect>,
    /// Present exactly when the verdict was adversarial.
    pub corrected: Option<String>,
    pub final_label: usize,
    pub final_confidence: Real,
}

/// Everything the defended classifier needs at inference time.
pub struct DefensePipeline<'a> {
    pub victim: &'a VictimModel,
    /// `None` routes every sentence straight to the victim.
    pub detector: Option<&'a DetectorEnsemble>,
    pub vocab: &'a Vocabulary,
    pub lexicon: &'a SynonymLexicon,
    pub freq: &'a FrequencyTable,
    pub saliency: SaliencyConfig,
    pub corrector: CorrectorConfig,
}

impl DefensePipeline<'_> {
    /// Classify with detection and at most one correction pass.
    pub fn defend(&self, text: &str) -> Result<DefenseOutcome, DefendError> {
        let tokens = tokenize(text)?;
        self.defend_tokens(&tokens)
    }

    pub fn defend_tokens(&self, tokens: &[String]) -> Result<DefenseOutcome, DefendError> {
        let ex = encode(tokens, self.vocab, 0);
        let (victim_label, victim_confidence) = self.victim.predict(&ex);

        let (verdict_adversarial, detector_probs) = match self.detector {
            None => (false, None),
            Some(ens) => {
                let awi = awi_all(self.victim, &ex, &self.saliency)?;
                let v = ens.forward(&awi)?;
                (v.adversarial, Some(v.probs))
            }
        };

        if !verdict_adversarial {
            return Ok(DefenseOutcome {
                input: tokens.join(" "),
                victim_label,
                victim_confidence,
                verdict_adversarial,
                detector_probs,
                suspects: vec![],
                corrected: None,
                final_label: victim_label,
                final_confidence: victim_confidence,
            });
        }

        let limit = ex.true_length.min(MAX_LEN);
        let suspects: Vec<Suspect> = match self.corrector.strategy {
            Strategy::Saliency => {
                // The corrector reads the vanilla-gradient importance of the
                // predicted class over real token positions.
                let awi = awi_all(self.victim, &ex, &self.saliency)?;
                let column: Vec<Real> =
                    (0..limit).map(|i| awi.vg.at(i, victim_label)).collect();
                select_suspects(&column, self.corrector.beta)
                    .into_iter()
                    .map(|i| Suspect {
                        position: i,
                        word: tokens[i].clone(),
                        importance: Some(column[i]),
                    })
                    .collect()
            }
            strategy => baseline_suspects(&tokens[..limit], strategy, self.lexicon, self.freq, &self.corrector)?
                .into_iter()
                .map(|i| Suspect { position: i, word: tokens[i].clone(), importance: None })
                .collect(),
        };

        let positions: Vec<usize> = suspects.iter().map(|s| s.position).collect();
        let corrected = correct(tokens, &positions, self.lexicon, self.freq, self.vocab);
        let corrected_ex = encode(&corrected, self.vocab, 0);
        let (final_label, final_confidence) = self.victim.predict(&corrected_ex);
        Ok(DefenseOutcome {
            input: tokens.join(" "),
            victim_label,
            victim_confidence,
            verdict_adversarial,
            detector_probs,
            suspects,
            corrected: Some(corrected.join(" ")),
            final_label,
            final_confidence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::SynonymEntry;

    #[test]
    fn threshold_is_strict() {
        let suspects = select_suspects(&[0.1, 0.5, 0.9], 0.5);
        assert_eq!(suspects, vec![2], "0.5 equals the threshold and is excluded");
    }

    #[test]
    fn beta_one_selects_nothing() {
        assert!(select_suspects(&[0.1, 0.5, 0.9], 1.0).is_empty());
    }

    #[test]
    fn constant_column_selects_nothing() {
        assert!(select_suspects(&[0.3, 0.3, 0.3], 0.0).is_empty());
    }

    #[test]
    fn beta_zero_selects_everything_above_the_minimum() {
        let suspects = select_suspects(&[0.1, 0.5, 0.9, 0.1], 0.0);
        assert_eq!(suspects, vec![1, 2]);
    }

    #[test]
    fn suspects_shrink_as_beta_grows() {
        let mut rng = crate::rng::Rng::new(8);
        for _ in 0..50 {
            let column: Vec<Real> = (0..12).map(|_| rng.uniform()).collect();
            let mut prev: Option<Vec<usize>> = None;
            for step in 0..=10 {
                let beta = step as Real / 10.0;
                let cur = select_suspects(&column, beta);
                if let Some(p) = prev {
                    assert!(cur.iter().all(|i| p.contains(i)), "beta monotonicity violated");
                }
                prev = Some(cur);
            }
        }
    }

    fn lexicon_and_freq() -> (SynonymLexicon, FrequencyTable, Vocabulary) {
        let lexicon = SynonymLexicon::from_entries([
            (
                "awful".to_string(),
                vec![
                    SynonymEntry { word: "bad".into(), pos: Pos::Adj },
                    SynonymEntry { word: "dire".into(), pos: Pos::Adj },
                ],
            ),
            (
                "movie".to_string(),
                vec![SynonymEntry { word: "film".into(), pos: Pos::Noun }],
            ),
            (
                "watch".to_string(),
                vec![SynonymEntry { word: "view".into(), pos: Pos::Verb }],
            ),
        ]);
        let texts: Vec<Vec<String>> = [
            "bad bad bad dire film film view watch movie awful plot",
        ]
        .iter()
        .map(|s| tokenize(s).unwrap())
        .collect();
        let freq = FrequencyTable::build(&texts);
        let vocab = Vocabulary::build(&texts);
        (lexicon, freq, vocab)
    }

    #[test]
    fn correct_prefers_the_most_frequent_synonym() {
        let (lexicon, freq, vocab) = lexicon_and_freq();
        let tokens = tokenize("awful movie").unwrap();
        let out = correct(&tokens, &[0], &lexicon, &freq, &vocab);
        assert_eq!(out, vec!["bad", "movie"], "bad (3) beats dire (1)");
    }

    #[test]
    fn correct_keeps_words_without_synonyms() {
        let (lexicon, freq, vocab) = lexicon_and_freq();
        let tokens = tokenize("plot movie").unwrap();
        let out = correct(&tokens, &[0, 1], &lexicon, &freq, &vocab);
        assert_eq!(out, vec!["plot", "film"]);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let lexicon = SynonymLexicon::from_entries([(
            "w".to_string(),
            vec![
                SynonymEntry { word: "zeta".into(), pos: Pos::Other },
                SynonymEntry { word: "alpha".into(), pos: Pos::Other },
            ],
        )]);
        let texts: Vec<Vec<String>> = vec![tokenize("zeta alpha w").unwrap()];
        let freq = FrequencyTable::build(&texts);
        let vocab = Vocabulary::build(&texts);
        let out = correct(&[("w".to_string())], &[0], &lexicon, &freq, &vocab);
        assert_eq!(out, vec!["alpha"]);
    }

    #[test]
    fn length_is_preserved_for_every_strategy() {
        let (lexicon, freq, vocab) = lexicon_and_freq();
        let tokens = tokenize("awful movie watch plot").unwrap();
        for strategy in [Strategy::PosVerb, Strategy::PosNoun, Strategy::PosNounVerb, Strategy::FreqLow] {
            let cfg = CorrectorConfig { strategy, ..Default::default() };
            let suspects = baseline_suspects(&tokens, strategy, &lexicon, &freq, &cfg).unwrap();
            let out = correct(&tokens, &suspects, &lexicon, &freq, &vocab);
            assert_eq!(out.len(), tokens.len());
        }
    }

    #[test]
    fn self_referential_lexicon_changes_nothing() {
        // Entries listing only the headword itself are stripped on load, so
        // every suspect keeps its word.
        let lexicon = SynonymLexicon::from_entries([(
            "movie".to_string(),
            vec![SynonymEntry { word: "movie".into(), pos: Pos::Noun }],
        )]);
        let texts: Vec<Vec<String>> = vec![tokenize("movie night").unwrap()];
        let freq = FrequencyTable::build(&texts);
        let vocab = Vocabulary::build(&texts);
        let tokens = tokenize("movie night").unwrap();
        let out = correct(&tokens, &[0, 1], &lexicon, &freq, &vocab);
        assert_eq!(out, tokens);
    }

    #[test]
    fn pos_noun_verb_is_the_union_of_pos_noun_and_pos_verb() {
        let (lexicon, freq, _) = lexicon_and_freq();
        let tokens = tokenize("awful movie watch plot").unwrap();
        let cfg = CorrectorConfig::default();
        let nouns = baseline_suspects(&tokens, Strategy::PosNoun, &lexicon, &freq, &cfg).unwrap();
        let verbs = baseline_suspects(&tokens, Strategy::PosVerb, &lexicon, &freq, &cfg).unwrap();
        let both = baseline_suspects(&tokens, Strategy::PosNounVerb, &lexicon, &freq, &cfg).unwrap();
        for i in nouns.iter().chain(&verbs) {
            assert!(both.contains(i));
        }
        assert_eq!(both.len(), nouns.len() + verbs.len());
    }

    #[test]
    fn freq_low_percentile_zero_selects_nothing() {
        let (lexicon, freq, _) = lexicon_and_freq();
        let tokens = tokenize("awful movie plot").unwrap();
        let cfg = CorrectorConfig { freq_low_percentile: 0.0, ..Default::default() };
        let out = baseline_suspects(&tokens, Strategy::FreqLow, &lexicon, &freq, &cfg).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn pos_strategy_without_tags_is_an_error() {
        let lexicon = SynonymLexicon::from_entries([(
            "a".to_string(),
            vec![SynonymEntry { word: "b".into(), pos: Pos::Other }],
        )]);
        let texts: Vec<Vec<String>> = vec![tokenize("a b").unwrap()];
        let freq = FrequencyTable::build(&texts);
        let tokens = tokenize("a b").unwrap();
        let cfg = CorrectorConfig::default();
        assert!(matches!(
            baseline_suspects(&tokens, Strategy::PosVerb, &lexicon, &freq, &cfg),
            Err(DefendError::StrategyNeedsPos(_))
        ));
    }

    // Pipeline tests ride on the hand-wired attack fixture: a victim whose
    // logits are columnwise embedding maxima, plus a lexicon that can both
    // break and restore the signal word.
    mod pipeline {
        use super::*;
        use crate::attack::{attack_pwws, AttackConfig, AttackContext};
        use crate::victim::VictimModel;

        struct Fixture {
            victim: VictimModel,
            vocab: Vocabulary,
            lexicon: SynonymLexicon,
            freq: FrequencyTable,
        }

        fn fixture() -> Fixture {
            let texts: Vec<Vec<String>> = [
                "good good good good nice poor awful filler blah stuff",
            ]
            .iter()
            .map(|s| tokenize(s).unwrap())
            .collect();
            let vocab = Vocabulary::build(&texts);
            let mut victim = VictimModel::new_textcnn(vocab.len(), 2, 2, &[1], 2, 0);
            let strength = |w: &str| -> Option<(usize, Real)> {
                match w {
                    "good" => Some((0, 1.0)),
                    "nice" => Some((0, 0.9)),
                    "poor" => Some((1, 0.6)),
                    "awful" => Some((1, 1.0)),
                    _ => None,
                }
            };
            {
                let embed = victim.param_mut("embed").unwrap();
                for v in embed.values_mut() {
                    *v = 0.0;
                }
                for id in 0..vocab.len() as u32 {
                    if let Some((axis, s)) = strength(vocab.token(id)) {
                        embed.values_mut()[id as usize * 2 + axis] = s;
                    }
                }
            }
            victim.param_mut("conv_w1").unwrap().values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            victim.param_mut("out_w").unwrap().values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);

            let lexicon = SynonymLexicon::from_entries([
                (
                    "good".to_string(),
                    vec![
                        SynonymEntry { word: "nice".into(), pos: Pos::Adj },
                        SynonymEntry { word: "poor".into(), pos: Pos::Adj },
                    ],
                ),
                (
                    "poor".to_string(),
                    vec![
                        SynonymEntry { word: "good".into(), pos: Pos::Adj },
                        SynonymEntry { word: "awful".into(), pos: Pos::Adj },
                    ],
                ),
            ]);
            // "good" is by far the most frequent member of its group.
            let freq = FrequencyTable::build(&texts);
            Fixture { victim, vocab, lexicon, freq }
        }

        fn always(adversarial: bool) -> DetectorEnsemble {
            DetectorEnsemble::constant_verdict(2, adversarial)
        }

        #[test]
        fn benign_verdict_never_changes_the_prediction() {
            let f = fixture();
            let benign = always(false);
            let pipeline = DefensePipeline {
                victim: &f.victim,
                detector: Some(&benign),
                vocab: &f.vocab,
                lexicon: &f.lexicon,
                freq: &f.freq,
                saliency: SaliencyConfig { ig_steps: 2, ..Default::default() },
                corrector: CorrectorConfig::default(),
            };
            for text in ["good filler blah", "awful filler stuff", "poor blah"] {
                let out = pipeline.defend(text).unwrap();
                let ex = encode(&tokenize(text).unwrap(), &f.vocab, 0);
                assert_eq!(out.final_label, f.victim.predict(&ex).0);
                assert!(out.corrected.is_none());
            }
        }

        #[test]
        fn beta_one_performs_an_identity_correction() {
            let f = fixture();
            let adv = always(true);
            let pipeline = DefensePipeline {
                victim: &f.victim,
                detector: Some(&adv),
                vocab: &f.vocab,
                lexicon: &f.lexicon,
                freq: &f.freq,
                saliency: SaliencyConfig { ig_steps: 2, ..Default::default() },
                corrector: CorrectorConfig { beta: 1.0, ..Default::default() },
            };
            let out = pipeline.defend("good filler blah").unwrap();
            assert!(out.verdict_adversarial);
            assert_eq!(out.corrected.as_deref(), Some("good filler blah"));
            assert_eq!(out.final_label, out.victim_label);
            assert!(out.suspects.is_empty());
        }

        #[test]
        fn defend_restores_an_attacked_sentence() {
            let f = fixture();
            let ctx = AttackContext {
                victim: &f.victim,
                vocab: &f.vocab,
                lexicon: &f.lexicon,
                embeddings: &crate::text::EmbeddingTable::random(2, &f.vocab, 3),
            };
            let tokens = tokenize("good filler blah stuff").unwrap();
            let attack = attack_pwws(&ctx, &tokens, 0, &AttackConfig::default());
            assert!(attack.success);
            assert_eq!(attack.substitutions.len(), 1);
            assert_eq!(attack.substitutions[0].new, "poor");

            let adv = always(true);
            let pipeline = DefensePipeline {
                victim: &f.victim,
                detector: Some(&adv),
                vocab: &f.vocab,
                lexicon: &f.lexicon,
                freq: &f.freq,
                saliency: SaliencyConfig { ig_steps: 2, ..Default::default() },
                corrector: CorrectorConfig { beta: 0.4, ..Default::default() },
            };
            let out = pipeline.defend_tokens(&attack.adversarial_tokens).unwrap();
            assert_eq!(out.corrected.as_deref(), Some("good filler blah stuff"));
            assert_eq!(out.final_label, 0, "original label restored");
        }

        #[test]
        fn no_detector_routes_straight_to_the_victim() {
            let f = fixture();
            let pipeline = DefensePipeline {
                victim: &f.victim,
                detector: None,
                vocab: &f.vocab,
                lexicon: &f.lexicon,
                freq: &f.freq,
                saliency: SaliencyConfig::default(),
                corrector: CorrectorConfig::default(),
            };
            let out = pipeline.defend("awful filler").unwrap();
            assert_eq!(out.final_label, 1);
            assert!(out.detector_probs.is_none());
            assert!(out.corrected.is_none());
        }

        #[test]
        fn outcome_serializes_to_json() {
            let f = fixture();
            let adv = always(true);
            let pipeline = DefensePipeline {
                victim: &f.victim,
                detector: Some(&adv),
                vocab: &f.vocab,
                lexicon: &f.lexicon,
                freq: &f.freq,
                saliency: SaliencyConfig { ig_steps: 2, ..Default::default() },
                corrector: CorrectorConfig::default(),
            };
            let out = pipeline.defend("poor filler blah").unwrap();
            let json = serde_json::to_string(&out).unwrap();
            assert!(json.contains("\"verdict_adversarial\":true"));
            let back: DefenseOutcome = serde_json::from_str(&json).unwrap();
            assert_eq!(back.final_label, out.final_label);
        }
    }
}
