//! Experiment configuration: a TOML file with every knob defaulted, plus
//! validation, a stable hash, and master-seed fan-out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textshield_core::attack::{AttackConfig, AttackKind};
use textshield_core::corrector::{CorrectorConfig, Strategy};
use textshield_core::detector::{CombinerInput, DetectorTrainConfig, MatrixView};
use textshield_core::rng::derive_seed;
use textshield_core::saliency::SaliencyConfig;
use textshield_core::victim::{Arch, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Single seed every component seed is derived from.
    #[serde(default = "d_master_seed")]
    pub master_seed: u64,
    /// All artifacts land under this directory.
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub victim: VictimSection,
    #[serde(default)]
    pub attacks: AttackSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub corrector: CorrectorSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub fgws: FgwsSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

fn d_master_seed() -> u64 {
    42
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Short dataset name used in report rows.
    #[serde(default = "d_name")]
    pub name: String,
    #[serde(default = "d_train")]
    pub train: PathBuf,
    #[serde(default = "d_test")]
    pub test: PathBuf,
    #[serde(default = "d_embeddings")]
    pub embeddings: PathBuf,
    #[serde(default = "d_lexicon")]
    pub lexicon: PathBuf,
    #[serde(default = "d_n_classes")]
    pub n_classes: usize,
    /// Synthetic corpus sizing for `gen-data`.
    #[serde(default = "d_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
}

fn d_name() -> String {
    "synth".into()
}
fn d_train() -> PathBuf {
    "data/train.tsv".into()
}
fn d_test() -> PathBuf {
    "data/test.tsv".into()
}
fn d_embeddings() -> PathBuf {
    "data/embeddings.txt".into()
}
fn d_lexicon() -> PathBuf {
    "data/lexicon.tsv".into()
}
fn d_n_classes() -> usize {
    2
}
fn d_train_per_class() -> usize {
    800
}
fn d_test_per_class() -> usize {
    400
}
fn d_embed_dim() -> usize {
    16
}

impl Default for DataSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSection {
    #[serde(default = "d_arch")]
    pub arch: String,
    #[serde(default = "d_filters")]
    pub filters: usize,
    #[serde(default = "d_widths")]
    pub filter_widths: Vec<usize>,
    #[serde(default = "d_lstm_hidden")]
    pub lstm_hidden: usize,
    #[serde(default = "d_victim_lr")]
    pub lr: f64,
    #[serde(default = "d_victim_batch")]
    pub batch_size: usize,
    #[serde(default = "d_victim_epochs")]
    pub epochs: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
}

fn d_arch() -> String {
    "textcnn".into()
}
fn d_filters() -> usize {
    100
}
fn d_widths() -> Vec<usize> {
    vec![3, 4, 5]
}
fn d_lstm_hidden() -> usize {
    128
}
fn d_victim_lr() -> f64 {
    1e-3
}
fn d_victim_batch() -> usize {
    32
}
fn d_victim_epochs() -> usize {
    5
}
fn d_dropout() -> f64 {
    0.5
}

impl Default for VictimSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "d_train_attacks")]
    pub train_attacks: Vec<String>,
    #[serde(default = "d_held_out")]
    pub held_out: String,
    #[serde(default = "d_fraction")]
    pub max_sub_fraction: f64,
    #[serde(default = "d_ga_pop")]
    pub ga_population: usize,
    #[serde(default = "d_ga_gens")]
    pub ga_generations: usize,
    #[serde(default = "d_ga_mutation")]
    pub ga_mutation: f64,
    #[serde(default = "d_tf_cos")]
    pub tf_min_cosine: f64,
}

fn d_train_attacks() -> Vec<String> {
    vec!["pwws".into(), "textfooler".into(), "iga".into()]
}
fn d_held_out() -> String {
    "ga".into()
}
fn d_fraction() -> f64 {
    0.25
}
fn d_ga_pop() -> usize {
    20
}
fn d_ga_gens() -> usize {
    20
}
fn d_ga_mutation() -> f64 {
    0.3
}
fn d_tf_cos() -> f64 {
    0.5
}

impl Default for AttackSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default = "d_k")]
    pub k_per_class: usize,
    #[serde(default = "d_combiner")]
    pub combiner_input: String,
    #[serde(default = "d_view")]
    pub input_view: String,
    #[serde(default = "d_det_hidden")]
    pub hidden: usize,
    #[serde(default = "d_det_lr")]
    pub lr: f64,
    #[serde(default = "d_det_batch")]
    pub batch_size: usize,
    #[serde(default = "d_det_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_ig_steps")]
    pub ig_steps: usize,
    #[serde(default = "d_lrp_eps")]
    pub lrp_epsilon: f64,
}

fn d_k() -> usize {
    200
}
fn d_combiner() -> String {
    "logits".into()
}
fn d_view() -> String {
    "full".into()
}
fn d_det_hidden() -> usize {
    128
}
fn d_det_lr() -> f64 {
    5e-4
}
fn d_det_batch() -> usize {
    32
}
fn d_det_epochs() -> usize {
    30
}
fn d_patience() -> usize {
    10
}
fn d_ig_steps() -> usize {
    32
}
fn d_lrp_eps() -> f64 {
    1e-6
}

impl Default for DetectorSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorSection {
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_strategy")]
    pub strategy: String,
    #[serde(default = "d_freq_low")]
    pub freq_low_percentile: f64,
}

fn d_beta() -> f64 {
    0.4
}
fn d_strategy() -> String {
    "saliency".into()
}
fn d_freq_low() -> f64 {
    0.25
}

impl Default for CorrectorSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Benign and adversarial evaluation sentences each.
    #[serde(default = "d_n_eval")]
    pub n_eval: usize,
}

fn d_n_eval() -> usize {
    200
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgwsSection {
    #[serde(default = "d_delta")]
    pub delta_percentile: f64,
}

fn d_delta() -> f64 {
    0.1
}

impl Default for FgwsSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default = "d_k_grid")]
    pub k_grid: Vec<usize>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Epoch cap for the retrained ensembles inside ablations.
    #[serde(default = "d_ablate_epochs")]
    pub detector_epochs: usize,
}

fn d_k_grid() -> Vec<usize> {
    vec![50, 100, 200]
}
fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn d_ablate_epochs() -> usize {
    12
}

impl Default for AblateSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = fs::read_to_string(path)
            .map_err(|e| CliError::MissingArtifact(format!("config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&body).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let held = self.held_out_attack()?;
        for a in self.train_attack_kinds()? {
            if a == held {
                return Err(CliError::Config(format!(
                    "held-out attack {held} also appears in attacks.train_attacks"
                )));
            }
        }
        if self.data.train == self.data.test {
            return Err(CliError::Config(
                "data.train and data.test must be different files".into(),
            ));
        }
        self.victim_arch()?;
        self.matrix_view()?;
        self.combiner_input()?;
        self.corrector_strategy()?;
        if !(0.0..=1.0).contains(&self.corrector.beta) {
            return Err(CliError::Config(format!("corrector.beta {} outside [0,1]", self.corrector.beta)));
        }
        Ok(())
    }

    pub fn victim_arch(&self) -> Result<Arch, CliError> {
        Arch::parse(&self.victim.arch)
            .ok_or_else(|| CliError::Config(format!("unknown victim.arch {:?}", self.victim.arch)))
    }

    pub fn train_attack_kinds(&self) -> Result<Vec<AttackKind>, CliError> {
        self.attacks
            .train_attacks
            .iter()
            .map(|s| {
                AttackKind::parse(s)
                    .ok_or_else(|| CliError::Config(format!("unknown attack {s:?}")))
            })
            .collect()
    }

    pub fn held_out_attack(&self) -> Result<AttackKind, CliError> {
        AttackKind::parse(&self.attacks.held_out)
            .ok_or_else(|| CliError::Config(format!("unknown held-out attack {:?}", self.attacks.held_out)))
    }

    pub fn matrix_view(&self) -> Result<MatrixView, CliError> {
        MatrixView::parse(&self.detector.input_view)
            .ok_or_else(|| CliError::Config(format!("unknown detector.input_view {:?}", self.detector.input_view)))
    }

    pub fn combiner_input(&self) -> Result<CombinerInput, CliError> {
        CombinerInput::parse(&self.detector.combiner_input)
            .ok_or_else(|| CliError::Config(format!("unknown detector.combiner_input {:?}", self.detector.combiner_input)))
    }

    pub fn corrector_strategy(&self) -> Result<Strategy, CliError> {
        Strategy::parse(&self.corrector.strategy)
            .ok_or_else(|| CliError::Config(format!("unknown corrector.strategy {:?}", self.corrector.strategy)))
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            max_sub_fraction: self.attacks.max_sub_fraction,
            ga_population: self.attacks.ga_population,
            ga_generations: self.attacks.ga_generations,
            ga_mutation: self.attacks.ga_mutation,
            tf_min_cosine: self.attacks.tf_min_cosine,
            seed: self.seed_for("attacks"),
        }
    }

    pub fn saliency_config(&self) -> SaliencyConfig {
        SaliencyConfig {
            ig_steps: self.detector.ig_steps,
            lrp_epsilon: self.detector.lrp_epsilon,
            ..Default::default()
        }
    }

    pub fn corrector_config(&self) -> Result<CorrectorConfig, CliError> {
        Ok(CorrectorConfig {
            beta: self.corrector.beta,
            strategy: self.corrector_strategy()?,
            freq_low_percentile: self.corrector.freq_low_percentile,
        })
    }

    pub fn victim_train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.victim.lr,
            batch_size: self.victim.batch_size,
            epochs: self.victim.epochs,
            seed: self.seed_for("victim-train"),
            dropout: self.victim.dropout,
            ..Default::default()
        }
    }

    pub fn detector_train_config(&self) -> DetectorTrainConfig {
        DetectorTrainConfig {
            lr: self.detector.lr,
            batch_size: self.detector.batch_size,
            max_epochs: self.detector.max_epochs,
            patience: self.detector.patience,
            seed: self.seed_for("detector-train"),
        }
    }

    /// Component seed derived from the master seed and a label.
    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.master_seed, label)
    }

    /// FNV-1a over the canonical JSON form: stable across runs and
    /// insensitive to comment or whitespace differences in the TOML source.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Resolve a config-relative path against the out directory when it is
    /// relative.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_all_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.detector.k_per_class, 200);
        assert_eq!(cfg.corrector.beta, 0.4);
        assert_eq!(cfg.detector.lr, 5e-4);
        assert_eq!(cfg.eval.n_eval, 200);
        cfg.validate().unwrap();
    }

    #[test]
    fn held_out_leakage_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.attacks.train_attacks = vec!["pwws".into(), "ga".into()];
        cfg.attacks.held_out = "ga".into();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn same_train_and_test_path_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.test = cfg.data.train.clone();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.corrector.beta = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn seed_fanout_is_label_dependent_and_stable() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.seed_for("victim-train"), cfg.seed_for("victim-train"));
        assert_ne!(cfg.seed_for("victim-train"), cfg.seed_for("detector-train"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<ExperimentConfig, _> = toml::from_str("mystery_knob = 3");
        assert!(r.is_err());
    }
}
