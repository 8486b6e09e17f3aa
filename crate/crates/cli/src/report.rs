//! Metric rows and report emission.
//!
//! Commands write JSON row files under `<out>/metrics/`; `report` collects
//! them into two CSV tables (defense accuracy and detection quality), one
//! CSV per ablation, and a JSON bundle. Emission is byte-deterministic:
//! rows are sorted and floats are printed with fixed precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Defense-accuracy row: one (defense, attack) cell.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DefenseRow {
    pub victim: String,
    pub defense: String,
    pub attack: String,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Detection-quality row: one (attack, detector) cell.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionRow {
    pub dataset: String,
    pub attack: String,
    pub detector: String,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    /// True when the attack was excluded from detector training.
    pub held_out: bool,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BetaRow {
    pub beta: f64,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KRow {
    pub k_per_class: usize,
    pub detection_test_f1: f64,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DropRow {
    pub mask: String,
    /// Dev F1 averaged over the ablation seeds (retrained ensembles).
    pub dev_f1: f64,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let body = serde_json::to_string_pretty(value)?;
    fs::write(path, body + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let body = fs::read_to_string(path)
        .map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&body)?)
}

pub fn defense_csv(rows: &mut Vec<DefenseRow>) -> String {
    rows.sort_by(|a, b| {
        (&a.victim, &a.defense, &a.attack, a.seed).cmp(&(&b.victim, &b.defense, &b.attack, b.seed))
    });
    let mut out = String::from("victim,defense,attack,clean_accuracy,adversarial_accuracy,seed,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.victim,
            r.defense,
            r.attack,
            fmt4(r.clean_accuracy),
            fmt4(r.adversarial_accuracy),
            r.seed,
            r.config_hash
        ));
    }
    out
}

pub fn detection_csv(rows: &mut Vec<DetectionRow>) -> String {
    rows.sort_by(|a, b| {
        (&a.dataset, &a.attack, &a.detector, a.seed).cmp(&(&b.dataset, &b.attack, &b.detector, b.seed))
    });
    let mut out = String::from("dataset,attack,detector,f1,recall,precision,accuracy,held_out,seed,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.dataset,
            r.attack,
            r.detector,
            fmt4(r.f1),
            fmt4(r.recall),
            fmt4(r.precision),
            fmt4(r.accuracy),
            r.held_out,
            r.seed,
            r.config_hash
        ));
    }
    out
}

pub fn beta_csv(rows: &mut Vec<BetaRow>) -> String {
    rows.sort_by(|a, b| a.beta.partial_cmp(&b.beta).unwrap().then(a.seed.cmp(&b.seed)));
    let mut out = String::from("beta,clean_accuracy,adversarial_accuracy,seed,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt4(r.beta),
            fmt4(r.clean_accuracy),
            fmt4(r.adversarial_accuracy),
            r.seed,
            r.config_hash
        ));
    }
    out
}

pub fn k_csv(rows: &mut Vec<KRow>) -> String {
    rows.sort_by(|a, b| a.k_per_class.cmp(&b.k_per_class).then(a.seed.cmp(&b.seed)));
    let mut out =
        String::from("k_per_class,detection_test_f1,clean_accuracy,adversarial_accuracy,seed,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k_per_class,
            fmt4(r.detection_test_f1),
            fmt4(r.clean_accuracy),
            fmt4(r.adversarial_accuracy),
            r.seed,
            r.config_hash
        ));
    }
    out
}

pub fn drop_csv(rows: &mut Vec<DropRow>) -> String {
    rows.sort_by(|a, b| (&a.mask, a.seed).cmp(&(&b.mask, b.seed)));
    let mut out = String::from("mask,dev_f1,clean_accuracy,adversarial_accuracy,seed,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mask,
            fmt4(r.dev_f1),
            fmt4(r.clean_accuracy),
            fmt4(r.adversarial_accuracy),
            r.seed,
            r.config_hash
        ));
    }
    out
}
