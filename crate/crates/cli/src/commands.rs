//! Command implementations. Every command is a function of the loaded
//! configuration, reads its inputs from the artifact directory, and is
//! idempotent for a fixed config and seed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use textshield_core::attack::{
    corpus_from_tsv, corpus_to_tsv, generate_adversarial_corpus, AttackContext, AttackKind,
};
use textshield_core::baseline::{
    fgws_evaluate, fgws_tune_gamma, wdr_featurize, FgwsConfig, WdrModel, WdrTrainConfig,
};
use textshield_core::corrector::{correct, select_suspects, DefensePipeline};
use textshield_core::detector::{
    assemble_detection_items, load_dataset, save_dataset, split_items, DetectionItem,
    DetectorEnsemble,
};
use textshield_core::rng::{derive_seed, Rng};
use textshield_core::saliency::{awi_all, AwiSet};
use textshield_core::text::{
    encode, load_dataset as load_tsv, tokenize, EmbeddingTable, FrequencyTable, SynonymLexicon,
    Vocabulary,
};
use textshield_core::victim::{Arch, VictimModel};
use textshield_core::Real;

use crate::config::ExperimentConfig;
use crate::report::{
    beta_csv, defense_csv, detection_csv, drop_csv, k_csv, read_json, write_json, BetaRow,
    DefenseRow, DetectionRow, DropRow, KRow,
};
use crate::{synth, CliError};

// Artifact paths under the output directory.
pub fn victim_ckpt(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("victim.ckpt")
}
pub fn vocab_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("vocab.tsv")
}
pub fn adv_train_corpus(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("adv/train_corpus.tsv")
}
pub fn adv_eval_corpus(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("adv/eval_corpus.tsv")
}
pub fn detector_ckpt(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("detector/ensemble.ckpt")
}
pub fn detector_dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("detector/dataset")
}
pub fn wdr_ckpt(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("detector/wdr.ckpt")
}
pub fn fgws_json(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("detector/fgws.json")
}
pub fn metrics_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("metrics")
}
pub fn report_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("report")
}

fn require(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(format!(
            "{} (run `{produced_by}` first)",
            path.display()
        )))
    }
}

/// Disk cache of AWI matrices for evaluation sentences, keyed by the joined
/// token string and fingerprinted by the victim checkpoint bytes. Several
/// commands evaluate the same sentences; attribution is the dominant cost.
pub struct AwiDiskCache {
    path: PathBuf,
    fingerprint: u64,
    map: HashMap<String, AwiSet>,
    dirty: bool,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl AwiDiskCache {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let fingerprint = fnv64(&fs::read(victim_ckpt(cfg))?);
        let path = cfg.out_dir.join("awi_cache.bin");
        let mut map = HashMap::new();
        if let Ok(bytes) = fs::read(&path) {
            if bytes.len() >= 8 && u64::from_le_bytes(bytes[..8].try_into().unwrap()) == fingerprint {
                let mut off = 8;
                while off + 4 <= bytes.len() {
                    let klen = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
                    off += 4;
                    let Some(key) = bytes.get(off..off + klen).and_then(|b| std::str::from_utf8(b).ok())
                    else {
                        break;
                    };
                    let key = key.to_string();
                    off += klen;
                    let mut mats = Vec::with_capacity(4);
                    let mut ok = true;
                    for _ in 0..4 {
                        match textshield_core::saliency::AwiMatrix::from_bytes(&bytes[off..]) {
                            Some((m, used)) => {
                                off += used;
                                mats.push(m);
                            }
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if !ok {
                        break;
                    }
                    let mut it = mats.into_iter();
                    let (vg, gbp, lrp, ig) =
                        (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                    map.insert(key, AwiSet { vg, gbp, lrp, ig });
                }
            }
        }
        Ok(AwiDiskCache { path, fingerprint, map, dirty: false })
    }

    /// AWI sets for the given token lists, computing and caching misses.
    pub fn get_batch(
        &mut self,
        loaded: &Loaded,
        saliency: &textshield_core::saliency::SaliencyConfig,
        sentences: &[Vec<String>],
    ) -> Vec<AwiSet> {
        let missing: Vec<&Vec<String>> = sentences
            .iter()
            .filter(|t| !self.map.contains_key(&t.join(" ")))
            .collect();
        if !missing.is_empty() {
            let computed: Vec<(String, AwiSet)> = missing
                .par_iter()
                .map(|tokens| {
                    let ex = encode(tokens, &loaded.vocab, 0);
                    let set = awi_all(&loaded.victim, &ex, saliency).expect("consistent shapes");
                    (tokens.join(" "), set)
                })
                .collect();
            for (k, v) in computed {
                self.map.insert(k, v);
            }
            self.dirty = true;
        }
        sentences
            .iter()
            .map(|t| self.map[&t.join(" ")].clone())
            .collect()
    }

    pub fn save(&mut self) -> Result<(), CliError> {
        if !self.dirty {
            return Ok(());
        }
        let mut out = Vec::new();
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        let mut keys: Vec<&String> = self.map.keys().collect();
        keys.sort();
        for key in keys {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            let set = &self.map[key];
            for m in [&set.vg, &set.gbp, &set.lrp, &set.ig] {
                m.to_bytes(&mut out);
            }
        }
        fs::write(&self.path, out)?;
        self.dirty = false;
        Ok(())
    }
}

/// Everything loaded from disk that the later pipeline stages share.
pub struct Loaded {
    pub vocab: Vocabulary,
    pub victim: VictimModel,
    pub lexicon: SynonymLexicon,
    pub embeddings: EmbeddingTable,
    pub freq: FrequencyTable,
    pub train: Vec<(usize, String)>,
    pub test: Vec<(usize, String)>,
}

impl Loaded {
    pub fn attack_ctx(&self) -> AttackContext<'_> {
        AttackContext {
            victim: &self.victim,
            vocab: &self.vocab,
            lexicon: &self.lexicon,
            embeddings: &self.embeddings,
        }
    }
}

fn load_data_files(
    cfg: &ExperimentConfig,
) -> Result<(Vec<(usize, String)>, Vec<(usize, String)>, SynonymLexicon), CliError> {
    let train_path = cfg.resolve(&cfg.data.train);
    let test_path = cfg.resolve(&cfg.data.test);
    let lexicon_path = cfg.resolve(&cfg.data.lexicon);
    require(&train_path, "gen-data")?;
    require(&test_path, "gen-data")?;
    require(&lexicon_path, "gen-data")?;
    let train = load_tsv(&train_path, cfg.data.n_classes)?;
    let test = load_tsv(&test_path, cfg.data.n_classes)?;
    let lexicon = SynonymLexicon::load(&lexicon_path)?;
    Ok((train, test, lexicon))
}

fn tokenized(texts: &[(usize, String)]) -> Vec<Vec<String>> {
    texts
        .iter()
        .filter_map(|(_, t)| tokenize(t).ok())
        .collect()
}

/// Load the trained victim plus every data structure derived from the
/// training split.
pub fn load_trained(cfg: &ExperimentConfig) -> Result<Loaded, CliError> {
    let (train, test, lexicon) = load_data_files(cfg)?;
    require(&victim_ckpt(cfg), "train-victim")?;
    require(&vocab_path(cfg), "train-victim")?;
    let vocab = Vocabulary::load(&vocab_path(cfg))?;
    let victim = VictimModel::load(&victim_ckpt(cfg))?;
    let embeddings_path = cfg.resolve(&cfg.data.embeddings);
    require(&embeddings_path, "gen-data")?;
    let embeddings = EmbeddingTable::load(&embeddings_path, &vocab, cfg.seed_for("embeddings"))?;
    let freq = FrequencyTable::build(&tokenized(&train));
    Ok(Loaded { vocab, victim, lexicon, embeddings, freq, train, test })
}

/// Write the synthetic corpus, lexicon, and embedding files.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    synth::generate(
        &cfg.resolve(&cfg.data.train),
        &cfg.resolve(&cfg.data.test),
        &cfg.resolve(&cfg.data.lexicon),
        &cfg.resolve(&cfg.data.embeddings),
        cfg.data.train_per_class,
        cfg.data.test_per_class,
        cfg.data.embed_dim,
        cfg.seed_for("gen-data"),
    )?;
    println!(
        "gen-data: wrote train/test/lexicon/embeddings under {}",
        cfg.resolve(&cfg.data.train).parent().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VictimMetrics {
    pub arch: String,
    pub train_accuracy: f64,
    pub clean_test_accuracy: f64,
    pub epoch_losses: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

/// Train the victim classifier and persist the checkpoint and vocabulary.
pub fn cmd_train_victim(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (train, test, _) = load_data_files(cfg)?;
    let train_tokens = tokenized(&train);
    let vocab = Vocabulary::build(&train_tokens);
    let embeddings_path = cfg.resolve(&cfg.data.embeddings);
    require(&embeddings_path, "gen-data")?;
    let table = EmbeddingTable::load(&embeddings_path, &vocab, cfg.seed_for("embeddings"))?;

    let arch = cfg.victim_arch()?;
    let mut victim = match arch {
        Arch::TextCnn => VictimModel::new_textcnn(
            vocab.len(),
            table.dim,
            cfg.data.n_classes,
            &cfg.victim.filter_widths,
            cfg.victim.filters,
            cfg.seed_for("victim-init"),
        ),
        Arch::Lstm => VictimModel::new_lstm(
            vocab.len(),
            table.dim,
            cfg.data.n_classes,
            cfg.victim.lstm_hidden,
            cfg.seed_for("victim-init"),
        ),
    };
    victim.set_embedding(&table);

    let encoded: Vec<_> = train
        .iter()
        .filter_map(|(l, t)| tokenize(t).ok().map(|toks| encode(&toks, &vocab, *l)))
        .collect();
    let losses = victim.train(&encoded, &cfg.victim_train_config())?;
    let train_accuracy = victim.accuracy(&encoded);
    let test_encoded: Vec<_> = test
        .iter()
        .filter_map(|(l, t)| tokenize(t).ok().map(|toks| encode(&toks, &vocab, *l)))
        .collect();
    let clean_test_accuracy = victim.accuracy(&test_encoded);

    fs::create_dir_all(&cfg.out_dir)?;
    victim.save(&victim_ckpt(cfg))?;
    vocab.save(&vocab_path(cfg))?;
    let metrics = VictimMetrics {
        arch: arch.tag().to_string(),
        train_accuracy,
        clean_test_accuracy,
        epoch_losses: losses,
        seed: cfg.master_seed,
        config_hash: cfg.hash(),
    };
    write_json(&metrics_dir(cfg).join("victim.json"), &metrics)?;
    println!(
        "train-victim: {} train_acc={train_accuracy:.3} clean_test_acc={clean_test_accuracy:.3}",
        arch.tag()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenAdvMetrics {
    pub train_corpus: textshield_core::attack::CorpusReport,
    pub eval_corpus: textshield_core::attack::CorpusReport,
    pub seed: u64,
    pub config_hash: String,
}

/// Generate the detector-training adversarial corpus (training attacks over
/// the training pool) and the evaluation corpus (held-out attack over the
/// test pool).
pub fn cmd_gen_adv(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let loaded = load_trained(cfg)?;
    let ctx = loaded.attack_ctx();
    let kinds = cfg.train_attack_kinds()?;
    let held_out = cfg.held_out_attack()?;
    let attack_cfg = cfg.attack_config();

    let (train_results, train_report) = generate_adversarial_corpus(
        &ctx,
        &loaded.train,
        &kinds,
        cfg.detector.k_per_class,
        cfg.data.n_classes,
        &attack_cfg,
        cfg.seed_for("gen-adv-train"),
    )?;
    let eval_quota = cfg.eval.n_eval.div_ceil(cfg.data.n_classes);
    let (eval_results, eval_report) = generate_adversarial_corpus(
        &ctx,
        &loaded.test,
        &[held_out],
        eval_quota,
        cfg.data.n_classes,
        &attack_cfg,
        cfg.seed_for("gen-adv-eval"),
    )?;

    fs::create_dir_all(cfg.out_dir.join("adv"))?;
    fs::write(adv_train_corpus(cfg), corpus_to_tsv(&train_results))?;
    fs::write(adv_eval_corpus(cfg), corpus_to_tsv(&eval_results))?;
    if train_report.shortfall || eval_report.shortfall {
        println!("gen-adv: warning: some (class, attack) cells fell short of quota");
        for (class, attack, achieved, target) in
            train_report.cells.iter().chain(&eval_report.cells)
        {
            if achieved < target {
                println!("  class {class} {attack}: {achieved}/{target}");
            }
        }
    }
    let metrics = GenAdvMetrics {
        train_corpus: train_report,
        eval_corpus: eval_report,
        seed: cfg.master_seed,
        config_hash: cfg.hash(),
    };
    write_json(&metrics_dir(cfg).join("gen_adv.json"), &metrics)?;
    println!(
        "gen-adv: {} training and {} evaluation adversarial sentences",
        train_results.len(),
        eval_results.len()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectorTrainMetrics {
    pub dev_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub wdr_dev_accuracy: Vec<f64>,
    pub fgws_gamma: f64,
    pub dataset_sizes: (usize, usize, usize),
    pub seed: u64,
    pub config_hash: String,
}

fn corpus_pairs(path: &Path) -> Result<Vec<(Vec<String>, Vec<String>, usize, AttackKind)>, CliError> {
    let body = fs::read_to_string(path)
        .map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(corpus_from_tsv(&body)
        .into_iter()
        .map(|(label, adv, orig, kind, _)| {
            let adv_tokens: Vec<String> = adv.split(' ').map(str::to_string).collect();
            let orig_tokens: Vec<String> = orig.split(' ').map(str::to_string).collect();
            (adv_tokens, orig_tokens, label, kind)
        })
        .collect())
}

/// Build the balanced detection dataset from the generated corpus, train the
/// saliency ensemble, the WDR head, and tune the FGWS threshold on the same
/// dev split.
pub fn cmd_train_detector(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let loaded = load_trained(cfg)?;
    require(&adv_train_corpus(cfg), "gen-adv")?;
    let pairs = corpus_pairs(&adv_train_corpus(cfg))?;
    let held_out = cfg.held_out_attack()?;
    if pairs.iter().any(|(_, _, _, kind)| *kind == held_out) {
        return Err(CliError::Config(format!(
            "held-out attack {held_out} found in the training corpus"
        )));
    }

    let saliency = cfg.saliency_config();
    let items = assemble_detection_items(
        &loaded.victim,
        &loaded.vocab,
        &saliency,
        &pairs,
        &HashMap::new(),
    );
    let dataset = split_items(items, cfg.seed_for("detector-data"));
    save_dataset(&detector_dataset_dir(cfg), &dataset)?;

    let mut ensemble = DetectorEnsemble::new(
        cfg.data.n_classes,
        cfg.matrix_view()?,
        cfg.combiner_input()?,
        cfg.detector.hidden,
        cfg.seed_for("detector-init"),
    );
    let record = ensemble.train(&dataset, &cfg.detector_train_config())?;
    ensemble.save(&detector_ckpt(cfg))?;

    let (wdr_train, wdr_dev, _) = wdr_featurize(&loaded.victim, &loaded.vocab, &dataset);
    let mut wdr = WdrModel::new();
    let wdr_curve = wdr.train(
        &wdr_train,
        &wdr_dev,
        &WdrTrainConfig {
            lr: cfg.detector.lr,
            batch_size: cfg.detector.batch_size,
            max_epochs: cfg.detector.max_epochs,
            patience: cfg.detector.patience,
            seed: cfg.seed_for("wdr-train"),
        },
    )?;
    wdr.save(&wdr_ckpt(cfg))?;

    let dev_sentences: Vec<(Vec<String>, bool)> = dataset
        .dev
        .iter()
        .map(|item| (item.tokens.clone(), item.label))
        .collect();
    let gamma = fgws_tune_gamma(
        &loaded.victim,
        &loaded.vocab,
        &loaded.lexicon,
        &loaded.freq,
        cfg.fgws.delta_percentile,
        &dev_sentences,
    );
    write_json(
        &fgws_json(cfg),
        &FgwsFile { delta_percentile: cfg.fgws.delta_percentile, gamma },
    )?;

    let metrics = DetectorTrainMetrics {
        dev_accuracy: record.dev_accuracy.clone(),
        best_epoch: record.best_epoch,
        wdr_dev_accuracy: wdr_curve,
        fgws_gamma: gamma,
        dataset_sizes: (dataset.train.len(), dataset.dev.len(), dataset.test.len()),
        seed: cfg.master_seed,
        config_hash: cfg.hash(),
    };
    write_json(&metrics_dir(cfg).join("detector_train.json"), &metrics)?;
    println!(
        "train-detector: dev accuracy {:?} (best epoch {}), fgws gamma {gamma:.4}",
        record.dev_accuracy, record.best_epoch
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FgwsFile {
    delta_percentile: f64,
    gamma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectionMetricsFile {
    pub rows: Vec<DetectionRow>,
}

fn evaluate_three_detectors(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    ensemble: &DetectorEnsemble,
    wdr: &WdrModel,
    fgws: &FgwsFile,
    items: &[DetectionItem],
    attack: &str,
    held_out: bool,
    rows: &mut Vec<DetectionRow>,
) -> Result<(), CliError> {
    let mut push = |detector: &str, m: textshield_core::metrics::DetectionMetrics| {
        rows.push(DetectionRow {
            dataset: cfg.data.name.clone(),
            attack: attack.to_string(),
            detector: detector.to_string(),
            f1: m.f1,
            recall: m.recall,
            precision: m.precision,
            accuracy: m.accuracy,
            held_out,
            seed: cfg.master_seed,
            config_hash: cfg.hash(),
        });
    };
    push("saliency", ensemble.evaluate(items)?);

    let feats: Vec<(Vec<Real>, bool)> = items
        .par_iter()
        .map(|item| {
            let ex = encode(&item.tokens, &loaded.vocab, 0);
            (textshield_core::baseline::wdr_features(&loaded.victim, &ex), item.label)
        })
        .collect();
    push("wdr", wdr.evaluate(&feats));

    let sentences: Vec<(Vec<String>, bool)> =
        items.iter().map(|i| (i.tokens.clone(), i.label)).collect();
    push(
        "fgws",
        fgws_evaluate(
            &loaded.victim,
            &loaded.vocab,
            &loaded.lexicon,
            &loaded.freq,
            &FgwsConfig { delta_percentile: fgws.delta_percentile, gamma: fgws.gamma },
            &sentences,
        ),
    );
    Ok(())
}

/// F1/recall per attack for the saliency detector and both baselines, on the
/// detection test split plus the held-out attack corpus.
pub fn cmd_eval_detection(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let loaded = load_trained(cfg)?;
    require(&detector_ckpt(cfg), "train-detector")?;
    let ensemble = DetectorEnsemble::load(&detector_ckpt(cfg))?;
    let wdr = WdrModel::load(&wdr_ckpt(cfg))?;
    let fgws: FgwsFile = read_json(&fgws_json(cfg))?;
    let dataset = load_dataset(&detector_dataset_dir(cfg))?;

    let mut rows: Vec<DetectionRow> = Vec::new();

    // Whole in-distribution test split.
    evaluate_three_detectors(
        cfg, &loaded, &ensemble, &wdr, &fgws, &dataset.test, "all", false, &mut rows,
    )?;

    // Per training attack: that attack's adversarial test items plus every
    // benign test item.
    for kind in cfg.train_attack_kinds()? {
        let items: Vec<DetectionItem> = dataset
            .test
            .iter()
            .filter(|i| i.attack == Some(kind) || !i.label)
            .cloned()
            .collect();
        if items.iter().any(|i| i.label) {
            evaluate_three_detectors(
                cfg, &loaded, &ensemble, &wdr, &fgws, &items, kind.tag(), false, &mut rows,
            )?;
        }
    }

    // Held-out attack: adversarial sentences from the evaluation corpus plus
    // fresh benign sentences from the test pool.
    require(&adv_eval_corpus(cfg), "gen-adv")?;
    let held_out = cfg.held_out_attack()?;
    let eval_pairs = corpus_pairs(&adv_eval_corpus(cfg))?;
    let mut sentences: Vec<(Vec<String>, bool, Option<AttackKind>)> = eval_pairs
        .iter()
        .take(cfg.eval.n_eval)
        .map(|(adv, _, _, kind)| (adv.clone(), true, Some(*kind)))
        .collect();
    let n_adv = sentences.len();
    for (_, text) in benign_eval_sample(cfg, &loaded, n_adv)? {
        sentences.push((tokenize(&text)?, false, None));
    }
    let mut cache = AwiDiskCache::open(cfg)?;
    let token_lists: Vec<Vec<String>> = sentences.iter().map(|(t, _, _)| t.clone()).collect();
    let sets = cache.get_batch(&loaded, &cfg.saliency_config(), &token_lists);
    cache.save()?;
    let items: Vec<DetectionItem> = sentences
        .iter()
        .zip(sets)
        .map(|((tokens, label, attack), awi)| DetectionItem {
            tokens: tokens.clone(),
            label: *label,
            attack: *attack,
            awi,
        })
        .collect();
    evaluate_three_detectors(
        cfg, &loaded, &ensemble, &wdr, &fgws, &items, held_out.tag(), true, &mut rows,
    )?;

    write_json(&metrics_dir(cfg).join("detection.json"), &DetectionMetricsFile { rows })?;
    println!("eval-detection: wrote metrics for {} configurations", 2 + cfg.attacks.train_attacks.len());
    Ok(())
}

/// Seeded benign sample from the test pool, disjoint from detector training
/// sentences by construction (train/test files are disjoint).
fn benign_eval_sample(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    n: usize,
) -> Result<Vec<(usize, String)>, CliError> {
    let mut order: Vec<usize> = (0..loaded.test.len()).collect();
    let mut rng = Rng::new(cfg.seed_for("benign-eval"));
    rng.shuffle(&mut order);
    Ok(order
        .into_iter()
        .take(n)
        .map(|i| loaded.test[i].clone())
        .collect())
}

/// Hash-audit that no evaluation sentence appears in the detector's train or
/// dev split.
fn audit_no_leakage(
    cfg: &ExperimentConfig,
    benign: &[(usize, String)],
    adversarial: &[(Vec<String>, Vec<String>, usize, AttackKind)],
) -> Result<(), CliError> {
    let manifest = detector_dataset_dir(cfg).join("manifest.tsv");
    if !manifest.exists() {
        return Ok(());
    }
    let body = fs::read_to_string(&manifest)?;
    let training: HashSet<&str> = body
        .lines()
        .filter_map(|l| {
            let fields: Vec<&str> = l.split('\t').collect();
            (fields.len() == 4 && fields[0] != "test").then(|| fields[3])
        })
        .collect();
    let check = |sentence: String, what: &str| -> Result<(), CliError> {
        if training.contains(sentence.as_str()) {
            return Err(CliError::Config(format!(
                "evaluation {what} sentence overlaps detector training data: {sentence:?}"
            )));
        }
        Ok(())
    };
    for (_, text) in benign {
        check(tokenize(text)?.join(" "), "benign")?;
    }
    for (adv, orig, _, _) in adversarial {
        check(adv.join(" "), "adversarial")?;
        check(orig.join(" "), "original")?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DefenseMetricsFile {
    pub rows: Vec<DefenseRow>,
}

/// Clean and adversarial accuracy with and without the defense. Detection
/// and correction run exactly as in [`DefensePipeline::defend`], with the
/// attribution matrices served from the disk cache.
pub fn cmd_eval_defense(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let loaded = load_trained(cfg)?;
    require(&detector_ckpt(cfg), "train-detector")?;
    require(&adv_eval_corpus(cfg), "gen-adv")?;
    let ensemble = DetectorEnsemble::load(&detector_ckpt(cfg))?;
    let held_out = cfg.held_out_attack()?;

    let benign = benign_eval_sample(cfg, &loaded, cfg.eval.n_eval)?;
    let adv_pairs: Vec<_> = corpus_pairs(&adv_eval_corpus(cfg))?
        .into_iter()
        .take(cfg.eval.n_eval)
        .collect();
    audit_no_leakage(cfg, &benign, &adv_pairs)?;

    let mut cache = AwiDiskCache::open(cfg)?;
    let benign_tok: Vec<(usize, Vec<String>)> = benign
        .iter()
        .map(|(l, t)| Ok((*l, tokenize(t)?)))
        .collect::<Result<_, CliError>>()?;
    let adv_tok: Vec<(usize, Vec<String>)> = adv_pairs
        .iter()
        .map(|(adv, _, label, _)| (*label, adv.clone()))
        .collect();
    let benign_states = eval_states(cfg, &loaded, &mut cache, &benign_tok);
    let adv_states = eval_states(cfg, &loaded, &mut cache, &adv_tok);
    cache.save()?;

    let beta = cfg.corrector.beta;
    let undefended = |states: &[EvalState]| -> f64 {
        let hits: usize = states.iter().map(|s| usize::from(s.victim_label == s.label)).sum();
        hits as f64 / states.len().max(1) as f64
    };
    let defended = |states: &[EvalState]| -> f64 {
        let hits: usize = states
            .par_iter()
            .map(|s| {
                let adv = ensemble.forward(&s.awi).expect("detector runs").adversarial;
                let final_label =
                    if adv { corrected_label(&loaded, s, beta) } else { s.victim_label };
                usize::from(final_label == s.label)
            })
            .sum();
        hits as f64 / states.len().max(1) as f64
    };

    let arch = cfg.victim_arch()?.tag().to_string();
    let rows = vec![
        DefenseRow {
            victim: arch.clone(),
            defense: "none".into(),
            attack: held_out.tag().into(),
            clean_accuracy: undefended(&benign_states),
            adversarial_accuracy: undefended(&adv_states),
            seed: cfg.master_seed,
            config_hash: cfg.hash(),
        },
        DefenseRow {
            victim: arch,
            defense: "textshield".into(),
            attack: held_out.tag().into(),
            clean_accuracy: defended(&benign_states),
            adversarial_accuracy: defended(&adv_states),
            seed: cfg.master_seed,
            config_hash: cfg.hash(),
        },
    ];
    for r in &rows {
        println!(
            "eval-defense: {} clean={:.3} adversarial={:.3}",
            r.defense, r.clean_accuracy, r.adversarial_accuracy
        );
    }
    write_json(&metrics_dir(cfg).join("defense.json"), &DefenseMetricsFile { rows })?;
    Ok(())
}

/// Shared precomputation for the ablations: victim prediction, detector
/// verdict, and the vanilla-gradient column for every evaluation sentence.
struct EvalState {
    tokens: Vec<String>,
    label: usize,
    victim_label: usize,
    vg_column: Vec<Real>,
    awi: AwiSet,
}

fn eval_states(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    cache: &mut AwiDiskCache,
    sentences: &[(usize, Vec<String>)],
) -> Vec<EvalState> {
    let saliency = cfg.saliency_config();
    let token_lists: Vec<Vec<String>> = sentences.iter().map(|(_, t)| t.clone()).collect();
    let sets = cache.get_batch(loaded, &saliency, &token_lists);
    sentences
        .par_iter()
        .zip(sets)
        .map(|((label, tokens), awi)| {
            let ex = encode(tokens, &loaded.vocab, *label);
            let (victim_label, _) = loaded.victim.predict(&ex);
            let vg_column: Vec<Real> = (0..ex.true_length)
                .map(|i| awi.vg.at(i, victim_label))
                .collect();
            EvalState { tokens: tokens.clone(), label: *label, victim_label, vg_column, awi }
        })
        .collect()
}

fn corrected_label(
    loaded: &Loaded,
    state: &EvalState,
    beta: f64,
) -> usize {
    let suspects = select_suspects(&state.vg_column, beta);
    let corrected = correct(&state.tokens, &suspects, &loaded.lexicon, &loaded.freq, &loaded.vocab);
    let ex = encode(&corrected, &loaded.vocab, state.label);
    loaded.victim.predict(&ex).0
}

fn load_eval_sets(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
) -> Result<(Vec<(usize, Vec<String>)>, Vec<(usize, Vec<String>)>), CliError> {
    let benign: Vec<(usize, Vec<String>)> = benign_eval_sample(cfg, loaded, cfg.eval.n_eval)?
        .into_iter()
        .map(|(l, t)| Ok((l, tokenize(&t)?)))
        .collect::<Result<_, CliError>>()?;
    require(&adv_eval_corpus(cfg), "gen-adv")?;
    let adversarial: Vec<(usize, Vec<String>)> = corpus_pairs(&adv_eval_corpus(cfg))?
        .into_iter()
        .take(cfg.eval.n_eval)
        .map(|(adv, _, label, _)| (label, adv))
        .collect();
    Ok((benign, adversarial))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BetaMetricsFile {
    pub rows: Vec<BetaRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KMetricsFile {
    pub rows: Vec<KRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DropMetricsFile {
    pub rows: Vec<DropRow>,
}

pub fn cmd_ablate_beta(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let loaded = load_trained(cfg)?;
    require(&detector_ckpt(cfg), "train-detector")?;
    let ensemble = DetectorEnsemble::load(&detector_ckpt(cfg))?;
    let (benign, adversarial) = load_eval_sets(cfg, &loaded)?;

    let mut cache = AwiDiskCache::open(cfg)?;
    let benign_states = eval_states(cfg, &loaded, &mut cache, &benign);
    let adv_states = eval_states(cfg, &loaded, &mut cache, &adversarial);
    cache.save()?;
    let verdict = |state: &EvalState| -> bool {
        ensemble.forward(&state.awi).expect("detector runs").adversarial
    };
    let benign_verdicts: Vec<bool> = benign_states.par_iter().map(verdict).collect();
    let adv_verdicts: Vec<bool> = adv_states.par_iter().map(verdict).collect();

    let mut rows = Vec::new();
    for step in 0..=10 {
        let beta = step as f64 / 10.0;
        let run = |states: &[EvalState], verdicts: &[bool]| -> f64 {
            let hits: usize = states
                .par_iter()
                .zip(verdicts.par_iter())
                .map(|(s, &adv)| {
                    let final_label = if adv { corrected_label(&loaded, s, beta) } else { s.victim_label };
                    usize::from(final_label == s.label)
                })
                .sum();
            hits as f64 / states.len().max(1) as f64
        };
        rows.push(BetaRow {
            beta,
            clean_accuracy: run(&benign_states, &benign_verdicts),
            adversarial_accuracy: run(&adv_states, &adv_verdicts),
            seed: cfg.master_seed,
            config_hash: cfg.hash(),
        });
    }
    write_json(&metrics_dir(cfg).join("ablation_beta.json"), &BetaMetricsFile { rows })?;
    println!("ablate beta_sweep: 11 points written");
    Ok(())
}

pub fn cmd_ablate_k(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let loaded = load_trained(cfg)?;
    require(&adv_train_corpus(cfg), "gen-adv")?;
    let pairs = corpus_pairs(&adv_train_corpus(cfg))?;
    let saliency = cfg.saliency_config();

    // Reuse cached AWI matrices from the full dataset when available.
    let mut dataset_awi: HashMap<String, AwiSet> = HashMap::new();
    if let Ok(full) = load_dataset(&detector_dataset_dir(cfg)) {
        for (_, item) in full.all_items() {
            dataset_awi.insert(item.tokens.join(" "), item.awi.clone());
        }
    }

    let (benign, adversarial) = load_eval_sets(cfg, &loaded)?;
    let mut cache = AwiDiskCache::open(cfg)?;
    let benign_states = eval_states(cfg, &loaded, &mut cache, &benign);
    let adv_states = eval_states(cfg, &loaded, &mut cache, &adversarial);
    cache.save()?;

    let kinds = cfg.train_attack_kinds()?;
    let mut rows = Vec::new();
    for &k in &cfg.ablate.k_grid {
        // First k/|attacks| pairs per (class, attack) cell, mirroring the
        // generation quotas.
        let base = k / kinds.len();
        let extra = k % kinds.len();
        let mut taken: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut subset = Vec::new();
        for pair in &pairs {
            let (class, kind) = (pair.2, pair.3);
            let Some(ai) = kinds.iter().position(|&x| x == kind) else {
                continue;
            };
            let target = base + usize::from(ai < extra);
            let cell = taken.entry((class, ai)).or_insert(0);
            if *cell < target {
                *cell += 1;
                subset.push(pair.clone());
            }
        }
        let items =
            assemble_detection_items(&loaded.victim, &loaded.vocab, &saliency, &subset, &dataset_awi);
        let dataset = split_items(items, derive_seed(cfg.seed_for("k-sweep"), &k.to_string()));
        let mut ensemble = DetectorEnsemble::new(
            cfg.data.n_classes,
            cfg.matrix_view()?,
            cfg.combiner_input()?,
            cfg.detector.hidden,
            derive_seed(cfg.seed_for("k-sweep-init"), &k.to_string()),
        );
        let mut train_cfg = cfg.detector_train_config();
        train_cfg.max_epochs = cfg.ablate.detector_epochs;
        ensemble.train(&dataset, &train_cfg)?;
        let test_f1 = ensemble.evaluate(&dataset.test)?.f1;

        let run = |states: &[EvalState]| -> f64 {
            let hits: usize = states
                .par_iter()
                .map(|s| {
                    let adv = ensemble.forward(&s.awi).expect("detector runs").adversarial;
                    let final_label = if adv {
                        corrected_label(&loaded, s, cfg.corrector.beta)
                    } else {
                        s.victim_label
                    };
                    usize::from(final_label == s.label)
                })
                .sum();
            hits as f64 / states.len().max(1) as f64
        };
        rows.push(KRow {
            k_per_class: k,
            detection_test_f1: test_f1,
            clean_accuracy: run(&benign_states),
            adversarial_accuracy: run(&adv_states),
            seed: cfg.master_seed,
            config_hash: cfg.hash(),
        });
        println!("ablate k_sweep: K={k} test_f1={test_f1:.3}");
    }
    write_json(&metrics_dir(cfg).join("ablation_k.json"), &KMetricsFile { rows })?;
    Ok(())
}

pub const DROP_MASKS: [(&str, [bool; 4]); 5] = [
    ("full", [true, true, true, true]),
    ("-vg", [false, true, true, true]),
    ("-gbp", [true, false, true, true]),
    ("-lrp", [true, true, false, true]),
    ("-ig", [true, true, true, false]),
];

pub fn cmd_ablate_drop(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let loaded = load_trained(cfg)?;
    require(&detector_ckpt(cfg), "train-detector")?;
    let trained = DetectorEnsemble::load(&detector_ckpt(cfg))?;
    let dataset = load_dataset(&detector_dataset_dir(cfg))?;
    let (benign, adversarial) = load_eval_sets(cfg, &loaded)?;
    let mut cache = AwiDiskCache::open(cfg)?;
    let benign_states = eval_states(cfg, &loaded, &mut cache, &benign);
    let adv_states = eval_states(cfg, &loaded, &mut cache, &adversarial);
    cache.save()?;

    // Dev F1 per mask, averaged over freshly trained ensembles at the
    // ablation seeds; defense accuracy from the main trained ensemble.
    let mut dev_f1: BTreeMap<&str, f64> = BTreeMap::new();
    for &seed in &cfg.ablate.seeds {
        let mut ens = DetectorEnsemble::new(
            cfg.data.n_classes,
            cfg.matrix_view()?,
            cfg.combiner_input()?,
            cfg.detector.hidden,
            derive_seed(cfg.seed_for("drop-init"), &seed.to_string()),
        );
        let mut train_cfg = cfg.detector_train_config();
        train_cfg.max_epochs = cfg.ablate.detector_epochs;
        train_cfg.seed = derive_seed(cfg.seed_for("drop-train"), &seed.to_string());
        ens.train(&dataset, &train_cfg)?;
        for (name, mask) in DROP_MASKS {
            let masked = ens.with_mask(mask);
            *dev_f1.entry(name).or_insert(0.0) += masked.evaluate(&dataset.dev)?.f1;
        }
    }
    let n_seeds = cfg.ablate.seeds.len().max(1) as f64;

    let mut rows = Vec::new();
    let defended = |ens: &DetectorEnsemble, states: &[EvalState]| -> f64 {
        let hits: usize = states
            .par_iter()
            .map(|s| {
                let adv = ens.forward(&s.awi).expect("detector runs").adversarial;
                let final_label = if adv {
                    corrected_label(&loaded, s, cfg.corrector.beta)
                } else {
                    s.victim_label
                };
                usize::from(final_label == s.label)
            })
            .sum();
        hits as f64 / states.len().max(1) as f64
    };
    for (name, mask) in DROP_MASKS {
        let masked = trained.with_mask(mask);
        rows.push(DropRow {
            mask: name.to_string(),
            dev_f1: dev_f1[name] / n_seeds,
            clean_accuracy: defended(&masked, &benign_states),
            adversarial_accuracy: defended(&masked, &adv_states),
            seed: cfg.master_seed,
            config_hash: cfg.hash(),
        });
    }
    // Removing everything routes inputs straight to the victim.
    let undefended = |states: &[EvalState]| -> f64 {
        let hits: usize = states
            .iter()
            .map(|s| usize::from(s.victim_label == s.label))
            .sum();
        hits as f64 / states.len().max(1) as f64
    };
    rows.push(DropRow {
        mask: "-all".to_string(),
        dev_f1: 0.0,
        clean_accuracy: undefended(&benign_states),
        adversarial_accuracy: undefended(&adv_states),
        seed: cfg.master_seed,
        config_hash: cfg.hash(),
    });

    write_json(&metrics_dir(cfg).join("ablation_drop.json"), &DropMetricsFile { rows })?;
    println!("ablate drop_subdetector: 6 masks written");
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Bundle {
    pub config_hash: String,
    pub master_seed: u64,
    pub victim: Option<VictimMetrics>,
    pub defense_rows: Vec<DefenseRow>,
    pub detection_rows: Vec<DetectionRow>,
    pub beta_rows: Vec<BetaRow>,
    pub k_rows: Vec<KRow>,
    pub drop_rows: Vec<DropRow>,
}

/// Collect metric rows into CSV tables plus a JSON bundle.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let m = metrics_dir(cfg);
    let victim: Option<VictimMetrics> = read_json(&m.join("victim.json")).ok();
    let mut defense_rows: Vec<DefenseRow> = read_json::<DefenseMetricsFile>(&m.join("defense.json"))
        .map(|f| f.rows)
        .unwrap_or_default();
    let mut detection_rows: Vec<DetectionRow> =
        read_json::<DetectionMetricsFile>(&m.join("detection.json"))
            .map(|f| f.rows)
            .unwrap_or_default();
    let mut beta_rows: Vec<BetaRow> = read_json::<BetaMetricsFile>(&m.join("ablation_beta.json"))
        .map(|f| f.rows)
        .unwrap_or_default();
    let mut k_rows: Vec<KRow> = read_json::<KMetricsFile>(&m.join("ablation_k.json"))
        .map(|f| f.rows)
        .unwrap_or_default();
    let mut drop_rows: Vec<DropRow> = read_json::<DropMetricsFile>(&m.join("ablation_drop.json"))
        .map(|f| f.rows)
        .unwrap_or_default();

    if defense_rows.is_empty()
        && detection_rows.is_empty()
        && beta_rows.is_empty()
        && k_rows.is_empty()
        && drop_rows.is_empty()
    {
        return Err(CliError::MissingArtifact(
            "no metric rows found; run the eval commands first".into(),
        ));
    }

    let dir = report_dir(cfg);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("defense_table.csv"), defense_csv(&mut defense_rows))?;
    fs::write(dir.join("detection_table.csv"), detection_csv(&mut detection_rows))?;
    fs::write(dir.join("ablation_beta.csv"), beta_csv(&mut beta_rows))?;
    fs::write(dir.join("ablation_k.csv"), k_csv(&mut k_rows))?;
    fs::write(dir.join("ablation_drop.csv"), drop_csv(&mut drop_rows))?;
    let bundle = Bundle {
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        victim,
        defense_rows,
        detection_rows,
        beta_rows,
        k_rows,
        drop_rows,
    };
    write_json(&dir.join("bundle.json"), &bundle)?;
    println!("report: wrote CSV tables and bundle.json under {}", dir.display());
    Ok(())
}

/// Run the defended classifier on one sentence and print the audit record.
pub fn cmd_defend_one(cfg: &ExperimentConfig, text: &str) -> Result<(), CliError> {
    let loaded = load_trained(cfg)?;
    require(&detector_ckpt(cfg), "train-detector")?;
    let ensemble = DetectorEnsemble::load(&detector_ckpt(cfg))?;
    let pipeline = DefensePipeline {
        victim: &loaded.victim,
        detector: Some(&ensemble),
        vocab: &loaded.vocab,
        lexicon: &loaded.lexicon,
        freq: &loaded.freq,
        saliency: cfg.saliency_config(),
        corrector: cfg.corrector_config()?,
    };
    let outcome = pipeline.defend(text)?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

/// Within-distribution detection metrics evaluated straight from the stored
/// dataset, used by tests to confirm report plumbing is an identity.
pub fn detection_test_metrics(
    cfg: &ExperimentConfig,
) -> Result<textshield_core::metrics::DetectionMetrics, CliError> {
    let ensemble = DetectorEnsemble::load(&detector_ckpt(cfg))?;
    let dataset = load_dataset(&detector_dataset_dir(cfg))?;
    Ok(ensemble.evaluate(&dataset.test)?)
}

/// One full pipeline pass: data, victim, adversarial corpora, detector,
/// evaluations, ablations, report. Used by the determinism checks.
pub fn run_full_pipeline(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cmd_gen_data(cfg)?;
    cmd_train_victim(cfg)?;
    cmd_gen_adv(cfg)?;
    cmd_train_detector(cfg)?;
    cmd_eval_detection(cfg)?;
    cmd_eval_defense(cfg)?;
    cmd_ablate_beta(cfg)?;
    cmd_ablate_drop(cfg)?;
    cmd_report(cfg)?;
    Ok(())
}
