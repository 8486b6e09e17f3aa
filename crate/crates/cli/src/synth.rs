//! Deterministic synthetic sentiment corpus.
//!
//! The generator writes the four data files the pipeline consumes: a train
//! and test split of labeled sentences, a synonym lexicon with POS tags, and
//! an embedding file in which synonym-cluster members share a direction.
//!
//! Each synonym cluster has two common members (sampled often) and two rare
//! members (sampled very rarely but guaranteed at least one training
//! occurrence, so they stay in vocabulary with low counts). Word-level
//! attacks flip sentences by swapping common class words for their barely
//! trained rare synonyms; frequency-driven correction maps them back.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use textshield_core::rng::{derive_seed, Rng};

use crate::CliError;

const POS_ADJ: &[[&str; 4]] = &[
    ["good", "great", "superb", "peachy"],
    ["happy", "glad", "joyful", "blithe"],
    ["lovely", "charming", "winsome", "comely"],
    ["smart", "clever", "astute", "canny"],
    ["calm", "peaceful", "serene", "placid"],
    ["strong", "sturdy", "stalwart", "burly"],
    ["fresh", "clean", "pristine", "spotless"],
    ["warm", "cozy", "snug", "toasty"],
    ["brave", "bold", "valiant", "plucky"],
    ["vivid", "bright", "radiant", "lustrous"],
    ["funny", "witty", "droll", "jocular"],
    ["kind", "gentle", "benign", "genial"],
];

const NEG_ADJ: &[[&str; 4]] = &[
    ["bad", "awful", "dire", "abysmal"],
    ["sad", "gloomy", "morose", "doleful"],
    ["ugly", "hideous", "ghastly", "unsightly"],
    ["dull", "boring", "tedious", "vapid"],
    ["angry", "furious", "irate", "livid"],
    ["weak", "frail", "feeble", "flimsy"],
    ["stale", "rotten", "rancid", "fetid"],
    ["cold", "chilly", "frigid", "gelid"],
    ["scared", "fearful", "timid", "craven"],
    ["poor", "shabby", "shoddy", "tawdry"],
    ["slow", "sluggish", "plodding", "torpid"],
    ["cruel", "harsh", "brutal", "savage"],
];

const NEUTRAL_NOUN: &[[&str; 4]] = &[
    ["movie", "film", "picture", "flick"],
    ["story", "tale", "narrative", "yarn"],
    ["actor", "performer", "player", "thespian"],
    ["scene", "shot", "sequence", "vignette"],
    ["music", "score", "soundtrack", "melody"],
    ["plot", "storyline", "premise", "scheme"],
    ["ending", "finale", "conclusion", "coda"],
    ["character", "figure", "persona", "archetype"],
];

const NEUTRAL_VERB: &[[&str; 4]] = &[
    ["watch", "view", "observe", "behold"],
    ["show", "display", "present", "exhibit"],
    ["make", "create", "craft", "forge"],
    ["tell", "narrate", "recount", "relate"],
];

const NEUTRAL_ADV: &[[&str; 4]] = &[
    ["very", "quite", "rather", "awfully"],
    ["often", "frequently", "regularly", "routinely"],
    ["today", "now", "currently", "presently"],
    ["here", "there", "nearby", "yonder"],
];

/// Probability that a class-word slot picks a rare cluster member.
const RARE_RATE: f64 = 0.03;
/// Probability of injecting one word of the opposite class.
const OFF_CLASS_RATE: f64 = 0.25;

struct Cluster {
    words: &'static [&'static str; 4],
    pos: &'static str,
}

fn clusters() -> (Vec<Cluster>, Vec<Cluster>, Vec<Cluster>) {
    let pos: Vec<Cluster> = POS_ADJ.iter().map(|w| Cluster { words: w, pos: "adj" }).collect();
    let neg: Vec<Cluster> = NEG_ADJ.iter().map(|w| Cluster { words: w, pos: "adj" }).collect();
    let mut neutral: Vec<Cluster> =
        NEUTRAL_NOUN.iter().map(|w| Cluster { words: w, pos: "noun" }).collect();
    neutral.extend(NEUTRAL_VERB.iter().map(|w| Cluster { words: w, pos: "verb" }));
    neutral.extend(NEUTRAL_ADV.iter().map(|w| Cluster { words: w, pos: "adv" }));
    (pos, neg, neutral)
}

fn pick_word<'c>(rng: &mut Rng, cluster: &'c Cluster) -> &'static str {
    // Members 0 and 1 are common, 2 and 3 rare.
    if rng.chance(RARE_RATE) {
        cluster.words[2 + rng.below(2)]
    } else {
        cluster.words[rng.below(2)]
    }
}

fn sentence(rng: &mut Rng, label: usize, pos: &[Cluster], neg: &[Cluster], neutral: &[Cluster]) -> String {
    let (own, other) = if label == 1 { (pos, neg) } else { (neg, pos) };
    let mut words: Vec<&'static str> = Vec::new();
    // One or two class words: little enough redundancy that a word-level
    // attack within its budget can strip the label signal. A sentence that
    // carries an off-class word always gets two own-class words, so labels
    // stay unambiguous.
    let off_class = rng.chance(OFF_CLASS_RATE);
    let n_class = if off_class { 2 } else { 1 + rng.below(2) };
    for _ in 0..n_class {
        let cluster = &own[rng.below(own.len())];
        words.push(pick_word(rng, cluster));
    }
    if off_class {
        let cluster = &other[rng.below(other.len())];
        words.push(cluster.words[rng.below(2)]);
    }
    let n_neutral = 4 + rng.below(3);
    for _ in 0..n_neutral {
        let cluster = &neutral[rng.below(neutral.len())];
        words.push(pick_word(rng, cluster));
    }
    rng.shuffle(&mut words);
    words.join(" ")
}

/// Write train.tsv, test.tsv, lexicon.tsv, and embeddings.txt.
pub fn generate(
    train_path: &Path,
    test_path: &Path,
    lexicon_path: &Path,
    embeddings_path: &Path,
    train_per_class: usize,
    test_per_class: usize,
    embed_dim: usize,
    seed: u64,
) -> Result<(), CliError> {
    let (pos, neg, neutral) = clusters();
    let all: Vec<&Cluster> = pos.iter().chain(&neg).chain(&neutral).collect();

    // Training sentences.
    let mut rng = Rng::new(derive_seed(seed, "synth-train"));
    let mut train: Vec<(usize, String)> = Vec::new();
    for label in 0..2 {
        for _ in 0..train_per_class {
            train.push((label, sentence(&mut rng, label, &pos, &neg, &neutral)));
        }
    }

    // Coverage: every lexicon word must appear in training at least once so
    // it stays in vocabulary. Rare words get a couple of natural sentences.
    let mut seen: HashSet<String> = HashSet::new();
    for (_, s) in &train {
        seen.extend(s.split(' ').map(str::to_string));
    }
    let mut cov_rng = Rng::new(derive_seed(seed, "synth-coverage"));
    for cluster in &all {
        for &w in cluster.words.iter() {
            if seen.contains(w) {
                continue;
            }

            let label = if POS_ADJ.iter().any(|c| c.contains(&w)) {
                1
            } else if NEG_ADJ.iter().any(|c| c.contains(&w)) {
                0
            } else {
                cov_rng.below(2)
            };
            let mut s = sentence(&mut cov_rng, label, &pos, &neg, &neutral);
            s.push(' ');
            s.push_str(w);
            seen.insert(w.to_string());
            train.push((label, s));
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    cov_rng.shuffle(&mut order);
    let train: Vec<(usize, String)> = order.into_iter().map(|i| train[i].clone()).collect();

    // Test sentences, resampled until distinct from every training sentence.
    let train_set: HashSet<&str> = train.iter().map(|(_, s)| s.as_str()).collect();
    let mut test_rng = Rng::new(derive_seed(seed, "synth-test"));
    let mut test: Vec<(usize, String)> = Vec::new();
    let mut test_seen: HashSet<String> = HashSet::new();
    for label in 0..2 {
        let mut produced = 0;
        while produced < test_per_class {
            let s = sentence(&mut test_rng, label, &pos, &neg, &neutral);
            if train_set.contains(s.as_str()) || test_seen.contains(&s) {
                continue;
            }
            test_seen.insert(s.clone());
            test.push((label, s));
            produced += 1;
        }
    }

    // Lexicon: every cluster member lists the rest of its cluster.
    let mut lexicon = String::new();
    for cluster in &all {
        for &w in cluster.words.iter() {
            let syns: Vec<String> = cluster
                .words
                .iter()
                .filter(|&&o| o != w)
                .map(|o| format!("{o}:{}", cluster.pos))
                .collect();
            lexicon.push_str(&format!("{w}\t{}\n", syns.join(",")));
        }
    }

    // Embeddings: one direction per cluster. Common members sit close to the
    // cluster base; rare members keep a 0.6 share of it plus heavy jitter,
    // leaving their cosine to the commons around 0.6: similar enough to pass
    // an embedding-similarity attack filter, noisy enough that a model
    // trained on the commons reacts weakly to them.
    let mut emb_rng = Rng::new(derive_seed(seed, "synth-emb"));
    let mut embeddings = String::new();
    for cluster in &all {
        let base: Vec<f64> = (0..embed_dim).map(|_| emb_rng.range(-0.5, 0.5)).collect();
        for (mi, &w) in cluster.words.iter().enumerate() {
            let (keep, jitter) = if mi < 2 { (1.0, 0.05) } else { (0.6, 0.4) };
            let row: Vec<String> = base
                .iter()
                .map(|b| format!("{:.6}", keep * b + emb_rng.range(-jitter, jitter)))
                .collect();
            embeddings.push_str(&format!("{w} {}\n", row.join(" ")));
        }
    }

    let write = |path: &Path, body: String| -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Other(format!("create {}: {e}", parent.display())))?;
        }
        fs::write(path, body).map_err(|e| CliError::Other(format!("write {}: {e}", path.display())))
    };
    let tsv = |rows: &[(usize, String)]| -> String {
        rows.iter().map(|(l, s)| format!("{l}\t{s}\n")).collect()
    };
    write(train_path, tsv(&train))?;
    write(test_path, tsv(&test))?;
    write(lexicon_path, lexicon)?;
    write(embeddings_path, embeddings)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        generate(&p("tr.tsv"), &p("te.tsv"), &p("lex.tsv"), &p("emb.txt"), 40, 20, 8, 7).unwrap();
        let tr1 = fs::read_to_string(p("tr.tsv")).unwrap();
        let te1 = fs::read_to_string(p("te.tsv")).unwrap();
        generate(&p("tr.tsv"), &p("te.tsv"), &p("lex.tsv"), &p("emb.txt"), 40, 20, 8, 7).unwrap();
        assert_eq!(tr1, fs::read_to_string(p("tr.tsv")).unwrap());
        assert_eq!(te1, fs::read_to_string(p("te.tsv")).unwrap());

        let train_sentences: HashSet<&str> =
            tr1.lines().map(|l| l.split_once('\t').unwrap().1).collect();
        for line in te1.lines() {
            let s = line.split_once('\t').unwrap().1;
            assert!(!train_sentences.contains(s), "test sentence leaked into train");
        }
    }

    #[test]
    fn every_lexicon_word_occurs_in_training() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        generate(&p("tr.tsv"), &p("te.tsv"), &p("lex.tsv"), &p("emb.txt"), 50, 10, 8, 3).unwrap();
        let train = fs::read_to_string(p("tr.tsv")).unwrap();
        let mut seen: HashSet<&str> = HashSet::new();
        for line in train.lines() {
            seen.extend(line.split_once('\t').unwrap().1.split(' '));
        }
        let lexicon = fs::read_to_string(p("lex.tsv")).unwrap();
        for line in lexicon.lines() {
            let head = line.split_once('\t').unwrap().0;
            assert!(seen.contains(head), "{head} missing from training data");
        }
    }

    #[test]
    fn cluster_members_are_cosine_similar_in_the_embedding_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        generate(&p("tr.tsv"), &p("te.tsv"), &p("lex.tsv"), &p("emb.txt"), 30, 10, 8, 3).unwrap();
        let emb = fs::read_to_string(p("emb.txt")).unwrap();
        let mut rows = std::collections::HashMap::new();
        for line in emb.lines() {
            let mut parts = line.split(' ');
            let w = parts.next().unwrap().to_string();
            let v: Vec<f64> = parts.map(|x| x.parse().unwrap()).collect();
            rows.insert(w, v);
        }
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        assert!(cos(&rows["good"], &rows["peachy"]) > 0.5);
        assert!(cos(&rows["bad"], &rows["abysmal"]) > 0.5);
    }
}
