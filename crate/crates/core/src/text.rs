//! Corpus ingestion: tokenizer, vocabulary, embeddings, synonym lexicon,
//! word frequencies, and dataset loading.
//!
//! File formats:
//! * dataset: UTF-8 TSV, one `label<TAB>text` record per line, 0-based labels;
//! * embeddings: one `token v1 v2 ... vk` line per token;
//! * lexicon: one `headword<TAB>synonym:pos,synonym:pos,...` line per
//!   headword, the `:pos` suffix optional and defaulting to `other`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;
use crate::{Real, Tensor};

/// Padded sequence length shared by every model in the pipeline.
pub const MAX_LEN: usize = 128;

/// Reserved id for padding.
pub const PAD: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty sentence")]
    EmptySentence,
    #[error("{path}:{line}: {detail}")]
    Malformed { path: String, line: usize, detail: String },
    #[error("{path}:{line}: label {label} out of range for {classes} classes")]
    BadLabel { path: String, line: usize, label: i64, classes: usize },
    #[error("embedding dimension mismatch at {path}:{line}: expected {expect}, got {got}")]
    DimMismatch { path: String, line: usize, expect: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Lowercase and split on anything that is not alphanumeric; punctuation is
/// dropped. Deterministic by construction.
pub fn tokenize(text: &str) -> Result<Vec<String>, DataError> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    if tokens.is_empty() {
        return Err(DataError::EmptySentence);
    }
    Ok(tokens)
}

/// Token/id bijection with per-token training-split counts.
/// Ids 0 and 1 are reserved for padding and unknown tokens.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Build from tokenized training texts. Tokens are ordered by descending
    /// count (ties alphabetically) so ids are stable across runs.
    pub fn build(texts: &[Vec<String>]) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for toks in texts {
            for t in toks {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut order: Vec<(&str, u64)> = counts.into_iter().collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: vec!["<pad>".to_string(), "<unk>".to_string()],
            counts: vec![0, 0],
        };
        vocab.token_to_id.insert("<pad>".into(), PAD);
        vocab.token_to_id.insert("<unk>".into(), UNK);
        for (tok, n) in order {
            let id = vocab.id_to_token.len() as u32;
            vocab.token_to_id.insert(tok.to_string(), id);
            vocab.id_to_token.push(tok.to_string());
            vocab.counts.push(n);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    /// Serialize as `token<TAB>count` lines in id order.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for (tok, n) in self.id_to_token.iter().zip(&self.counts) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&n.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let body = read(path)?;
        let mut id_to_token = Vec::new();
        let mut counts = Vec::new();
        let mut token_to_id = HashMap::new();
        for (i, line) in body.lines().enumerate() {
            let (tok, n) = line.split_once('\t').ok_or_else(|| DataError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                detail: "expected token<TAB>count".into(),
            })?;
            let n: u64 = n.parse().map_err(|_| DataError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                detail: format!("bad count {n:?}"),
            })?;
            token_to_id.insert(tok.to_string(), id_to_token.len() as u32);
            id_to_token.push(tok.to_string());
            counts.push(n);
        }
        if id_to_token.len() < 2 || id_to_token[0] != "<pad>" || id_to_token[1] != "<unk>" {
            return Err(DataError::Malformed {
                path: path.display().to_string(),
                line: 1,
                detail: "vocabulary must start with <pad> and <unk>".into(),
            });
        }
        Ok(Vocabulary { token_to_id, id_to_token, counts })
    }
}

/// Fixed-length encoded sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    pub true_length: usize,
    pub label: usize,
}

/// Encode tokens: unknowns map to UNK, the sequence is truncated to
/// [`MAX_LEN`] and right-padded with PAD.
pub fn encode(tokens: &[String], vocab: &Vocabulary, label: usize) -> EncodedExample {
    debug_assert!(!tokens.is_empty());
    let true_length = tokens.len().min(MAX_LEN);
    let mut ids = Vec::with_capacity(MAX_LEN);
    for t in tokens.iter().take(true_length) {
        ids.push(vocab.id(t).unwrap_or(UNK));
    }
    ids.resize(MAX_LEN, PAD);
    EncodedExample { ids, true_length, label }
}

/// Parse a `label<TAB>text` dataset.
pub fn load_dataset(path: &Path, n_classes: usize) -> Result<Vec<(usize, String)>, DataError> {
    let body = read(path)?;
    let mut records = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (label, text) = line.split_once('\t').ok_or_else(|| DataError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            detail: "expected label<TAB>text".into(),
        })?;
        let label: i64 = label.parse().map_err(|_| DataError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            detail: format!("bad label {label:?}"),
        })?;
        if label < 0 || label as usize >= n_classes {
            return Err(DataError::BadLabel {
                path: path.display().to_string(),
                line: i + 1,
                label,
                classes: n_classes,
            });
        }
        records.push((label as usize, text.to_string()));
    }
    Ok(records)
}

/// Dense `|V| x k` embedding matrix. The PAD row is always zero.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    values: Vec<Real>,
}

impl EmbeddingTable {
    /// Load vectors for in-vocabulary tokens; tokens missing from the file
    /// get a seeded uniform(-0.1, 0.1) row. The PAD row is forced to zero.
    pub fn load(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<Self, DataError> {
        let body = read(path)?;
        let mut dim: Option<usize> = None;
        let mut file_rows: HashMap<u32, Vec<Real>> = HashMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().ok_or_else(|| DataError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                detail: "empty line".into(),
            })?;
            let vec: Result<Vec<Real>, _> = parts.map(str::parse::<Real>).collect();
            let vec = vec.map_err(|_| DataError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                detail: "bad number".into(),
            })?;
            match dim {
                None => dim = Some(vec.len()),
                Some(expect) if expect != vec.len() => {
                    return Err(DataError::DimMismatch {
                        path: path.display().to_string(),
                        line: i + 1,
                        expect,
                        got: vec.len(),
                    })
                }
                _ => {}
            }
            if let Some(id) = vocab.id(token) {
                file_rows.insert(id, vec);
            }
        }
        let dim = dim.unwrap_or(0);
        if dim == 0 {
            return Err(DataError::Malformed {
                path: path.display().to_string(),
                line: 1,
                detail: "no embedding vectors".into(),
            });
        }
        Ok(Self::assemble(dim, vocab, file_rows, seed))
    }

    /// Fully random table for tests and file-less runs.
    pub fn random(dim: usize, vocab: &Vocabulary, seed: u64) -> Self {
        Self::assemble(dim, vocab, HashMap::new(), seed)
    }

    fn assemble(dim: usize, vocab: &Vocabulary, file_rows: HashMap<u32, Vec<Real>>, seed: u64) -> Self {
        let v = vocab.len();
        let mut values = vec![0.0; v * dim];
        for id in 0..v as u32 {
            if id == PAD {
                continue; // stays zero
            }
            match file_rows.get(&id) {
                Some(row) => values[id as usize * dim..(id as usize + 1) * dim].copy_from_slice(row),
                None => {
                    // Per-token derived stream: stable under vocabulary growth.
                    let mut rng = Rng::new(crate::rng::derive_seed(seed, vocab.token(id)));
                    for c in 0..dim {
                        values[id as usize * dim + c] = rng.range(-0.1, 0.1);
                    }
                }
            }
        }
        EmbeddingTable { dim, values }
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, id: u32) -> &[Real] {
        &self.values[id as usize * self.dim..(id as usize + 1) * self.dim]
    }

    /// The whole table as a `[V, k]` tensor.
    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![self.vocab_size(), self.dim], self.values.clone()).expect("table is dense")
    }

    /// Cosine similarity between two token rows; zero if either row is zero.
    pub fn cosine(&self, a: u32, b: u32) -> Real {
        let (ra, rb) = (self.row(a), self.row(b));
        let dot: Real = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let na: Real = ra.iter().map(|x| x * x).sum::<Real>().sqrt();
        let nb: Real = rb.iter().map(|x| x * x).sum::<Real>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// Coarse part-of-speech tag carried by lexicon entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Adv,
    Other,
}

impl Pos {
    fn parse(s: &str) -> Option<Pos> {
        match s {
            "noun" | "n" => Some(Pos::Noun),
            "verb" | "v" => Some(Pos::Verb),
            "adj" | "a" => Some(Pos::Adj),
            "adv" | "r" => Some(Pos::Adv),
            "other" => Some(Pos::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pos::Noun => "noun",
            Pos::Verb => "verb",
            Pos::Adj => "adj",
            Pos::Adv => "adv",
            Pos::Other => "other",
        };
        f.write_str(s)
    }
}

/// One synonym entry: the token and its coarse POS tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymEntry {
    pub word: String,
    pub pos: Pos,
}

/// Headword to ordered synonym list. A headword never lists itself and the
/// lists carry no duplicates; both are enforced at load time.
#[derive(Debug, Clone, Default)]
pub struct SynonymLexicon {
    entries: HashMap<String, Vec<SynonymEntry>>,
}

impl SynonymLexicon {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let body = read(path)?;
        let mut entries: HashMap<String, Vec<SynonymEntry>> = HashMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (head, rest) = line.split_once('\t').ok_or_else(|| DataError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                detail: "expected headword<TAB>synonyms".into(),
            })?;
            let mut list: Vec<SynonymEntry> = Vec::new();
            for item in rest.split(',').filter(|s| !s.is_empty()) {
                let (word, pos) = match item.split_once(':') {
                    Some((w, p)) => {
                        let pos = Pos::parse(p).ok_or_else(|| DataError::Malformed {
                            path: path.display().to_string(),
                            line: i + 1,
                            detail: format!("unknown pos tag {p:?}"),
                        })?;
                        (w, pos)
                    }
                    None => (item, Pos::Other),
                };
                if word == head || list.iter().any(|e| e.word == word) {
                    continue;
                }
                list.push(SynonymEntry { word: word.to_string(), pos });
            }
            entries.insert(head.to_string(), list);
        }
        Ok(SynonymLexicon { entries })
    }

    /// Build directly from (headword, synonyms) pairs; same hygiene rules as
    /// the file loader.
    pub fn from_entries(pairs: impl IntoIterator<Item = (String, Vec<SynonymEntry>)>) -> Self {
        let mut entries: HashMap<String, Vec<SynonymEntry>> = HashMap::new();
        for (head, list) in pairs {
            let mut clean: Vec<SynonymEntry> = Vec::new();
            for e in list {
                if e.word != head && !clean.iter().any(|c| c.word == e.word) {
                    clean.push(e);
                }
            }
            entries.insert(head, clean);
        }
        SynonymLexicon { entries }
    }

    pub fn synonyms(&self, word: &str) -> &[SynonymEntry] {
        self.entries.get(word).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// POS tags attached to a headword's entries.
    pub fn pos_tags(&self, word: &str) -> Vec<Pos> {
        let mut tags: Vec<Pos> = Vec::new();
        for e in self.synonyms(word) {
            if !tags.contains(&e.pos) {
                tags.push(e.pos);
            }
        }
        tags
    }

    /// True if any entry anywhere carries a tag other than `other`.
    pub fn has_pos_tags(&self) -> bool {
        self.entries
            .values()
            .any(|list| list.iter().any(|e| e.pos != Pos::Other))
    }
}

/// In-vocabulary synonyms of `word`, optionally filtered by POS tag,
/// in lexicon order.
pub fn synonyms_in_vocab(
    word: &str,
    lexicon: &SynonymLexicon,
    vocab: &Vocabulary,
    pos_filter: Option<Pos>,
) -> Vec<String> {
    lexicon
        .synonyms(word)
        .iter()
        .filter(|e| pos_filter.is_none_or(|p| e.pos == p))
        .filter(|e| vocab.contains(&e.word))
        .map(|e| e.word.clone())
        .collect()
}

/// Token counts over the training split.
#[derive(Debug, Clone)]
pub struct FrequencyTable {
    counts: HashMap<String, u64>,
    total: u64,
}

impl FrequencyTable {
    /// Count tokens over tokenized training texts.
    pub fn build(texts: &[Vec<String>]) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut total = 0;
        for toks in texts {
            for t in toks {
                *counts.entry(t.clone()).or_insert(0) += 1;
                total += 1;
            }
        }
        FrequencyTable { counts, total }
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Count threshold at quantile `q` of the distinct-token count
    /// distribution. Tokens with a count strictly below the threshold are
    /// "low frequency"; `q = 0` therefore selects nothing.
    pub fn percentile_threshold(&self, q: f64) -> u64 {
        let mut sorted: Vec<u64> = self.counts.values().copied().collect();
        if sorted.is_empty() {
            return 0;
        }
        sorted.sort_unstable();
        let idx = ((sorted.len() - 1) as f64 * q.clamp(0.0, 1.0)).floor() as usize;
        sorted[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).unwrap()
    }

    #[test]
    fn tokenize_lowercases_and_drops_punctuation() {
        assert_eq!(toks("A good, GOOD film!"), vec!["a", "good", "good", "film"]);
    }

    #[test]
    fn tokenize_rejects_punctuation_only_input() {
        assert!(matches!(tokenize("..."), Err(DataError::EmptySentence)));
    }

    #[test]
    fn tokenize_splits_on_apostrophes() {
        assert_eq!(toks("it's fine"), vec!["it", "s", "fine"]);
    }

    #[test]
    fn encode_pads_and_records_length() {
        let vocab = Vocabulary::build(&[toks("a b c")]);
        let ex = encode(&toks("a b c"), &vocab, 0);
        assert_eq!(ex.true_length, 3);
        assert_eq!(ex.ids.len(), MAX_LEN);
        assert!(ex.ids[3..].iter().all(|&id| id == PAD));
    }

    #[test]
    fn encode_truncates_long_sentences() {
        let vocab = Vocabulary::build(&[toks("w")]);
        let long: Vec<String> = (0..200).map(|i| format!("tok{i}")).collect();
        let ex = encode(&long, &vocab, 0);
        assert_eq!(ex.true_length, MAX_LEN);
        assert_eq!(ex.ids.len(), MAX_LEN);
    }

    #[test]
    fn unknown_tokens_encode_as_unk() {
        let vocab = Vocabulary::build(&[toks("known words only")]);
        let ex = encode(&toks("known mystery"), &vocab, 0);
        assert_eq!(ex.ids[1], UNK);
        assert_ne!(ex.ids[0], UNK);
    }

    #[test]
    fn decode_of_encode_restores_in_vocab_tokens() {
        let vocab = Vocabulary::build(&[toks("the movie was great")]);
        let original = toks("The movie WAS great");
        let ex = encode(&original, &vocab, 0);
        let decoded: Vec<String> = ex.ids[..ex.true_length]
            .iter()
            .map(|&id| vocab.token(id).to_string())
            .collect();
        assert_eq!(decoded, original);
    }

    #[test]
    fn dataset_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        std::fs::write(&p, "1\tgreat movie\n0\tbad film\n").unwrap();
        let rows = load_dataset(&p, 2).unwrap();
        assert_eq!(rows[0], (1, "great movie".to_string()));

        std::fs::write(&p, "great movie no tab\n").unwrap();
        let err = load_dataset(&p, 2).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");

        std::fs::write(&p, "7\ttext\n").unwrap();
        assert!(matches!(load_dataset(&p, 2), Err(DataError::BadLabel { .. })));

        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p, 2).unwrap().is_empty());
    }

    #[test]
    fn embeddings_load_file_vectors_exactly_and_seed_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        std::fs::write(&p, "good 0.25 -1.5\n").unwrap();
        let vocab = Vocabulary::build(&[toks("good missing")]);
        let t1 = EmbeddingTable::load(&p, &vocab, 9).unwrap();
        let t2 = EmbeddingTable::load(&p, &vocab, 9).unwrap();
        let good = vocab.id("good").unwrap();
        let missing = vocab.id("missing").unwrap();
        assert_eq!(t1.row(good), &[0.25, -1.5]);
        assert_eq!(t1.row(missing), t2.row(missing));
        assert!(t1.row(missing).iter().all(|v| v.abs() < 0.1));
        assert!(t1.row(PAD).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embeddings_reject_ragged_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        std::fs::write(&p, "a 1 2\nb 1 2 3\n").unwrap();
        let vocab = Vocabulary::build(&[toks("a b")]);
        assert!(matches!(
            EmbeddingTable::load(&p, &vocab, 0),
            Err(DataError::DimMismatch { line: 2, .. })
        ));
    }

    #[test]
    fn lexicon_parses_pos_tags_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.tsv");
        std::fs::write(&p, "good\tgreat:adj,fine:adj,good,well:adv\nrun\tsprint:verb\n").unwrap();
        let lex = SynonymLexicon::load(&p).unwrap();
        // Self-reference dropped.
        assert!(lex.synonyms("good").iter().all(|e| e.word != "good"));
        let vocab = Vocabulary::build(&[toks("great well")]);
        let all = synonyms_in_vocab("good", &lex, &vocab, None);
        assert_eq!(all, vec!["great", "well"]); // "fine" is out of vocabulary
        let advs = synonyms_in_vocab("good", &lex, &vocab, Some(Pos::Adv));
        assert_eq!(advs, vec!["well"]);
        assert!(synonyms_in_vocab("absent", &lex, &vocab, None).is_empty());
    }

    #[test]
    fn lexicon_rejects_unknown_pos() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.tsv");
        std::fs::write(&p, "good\tgreat:xyz\n").unwrap();
        let err = SynonymLexicon::load(&p).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn frequency_counts_the_training_split() {
        let texts: Vec<Vec<String>> = vec![toks("a a b"), toks("a c")];
        let f = FrequencyTable::build(&texts);
        assert_eq!(f.count("a"), 3);
        assert_eq!(f.count("zzz"), 0);
        assert_eq!(f.total(), 5);
    }

    #[test]
    fn percentile_zero_selects_nothing() {
        let f = FrequencyTable::build(&[toks("a a a b b c")]);
        let thr = f.percentile_threshold(0.0);
        // The threshold equals the minimum count, and "low frequency" is
        // strictly below it, so nothing qualifies.
        assert!(f.count("c") >= thr);
    }
}
