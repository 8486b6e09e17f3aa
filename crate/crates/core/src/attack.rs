//! Word-level adversarial attack generators: PWWS-style saliency-weighted
//! greedy search, TextFooler-style importance ordering with an embedding
//! similarity filter, and a genetic search with an improved variant.
//!
//! All attacks substitute lexicon synonyms only, preserve token count, and
//! respect a shared substitution budget of `ceil(fraction * length)` words.
//! A sentence the victim already misclassifies counts as an immediate
//! success with zero substitutions.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, Rng};
use crate::text::{
    encode, synonyms_in_vocab, EmbeddingTable, EncodedExample, SynonymLexicon, Vocabulary, MAX_LEN,
    UNK,
};
use crate::victim::VictimModel;
use crate::Real;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("no attack produced a successful adversarial sentence")]
    NoSuccesses,
    #[error("attack list is empty")]
    NoAttacks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    Pwws,
    TextFooler,
    Ga,
    Iga,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Pwws, AttackKind::TextFooler, AttackKind::Ga, AttackKind::Iga];

    pub fn tag(self) -> &'static str {
        match self {
            AttackKind::Pwws => "pwws",
            AttackKind::TextFooler => "textfooler",
            AttackKind::Ga => "ga",
            AttackKind::Iga => "iga",
        }
    }

    pub fn parse(s: &str) -> Option<AttackKind> {
        match s {
            "pwws" => Some(AttackKind::Pwws),
            "textfooler" | "tl" => Some(AttackKind::TextFooler),
            "ga" => Some(AttackKind::Ga),
            "iga" => Some(AttackKind::Iga),
            _ => None,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Budget: at most `ceil(fraction * true_length)` substitutions.
    pub max_sub_fraction: Real,
    pub ga_population: usize,
    pub ga_generations: usize,
    pub ga_mutation: Real,
    /// TextFooler candidate filter: embedding cosine similarity floor.
    pub tf_min_cosine: Real,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            max_sub_fraction: 0.25,
            ga_population: 20,
            ga_generations: 20,
            ga_mutation: 0.3,
            tf_min_cosine: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub position: usize,
    pub old: String,
    pub new: String,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub label: usize,
    pub original_tokens: Vec<String>,
    pub adversarial_tokens: Vec<String>,
    pub substitutions: Vec<Substitution>,
    pub success: bool,
    pub label_before: usize,
    pub conf_before: Real,
    pub label_after: usize,
    pub conf_after: Real,
}

/// Everything an attack needs besides the sentence.
pub struct AttackContext<'a> {
    pub victim: &'a VictimModel,
    pub vocab: &'a Vocabulary,
    pub lexicon: &'a SynonymLexicon,
    pub embeddings: &'a EmbeddingTable,
}

pub fn substitution_budget(true_length: usize, fraction: Real) -> usize {
    ((true_length as Real * fraction).ceil() as usize).min(true_length)
}

fn true_probs(ctx: &AttackContext, tokens: &[String], label: usize) -> (Vec<Real>, usize, Real) {
    let ex = encode(tokens, ctx.vocab, label);
    let probs = ctx.victim.forward_probs(&ex);
    let (pred, conf) = crate::victim::argmax(&probs);
    (probs, pred, conf)
}

/// Confidence in `label` after replacing position `pos` with UNK.
fn unk_probe(ctx: &AttackContext, ex: &EncodedExample, pos: usize, label: usize) -> Real {
    let mut probe = ex.clone();
    probe.ids[pos] = UNK;
    ctx.victim.forward_probs(&probe)[label]
}

fn apply_substitution(tokens: &mut [String], ex: &mut EncodedExample, pos: usize, word: &str, vocab: &Vocabulary) {
    tokens[pos] = word.to_string();
    ex.ids[pos] = vocab.id(word).unwrap_or(UNK);
}

fn finish(
    ctx: &AttackContext,
    kind: AttackKind,
    label: usize,
    original: &[String],
    adversarial: Vec<String>,
    substitutions: Vec<Substitution>,
    label_before: usize,
    conf_before: Real,
) -> AttackResult {
    let (_, label_after, conf_after) = true_probs(ctx, &adversarial, label);
    AttackResult {
        kind,
        label,
        original_tokens: original.to_vec(),
        adversarial_tokens: adversarial,
        substitutions,
        success: label_after != label,
        label_before,
        conf_before,
        label_after,
        conf_after,
    }
}

/// PWWS-style attack: word saliency is the confidence drop under UNK
/// substitution, each word's best synonym is the one with the largest
/// confidence drop, and words are tried in descending
/// softmax(saliency) * drop order until the label flips or the budget
/// is spent.
pub fn attack_pwws(ctx: &AttackContext, tokens: &[String], label: usize, cfg: &AttackConfig) -> AttackResult {
    greedy_attack(ctx, tokens, label, cfg, AttackKind::Pwws)
}

/// TextFooler-style attack: words ordered by deletion importance, candidate
/// synonyms filtered by embedding cosine similarity, greedy substitution of
/// the candidate that minimizes true-class confidence.
pub fn attack_textfooler(ctx: &AttackContext, tokens: &[String], label: usize, cfg: &AttackConfig) -> AttackResult {
    greedy_attack(ctx, tokens, label, cfg, AttackKind::TextFooler)
}

fn greedy_attack(
    ctx: &AttackContext,
    tokens: &[String],
    label: usize,
    cfg: &AttackConfig,
    kind: AttackKind,
) -> AttackResult {
    let ex0 = encode(tokens, ctx.vocab, label);
    let probs0 = ctx.victim.forward_probs(&ex0);
    let (pred0, conf0) = crate::victim::argmax(&probs0);
    if pred0 != label {
        // Already misclassified: nothing to do.
        return finish(ctx, kind, label, tokens, tokens.to_vec(), vec![], pred0, conf0);
    }
    let p_true = probs0[label];
    let n = ex0.true_length;
    let budget = substitution_budget(n, cfg.max_sub_fraction);

    // Per-position importance: confidence drop when the word becomes UNK.
    let importance: Vec<Real> = (0..n)
        .into_par_iter()
        .map(|i| p_true - unk_probe(ctx, &ex0, i, label))
        .collect();

    // Candidate synonyms per position, with the attack-specific filter.
    let candidates: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let syns = synonyms_in_vocab(&tokens[i], ctx.lexicon, ctx.vocab, None);
            match kind {
                AttackKind::TextFooler => {
                    let orig_id = match ctx.vocab.id(&tokens[i]) {
                        Some(id) => id,
                        None => return vec![],
                    };
                    syns.into_iter()
                        .filter(|s| {
                            let sid = ctx.vocab.id(s).expect("in-vocabulary synonym");
                            ctx.embeddings.cosine(orig_id, sid) >= cfg.tf_min_cosine
                        })
                        .collect()
                }
                _ => syns,
            }
        })
        .collect();

    // Order of substitution attempts.
    let order: Vec<usize> = match kind {
        AttackKind::Pwws => {
            // Best synonym drop per position, measured on the original sentence.
            let best_drop: Vec<Option<Real>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    candidates[i]
                        .iter()
                        .map(|cand| {
                            let mut probe = ex0.clone();
                            probe.ids[i] = ctx.vocab.id(cand).expect("in-vocabulary synonym");
                            p_true - ctx.victim.forward_probs(&probe)[label]
                        })
                        .fold(None, |acc: Option<Real>, d| match acc {
                            Some(b) if b >= d => Some(b),
                            _ => Some(d),
                        })
                })
                .collect();
            let denom: Real = importance.iter().map(|s| s.exp()).sum();
            let mut scored: Vec<(usize, Real)> = (0..n)
                .filter(|&i| best_drop[i].is_some())
                .map(|i| (i, importance[i].exp() / denom * best_drop[i].unwrap()))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.into_iter().map(|(i, _)| i).collect()
        }
        _ => {
            let mut idx: Vec<usize> = (0..n).filter(|&i| !candidates[i].is_empty()).collect();
            idx.sort_by(|&a, &b| {
                importance[b].partial_cmp(&importance[a]).unwrap().then(a.cmp(&b))
            });
            idx
        }
    };

    let mut cur_tokens = tokens.to_vec();
    let mut cur_ex = ex0.clone();
    let mut subs: Vec<Substitution> = Vec::new();
    for &i in &order {
        if subs.len() >= budget {
            break;
        }
        if candidates[i].is_empty() {
            continue;
        }
        // Choose the replacement measured against the current sentence.
        let picks: Vec<Real> = candidates[i]
            .par_iter()
            .map(|cand| {
                let mut probe = cur_ex.clone();
                probe.ids[i] = ctx.vocab.id(cand).expect("in-vocabulary synonym");
                ctx.victim.forward_probs(&probe)[label]
            })
            .collect();
        let mut best_ci = 0;
        for (ci, &p) in picks.iter().enumerate().skip(1) {
            if p < picks[best_ci] {
                best_ci = ci;
            }
        }
        let new_word = candidates[i][best_ci].clone();
        subs.push(Substitution { position: i, old: cur_tokens[i].clone(), new: new_word.clone() });
        apply_substitution(&mut cur_tokens, &mut cur_ex, i, &new_word, ctx.vocab);
        let probs = ctx.victim.forward_probs(&cur_ex);
        if crate::victim::argmax(&probs).0 != label {
            break;
        }
    }
    finish(ctx, kind, label, tokens, cur_tokens, subs, pred0, conf0)
}

/// Genetic attack over synonym-substituted variants. Fitness is the largest
/// non-true-class probability; selection is fitness-proportional; crossover
/// is single-point over the position vector; mutation substitutes a random
/// eligible position. The improved variant may re-mutate already substituted
/// positions and seeds the population by mutating every position once.
pub fn attack_genetic(
    ctx: &AttackContext,
    tokens: &[String],
    label: usize,
    cfg: &AttackConfig,
    improved: bool,
) -> AttackResult {
    let kind = if improved { AttackKind::Iga } else { AttackKind::Ga };
    let ex0 = encode(tokens, ctx.vocab, label);
    let probs0 = ctx.victim.forward_probs(&ex0);
    let (pred0, conf0) = crate::victim::argmax(&probs0);
    if pred0 != label {
        return finish(ctx, kind, label, tokens, tokens.to_vec(), vec![], pred0, conf0);
    }
    let n = ex0.true_length;
    let budget = substitution_budget(n, cfg.max_sub_fraction);
    let candidates: Vec<Vec<String>> = (0..n)
        .map(|i| synonyms_in_vocab(&tokens[i], ctx.lexicon, ctx.vocab, None))
        .collect();
    let slots: Vec<usize> = (0..n).filter(|&i| !candidates[i].is_empty()).collect();
    if slots.is_empty() {
        return finish(ctx, kind, label, tokens, tokens.to_vec(), vec![], pred0, conf0);
    }

    let mut rng = Rng::new(cfg.seed);
    type Genome = Vec<Option<usize>>;
    let mut population: Vec<Genome> = (0..cfg.ga_population.max(2))
        .map(|m| {
            let mut g: Genome = vec![None; n];
            let pos = if improved { slots[m % slots.len()] } else { *rng.choose(&slots) };
            g[pos] = Some(rng.below(candidates[pos].len()));
            g
        })
        .collect();

    let realize = |g: &Genome| -> (Vec<String>, EncodedExample) {
        let mut toks = tokens.to_vec();
        let mut ex = ex0.clone();
        for (i, slot) in g.iter().enumerate() {
            if let Some(ci) = slot {
                let w = candidates[i][*ci].clone();
                apply_substitution(&mut toks, &mut ex, i, &w, ctx.vocab);
            }
        }
        (toks, ex)
    };
    let evaluate = |pop: &[Genome]| -> Vec<(Real, usize)> {
        pop.par_iter()
            .map(|g| {
                let (_, ex) = realize(g);
                let probs = ctx.victim.forward_probs(&ex);
                let fitness = probs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != label)
                    .map(|(_, p)| *p)
                    .fold(0.0, Real::max);
                (fitness, crate::victim::argmax(&probs).0)
            })
            .collect()
    };
    let make_result = |g: &Genome| -> AttackResult {
        let (toks, _) = realize(g);
        let subs: Vec<Substitution> = g
            .iter()
            .enumerate()
            .filter_map(|(i, slot)| {
                slot.map(|ci| Substitution {
                    position: i,
                    old: tokens[i].clone(),
                    new: candidates[i][ci].clone(),
                })
            })
            .collect();
        finish(ctx, kind, label, tokens, toks, subs, pred0, conf0)
    };

    let mut scores = evaluate(&population);
    for _gen in 0..cfg.ga_generations {
        if let Some(hit) = scores.iter().position(|&(_, pred)| pred != label) {
            return make_result(&population[hit]);
        }
        // Elitism: the fittest member survives unchanged.
        let elite = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let total: Real = scores.iter().map(|s| s.0).sum();
        let roulette = |rng: &mut Rng| -> usize {
            if total <= 0.0 {
                return rng.below(population.len());
            }
            let mut target = rng.uniform() * total;
            for (i, s) in scores.iter().enumerate() {
                target -= s.0;
                if target <= 0.0 {
                    return i;
                }
            }
            population.len() - 1
        };
        let mut next: Vec<Genome> = vec![population[elite].clone()];
        while next.len() < population.len() {
            let (pa, pb) = (roulette(&mut rng), roulette(&mut rng));
            let cut = rng.below(n + 1);
            let mut child: Genome = (0..n)
                .map(|i| if i < cut { population[pa][i] } else { population[pb][i] })
                .collect();
            // Budget repair: drop the highest-position substitutions first.
            while child.iter().flatten().count() > budget {
                let last = child.iter().rposition(|s| s.is_some()).unwrap();
                child[last] = None;
            }
            if rng.chance(cfg.ga_mutation) {
                let eligible: Vec<usize> = if improved {
                    slots.clone()
                } else {
                    slots.iter().copied().filter(|&i| child[i].is_none()).collect()
                };
                if !eligible.is_empty() {
                    let pos = *rng.choose(&eligible);
                    child[pos] = Some(rng.below(candidates[pos].len()));
                    while child.iter().flatten().count() > budget {
                        let last = child.iter().rposition(|s| s.is_some()).unwrap();
                        child[last] = None;
                    }
                }
            }
            next.push(child);
        }
        population = next;
        scores = evaluate(&population);
    }
    if let Some(hit) = scores.iter().position(|&(_, pred)| pred != label) {
        return make_result(&population[hit]);
    }
    // No flip: report the fittest attempt.
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    make_result(&population[best])
}

/// Run one attack kind.
pub fn run_attack(
    ctx: &AttackContext,
    kind: AttackKind,
    tokens: &[String],
    label: usize,
    cfg: &AttackConfig,
) -> AttackResult {
    match kind {
        AttackKind::Pwws => attack_pwws(ctx, tokens, label, cfg),
        AttackKind::TextFooler => attack_textfooler(ctx, tokens, label, cfg),
        AttackKind::Ga => attack_genetic(ctx, tokens, label, cfg, false),
        AttackKind::Iga => attack_genetic(ctx, tokens, label, cfg, true),
    }
}

/// Per-(class, attack) generation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusReport {
    pub requested_per_class: usize,
    /// (class, attack tag, achieved, target)
    pub cells: Vec<(usize, String, usize, usize)>,
    pub shortfall: bool,
}

/// Generate successful adversarial sentences, balanced per class and per
/// attack. Sentences of each class are dealt round-robin to the attacks and
/// each cell keeps its first successes in stream order, so the output is
/// deterministic for a given seed.
pub fn generate_adversarial_corpus(
    ctx: &AttackContext,
    dataset: &[(usize, String)],
    kinds: &[AttackKind],
    quota_per_class: usize,
    n_classes: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Vec<AttackResult>, CorpusReport), AttackError> {
    if kinds.is_empty() {
        return Err(AttackError::NoAttacks);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = Rng::new(derive_seed(seed, "adv-corpus"));
    rng.shuffle(&mut order);

    // Deal each class's sentences round-robin across the attacks.
    let mut streams: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); kinds.len()]; n_classes];
    let mut dealt: Vec<usize> = vec![0; n_classes];
    for &idx in &order {
        let class = dataset[idx].0;
        if class >= n_classes {
            continue;
        }
        streams[class][dealt[class] % kinds.len()].push(idx);
        dealt[class] += 1;
    }

    let base = quota_per_class / kinds.len();
    let extra = quota_per_class % kinds.len();
    let mut results: Vec<AttackResult> = Vec::new();
    let mut cells = Vec::new();
    let mut shortfall = false;

    for class in 0..n_classes {
        for (ai, &kind) in kinds.iter().enumerate() {
            let target = base + usize::from(ai < extra);
            let stream = &streams[class][ai];
            let mut achieved = 0;
            let mut cursor = 0;
            while achieved < target && cursor < stream.len() {
                let chunk_len = ((target - achieved) * 3).clamp(4, 64).min(stream.len() - cursor);
                let chunk = &stream[cursor..cursor + chunk_len];
                let outcomes: Vec<Option<AttackResult>> = chunk
                    .par_iter()
                    .map(|&idx| {
                        let (label, text) = &dataset[idx];
                        let tokens = match crate::text::tokenize(text) {
                            Ok(t) => t,
                            Err(_) => return None,
                        };
                        let mut local = cfg.clone();
                        local.seed = derive_seed(seed, &format!("attack-{}-{}", kind.tag(), idx));
                        let r = run_attack(ctx, kind, &tokens, *label, &local);
                        r.success.then_some(r)
                    })
                    .collect();
                for r in outcomes.into_iter().flatten() {
                    if achieved < target {
                        results.push(r);
                        achieved += 1;
                    }
                }
                cursor += chunk_len;
            }
            if achieved < target {
                shortfall = true;
            }
            cells.push((class, kind.tag().to_string(), achieved, target));
        }
    }
    if results.is_empty() {
        return Err(AttackError::NoSuccesses);
    }
    Ok((results, CorpusReport { requested_per_class: quota_per_class, cells, shortfall }))
}

/// Serialize an adversarial corpus as
/// `label<TAB>adversarial_text<TAB>original_text<TAB>attack<TAB>n_subs`.
pub fn corpus_to_tsv(results: &[AttackResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.label,
            r.adversarial_tokens.join(" "),
            r.original_tokens.join(" "),
            r.kind,
            r.substitutions.len()
        ));
    }
    out
}

/// Parse the adversarial-corpus TSV format into
/// (label, adversarial text, original text, attack, substitution count).
pub fn corpus_from_tsv(body: &str) -> Vec<(usize, String, String, AttackKind, usize)> {
    let mut rows = Vec::new();
    for line in body.lines().filter(|l| !l.is_empty()) {
        let mut parts = line.split('\t');
        let (Some(label), Some(adv), Some(orig), Some(kind), Some(n_subs)) = (
            parts.next(),
            parts.next(),
            parts.next(),
            parts.next(),
            parts.next(),
        ) else {
            continue;
        };
        let (Ok(label), Some(kind), Ok(n_subs)) =
            (label.parse::<usize>(), AttackKind::parse(kind), n_subs.parse::<usize>())
        else {
            continue;
        };
        rows.push((label, adv.to_string(), orig.to_string(), kind, n_subs));
    }
    rows
}

/// Re-check the defining properties of a result against the victim: a
/// successful label flip away from the true label, lexicon-only
/// substitutions, preserved token count, and the budget.
pub fn verify_result(ctx: &AttackContext, r: &AttackResult, cfg: &AttackConfig) -> bool {
    if r.adversarial_tokens.len() != r.original_tokens.len() {
        return false;
    }
    let true_len = r.original_tokens.len().min(MAX_LEN);
    if r.substitutions.len() > substitution_budget(true_len, cfg.max_sub_fraction) {
        return false;
    }
    for s in &r.substitutions {
        if !ctx.lexicon.synonyms(&s.old).iter().any(|e| e.word == s.new) {
            return false;
        }
    }
    if r.success {
        let (_, pred, _) = true_probs(ctx, &r.adversarial_tokens, r.label);
        if pred == r.label {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, Pos, SynonymEntry};

    /// Victim with hand-set weights: logit_j is the max over positions of
    /// the j-th embedding coordinate. Class words carry their class
    /// coordinate, so single substitutions flip predictably.
    pub(crate) struct Toy {
        pub victim: VictimModel,
        pub vocab: Vocabulary,
        pub lexicon: SynonymLexicon,
        pub embeddings: EmbeddingTable,
    }

    pub(crate) fn toy() -> Toy {
        let corpus: Vec<Vec<String>> =
            [("good nice fine awful bad poor meh blah filler pad thing stuff")]
                .iter()
                .map(|s| tokenize(s).unwrap())
                .collect();
        let vocab = Vocabulary::build(&corpus);
        let mut victim = VictimModel::new_textcnn(vocab.len(), 2, 2, &[1], 2, 0);
        let strength = |w: &str| -> Option<(usize, Real)> {
            match w {
                "good" => Some((0, 1.0)),
                "nice" => Some((0, 0.9)),
                "fine" => Some((0, 0.5)),
                "awful" => Some((1, 1.0)),
                "bad" => Some((1, 0.9)),
                "poor" => Some((1, 0.5)),
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
        // Width-1 identity conv plus identity output: logits are columnwise maxima.
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
            ("nice".to_string(), vec![SynonymEntry { word: "good".into(), pos: Pos::Adj }]),
            ("bad".to_string(), vec![SynonymEntry { word: "fine".into(), pos: Pos::Adj }]),
        ]);
        let embeddings = EmbeddingTable::random(2, &vocab, 1);
        Toy { victim, vocab, lexicon, embeddings }
    }

    fn ctx(t: &Toy) -> AttackContext<'_> {
        AttackContext {
            victim: &t.victim,
            vocab: &t.vocab,
            lexicon: &t.lexicon,
            embeddings: &t.embeddings,
        }
    }

    /// Exhaustive best single substitution by true-class confidence drop.
    pub(crate) fn oracle_best(
        ctx: &AttackContext,
        tokens: &[String],
        label: usize,
        filter_cosine: Option<Real>,
    ) -> Option<(usize, String, Real)> {
        let ex = encode(tokens, ctx.vocab, label);
        let p0 = ctx.victim.forward_probs(&ex)[label];
        let mut best: Option<(usize, String, Real)> = None;
        for i in 0..ex.true_length {
            for cand in synonyms_in_vocab(&tokens[i], ctx.lexicon, ctx.vocab, None) {
                if let Some(min_cos) = filter_cosine {
                    let (Some(a), Some(b)) = (ctx.vocab.id(&tokens[i]), ctx.vocab.id(&cand)) else {
                        continue;
                    };
                    if ctx.embeddings.cosine(a, b) < min_cos {
                        continue;
                    }
                }
                let mut probe = ex.clone();
                probe.ids[i] = ctx.vocab.id(&cand).unwrap();
                let drop = p0 - ctx.victim.forward_probs(&probe)[label];
                if best.as_ref().is_none_or(|(_, _, d)| drop > *d) {
                    best = Some((i, cand, drop));
                }
            }
        }
        best
    }

    #[test]
    fn toy_victim_is_wired_as_expected() {
        let t = toy();
        let ex = encode(&tokenize("good filler blah").unwrap(), &t.vocab, 0);
        assert_eq!(t.victim.predict(&ex).0, 0);
        let ex = encode(&tokenize("awful filler blah").unwrap(), &t.vocab, 1);
        assert_eq!(t.victim.predict(&ex).0, 1);
    }

    #[test]
    fn pwws_with_no_synonyms_fails_with_zero_substitutions() {
        let t = toy();
        let tokens = tokenize("filler blah stuff").unwrap();
        let r = attack_pwws(&ctx(&t), &tokens, 0, &AttackConfig::default());
        assert!(!r.success);
        assert!(r.substitutions.is_empty());
        assert_eq!(r.adversarial_tokens, tokens);
    }

    #[test]
    fn already_misclassified_input_succeeds_immediately() {
        let t = toy();
        // True label 1, but the victim sees a positive sentence.
        let tokens = tokenize("good filler blah").unwrap();
        let r = attack_pwws(&ctx(&t), &tokens, 1, &AttackConfig::default());
        assert!(r.success);
        assert!(r.substitutions.is_empty());
    }

    #[test]
    fn pwws_first_substitution_matches_exhaustive_oracle() {
        let t = toy();
        let c = ctx(&t);
        let tokens = tokenize("good filler blah stuff").unwrap();
        let r = attack_pwws(&c, &tokens, 0, &AttackConfig::default());
        assert!(r.success, "toy attack should flip");
        let (oi, ow, _) = oracle_best(&c, &tokens, 0, None).unwrap();
        assert_eq!(r.substitutions[0].position, oi);
        assert_eq!(r.substitutions[0].new, ow);
        assert_eq!(r.substitutions.len(), 1);
    }

    #[test]
    fn textfooler_cosine_one_blocks_everything() {
        let t = toy();
        let c = ctx(&t);
        let tokens = tokenize("good filler blah stuff").unwrap();
        let cfg = AttackConfig { tf_min_cosine: 1.0, ..Default::default() };
        let r = attack_textfooler(&c, &tokens, 0, &cfg);
        assert!(!r.success);
        assert!(r.substitutions.is_empty());
    }

    #[test]
    fn textfooler_matches_oracle_under_the_same_filter() {
        let t = toy();
        let c = ctx(&t);
        let tokens = tokenize("good filler blah stuff").unwrap();
        let cfg = AttackConfig { tf_min_cosine: -1.0, ..Default::default() };
        let r = attack_textfooler(&c, &tokens, 0, &cfg);
        assert!(r.success);
        let (oi, ow, _) = oracle_best(&c, &tokens, 0, Some(-1.0)).unwrap();
        assert_eq!(r.substitutions[0].position, oi);
        assert_eq!(r.substitutions[0].new, ow);
    }

    #[test]
    fn budget_limits_substitutions() {
        let t = toy();
        let c = ctx(&t);
        let tokens = tokenize("good nice bad good").unwrap();
        let cfg = AttackConfig { max_sub_fraction: 0.25, ..Default::default() };
        let r = attack_pwws(&c, &tokens, 0, &cfg);
        assert!(r.substitutions.len() <= 1, "budget is ceil(0.25 * 4) = 1");
    }

    #[test]
    fn genetic_attack_flips_single_word_sentences_reliably() {
        let t = toy();
        let c = ctx(&t);
        let tokens = tokenize("good").unwrap();
        let mut hits = 0;
        for seed in 0..100 {
            let cfg = AttackConfig { seed, ga_generations: 0, ..Default::default() };
            let r = attack_genetic(&c, &tokens, 0, &cfg, false);
            hits += usize::from(r.success);
        }
        // Two candidate synonyms, one flips: a 20-member population misses
        // with probability 2^-20 per seed.
        assert!(hits >= 90, "hits = {hits}");
    }

    #[test]
    fn genetic_attack_is_deterministic_per_seed() {
        let t = toy();
        let c = ctx(&t);
        let tokens = tokenize("good nice filler stuff blah").unwrap();
        let cfg = AttackConfig { seed: 33, ..Default::default() };
        let a = attack_genetic(&c, &tokens, 0, &cfg, true);
        let b = attack_genetic(&c, &tokens, 0, &cfg, true);
        assert_eq!(a.substitutions, b.substitutions);
        assert_eq!(a.success, b.success);
    }

    #[test]
    fn unmodified_sentence_is_less_fit_than_oracle_best() {
        let t = toy();
        let c = ctx(&t);
        let tokens = tokenize("good filler blah stuff").unwrap();
        let ex = encode(&tokens, &t.vocab, 0);
        let base_fitness = t.victim.forward_probs(&ex)[1];
        let (oi, ow, _) = oracle_best(&c, &tokens, 0, None).unwrap();
        let mut sub = tokens.clone();
        sub[oi] = ow;
        let ex2 = encode(&sub, &t.vocab, 0);
        let best_fitness = t.victim.forward_probs(&ex2)[1];
        assert!(base_fitness < best_fitness);
    }

    #[test]
    fn corpus_generation_balances_and_verifies() {
        let t = toy();
        let c = ctx(&t);
        let mut dataset: Vec<(usize, String)> = Vec::new();
        for i in 0..30 {
            dataset.push((0, format!("good filler blah stuff pad{}", i % 3)));
            dataset.push((1, format!("bad filler blah stuff pad{}", i % 3)));
        }
        let cfg = AttackConfig::default();
        let kinds = [AttackKind::Pwws, AttackKind::Ga];
        let (results, report) =
            generate_adversarial_corpus(&c, &dataset, &kinds, 4, 2, &cfg, 7).unwrap();
        for r in &results {
            assert!(r.success);
            assert!(verify_result(&c, r, &cfg));
        }
        let pwws_c0 = results
            .iter()
            .filter(|r| r.kind == AttackKind::Pwws && r.label == 0)
            .count();
        assert_eq!(pwws_c0, 2, "quota 4 over 2 attacks is 2 each");
        assert_eq!(report.requested_per_class, 4);
    }

    #[test]
    fn quota_zero_yields_no_successes_error() {
        let t = toy();
        let c = ctx(&t);
        let dataset = vec![(0usize, "good filler".to_string())];
        let r = generate_adversarial_corpus(
            &c,
            &dataset,
            &[AttackKind::Pwws],
            0,
            2,
            &AttackConfig::default(),
            1,
        );
        assert!(matches!(r, Err(AttackError::NoSuccesses)));
    }

    #[test]
    fn corpus_tsv_round_trip() {
        let t = toy();
        let c = ctx(&t);
        let tokens = tokenize("good filler blah stuff").unwrap();
        let r = attack_pwws(&c, &tokens, 0, &AttackConfig::default());
        let tsv = corpus_to_tsv(std::slice::from_ref(&r));
        let rows = corpus_from_tsv(&tsv);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, 0);
        assert_eq!(rows[0].1, r.adversarial_tokens.join(" "));
        assert_eq!(rows[0].3, AttackKind::Pwws);
    }
}
