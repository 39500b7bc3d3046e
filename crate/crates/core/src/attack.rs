//! Greedy probability-weighted word-substitution attack.
//!
//! For a classifier f and an input of words w_1..w_n, the attack scores each
//! position by saliency `S(w_i) = P(y|x) - P(y|x with w_i -> UNK)` where y is
//! the model's original prediction, picks each position's best substitute by
//! the probability drop `dP*_i = max_c P(y|x) - P(y|x with w_i -> c)` over
//! the lexicon candidates, and visits positions in descending
//! `H(w_i) = softmax(S)_i * dP*_i`, substituting until the prediction flips
//! or the budget runs out. Saliencies, substitutes, and the visit order are
//! all computed against the original input; substitutions accumulate.
//!
//! The whole procedure is deterministic: ties in the substitute choice go to
//! lexicon order, ties in the visit order go to the earlier position.

use crate::data::{self, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, TokenBatch};
use crate::train;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// Ordered substitution candidates per word. A word is never its own entry.
#[derive(Debug, Clone, Default)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert an entry, rejecting self-synonyms.
    pub fn insert(&mut self, word: &str, candidates: Vec<String>) -> Result<()> {
        if candidates.iter().any(|c| c == word) {
            return Err(Error::Data(format!(
                "lexicon entry '{word}' lists itself as a substitute"
            )));
        }
        self.entries.insert(word.to_string(), candidates);
        Ok(())
    }

    pub fn candidates(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Candidates that fall outside `vocab` and will encode as `UNK`.
    pub fn out_of_vocab(&self, vocab: &Vocab) -> Vec<String> {
        let mut oov: Vec<String> = self
            .entries
            .values()
            .flatten()
            .filter(|c| !vocab.contains(c))
            .cloned()
            .collect();
        oov.sort();
        oov.dedup();
        oov
    }

    /// Parse the `word<TAB>syn1,syn2,...` format.
    pub fn load_tsv(path: &Path) -> Result<SynonymLexicon> {
        let raw = std::fs::read_to_string(path)?;
        let mut lex = SynonymLexicon::new();
        for (lineno, line) in raw.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let (word, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Schema(format!(
                    "line {}: expected 'word<TAB>candidates'",
                    lineno + 1
                ))
            })?;
            let candidates: Vec<String> = rest
                .split(',')
                .map(str::trim)
                .filter(|c| !c.is_empty())
                .map(str::to_string)
                .collect();
            lex.insert(word, candidates)
                .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(lex)
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (word, cands) in &self.entries {
            writeln!(f, "{word}\t{}", cands.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Everything a single attack needs to query the victim model.
pub struct AttackContext<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub max_seq_len: usize,
}

impl<'a> AttackContext<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocab, max_seq_len: usize) -> Self {
        Self {
            model,
            vocab,
            max_seq_len,
        }
    }

    /// Number of word positions that survive encoding (`[CLS] w.. [SEP]`).
    fn visible_len(&self, n_words: usize) -> usize {
        n_words.min(self.max_seq_len - 2)
    }

    fn encode_content_ids(&self, content: &[usize]) -> Result<TokenBatch> {
        let budget = self.max_seq_len - 2;
        let take = content.len().min(budget);
        let mut ids = Vec::with_capacity(self.max_seq_len);
        ids.push(data::CLS);
        ids.extend_from_slice(&content[..take]);
        ids.push(data::SEP);
        let used = ids.len();
        ids.resize(self.max_seq_len, data::PAD);
        let mut mask = vec![1u8; used];
        mask.resize(self.max_seq_len, 0);
        TokenBatch::new(1, self.max_seq_len, ids, mask)
    }

    /// One model query: class probabilities for a content-id sequence.
    fn query(&self, content: &[usize], queries: &mut usize) -> Result<Vec<f64>> {
        *queries += 1;
        let batch = self.encode_content_ids(content)?;
        let rows = train::class_probabilities(self.model, &batch)?;
        Ok(rows.into_iter().next().expect("batch of one"))
    }
}

/// Saliency of one word position: the drop in the originally predicted
/// class's probability when that word is replaced by `UNK`. May be negative.
pub fn word_saliency(ctx: &AttackContext, words: &[String], position: usize) -> Result<f64> {
    let n = ctx.visible_len(words.len());
    if position >= n {
        return Err(Error::Usage(format!(
            "position {position} out of range for {n} visible words"
        )));
    }
    let content: Vec<usize> = words.iter().map(|w| ctx.vocab.id(w)).collect();
    let mut queries = 0;
    let p0 = ctx.query(&content, &mut queries)?;
    let y = train::argmax_lowest(&p0);
    let mut replaced = content;
    replaced[position] = data::UNK;
    let p1 = ctx.query(&replaced, &mut queries)?;
    Ok(p0[y] - p1[y])
}

/// Best lexicon substitute for a position: the candidate maximizing the drop
/// of the originally predicted class probability, ties broken by lexicon
/// order. `None` when the word has no candidates (position unattackable).
pub fn best_substitute(
    ctx: &AttackContext,
    words: &[String],
    position: usize,
    lexicon: &SynonymLexicon,
) -> Result<Option<(String, f64)>> {
    let n = ctx.visible_len(words.len());
    if position >= n {
        return Err(Error::Usage(format!(
            "position {position} out of range for {n} visible words"
        )));
    }
    let candidates = match lexicon.candidates(&words[position]) {
        Some(c) if !c.is_empty() => c,
        _ => return Ok(None),
    };
    let content: Vec<usize> = words.iter().map(|w| ctx.vocab.id(w)).collect();
    let mut queries = 0;
    let p0 = ctx.query(&content, &mut queries)?;
    let y = train::argmax_lowest(&p0);
    let mut best: Option<(String, f64)> = None;
    for cand in candidates {
        let mut replaced = content.clone();
        replaced[position] = ctx.vocab.id(cand);
        let p = ctx.query(&replaced, &mut queries)?;
        let drop = p0[y] - p[y];
        // strictly-greater keeps the first (lexicon-order) winner on ties
        if best.as_ref().map(|(_, d)| drop > *d).unwrap_or(true) {
            best = Some((cand.clone(), drop));
        }
    }
    Ok(best)
}

/// One applied substitution: `(position, original word, substitute)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub position: usize,
    pub original: String,
    pub substitute: String,
}

/// Outcome of attacking one example. `original_text` is the normalized
/// (tokenized, space-joined) form of the input; `adversarial_text` differs
/// from it exactly at the substitution positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRecord {
    pub example_id: usize,
    pub original_text: String,
    pub adversarial_text: String,
    pub substitutions: Vec<Substitution>,
    pub original_pred: usize,
    pub adversarial_pred: usize,
    pub success: bool,
    pub model_queries: usize,
}

/// Exponentially normalized weights over the saliency vector.
pub fn saliency_weights(saliencies: &[f64]) -> Vec<f64> {
    let max = saliencies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = saliencies.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Run the greedy substitution attack on one example's text. Success is
/// defined against the model's own original prediction; the gold label plays
/// no role here. `max_substitution_frac` caps the number of substitutions at
/// `ceil(frac * attackable_positions)`.
pub fn pwws_attack(
    ctx: &AttackContext,
    example_id: usize,
    text: &str,
    lexicon: &SynonymLexicon,
    max_substitution_frac: f64,
) -> Result<AttackRecord> {
    let words = data::tokenize(text);
    if words.is_empty() {
        return Err(Error::Data(format!(
            "example {example_id} has no attackable words"
        )));
    }
    let n = ctx.visible_len(words.len());
    let content: Vec<usize> = words.iter().map(|w| ctx.vocab.id(w)).collect();

    let mut queries = 0usize;
    let p0 = ctx.query(&content, &mut queries)?;
    let original_pred = train::argmax_lowest(&p0);
    let p_orig = p0[original_pred];

    // attackable positions: visible and with at least one candidate
    let attackable: Vec<usize> = (0..n)
        .filter(|i| {
            lexicon
                .candidates(&words[*i])
                .map(|c| !c.is_empty())
                .unwrap_or(false)
        })
        .collect();

    let mut record = AttackRecord {
        example_id,
        original_text: words.join(" "),
        adversarial_text: words.join(" "),
        substitutions: Vec::new(),
        original_pred,
        adversarial_pred: original_pred,
        success: false,
        model_queries: queries,
    };
    if attackable.is_empty() {
        return Ok(record);
    }

    // saliency of every visible position (one query each)
    let mut saliencies = vec![0.0; n];
    for (i, s) in saliencies.iter_mut().enumerate() {
        let mut replaced = content.clone();
        replaced[i] = data::UNK;
        let p = ctx.query(&replaced, &mut queries)?;
        *s = p_orig - p[original_pred];
    }
    let phi = saliency_weights(&saliencies);

    // best substitute and dP* per attackable position, on the original text
    let mut choices: Vec<(usize, usize, String, f64)> = Vec::new(); // (pos, sub id, sub word, dP*)
    for &i in &attackable {
        let candidates = lexicon.candidates(&words[i]).expect("attackable");
        let mut best: Option<(usize, String, f64)> = None;
        for cand in candidates {
            let cid = ctx.vocab.id(cand);
            let mut replaced = content.clone();
            replaced[i] = cid;
            let p = ctx.query(&replaced, &mut queries)?;
            let drop = p_orig - p[original_pred];
            if best.as_ref().map(|(_, _, d)| drop > *d).unwrap_or(true) {
                best = Some((cid, cand.clone(), drop));
            }
        }
        let (cid, cand, drop) = best.expect("non-empty candidates");
        choices.push((i, cid, cand, drop));
    }

    // visit order: descending H = phi * dP*, earlier positions first on ties
    let mut order: Vec<usize> = (0..choices.len()).collect();
    order.sort_by(|a, b| {
        let ha = phi[choices[*a].0] * choices[*a].3;
        let hb = phi[choices[*b].0] * choices[*b].3;
        hb.partial_cmp(&ha)
            .unwrap()
            .then(choices[*a].0.cmp(&choices[*b].0))
    });

    let budget = ((max_substitution_frac * attackable.len() as f64).ceil() as usize)
        .min(attackable.len());
    let mut current_ids = content;
    let mut current_words = words.clone();
    for &ci in order.iter().take(budget) {
        let (pos, cid, ref cand, _) = choices[ci];
        current_ids[pos] = cid;
        record.substitutions.push(Substitution {
            position: pos,
            original: current_words[pos].clone(),
            substitute: cand.clone(),
        });
        current_words[pos] = cand.clone();
        let p = ctx.query(&current_ids, &mut queries)?;
        record.adversarial_pred = train::argmax_lowest(&p);
        if record.adversarial_pred != original_pred {
            record.success = true;
            break;
        }
    }
    record.adversarial_text = current_words.join(" ");
    record.model_queries = queries;
    Ok(record)
}

/// Aggregate attack outcome over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// successes / attempted, over originally-correct examples only.
    pub rate: f64,
    pub attempted: usize,
    pub successes: usize,
    pub records: Vec<AttackRecord>,
}

/// Attack every example the model originally classifies correctly and report
/// the success rate. Examples the model already gets wrong are skipped (they
/// need no attack); a dataset where nothing is attempted is an error.
pub fn attack_success_rate(
    ctx: &AttackContext,
    examples: &[(String, usize)],
    lexicon: &SynonymLexicon,
    max_substitution_frac: f64,
) -> Result<AttackOutcome> {
    if examples.is_empty() {
        return Err(Error::Data("cannot attack an empty dataset".into()));
    }
    let mut records = Vec::new();
    let mut successes = 0usize;
    for (id, (text, gold)) in examples.iter().enumerate() {
        let words = data::tokenize(text);
        if words.is_empty() {
            continue;
        }
        let content: Vec<usize> = words.iter().map(|w| ctx.vocab.id(w)).collect();
        let mut probe_queries = 0;
        let p = ctx.query(&content, &mut probe_queries)?;
        if train::argmax_lowest(&p) != *gold {
            continue; // originally misclassified; not attempted
        }
        let rec = pwws_attack(ctx, id, text, lexicon, max_substitution_frac)?;
        successes += usize::from(rec.success);
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data(
            "no examples were attempted: the model classifies none of them correctly".into(),
        ));
    }
    Ok(AttackOutcome {
        rate: successes as f64 / records.len() as f64,
        attempted: records.len(),
        successes,
        records,
    })
}

/// Write records as JSON lines, one per example.
pub fn write_records(path: &Path, records: &[AttackRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<AttackRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Label-preserving lexicon for a synthetic keyword task: every filler word
/// maps to `n_synonyms` words from its own topic cluster, so substitutions
/// stay in-distribution; the keyword itself gets no entry, so no substitution
/// can change the true label.
pub fn synthetic_lexicon(
    task: &crate::data::SyntheticTask,
    n_synonyms: usize,
    seed: u64,
) -> Result<SynonymLexicon> {
    use rand::Rng;
    let mut rng_ = crate::rng::stream_rng(seed, crate::rng::stream::DATA_GEN);
    let mut lex = SynonymLexicon::new();
    for pool in &task.topic_words {
        if pool.len() < n_synonyms + 1 {
            return Err(Error::Config(format!(
                "topic of {} words cannot offer {n_synonyms} synonyms",
                pool.len()
            )));
        }
        for w in pool {
            let mut cands: Vec<String> = Vec::with_capacity(n_synonyms);
            while cands.len() < n_synonyms {
                let c = &pool[rng_.gen_range(0..pool.len())];
                if c != w && !cands.contains(c) {
                    cands.push(c.clone());
                }
            }
            lex.insert(w, cands)?;
        }
    }
    Ok(lex)
}
