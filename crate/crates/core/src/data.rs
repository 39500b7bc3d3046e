//! Tokenization, dataset ingestion, and synthetic task generation.
//!
//! Tokenization is word-level: text is lowercased and split on whitespace and
//! punctuation. That keeps the substitution attack whole-word and makes
//! desk-scale vocabularies trivial; it is deliberately simpler than the
//! subword schemes of full-scale encoders.
//!
//! The synthetic generator is the stand-in for real benchmark tasks: labels
//! are computed by an explicit rule, so any model score can be checked against
//! a ground-truth oracle, and the "unlabeled" pretraining corpus is drawn from
//! the same token distribution as the labeled splits.

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::{self, ChaCha8Rng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

/// Number of reserved ids (`PAD..=MASK`). Corpus tokens start here.
pub const N_SPECIAL: usize = 5;

const SPECIAL_NAMES: [&str; N_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Word-level vocabulary with dense ids and fixed special tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Lowercase and split on anything that is not alphanumeric. Punctuation
/// separates words and is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Vocab {
    /// Build from a token frequency census: the `max_size - N_SPECIAL` most
    /// frequent words are kept, ties broken lexicographically.
    pub fn build(corpus: impl IntoIterator<Item = String>, max_size: usize) -> Result<Vocab> {
        if max_size <= N_SPECIAL {
            return Err(Error::Config(format!(
                "vocab max_size {max_size} leaves no room after {N_SPECIAL} special tokens"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for line in corpus {
            for tok in tokenize(&line) {
                any = true;
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - N_SPECIAL);

        let mut id_to_token: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    /// Vocabulary over an explicit word list (synthetic tasks).
    pub fn from_words(words: &[String]) -> Vocab {
        let mut id_to_token: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words.iter().cloned());
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    /// Id for a word, falling back to `UNK`.
    pub fn id(&self, word: &str) -> usize {
        self.token_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.token_to_id.contains_key(word)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Non-special words in id order.
    pub fn content_words(&self) -> impl Iterator<Item = &str> {
        self.id_to_token[N_SPECIAL..].iter().map(String::as_str)
    }
}

/// Fixed-length encoding of one text (or pair): `[CLS] a... [SEP] b... [SEP]`,
/// right-padded with `PAD` and mask 0 on the padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

/// Encode a text (optionally a pair) to exactly `max_seq_len` positions.
/// Over-long inputs are truncated longest-segment-first.
pub fn encode(text: &str, vocab: &Vocab, max_seq_len: usize, pair: Option<&str>) -> Result<Encoded> {
    if max_seq_len < 3 {
        return Err(Error::Config(format!(
            "max_seq_len {max_seq_len} cannot hold [CLS] token [SEP]"
        )));
    }
    let mut a: Vec<usize> = tokenize(text).iter().map(|w| vocab.id(w)).collect();
    let mut b: Vec<usize> = pair
        .map(|p| tokenize(p).iter().map(|w| vocab.id(w)).collect())
        .unwrap_or_default();

    let n_sep = if pair.is_some() { 2 } else { 1 };
    let budget = max_seq_len - 1 - n_sep; // room for content tokens
    while a.len() + b.len() > budget {
        // trim the currently longer segment
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }

    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(CLS);
    ids.extend_from_slice(&a);
    ids.push(SEP);
    if pair.is_some() {
        ids.extend_from_slice(&b);
        ids.push(SEP);
    }
    let used = ids.len();
    ids.resize(max_seq_len, PAD);
    let mut mask = vec![1u8; used];
    mask.resize(max_seq_len, 0);
    Ok(Encoded {
        token_ids: ids,
        attention_mask: mask,
    })
}

/// Stack encoded examples into a model batch.
pub fn batch_of(examples: &[&Encoded]) -> Result<TokenBatch> {
    if examples.is_empty() {
        return Err(Error::Data("cannot batch zero examples".into()));
    }
    let seq = examples[0].token_ids.len();
    let mut ids = Vec::with_capacity(examples.len() * seq);
    let mut mask = Vec::with_capacity(examples.len() * seq);
    for e in examples {
        if e.token_ids.len() != seq {
            return Err(Error::Dimension(format!(
                "ragged batch: {} vs {} positions",
                e.token_ids.len(),
                seq
            )));
        }
        ids.extend_from_slice(&e.token_ids);
        mask.extend_from_slice(&e.attention_mask);
    }
    TokenBatch::new(examples.len(), seq, ids, mask)
}

// ── Labeled datasets ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleSentence,
    SentencePair,
    Regression,
}

/// Class index for classification tasks, float target for regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Value(_) => None,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Label::Class(c) => *c as f64,
            Label::Value(v) => *v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub text: String,
    pub text_pair: Option<String>,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub task_kind: TaskKind,
    pub n_classes: usize,
    pub examples: Vec<Example>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().flat_map(|e| {
            std::iter::once(e.text.as_str()).chain(e.text_pair.as_deref())
        })
    }
}

// ── TSV ingestion ───────────────────────────────────────────────────────

/// Column roles for a GLUE-style TSV file with a header row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsvSchema {
    pub text_column: String,
    #[serde(default)]
    pub pair_column: Option<String>,
    pub label_column: String,
    pub task_kind: TaskKind,
    pub n_classes: usize,
    /// When true a malformed row aborts the load; otherwise it is reported
    /// to stderr with its line number and skipped.
    #[serde(default)]
    pub strict: bool,
}

/// Parse a UTF-8, header-rowed, tab-separated file into a dataset. CRLF and
/// LF line endings parse identically.
pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<LabeledDataset> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut lines = raw.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let col_index = |name: &str| -> Result<usize> {
        cols.iter().position(|c| *c == name).ok_or_else(|| {
            Error::Schema(format!(
                "{}: header {:?} has no column '{name}'",
                path.display(),
                cols
            ))
        })
    };
    let ti = col_index(&schema.text_column)?;
    let pi = schema
        .pair_column
        .as_ref()
        .map(|c| col_index(c))
        .transpose()?;
    let li = col_index(&schema.label_column)?;

    let mut examples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2; // 1-based, after header
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_row = || -> Result<Example> {
            let need = ti.max(li).max(pi.unwrap_or(0));
            if fields.len() <= need {
                return Err(Error::Data(format!(
                    "line {lineno}: expected at least {} columns, found {}",
                    need + 1,
                    fields.len()
                )));
            }
            let label = match schema.task_kind {
                TaskKind::Regression => Label::Value(fields[li].parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "line {lineno}: label '{}' is not a number",
                        fields[li]
                    ))
                })?),
                _ => {
                    let c = fields[li].parse::<usize>().map_err(|_| {
                        Error::Data(format!(
                            "line {lineno}: label '{}' is not a class index",
                            fields[li]
                        ))
                    })?;
                    if c >= schema.n_classes {
                        return Err(Error::Data(format!(
                            "line {lineno}: class {c} out of range for {} classes",
                            schema.n_classes
                        )));
                    }
                    Label::Class(c)
                }
            };
            Ok(Example {
                text: fields[ti].to_string(),
                text_pair: pi.map(|i| fields[i].to_string()),
                label,
            })
        };
        match parse_row() {
            Ok(ex) => examples.push(ex),
            Err(e) if schema.strict => return Err(e),
            Err(e) => eprintln!("{}: skipping malformed row: {e}", path.display()),
        }
    }
    Ok(LabeledDataset {
        task_kind: schema.task_kind,
        n_classes: schema.n_classes,
        examples,
    })
}

// ── Synthetic tasks ─────────────────────────────────────────────────────

/// Labeling rules whose ground truth is recomputable from the text alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticRule {
    /// Positive iff the designated keyword occurs at least once.
    KeywordPresence,
    /// Positive iff the designated keyword occurs an odd number of times.
    KeywordParity,
    /// Sentence pair; positive iff the two sentences share a content word.
    PairOverlap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub rule: SyntheticRule,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_pretrain: usize,
    /// Probability of the positive class at generation time.
    pub class_balance: f64,
    /// Fraction of *training* labels flipped after generation. Dev labels
    /// stay clean so scores measure the rule, not the noise pattern.
    pub noise_rate: f64,
    /// Filler words are partitioned into this many topic clusters and each
    /// sentence draws its fillers from one cluster. Topics give the corpus
    /// co-occurrence structure, which is what makes masked-token prediction
    /// learnable; they never affect the rule labels. 1 = unstructured.
    #[serde(default = "default_topics")]
    pub n_topics: usize,
    pub seed: u64,
}

fn default_topics() -> usize {
    8
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= N_SPECIAL + 2 {
            return Err(Error::Config(format!(
                "synthetic vocab_size {} leaves too few content words",
                self.vocab_size
            )));
        }
        if self.seq_len < 4 {
            return Err(Error::Config("synthetic seq_len must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(Error::Config("class_balance must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config("noise_rate must lie in [0,1]".into()));
        }
        if self.n_topics == 0 {
            return Err(Error::Config("n_topics must be at least 1".into()));
        }
        if (self.vocab_size - N_SPECIAL - 1) / self.n_topics < 2 {
            return Err(Error::Config(format!(
                "n_topics {} leaves fewer than 2 filler words per topic",
                self.n_topics
            )));
        }
        Ok(())
    }
}

/// A generated task: vocabulary, labeled splits, unlabeled pretraining text,
/// and the rule parameters needed to recompute every label.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub vocab: Vocab,
    pub train: LabeledDataset,
    pub dev: LabeledDataset,
    pub pretrain_corpus: Vec<String>,
    /// The word whose presence/parity drives keyword rules.
    pub keyword: String,
    /// Filler words grouped by topic cluster.
    pub topic_words: Vec<Vec<String>>,
}

impl SyntheticTask {
    /// Ground-truth label under the generating rule (ignores any injected
    /// noise). This is the independent oracle the tests check against.
    pub fn oracle_label(&self, text: &str, pair: Option<&str>) -> usize {
        oracle_label(self.spec.rule, &self.keyword, text, pair)
    }
}

pub fn oracle_label(rule: SyntheticRule, keyword: &str, text: &str, pair: Option<&str>) -> usize {
    let words = tokenize(text);
    match rule {
        SyntheticRule::KeywordPresence => usize::from(words.iter().any(|w| w == keyword)),
        SyntheticRule::KeywordParity => {
            usize::from(words.iter().filter(|w| *w == keyword).count() % 2 == 1)
        }
        SyntheticRule::PairOverlap => {
            let b = tokenize(pair.unwrap_or(""));
            usize::from(words.iter().any(|w| b.contains(w)))
        }
    }
}

/// Deterministically generate a synthetic task from its spec.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    if spec.rule == SyntheticRule::PairOverlap && spec.n_topics < 2 {
        return Err(Error::Config(
            "pair_overlap needs n_topics >= 2 so negative pairs draw from disjoint pools".into(),
        ));
    }
    let n_content = spec.vocab_size - N_SPECIAL;
    let width = (n_content as f64).log10().ceil().max(1.0) as usize;
    let words: Vec<String> = (0..n_content).map(|i| format!("w{i:0width$}")).collect();
    let vocab = Vocab::from_words(&words);

    let mut gen_rng = rng::stream_rng(spec.seed, rng::stream::DATA_GEN);
    // keyword: a fixed content word reserved from the filler distribution
    let keyword_idx = gen_rng.gen_range(0..n_content);
    let keyword = words[keyword_idx].clone();
    let filler: Vec<&String> = words
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != keyword_idx)
        .map(|(_, w)| w)
        .collect();

    // contiguous filler chunks form the topic clusters
    let per_topic = filler.len() / spec.n_topics;
    let topic_words: Vec<Vec<String>> = (0..spec.n_topics)
        .map(|t| {
            let start = t * per_topic;
            let end = if t == spec.n_topics - 1 {
                filler.len()
            } else {
                start + per_topic
            };
            filler[start..end].iter().map(|w| (*w).clone()).collect()
        })
        .collect();

    // content words per sentence, leaving room for [CLS]/[SEP]
    let body_len = spec.seq_len.saturating_sub(2).max(2);

    let make_example = |rng_: &mut ChaCha8Rng| -> Example {
        let positive = rng_.gen::<f64>() < spec.class_balance;
        let draw = |rng_: &mut ChaCha8Rng, topic: usize| -> String {
            let pool = &topic_words[topic];
            pool[rng_.gen_range(0..pool.len())].clone()
        };
        match spec.rule {
            SyntheticRule::KeywordPresence => {
                let topic = rng_.gen_range(0..spec.n_topics);
                let mut toks: Vec<String> =
                    (0..body_len).map(|_| draw(rng_, topic)).collect();
                if positive {
                    // 1..=3 occurrences; the label only cares about presence
                    let occurrences = rng_.gen_range(1..=3usize.min(body_len / 3).max(1));
                    let mut positions: Vec<usize> = (0..body_len).collect();
                    rng::shuffle(&mut positions, rng_);
                    for &p in positions.iter().take(occurrences) {
                        toks[p] = keyword.clone();
                    }
                }
                Example {
                    text: toks.join(" "),
                    text_pair: None,
                    label: Label::Class(usize::from(positive)),
                }
            }
            SyntheticRule::KeywordParity => {
                let topic = rng_.gen_range(0..spec.n_topics);
                let max_pairs = (body_len - 1) / 2;
                let occurrences = if positive {
                    1 + 2 * rng_.gen_range(0..=max_pairs.saturating_sub(1).min(1))
                } else {
                    2 * rng_.gen_range(0..=1usize)
                };
                let mut toks: Vec<String> =
                    (0..body_len).map(|_| draw(rng_, topic)).collect();
                let mut positions: Vec<usize> = (0..body_len).collect();
                rng::shuffle(&mut positions, rng_);
                for &p in positions.iter().take(occurrences) {
                    toks[p] = keyword.clone();
                }
                Example {
                    text: toks.join(" "),
                    text_pair: None,
                    label: Label::Class(usize::from(positive)),
                }
            }
            SyntheticRule::PairOverlap => {
                // distinct topics guarantee negatives share no word
                let half = (body_len / 2).max(2);
                let ta = rng_.gen_range(0..spec.n_topics);
                let tb = (ta + 1 + rng_.gen_range(0..spec.n_topics - 1)) % spec.n_topics;
                let a: Vec<String> = (0..half).map(|_| draw(rng_, ta)).collect();
                let mut b: Vec<String> = (0..half).map(|_| draw(rng_, tb)).collect();
                if positive {
                    let from = rng_.gen_range(0..a.len());
                    let to = rng_.gen_range(0..b.len());
                    b[to] = a[from].clone();
                }
                Example {
                    text: a.join(" "),
                    text_pair: Some(b.join(" ")),
                    label: Label::Class(usize::from(positive)),
                }
            }
        }
    };

    let task_kind = match spec.rule {
        SyntheticRule::PairOverlap => TaskKind::SentencePair,
        _ => TaskKind::SingleSentence,
    };

    let mut train_examples: Vec<Example> = (0..spec.n_train)
        .map(|_| make_example(&mut gen_rng))
        .collect();
    let dev_examples: Vec<Example> = (0..spec.n_dev).map(|_| make_example(&mut gen_rng)).collect();
    let pretrain_corpus: Vec<String> = (0..spec.n_pretrain)
        .map(|_| {
            let e = make_example(&mut gen_rng);
            match &e.text_pair {
                Some(p) => format!("{} {}", e.text, p),
                None => e.text,
            }
        })
        .collect();

    // flip an exact noise_rate fraction of train labels
    let n_flip = (spec.noise_rate * spec.n_train as f64).round() as usize;
    let mut idx: Vec<usize> = (0..train_examples.len()).collect();
    rng::shuffle(&mut idx, &mut gen_rng);
    for &i in idx.iter().take(n_flip) {
        if let Label::Class(c) = train_examples[i].label {
            train_examples[i].label = Label::Class(1 - c);
        }
    }

    Ok(SyntheticTask {
        spec: spec.clone(),
        vocab,
        train: LabeledDataset {
            task_kind,
            n_classes: 2,
            examples: train_examples,
        },
        dev: LabeledDataset {
            task_kind,
            n_classes: 2,
            examples: dev_examples,
        },
        pretrain_corpus,
        keyword,
        topic_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let v = Vocab::build(["a a b".to_string()], 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), N_SPECIAL); // most frequent first
        assert_eq!(v.id("b"), N_SPECIAL + 1);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocab_truncates_and_is_deterministic() {
        let corpus = || ["c c c b b a d d d d".to_string()];
        let v1 = Vocab::build(corpus(), 7).unwrap();
        let v2 = Vocab::build(corpus(), 7).unwrap();
        assert_eq!(v1.id_to_token, v2.id_to_token);
        // top-2 kept: d (4), c (3)
        assert!(v1.contains("d") && v1.contains("c"));
        assert!(!v1.contains("a"));
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        assert!(matches!(
            Vocab::build(Vec::<String>::new(), 10),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Vocab::build(["...".to_string()], 10),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn encode_empty_text() {
        let v = Vocab::build(["x".to_string()], 6).unwrap();
        let e = encode("", &v, 5, None).unwrap();
        assert_eq!(e.token_ids, vec![CLS, SEP, PAD, PAD, PAD]);
        assert_eq!(e.attention_mask, vec![1, 1, 0, 0, 0]);
    }

    #[test]
    fn encode_pair_has_two_separators() {
        let v = Vocab::build(["x y z w".to_string()], 10).unwrap();
        let e = encode("x y", &v, 10, Some("z")).unwrap();
        let seps = e.token_ids.iter().filter(|t| **t == SEP).count();
        assert_eq!(seps, 2);
        let mask_sum: usize = e.attention_mask.iter().map(|m| *m as usize).sum();
        let non_pad = e.token_ids.iter().filter(|t| **t != PAD).count();
        assert_eq!(mask_sum, non_pad);
    }

    #[test]
    fn encode_truncates_longest_first() {
        let v = Vocab::build(["a b c d e f g h".to_string()], 20).unwrap();
        // budget of 5 = CLS + 2 SEP leaves 2 content slots; the longer first
        // segment is trimmed before the shorter pair
        let e = encode("a b c d", &v, 5, Some("e")).unwrap();
        assert_eq!(e.token_ids[0], CLS);
        // one token from a, one from b
        assert_eq!(e.token_ids.iter().filter(|t| **t == SEP).count(), 2);
        let toks: Vec<usize> = e
            .token_ids
            .iter()
            .copied()
            .filter(|t| *t >= N_SPECIAL)
            .collect();
        assert_eq!(toks, vec![v.id("a"), v.id("e")]);
    }

    #[test]
    fn encode_never_exceeds_vocab_and_pads_have_mask_zero() {
        let v = Vocab::build(["q r s".to_string()], 8).unwrap();
        let e = encode("q mystery r", &v, 8, None).unwrap();
        assert!(e.token_ids.iter().all(|t| *t < v.len()));
        for (t, m) in e.token_ids.iter().zip(&e.attention_mask) {
            if *t == PAD {
                assert_eq!(*m, 0);
            }
        }
    }

    fn write_file(dir: &Path, name: &str, contents: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(contents).unwrap();
        p
    }

    fn schema() -> TsvSchema {
        TsvSchema {
            text_column: "sentence".into(),
            pair_column: None,
            label_column: "label".into(),
            task_kind: TaskKind::SingleSentence,
            n_classes: 2,
            strict: false,
        }
    }

    #[test]
    fn tsv_well_formed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "t.tsv",
            b"sentence\tlabel\nhello there\t0\nanother one\t1\nlast row\t0\n",
        );
        let ds = load_tsv(&p, &schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.examples[1].label, Label::Class(1));
    }

    #[test]
    fn tsv_bad_label_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "t.tsv", b"sentence\tlabel\nok\t0\nbad\tx\n");
        let mut s = schema();
        s.strict = true;
        let err = load_tsv(&p, &s).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn tsv_crlf_and_lf_parse_identically() {
        let dir = tempfile::tempdir().unwrap();
        let lf = write_file(dir.path(), "lf.tsv", b"sentence\tlabel\na b\t0\nc d\t1\n");
        let crlf = write_file(
            dir.path(),
            "crlf.tsv",
            b"sentence\tlabel\r\na b\t0\r\nc d\t1\r\n",
        );
        let d1 = load_tsv(&lf, &schema()).unwrap();
        let d2 = load_tsv(&crlf, &schema()).unwrap();
        assert_eq!(d1.len(), d2.len());
        for (a, b) in d1.examples.iter().zip(&d2.examples) {
            assert_eq!(a.text, b.text);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn tsv_missing_file_and_header() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_tsv(&dir.path().join("nope.tsv"), &schema()),
            Err(Error::Io(_))
        ));
        let p = write_file(dir.path(), "h.tsv", b"wrong\theader\n1\t2\n");
        assert!(matches!(load_tsv(&p, &schema()), Err(Error::Schema(_))));
    }

    fn spec(rule: SyntheticRule) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: 60,
            seq_len: 16,
            rule,
            n_train: 300,
            n_dev: 100,
            n_pretrain: 50,
            class_balance: 0.5,
            noise_rate: 0.0,
            n_topics: 4,
            seed: 99,
        }
    }

    #[test]
    fn synthetic_labels_match_oracle_when_noise_free() {
        for rule in [
            SyntheticRule::KeywordPresence,
            SyntheticRule::KeywordParity,
            SyntheticRule::PairOverlap,
        ] {
            let task = generate_synthetic(&spec(rule)).unwrap();
            for split in [&task.train, &task.dev] {
                for ex in &split.examples {
                    let want = task.oracle_label(&ex.text, ex.text_pair.as_deref());
                    assert_eq!(ex.label, Label::Class(want), "rule {rule:?}");
                }
            }
        }
    }

    #[test]
    fn synthetic_class_balance_within_binomial_bound() {
        let mut s = spec(SyntheticRule::KeywordPresence);
        s.n_train = 10_000;
        let task = generate_synthetic(&s).unwrap();
        let pos = task
            .train
            .examples
            .iter()
            .filter(|e| e.label == Label::Class(1))
            .count() as f64
            / 10_000.0;
        assert!((0.45..=0.55).contains(&pos), "positive fraction {pos}");
    }

    #[test]
    fn synthetic_same_seed_identical() {
        let a = generate_synthetic(&spec(SyntheticRule::KeywordPresence)).unwrap();
        let b = generate_synthetic(&spec(SyntheticRule::KeywordPresence)).unwrap();
        assert_eq!(a.keyword, b.keyword);
        for (x, y) in a.train.examples.iter().zip(&b.train.examples) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.label, y.label);
        }
        assert_eq!(a.pretrain_corpus, b.pretrain_corpus);
    }

    #[test]
    fn synthetic_noise_flips_exact_fraction_of_train() {
        let mut s = spec(SyntheticRule::KeywordPresence);
        s.noise_rate = 0.1;
        s.n_train = 200;
        let task = generate_synthetic(&s).unwrap();
        let flipped = task
            .train
            .examples
            .iter()
            .filter(|e| {
                let want = task.oracle_label(&e.text, None);
                e.label != Label::Class(want)
            })
            .count();
        assert_eq!(flipped, 20);
        // dev stays clean
        for e in &task.dev.examples {
            assert_eq!(e.label, Label::Class(task.oracle_label(&e.text, None)));
        }
    }
}
