//! Tokenization, vocabulary, JSONL corpus I/O and synthetic-data generation.
//!
//! Tokens are whitespace-delimited words. The vocabulary reserves four
//! special ids ([`PAD`], [`BOS`], [`SEP`], [`UNK`]); packing inserts the
//! specials, tokenization never does.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const UNK: TokenId = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<sep>", "<unk>"];

/// Bidirectional token ↔ id map with the four specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

impl Vocab {
    /// A vocabulary holding only the specials.
    pub fn specials_only() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { index, tokens }
    }

    /// Builds a vocabulary from an ordered token list. The first four entries
    /// must be the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Invalid(
                "vocabulary must start with <pad>, <bos>, <sep>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { index, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when absent. Special-token strings appearing
    /// in text are not specials and also map to [`UNK`].
    pub fn id_of(&self, token: &str) -> TokenId {
        match self.index.get(token) {
            Some(&id) if id >= 4 => id,
            _ => UNK,
        }
    }

    pub fn lookup(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Joins the surface forms of `seq` with single spaces.
    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.ids()
            .iter()
            .map(|&id| self.lookup(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Plain-text form: one token per line, line number = id.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

/// Non-empty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySegment);
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A (hypothesis, source, reference) text triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriplet {
    pub hyp: String,
    pub src: String,
    #[serde(rename = "ref")]
    pub reference: String,
}

impl RawTriplet {
    pub fn new(
        hyp: impl Into<String>,
        src: impl Into<String>,
        reference: impl Into<String>,
    ) -> Result<Self> {
        let t = Self {
            hyp: hyp.into(),
            src: src.into(),
            reference: reference.into(),
        };
        if [&t.hyp, &t.src, &t.reference]
            .iter()
            .any(|s| s.trim().is_empty())
        {
            return Err(Error::EmptySegment);
        }
        Ok(t)
    }
}

/// A tokenized triple with its quality label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub hyp: TokenSeq,
    pub src: TokenSeq,
    pub reference: TokenSeq,
    pub score: f64,
}

impl ScoredExample {
    pub fn new(hyp: TokenSeq, src: TokenSeq, reference: TokenSeq, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score {score}")));
        }
        Ok(Self {
            hyp,
            src,
            reference,
            score,
        })
    }

    pub fn from_triplet(t: &RawTriplet, score: f64, vocab: &Vocab) -> Result<Self> {
        Self::new(
            tokenize(&t.hyp, vocab)?,
            tokenize(&t.src, vocab)?,
            tokenize(&t.reference, vocab)?,
            score,
        )
    }
}

/// Parameters of the word- and span-dropping degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradePolicy {
    /// Fraction of hypotheses selected for degradation.
    pub portion: f64,
    /// Per-token drop probability.
    pub word_drop: f64,
    /// Longest span removed by span dropping; 0 disables it.
    pub max_span: usize,
    pub seed: u64,
}

impl Default for DegradePolicy {
    fn default() -> Self {
        Self {
            portion: 0.5,
            word_drop: 0.15,
            max_span: 4,
            seed: 0,
        }
    }
}

impl DegradePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.portion) {
            return Err(Error::Invalid(format!("degrade portion {} not in [0,1]", self.portion)));
        }
        if !(0.0..1.0).contains(&self.word_drop) {
            return Err(Error::Invalid(format!("word drop {} not in [0,1)", self.word_drop)));
        }
        Ok(())
    }
}

/// Builds a vocabulary of at most `max_size` entries: the specials followed by
/// the most frequent corpus tokens, ties broken lexicographically.
pub fn build_vocab(corpus: &[RawTriplet], max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if max_size < 4 {
        return Err(Error::Invalid(format!("max_size {max_size} leaves no room for specials")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in corpus {
        for text in [&t.hyp, &t.src, &t.reference] {
            for tok in text.split_whitespace() {
                if !SPECIAL_TOKENS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - 4).map(|(t, _)| t.to_owned()));
    Vocab::from_tokens(tokens)
}

/// Whitespace tokenization with out-of-vocabulary words mapped to [`UNK`].
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenSeq> {
    let ids: Vec<TokenId> = text.split_whitespace().map(|t| vocab.id_of(t)).collect();
    TokenSeq::new(ids)
}

/// Removes the half-open index range `[start, end)` (clamped to the input).
pub fn drop_span<T: Clone>(tokens: &[T], start: usize, end: usize) -> Vec<T> {
    let start = start.min(tokens.len());
    let end = end.clamp(start, tokens.len());
    tokens[..start].iter().chain(&tokens[end..]).cloned().collect()
}

/// Word dropping followed by a single span drop. Never returns an empty
/// sequence: if everything would be removed, the first token survives.
pub fn degrade_tokens<T: Clone, R: Rng + ?Sized>(
    tokens: &[T],
    policy: &DegradePolicy,
    rng: &mut R,
) -> Vec<T> {
    let mut kept: Vec<T> = if policy.word_drop > 0.0 {
        tokens
            .iter()
            .filter(|_| !rng.gen_bool(policy.word_drop))
            .cloned()
            .collect()
    } else {
        tokens.to_vec()
    };
    if policy.max_span > 0 && !kept.is_empty() {
        let width = rng.gen_range(1..=policy.max_span).min(kept.len());
        let start = rng.gen_range(0..=kept.len() - width);
        kept = drop_span(&kept, start, start + width);
    }
    if kept.is_empty() {
        if let Some(first) = tokens.first() {
            kept.push(first.clone());
        }
    }
    kept
}

pub fn degrade<R: Rng + ?Sized>(hyp: &TokenSeq, policy: &DegradePolicy, rng: &mut R) -> TokenSeq {
    TokenSeq(degrade_tokens(hyp.ids(), policy, rng))
}

/// Light noise standing in for machine-translation output: each token is
/// dropped with probability `drop`, then adjacent tokens are swapped with
/// probability `swap`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStub {
    pub drop: f64,
    pub swap: f64,
}

impl Default for NoiseStub {
    fn default() -> Self {
        Self {
            drop: 0.05,
            swap: 0.05,
        }
    }
}

impl NoiseStub {
    pub fn apply<T: Clone, R: Rng + ?Sized>(&self, tokens: &[T], rng: &mut R) -> Vec<T> {
        let mut out: Vec<T> = tokens
            .iter()
            .filter(|_| !rng.gen_bool(self.drop))
            .cloned()
            .collect();
        if out.is_empty() {
            if let Some(first) = tokens.first() {
                out.push(first.clone());
            }
        }
        let mut i = 0;
        while i + 1 < out.len() {
            if rng.gen_bool(self.swap) {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        out
    }
}

/// Number of hypotheses `synthesize_corpus` degrades for a corpus of `n`.
pub fn degraded_count(n: usize, portion: f64) -> usize {
    ((portion * n as f64).ceil() as usize).min(n)
}

/// Synthesizes triplets from (source, reference) pairs: the hypothesis is the
/// reference passed through `stub`, and a seeded selection of exactly
/// `⌈portion·N⌉` hypotheses is additionally degraded.
///
/// Returns the triplets and the sorted indices of the degraded ones.
pub fn synthesize_with(
    parallel: &[(String, String)],
    policy: &DegradePolicy,
    stub: &NoiseStub,
) -> Result<(Vec<RawTriplet>, Vec<usize>)> {
    if parallel.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    policy.validate()?;
    let mut stub_rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(policy.seed ^ 0x5eed_0001);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(policy.seed ^ 0x5eed_0002);

    let n = parallel.len();
    let mut selected: Vec<usize> = index::sample(&mut pick_rng, n, degraded_count(n, policy.portion)).into_vec();
    selected.sort_unstable();
    let mut is_selected = vec![false; n];
    for &i in &selected {
        is_selected[i] = true;
    }

    let mut out = Vec::with_capacity(n);
    for (i, (src, reference)) in parallel.iter().enumerate() {
        let ref_tokens: Vec<&str> = reference.split_whitespace().collect();
        if ref_tokens.is_empty() || src.trim().is_empty() {
            return Err(Error::EmptySegment);
        }
        let mut hyp = stub.apply(&ref_tokens, &mut stub_rng);
        if is_selected[i] {
            hyp = degrade_tokens(&hyp, policy, &mut drop_rng);
        }
        out.push(RawTriplet::new(hyp.join(" "), src.as_str(), reference.as_str())?);
    }
    Ok((out, selected))
}

pub fn synthesize_corpus(
    parallel: &[(String, String)],
    policy: &DegradePolicy,
) -> Result<Vec<RawTriplet>> {
    synthesize_with(parallel, policy, &NoiseStub::default()).map(|(t, _)| t)
}

/// One JSONL corpus line. `src` and `ref` are required keys whose value may be
/// `null` to mark the segment as absent.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct CorpusRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub hyp: String,
    pub src: Option<String>,
    #[serde(rename = "ref")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<f64>,
}

impl CorpusRow {
    pub fn from_triplet(t: &RawTriplet) -> Self {
        Self {
            hyp: t.hyp.clone(),
            src: Some(t.src.clone()),
            reference: Some(t.reference.clone()),
            ..Self::default()
        }
    }

    /// The row as a full triplet; fails when a segment is absent.
    pub fn triplet(&self) -> Result<RawTriplet> {
        match (&self.src, &self.reference) {
            (Some(s), Some(r)) => RawTriplet::new(self.hyp.as_str(), s.as_str(), r.as_str()),
            _ => Err(Error::FormatSegmentMismatch("row lacks a source or reference".into())),
        }
    }

    fn parse(line: &str, line_no: usize) -> Result<Self> {
        let malformed = |message: String| Error::MalformedLine {
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("expected a JSON object".into()))?;
        let required = |key: &str| {
            obj.get(key).ok_or_else(|| Error::MissingField {
                field: key.into(),
                line: line_no,
            })
        };
        let opt_string = |key: &str, v: &Value| match v {
            Value::Null => Ok(None),
            Value::String(s) => Ok(Some(s.clone())),
            _ => Err(malformed(format!("`{key}` must be a string or null"))),
        };
        let opt_number = |key: &str| match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() => Ok(Some(x)),
                _ => Err(malformed(format!("`{key}` must be a finite number"))),
            },
        };
        let hyp = match required("hyp")? {
            Value::String(s) => s.clone(),
            _ => return Err(malformed("`hyp` must be a string".into())),
        };
        let src = opt_string("src", required("src")?)?;
        let reference = opt_string("ref", required("ref")?)?;
        let id = match obj.get("id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            Some(_) => return Err(malformed("`id` must be a string or number".into())),
        };
        let group = obj.get("group").map(|v| opt_string("group", v)).transpose()?.flatten();
        Ok(Self {
            id,
            group,
            hyp,
            src,
            reference,
            score: opt_number("score")?,
            gold: opt_number("gold")?,
        })
    }
}

/// Reads a JSONL corpus. Blank lines are skipped; line numbers are 1-based.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<CorpusRow>> {
    read_jsonl_from(BufReader::new(fs::File::open(path)?))
}

pub fn read_jsonl_from(reader: impl BufRead) -> Result<Vec<CorpusRow>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(CorpusRow::parse(&line, i + 1)?);
    }
    Ok(rows)
}

pub fn write_jsonl(rows: &[CorpusRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_jsonl_to(rows, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_jsonl_to(rows: &[CorpusRow], mut out: impl Write) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads `(src, ref)` pairs: JSONL with string keys `src` and `ref`.
pub fn read_parallel(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        let field = |k: &str| {
            v.get(k)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| Error::MissingField {
                    field: k.into(),
                    line: i + 1,
                })
        };
        pairs.push((field("src")?, field("ref")?));
    }
    Ok(pairs)
}
