//! Rank-based pseudo-labels: score triplets with one or more scorers, average
//! the raw scores, replace them by rank values and z-normalize the ranks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{RawTriplet, ScoredExample, Vocab};
use crate::error::{Error, Result};
use crate::model::{score, ModelConfig, ModelParams};
use crate::mra::MaskVariant;
use crate::packing::TaskFormat;

/// Rank values: higher score gives a higher rank, ranks start at 0 and tied
/// scores share the average of the positions they span.
pub fn rank_indices(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    Ok(ranks)
}

/// `(v − μ)/σ` with the population standard deviation; all zeros when σ = 0.
pub fn z_normalize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

pub fn rank_label(scores: &[f64]) -> Result<Vec<f64>> {
    Ok(z_normalize(&rank_indices(scores)?))
}

/// Elementwise mean of aligned score lists.
pub fn ensemble_scores(lists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = lists.first().ok_or_else(|| Error::Invalid("no score lists to ensemble".into()))?;
    if let Some(other) = lists.iter().find(|l| l.len() != first.len()) {
        return Err(Error::LengthMismatch(format!(
            "score lists of length {} and {}",
            first.len(),
            other.len()
        )));
    }
    let k = lists.len() as f64;
    Ok((0..first.len())
        .map(|i| lists.iter().map(|l| l[i]).sum::<f64>() / k)
        .collect())
}

/// How raw scores become training labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelingScheme {
    /// Rank values, then z-normalization.
    #[default]
    Rank,
    /// Z-normalization of the raw scores.
    ZNorm,
}

impl LabelingScheme {
    pub fn apply(self, scores: &[f64]) -> Result<Vec<f64>> {
        match self {
            LabelingScheme::Rank => rank_label(scores),
            LabelingScheme::ZNorm => {
                if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("score {bad}")));
                }
                Ok(z_normalize(scores))
            }
        }
    }
}

impl fmt::Display for LabelingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelingScheme::Rank => "rank",
            LabelingScheme::ZNorm => "z-norm",
        })
    }
}

impl FromStr for LabelingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(LabelingScheme::Rank),
            "z-norm" | "znorm" | "z_norm" => Ok(LabelingScheme::ZNorm),
            other => Err(Error::Invalid(format!("unknown labeling scheme {other:?}"))),
        }
    }
}

/// A model used to produce raw scores.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'m> {
    pub params: &'m ModelParams,
    pub config: &'m ModelConfig,
}

impl<'m> From<&'m Checkpoint> for Scorer<'m> {
    fn from(ck: &'m Checkpoint) -> Self {
        Self {
            params: &ck.params,
            config: &ck.config,
        }
    }
}

/// Scores every triplet with every scorer, ensembles, labels and attaches the
/// labels. Output order matches input order.
pub fn label_corpus(
    triplets: &[RawTriplet],
    vocab: &Vocab,
    scorers: &[Scorer<'_>],
    format: TaskFormat,
    variant: Option<MaskVariant>,
    scheme: LabelingScheme,
) -> Result<Vec<ScoredExample>> {
    if scorers.is_empty() {
        return Err(Error::Invalid("label_corpus needs at least one scorer".into()));
    }
    if triplets.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tokenized: Vec<ScoredExample> = triplets
        .iter()
        .map(|t| ScoredExample::from_triplet(t, 0.0, vocab))
        .collect::<Result<_>>()?;
    let lists = scorers
        .iter()
        .map(|s| {
            tokenized
                .iter()
                .map(|ex| score(&ex.hyp, Some(&ex.src), Some(&ex.reference), format, s.params, s.config, variant))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = scheme.apply(&ensemble_scores(&lists)?)?;
    Ok(tokenized
        .into_iter()
        .zip(labels)
        .map(|(mut ex, q)| {
            ex.score = q;
            ex
        })
        .collect())
}
