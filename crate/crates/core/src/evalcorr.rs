//! Segment-level correlation between metric scores and gold judgments:
//! the relative-ranking Kendall variant, Pearson's r, and per-group reports.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, CorpusRow, Vocab};
use crate::error::{Error, Result};
use crate::labeling::Scorer;
use crate::model::score;
use crate::mra::MaskVariant;
use crate::packing::TaskFormat;

/// How a metric tie on a preference pair counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiePolicy {
    #[default]
    Discordant,
    Excluded,
}

impl FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discordant" => Ok(TiePolicy::Discordant),
            "excluded" => Ok(TiePolicy::Excluded),
            other => Err(Error::Invalid(format!("unknown tie policy {other:?}"))),
        }
    }
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::Discordant => "discordant",
            TiePolicy::Excluded => "excluded",
        })
    }
}

/// Metric scores of a human-preferred and a dispreferred hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingPair {
    pub better: f64,
    pub worse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOutcome {
    Concordant,
    Discordant,
    Tie,
}

impl RankingPair {
    pub fn outcome(&self) -> PairOutcome {
        if self.better > self.worse {
            PairOutcome::Concordant
        } else if self.better < self.worse {
            PairOutcome::Discordant
        } else {
            PairOutcome::Tie
        }
    }
}

/// `(C − D)/(C + D)` over preference pairs.
pub fn kendall_wmt(pairs: &[RankingPair], ties: TiePolicy) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("kendall tau needs at least one pair".into()));
    }
    let (mut c, mut d) = (0usize, 0usize);
    for p in pairs {
        if !(p.better.is_finite() && p.worse.is_finite()) {
            return Err(Error::NonFinite(format!("pair scores {p:?}")));
        }
        match (p.outcome(), ties) {
            (PairOutcome::Concordant, _) => c += 1,
            (PairOutcome::Discordant, _) | (PairOutcome::Tie, TiePolicy::Discordant) => d += 1,
            (PairOutcome::Tie, TiePolicy::Excluded) => {}
        }
    }
    if c + d == 0 {
        return Err(Error::Invalid("every pair is a metric tie".into()));
    }
    Ok((c as f64 - d as f64) / (c + d) as f64)
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Invalid("pearson needs at least two values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `(better, worse)` index pairs whose gold scores differ by more than
/// `threshold`.
pub fn gold_pairs(gold: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..gold.len() {
        for j in i + 1..gold.len() {
            if (gold[i] - gold[j]).abs() > threshold {
                out.push(if gold[i] > gold[j] { (i, j) } else { (j, i) });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    #[default]
    Kendall,
    Pearson,
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kendall" => Ok(Measure::Kendall),
            "pearson" => Ok(Measure::Pearson),
            other => Err(Error::Invalid(format!("unknown measure {other:?}"))),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Kendall => "kendall",
            Measure::Pearson => "pearson",
        })
    }
}

/// A preference between two hypothesis rows, referenced by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRef {
    #[serde(default)]
    pub src_id: Option<String>,
    pub better_hyp: String,
    pub worse_hyp: String,
}

/// Reads a JSONL file of [`PairRef`] lines. Ids may be strings or numbers.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairRef>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let malformed = |message: String| Error::MalformedLine {
            line: line_no,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let id = |key: &str| -> Result<Option<String>> {
            match value.get(key) {
                None | Some(serde_json::Value::Null) => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
                Some(serde_json::Value::Number(n)) => Ok(Some(n.to_string())),
                Some(_) => Err(malformed(format!("`{key}` must be a string or number"))),
            }
        };
        let required = |key: &str| {
            id(key)?.ok_or_else(|| Error::MissingField {
                field: key.into(),
                line: line_no,
            })
        };
        out.push(PairRef {
            src_id: id("src_id")?,
            better_hyp: required("better_hyp")?,
            worse_hyp: required("worse_hyp")?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub ties: TiePolicy,
    /// Minimum gold gap for deriving preference pairs when none are given.
    pub pair_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub value: f64,
    /// Pairs for Kendall, rows for Pearson.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub measure: Measure,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ties: Option<TiePolicy>,
    pub groups: Vec<GroupResult>,
    /// Unweighted mean over groups.
    pub average: f64,
}

impl CorrelationReport {
    /// Aligned plain-text table, one line per group plus the average.
    pub fn to_table(&self) -> String {
        let width = self
            .groups
            .iter()
            .map(|g| g.group.len())
            .chain(["group".len(), "avg".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>8}", "group", self.measure.to_string(), "count");
        for g in &self.groups {
            let _ = writeln!(out, "{:<width$}  {:>9.4}  {:>8}", g.group, g.value, g.count);
        }
        let total: usize = self.groups.iter().map(|g| g.count).sum();
        let _ = writeln!(out, "{:<width$}  {:>9.4}  {:>8}", "avg", self.average, total);
        out
    }
}

/// One scored row for correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: Option<String>,
    pub group: Option<String>,
    pub metric: f64,
    pub gold: Option<f64>,
}

const DEFAULT_GROUP: &str = "all";

fn finish(measure: Measure, ties: Option<TiePolicy>, groups: Vec<GroupResult>) -> Result<CorrelationReport> {
    if groups.is_empty() {
        return Err(Error::Invalid(format!("no group has data for {measure}")));
    }
    let average = groups.iter().map(|g| g.value).sum::<f64>() / groups.len() as f64;
    Ok(CorrelationReport {
        measure,
        ties,
        groups,
        average,
    })
}

/// Correlates metric scores with gold per group. Kendall uses `pairs` when
/// given and otherwise derives pairs from gold gaps.
pub fn correlate(
    rows: &[EvalRow],
    measure: Measure,
    pairs: Option<&[PairRef]>,
    opts: &EvalOptions,
) -> Result<CorrelationReport> {
    let group_of = |r: &EvalRow| r.group.clone().unwrap_or_else(|| DEFAULT_GROUP.into());
    let gold_of = |i: usize| {
        rows[i]
            .gold
            .ok_or_else(|| Error::Invalid(format!("row {} has no gold judgment", i + 1)))
    };
    match (measure, pairs) {
        (Measure::Pearson, _) => {
            let mut by_group: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for (i, r) in rows.iter().enumerate() {
                let slot = by_group.entry(group_of(r)).or_default();
                slot.0.push(r.metric);
                slot.1.push(gold_of(i)?);
            }
            let groups = by_group
                .into_iter()
                .map(|(group, (m, g))| {
                    Ok(GroupResult {
                        value: pearson(&m, &g)?,
                        count: m.len(),
                        group,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            finish(measure, None, groups)
        }
        (Measure::Kendall, Some(refs)) => {
            let index: BTreeMap<&str, usize> = rows
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.id.as_deref().map(|id| (id, i)))
                .collect();
            let lookup = |id: &str| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("pair references unknown hypothesis id {id:?}")))
            };
            let mut by_group: BTreeMap<String, Vec<RankingPair>> = BTreeMap::new();
            for p in refs {
                let (b, w) = (lookup(&p.better_hyp)?, lookup(&p.worse_hyp)?);
                by_group.entry(group_of(&rows[b])).or_default().push(RankingPair {
                    better: rows[b].metric,
                    worse: rows[w].metric,
                });
            }
            kendall_groups(by_group, opts.ties)
        }
        (Measure::Kendall, None) => {
            let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, r) in rows.iter().enumerate() {
                members.entry(group_of(r)).or_default().push(i);
            }
            let mut by_group = BTreeMap::new();
            for (group, idx) in members {
                let gold = idx.iter().map(|&i| gold_of(i)).collect::<Result<Vec<_>>>()?;
                let pairs: Vec<RankingPair> = gold_pairs(&gold, opts.pair_threshold)
                    .into_iter()
                    .map(|(b, w)| RankingPair {
                        better: rows[idx[b]].metric,
                        worse: rows[idx[w]].metric,
                    })
                    .collect();
                if !pairs.is_empty() {
                    by_group.insert(group, pairs);
                }
            }
            kendall_groups(by_group, opts.ties)
        }
    }
}

fn kendall_groups(by_group: BTreeMap<String, Vec<RankingPair>>, ties: TiePolicy) -> Result<CorrelationReport> {
    let groups = by_group
        .into_iter()
        .map(|(group, pairs)| {
            Ok(GroupResult {
                value: kendall_wmt(&pairs, ties)?,
                count: pairs.len(),
                group,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finish(Measure::Kendall, Some(ties), groups)
}

/// Scores every row under `format` and correlates with gold. Returns the
/// report and the metric scores in row order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_metric(
    scorer: Scorer<'_>,
    vocab: &Vocab,
    rows: &[CorpusRow],
    format: TaskFormat,
    variant: Option<MaskVariant>,
    measure: Measure,
    pairs: Option<&[PairRef]>,
    opts: &EvalOptions,
) -> Result<(CorrelationReport, Vec<f64>)> {
    let scores = score_rows(scorer, vocab, rows, format, variant)?;
    let eval_rows: Vec<EvalRow> = rows
        .iter()
        .zip(&scores)
        .map(|(r, &metric)| EvalRow {
            id: r.id.clone(),
            group: r.group.clone(),
            metric,
            gold: r.gold,
        })
        .collect();
    Ok((correlate(&eval_rows, measure, pairs, opts)?, scores))
}

/// Metric scores for JSONL rows; absent segments only matter if `format`
/// needs them.
pub fn score_rows(
    scorer: Scorer<'_>,
    vocab: &Vocab,
    rows: &[CorpusRow],
    format: TaskFormat,
    variant: Option<MaskVariant>,
) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let hyp = tokenize(&r.hyp, vocab)?;
            let src = r.src.as_deref().map(|s| tokenize(s, vocab)).transpose()?;
            let reference = r.reference.as_deref().map(|s| tokenize(s, vocab)).transpose()?;
            score(&hyp, src.as_ref(), reference.as_ref(), format, scorer.params, scorer.config, variant)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(better: f64, worse: f64) -> RankingPair {
        RankingPair { better, worse }
    }

    #[test]
    fn kendall_examples() {
        let agree = [pair(2.0, 1.0), pair(0.5, 0.1)];
        assert_eq!(kendall_wmt(&agree, TiePolicy::Discordant).unwrap(), 1.0);
        let invert = [pair(1.0, 2.0), pair(0.1, 0.5)];
        assert_eq!(kendall_wmt(&invert, TiePolicy::Discordant).unwrap(), -1.0);
        let mixed = [pair(2.0, 1.0), pair(3.0, 0.0), pair(0.0, 1.0)];
        assert!((kendall_wmt(&mixed, TiePolicy::Discordant).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(kendall_wmt(&[], TiePolicy::Discordant).is_err());
    }

    #[test]
    fn tie_conventions() {
        let p = [pair(1.0, 1.0), pair(2.0, 1.0)];
        assert_eq!(kendall_wmt(&p, TiePolicy::Discordant).unwrap(), 0.0);
        assert_eq!(kendall_wmt(&p, TiePolicy::Excluded).unwrap(), 1.0);
        assert!(kendall_wmt(&[pair(1.0, 1.0)], TiePolicy::Excluded).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        // cov = 1, Σdx² = 42/9, Σdy² = 2 ⇒ r = 3/√84.
        let r = pearson(&x, &[1.0, 3.0, 2.0]).unwrap();
        assert!((r - 3.0 / 84f64.sqrt()).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0], &[0.0, 2.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn gold_used_as_metric_is_perfect() {
        let rows: Vec<EvalRow> = [0.1, 0.9, -0.4, 0.5, 0.2]
            .iter()
            .enumerate()
            .map(|(i, &g)| EvalRow {
                id: Some(i.to_string()),
                group: Some(if i % 2 == 0 { "a" } else { "b" }.into()),
                metric: g,
                gold: Some(g),
            })
            .collect();
        let opts = EvalOptions {
            pair_threshold: 0.1,
            ..EvalOptions::default()
        };
        let report = correlate(&rows, Measure::Kendall, None, &opts).unwrap();
        assert!(report.groups.iter().all(|g| g.value == 1.0));
        assert_eq!(report.average, 1.0);
        assert!(report.to_table().lines().count() == 4);
    }

    #[test]
    fn constant_metric_conventions() {
        let rows: Vec<EvalRow> = [0.1, 0.9, -0.4]
            .iter()
            .map(|&g| EvalRow {
                id: None,
                group: None,
                metric: 0.5,
                gold: Some(g),
            })
            .collect();
        let opts = EvalOptions::default();
        assert!(matches!(
            correlate(&rows, Measure::Pearson, None, &opts),
            Err(Error::ZeroVariance)
        ));
        assert_eq!(correlate(&rows, Measure::Kendall, None, &opts).unwrap().average, -1.0);
    }

    #[test]
    fn explicit_pairs_resolve_ids() {
        let rows = vec![
            EvalRow { id: Some("h1".into()), group: None, metric: 0.3, gold: None },
            EvalRow { id: Some("h2".into()), group: None, metric: 0.7, gold: None },
        ];
        let refs = [PairRef { src_id: None, better_hyp: "h2".into(), worse_hyp: "h1".into() }];
        let report = correlate(&rows, Measure::Kendall, Some(&refs), &EvalOptions::default()).unwrap();
        assert_eq!(report.average, 1.0);
        let bad = [PairRef { src_id: None, better_hyp: "zz".into(), worse_hyp: "h1".into() }];
        assert!(correlate(&rows, Measure::Kendall, Some(&bad), &EvalOptions::default()).is_err());
    }

    #[test]
    fn pairs_file_accepts_numeric_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        fs::write(&path, "{\"src_id\": 3, \"better_hyp\": 1, \"worse_hyp\": \"b\"}\n\n").unwrap();
        let pairs = read_pairs(&path).unwrap();
        assert_eq!(pairs[0].better_hyp, "1");
        assert_eq!(pairs[0].src_id.as_deref(), Some("3"));
        fs::write(&path, "{\"better_hyp\": 1}\n").unwrap();
        assert_eq!(read_pairs(&path).unwrap_err().to_string(), "missing field worse_hyp @ line 1");
    }

    proptest! {
        #[test]
        fn kendall_is_order_invariant(
            raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30)
        ) {
            let pairs: Vec<RankingPair> = raw.iter().map(|&(b, w)| pair(b, w)).collect();
            let mapped: Vec<RankingPair> = raw.iter().map(|&(b, w)| pair(b.exp(), w.exp())).collect();
            let t = kendall_wmt(&pairs, TiePolicy::Discordant).unwrap();
            prop_assert_eq!(t, kendall_wmt(&mapped, TiePolicy::Discordant).unwrap());
            prop_assert!((-1.0..=1.0).contains(&t));
        }

        #[test]
        fn pearson_affine_and_sign(
            x in prop::collection::vec(-10.0f64..10.0, 3..40),
            y in prop::collection::vec(-10.0f64..10.0, 3..40),
            a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let n = x.len().min(y.len());
            let (x, y) = (&x[..n], &y[..n]);
            if let Ok(r) = pearson(x, y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((pearson(&ax, y).unwrap() - r).abs() < 1e-9);
                let neg: Vec<f64> = y.iter().map(|v| -v).collect();
                prop_assert_eq!(pearson(x, &neg).unwrap(), -r);
            }
        }
    }
}
