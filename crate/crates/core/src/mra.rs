//! Regional attention masks over packed segments.
//!
//! A flow `A→B` is information passing from segment `A` into segment `B`,
//! i.e. `B`'s queries reading `A`'s keys. Blocking it sets the additive mask to
//! [`BLOCKED`] at every (query ∈ B, key ∈ A) entry. The hard design blocks
//! `Hyp→Src`, `Hyp→Ref` and `Src→Ref` at every layer; the soft variants each
//! block one directed flow, which later layers may route around.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{PackedInput, Segment, Spans, TaskFormat};
use crate::tensor::Matrix;

/// Additive logit for a blocked pair. Finite so a row mixing blocked and open
/// entries never produces NaN; after max-shifting it underflows to 0.
pub const BLOCKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskVariant {
    Full,
    Hard,
    NoHypToSrc,
    NoSrcToHyp,
    NoRefToSrc,
    NoSrcToRef,
    NoRefToHyp,
    NoHypToRef,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 8] = [
        MaskVariant::Full,
        MaskVariant::Hard,
        MaskVariant::NoHypToSrc,
        MaskVariant::NoSrcToHyp,
        MaskVariant::NoRefToSrc,
        MaskVariant::NoSrcToRef,
        MaskVariant::NoRefToHyp,
        MaskVariant::NoHypToRef,
    ];

    /// Blocked flows as `(from, to)` pairs.
    pub fn blocked_flows(self) -> &'static [(Segment, Segment)] {
        use Segment::*;
        match self {
            MaskVariant::Full => &[],
            MaskVariant::Hard => &[(Hyp, Src), (Hyp, Ref), (Src, Ref)],
            MaskVariant::NoHypToSrc => &[(Hyp, Src)],
            MaskVariant::NoSrcToHyp => &[(Src, Hyp)],
            MaskVariant::NoRefToSrc => &[(Ref, Src)],
            MaskVariant::NoSrcToRef => &[(Src, Ref)],
            MaskVariant::NoRefToHyp => &[(Ref, Hyp)],
            MaskVariant::NoHypToRef => &[(Hyp, Ref)],
        }
    }

    /// Segments the variant refers to; all must be present in the input.
    pub fn required_segments(self) -> Vec<Segment> {
        let mut segs: Vec<Segment> = self
            .blocked_flows()
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .collect();
        segs.sort();
        segs.dedup();
        segs
    }

    pub fn supports(self, format: TaskFormat) -> bool {
        self.required_segments()
            .iter()
            .all(|s| format.segments().contains(s))
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::Full => "full",
            MaskVariant::Hard => "hard",
            MaskVariant::NoHypToSrc => "no-hyp-to-src",
            MaskVariant::NoSrcToHyp => "no-src-to-hyp",
            MaskVariant::NoRefToSrc => "no-ref-to-src",
            MaskVariant::NoSrcToRef => "no-src-to-ref",
            MaskVariant::NoRefToHyp => "no-ref-to-hyp",
            MaskVariant::NoHypToRef => "no-hyp-to-ref",
        }
    }
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        MaskVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown mask variant {s:?}")))
    }
}

/// `L × L` additive mask; row = query position, column = key position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    values: Matrix,
}

impl AttnMask {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn is_blocked(&self, query: usize, key: usize) -> bool {
        self.values.get(query, key) != 0.0
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }

    /// Whether any entry is blocked.
    pub fn any_blocked(&self) -> bool {
        self.values.as_slice().iter().any(|&v| v != 0.0)
    }

    /// Blocked (query, key) pairs in row-major order.
    pub fn blocked_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_blocked(i, j))
            .collect()
    }

    /// One line per query row, `1` where blocked and `0` elsewhere.
    pub fn to_grid(&self) -> String {
        let n = self.len();
        let mut out = String::with_capacity(n * (n + 1));
        for i in 0..n {
            for j in 0..n {
                out.push(if self.is_blocked(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the mask for `variant` over explicit segment spans.
pub fn build_mask_for_spans(variant: MaskVariant, spans: &Spans) -> Result<AttnMask> {
    for seg in variant.required_segments() {
        if !spans.contains(seg) {
            return Err(Error::MaskFormatMismatch(format!(
                "{variant} needs a {seg:?} segment"
            )));
        }
    }
    let n = spans.len();
    let mut values = Matrix::zeros(n, n);
    for &(from, to) in variant.blocked_flows() {
        let keys = spans.get(from).expect("checked above");
        let queries = spans.get(to).expect("checked above");
        for i in queries {
            for j in keys.clone() {
                values.set(i, j, BLOCKED);
            }
        }
    }
    Ok(AttnMask { values })
}

pub fn build_mask(variant: MaskVariant, packed: &PackedInput) -> Result<AttnMask> {
    build_mask_for_spans(variant, packed.spans())
}

/// Segment-level information flow after a number of stacked masked layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reachability {
    // reach[from][to]
    reach: [[bool; 3]; 3],
}

impl Reachability {
    /// Whether information from `from` can reach representations of `to`.
    pub fn reaches(&self, from: Segment, to: Segment) -> bool {
        self.reach[from.index()][to.index()]
    }

    pub fn is_complete_over(&self, segments: &[Segment]) -> bool {
        segments
            .iter()
            .all(|&a| segments.iter().all(|&b| self.reaches(a, b)))
    }
}

/// Closure of the one-layer allowed-flow relation (with self-loops) over
/// `layers` applications of the same mask.
pub fn reachability(variant: MaskVariant, format: TaskFormat, layers: usize) -> Reachability {
    let present = format.segments();
    let mut step = [[false; 3]; 3];
    for &a in present {
        for &b in present {
            step[a.index()][b.index()] = a == b || !variant.blocked_flows().contains(&(a, b));
        }
    }
    let mut reach = [[false; 3]; 3];
    for &a in present {
        reach[a.index()][a.index()] = true;
    }
    for _ in 0..layers.max(1) {
        let mut next = [[false; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                next[a][b] = (0..3).any(|m| reach[a][m] && step[m][b]);
            }
        }
        reach = next;
    }
    Reachability { reach }
}
