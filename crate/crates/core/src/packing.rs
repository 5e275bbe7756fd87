//! Unified input packing for the three evaluation formats.
//!
//! Layout: `BOS · h · SEP [· s · SEP] [· r · SEP]`. The hypothesis always
//! comes first. `BOS` belongs to the hypothesis span and each `SEP` belongs to
//! the span of the segment it terminates, so the spans tile `[0, L)`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, BOS, SEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskFormat {
    /// Hypothesis + reference.
    #[serde(rename = "ref")]
    Ref,
    /// Hypothesis + source (quality estimation).
    #[serde(rename = "src")]
    Src,
    /// Hypothesis + source + reference.
    #[serde(rename = "src+ref")]
    SrcRef,
}

impl TaskFormat {
    pub const ALL: [TaskFormat; 3] = [TaskFormat::Ref, TaskFormat::Src, TaskFormat::SrcRef];

    /// Segments present in this format, in packing order.
    pub fn segments(self) -> &'static [Segment] {
        match self {
            TaskFormat::Ref => &[Segment::Hyp, Segment::Ref],
            TaskFormat::Src => &[Segment::Hyp, Segment::Src],
            TaskFormat::SrcRef => &[Segment::Hyp, Segment::Src, Segment::Ref],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskFormat::Ref => "ref",
            TaskFormat::Src => "src",
            TaskFormat::SrcRef => "src+ref",
        }
    }
}

impl fmt::Display for TaskFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ref" => Ok(TaskFormat::Ref),
            "src" => Ok(TaskFormat::Src),
            "src+ref" | "srcref" | "src_ref" => Ok(TaskFormat::SrcRef),
            other => Err(Error::Invalid(format!("unknown task format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Hyp,
    Src,
    Ref,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Hyp, Segment::Src, Segment::Ref];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Half-open token ranges for each present segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Spans {
    ranges: [Option<Range<usize>>; 3],
}

impl Spans {
    /// Builds spans from consecutive segment widths, in the segment order of
    /// `format`.
    pub fn from_widths(format: TaskFormat, widths: &[usize]) -> Result<Self> {
        let segments = format.segments();
        if widths.len() != segments.len() || widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "{format} needs {} non-zero span widths, got {widths:?}",
                segments.len()
            )));
        }
        let mut ranges = [None, None, None];
        let mut start = 0;
        for (&seg, &w) in segments.iter().zip(widths) {
            ranges[seg.index()] = Some(start..start + w);
            start += w;
        }
        Ok(Self { ranges })
    }

    pub fn get(&self, seg: Segment) -> Option<Range<usize>> {
        self.ranges[seg.index()].clone()
    }

    pub fn contains(&self, seg: Segment) -> bool {
        self.ranges[seg.index()].is_some()
    }

    /// Total covered length.
    pub fn len(&self) -> usize {
        self.ranges.iter().flatten().map(|r| r.end).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_at(&self, index: usize) -> Option<Segment> {
        Segment::ALL
            .into_iter()
            .find(|&s| self.ranges[s.index()].as_ref().is_some_and(|r| r.contains(&index)))
    }

    /// Present segments in positional order.
    pub fn present(&self) -> Vec<(Segment, Range<usize>)> {
        let mut out: Vec<_> = Segment::ALL
            .into_iter()
            .filter_map(|s| self.get(s).map(|r| (s, r)))
            .collect();
        out.sort_by_key(|(_, r)| r.start);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedInput {
    tokens: Vec<u32>,
    format: TaskFormat,
    spans: Spans,
}

impl PackedInput {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn format(&self) -> TaskFormat {
        self.format
    }

    pub fn spans(&self) -> &Spans {
        &self.spans
    }

    /// Raw segment length (span width minus the attached specials).
    pub fn segment_len(&self, seg: Segment) -> Option<usize> {
        let r = self.spans.get(seg)?;
        let specials = if seg == Segment::Hyp { 2 } else { 1 };
        Some(r.len() - specials)
    }
}

/// Concatenates the segments required by `format`.
pub fn pack(
    hyp: &TokenSeq,
    src: Option<&TokenSeq>,
    reference: Option<&TokenSeq>,
    format: TaskFormat,
) -> Result<PackedInput> {
    let (src, reference) = match format {
        TaskFormat::Ref => (None, Some(reference.ok_or_else(|| missing(format, "reference"))?)),
        TaskFormat::Src => (Some(src.ok_or_else(|| missing(format, "source"))?), None),
        TaskFormat::SrcRef => (
            Some(src.ok_or_else(|| missing(format, "source"))?),
            Some(reference.ok_or_else(|| missing(format, "reference"))?),
        ),
    };
    let mut tokens = Vec::with_capacity(
        hyp.len() + src.map_or(0, TokenSeq::len) + reference.map_or(0, TokenSeq::len) + 4,
    );
    let mut widths = Vec::with_capacity(3);
    tokens.push(BOS);
    tokens.extend_from_slice(hyp.ids());
    tokens.push(SEP);
    widths.push(tokens.len());
    for seg in [src, reference].into_iter().flatten() {
        tokens.extend_from_slice(seg.ids());
        tokens.push(SEP);
        widths.push(seg.len() + 1);
    }
    Ok(PackedInput {
        tokens,
        format,
        spans: Spans::from_widths(format, &widths)?,
    })
}

fn missing(format: TaskFormat, what: &str) -> Error {
    Error::FormatSegmentMismatch(format!("{format} input requires a {what} segment"))
}

pub fn segment_of(packed: &PackedInput, index: usize) -> Result<Segment> {
    packed.spans.segment_at(index).ok_or(Error::IndexOutOfRange {
        index,
        len: packed.len(),
    })
}
