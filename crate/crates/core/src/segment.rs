//! Solution-segment detection and state slicing.

use crate::archive::{TraceRecord, Trajectory};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Code,
    Math,
    Sat,
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "code" | "codeforces" => Ok(Domain::Code),
            "math" => Ok(Domain::Math),
            "sat" | "satbench" => Ok(Domain::Sat),
            other => Err(Error::InvalidArgument(format!("unknown domain {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tagging {
    Tagged,
    Untagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    Default,
    FullOutput,
    /// Leading fraction τ ∈ (0, 1] of the total token count.
    FixedPrefix(f64),
}

impl FromStr for PolicyVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown boundary policy {s}"));
        match s {
            "default" => Ok(PolicyVariant::Default),
            "full_output" | "full" => Ok(PolicyVariant::FullOutput),
            _ => {
                let tau = s
                    .strip_prefix("fixed_prefix:")
                    .or_else(|| s.strip_prefix("tau="))
                    .ok_or_else(bad)?
                    .parse::<f64>()
                    .map_err(|_| bad())?;
                if !(tau > 0.0 && tau <= 1.0) {
                    return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1]")));
                }
                Ok(PolicyVariant::FixedPrefix(tau))
            }
        }
    }
}

impl fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyVariant::Default => write!(f, "default"),
            PolicyVariant::FullOutput => write!(f, "full_output"),
            PolicyVariant::FixedPrefix(t) => write!(f, "fixed_prefix:{t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPolicy {
    pub domain: Domain,
    pub tagging: Tagging,
    pub variant: PolicyVariant,
}

impl BoundaryPolicy {
    pub fn new(domain: Domain, tagging: Tagging) -> Self {
        Self {
            domain,
            tagging,
            variant: PolicyVariant::Default,
        }
    }

    pub fn with_variant(mut self, variant: PolicyVariant) -> Result<Self> {
        if let PolicyVariant::FixedPrefix(t) = variant {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidArgument(format!("tau {t} outside (0, 1]")));
            }
        }
        self.variant = variant;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySource {
    ThinkDelimiter,
    CodeFence,
    Boxed,
    SatMarker,
    XmlTag,
    FallbackFull,
    AnswerOnly,
}

impl BoundarySource {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundarySource::ThinkDelimiter => "think_delimiter",
            BoundarySource::CodeFence => "code_fence",
            BoundarySource::Boxed => "boxed",
            BoundarySource::SatMarker => "sat_marker",
            BoundarySource::XmlTag => "xml_tag",
            BoundarySource::FallbackFull => "fallback_full",
            BoundarySource::AnswerOnly => "answer_only",
        }
    }
}

impl FromStr for BoundarySource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "think_delimiter" => BoundarySource::ThinkDelimiter,
            "code_fence" => BoundarySource::CodeFence,
            "boxed" => BoundarySource::Boxed,
            "sat_marker" => BoundarySource::SatMarker,
            "xml_tag" => BoundarySource::XmlTag,
            "fallback_full" => BoundarySource::FallbackFull,
            "answer_only" => BoundarySource::AnswerOnly,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown boundary source {other}"
                )))
            }
        })
    }
}

/// Marker strings used by boundary detection; loadable from a TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentPatterns {
    pub version: u32,
    pub think_open: String,
    pub think_close: String,
    pub code_fence: String,
    pub boxed: String,
    /// Matched case-insensitively.
    pub xml_answer_open: String,
}

impl Default for SegmentPatterns {
    fn default() -> Self {
        Self {
            version: 1,
            think_open: "<think>".into(),
            think_close: "</think>".into(),
            code_fence: "```".into(),
            boxed: "\\boxed{".into(),
            xml_answer_open: "<answer>".into(),
        }
    }
}

impl SegmentPatterns {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::schema("segment patterns", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedTrace {
    pub trace: TraceRecord,
    /// Byte offsets `[start, end)` into `trace.text`.
    pub span: (usize, usize),
    /// Index of the first generated token inside the segment.
    pub segment_token_start: usize,
    /// Raw segment token length N.
    pub segment_token_count: usize,
    pub boundary_source: BoundarySource,
}

impl SegmentedTrace {
    pub fn segment_text(&self) -> &str {
        &self.trace.text[self.span.0..self.span.1]
    }
}

pub fn detect_boundary(trace: &TraceRecord, policy: &BoundaryPolicy) -> SegmentedTrace {
    detect_boundary_with(trace, policy, &SegmentPatterns::default())
}

pub fn detect_boundary_with(
    trace: &TraceRecord,
    policy: &BoundaryPolicy,
    patterns: &SegmentPatterns,
) -> SegmentedTrace {
    let text = trace.text.as_str();
    let (span, source) = match policy.variant {
        PolicyVariant::FullOutput => ((0, text.len()), BoundarySource::FallbackFull),
        PolicyVariant::FixedPrefix(tau) => {
            let keep = ((tau * trace.token_count as f64) + 1e-9).floor() as usize;
            (
                (0, token_byte_offset(trace, keep)),
                BoundarySource::FallbackFull,
            )
        }
        PolicyVariant::Default => match policy.tagging {
            Tagging::Tagged => tagged_span(text, patterns),
            Tagging::Untagged => untagged_span(text, policy.domain, patterns),
        },
    };
    let (first, count) = trace.token_range(span.0, span.1);
    if count == 0 {
        return SegmentedTrace {
            trace: trace.clone(),
            span: (0, 0),
            segment_token_start: 0,
            segment_token_count: 0,
            boundary_source: BoundarySource::AnswerOnly,
        };
    }
    SegmentedTrace {
        trace: trace.clone(),
        span,
        segment_token_start: first,
        segment_token_count: count,
        boundary_source: source,
    }
}

/// Byte offset at which token `k` starts (text length when past the end).
fn token_byte_offset(trace: &TraceRecord, k: usize) -> usize {
    if k >= trace.token_count {
        return trace.text.len();
    }
    let raw = match &trace.token_offsets {
        Some(offs) => offs.get(k).copied().unwrap_or(trace.text.len()),
        None => {
            let frac = k as f64 / trace.token_count.max(1) as f64;
            (frac * trace.text.len() as f64).round() as usize
        }
    };
    floor_char_boundary(&trace.text, raw.min(trace.text.len()))
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    while i > 0 && !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn tagged_span(text: &str, p: &SegmentPatterns) -> ((usize, usize), BoundarySource) {
    if let Some(open) = text.find(&p.think_open) {
        let inner = open + p.think_open.len();
        if let Some(close) = text[inner..].find(&p.think_close) {
            return ((inner, inner + close), BoundarySource::ThinkDelimiter);
        }
    }
    ((0, 0), BoundarySource::AnswerOnly)
}

fn untagged_span(
    text: &str,
    domain: Domain,
    p: &SegmentPatterns,
) -> ((usize, usize), BoundarySource) {
    let marker = match domain {
        Domain::Code => text
            .find(&p.code_fence)
            .map(|i| (i, BoundarySource::CodeFence)),
        Domain::Math => find_balanced_boxed(text, &p.boxed).map(|i| (i, BoundarySource::Boxed)),
        Domain::Sat => find_sat_marker(text).map(|(i, _)| (i, BoundarySource::SatMarker)),
    };
    let marker = marker
        .or_else(|| find_ascii_ci(text, &p.xml_answer_open).map(|i| (i, BoundarySource::XmlTag)));
    match marker {
        Some((end, source)) => ((0, end), source),
        None => ((0, text.len()), BoundarySource::FallbackFull),
    }
}

/// First occurrence of `open` whose braces close; returns the macro's start.
fn find_balanced_boxed(text: &str, open: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(rel) = text[from..].find(open) {
        let start = from + rel;
        let mut depth = 1usize;
        let mut i = start + open.len();
        while i < bytes.len() && depth > 0 {
            match bytes[i] {
                b'{' => depth += 1,
                b'}' => depth -= 1,
                _ => {}
            }
            i += 1;
        }
        if depth == 0 {
            return Some(start);
        }
        from = start + open.len();
    }
    None
}

fn find_ascii_ci(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || h.len() < n.len() {
        return None;
    }
    (0..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SatAnswer {
    Sat,
    Unsat,
    None,
}

const UNSAT: &[u8] = b"unsatisfiable";
const SAT: &[u8] = b"satisfiable";

/// Scans left to right for a whole-word, case-insensitive SATISFIABLE or
/// UNSATISFIABLE. At any position the longer UNSATISFIABLE is tried first.
fn find_sat_marker(text: &str) -> Option<(usize, SatAnswer)> {
    let b = text.as_bytes();
    let is_word = |c: u8| c.is_ascii_alphanumeric() || c == b'_';
    let bounded = |start: usize, len: usize| {
        (start == 0 || !is_word(b[start - 1]))
            && (start + len == b.len() || !is_word(b[start + len]))
    };
    for i in 0..b.len() {
        if b.len() - i >= UNSAT.len()
            && b[i..i + UNSAT.len()].eq_ignore_ascii_case(UNSAT)
            && bounded(i, UNSAT.len())
        {
            return Some((i, SatAnswer::Unsat));
        }
        if b.len() - i >= SAT.len()
            && b[i..i + SAT.len()].eq_ignore_ascii_case(SAT)
            && bounded(i, SAT.len())
        {
            return Some((i, SatAnswer::Sat));
        }
    }
    None
}

pub fn parse_sat_answer(text: &str) -> SatAnswer {
    find_sat_marker(text).map_or(SatAnswer::None, |(_, a)| a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSpec {
    pub stride_tokens: usize,
    /// Prefix fraction f ∈ (0, 1].
    pub prefix_fraction: f64,
}

impl SamplingSpec {
    pub fn new(stride_tokens: usize, prefix_fraction: f64) -> Result<Self> {
        if stride_tokens < 1 {
            return Err(Error::InvalidArgument("stride_tokens must be >= 1".into()));
        }
        if !(prefix_fraction > 0.0 && prefix_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "prefix fraction {prefix_fraction} outside (0, 1]"
            )));
        }
        Ok(Self {
            stride_tokens,
            prefix_fraction,
        })
    }

    pub fn full(stride_tokens: usize) -> Self {
        Self {
            stride_tokens,
            prefix_fraction: 1.0,
        }
    }
}

/// State-row range covering the segment: rows `k` with `k * stride` in
/// `[first_token, first_token + count)`.
pub fn segment_state_range(
    segmented: &SegmentedTrace,
    stride: usize,
    n_states: usize,
) -> std::ops::Range<usize> {
    let start_tok = segmented.segment_token_start;
    let end_tok = start_tok + segmented.segment_token_count;
    let first = start_tok.div_ceil(stride);
    let end = end_tok.div_ceil(stride);
    let end = end.min(n_states);
    first.min(end)..end
}

/// Number of leading segment states kept for prefix fraction `f`.
pub fn prefix_len(segment_states: usize, f: f64) -> usize {
    let scaled = ((f * segment_states as f64) + 1e-9).floor() as usize;
    scaled.max(segment_states.min(3)).min(segment_states)
}

/// Restricts a trajectory to its solution-segment states, then to the
/// leading prefix fraction. May return an empty trajectory.
pub fn slice_states<T: Scalar>(
    trajectory: &Trajectory<T>,
    segmented: &SegmentedTrace,
    spec: &SamplingSpec,
) -> Result<Trajectory<T>> {
    if trajectory.stride_tokens != spec.stride_tokens {
        return Err(Error::InvalidArgument(format!(
            "trajectory stride {} does not match sampling stride {}",
            trajectory.stride_tokens, spec.stride_tokens
        )));
    }
    let range = segment_state_range(segmented, spec.stride_tokens, trajectory.n_states());
    let keep = prefix_len(range.len(), spec.prefix_fraction);
    Ok(trajectory.slice_rows(range.start..range.start + keep))
}

/// Per-source counts for a batch of segmented traces.
pub fn boundary_diagnostics<'a>(
    segs: impl IntoIterator<Item = &'a SegmentedTrace>,
) -> BTreeMap<BoundarySource, usize> {
    let mut out = BTreeMap::new();
    for s in segs {
        *out.entry(s.boundary_source).or_insert(0) += 1;
    }
    out
}
