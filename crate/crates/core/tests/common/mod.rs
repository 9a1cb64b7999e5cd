//! Segmentation fixture corpus shared by the corpus tests and the acceptance run.

use serde::Deserialize;
use trajgeom::archive::{read_jsonl, TraceRecord};
use trajgeom::segment::{detect_boundary, parse_sat_answer, BoundaryPolicy, SatAnswer, Tagging};

#[derive(Deserialize)]
pub struct Expected {
    pub span: (usize, usize),
    pub source: String,
    pub token_start: usize,
    pub token_count: usize,
}

#[derive(Deserialize)]
pub struct Case {
    pub name: String,
    pub domain: String,
    pub tagging: String,
    pub text: String,
    pub token_count: usize,
    pub token_offsets: Option<Vec<usize>>,
    pub expected: Expected,
}

pub const SOURCES: [&str; 7] = [
    "think_delimiter",
    "code_fence",
    "boxed",
    "sat_marker",
    "xml_tag",
    "fallback_full",
    "answer_only",
];

pub fn corpus() -> Vec<Case> {
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/segmentation.jsonl");
    read_jsonl(&path).unwrap()
}

/// One line per case whose detected boundary differs from the fixture.
pub fn mismatches(cases: &[Case]) -> Vec<String> {
    let mut failures = Vec::new();
    for c in cases {
        let trace = TraceRecord {
            item_id: c.name.clone(),
            model_id: "m".into(),
            run_id: 0,
            text: c.text.clone(),
            token_count: c.token_count,
            truncated: false,
            token_offsets: c.token_offsets.clone(),
        };
        let tagging = if c.tagging == "tagged" {
            Tagging::Tagged
        } else {
            Tagging::Untagged
        };
        let seg = detect_boundary(
            &trace,
            &BoundaryPolicy::new(c.domain.parse().unwrap(), tagging),
        );
        let got = (
            seg.span,
            seg.boundary_source.as_str(),
            seg.segment_token_start,
            seg.segment_token_count,
        );
        let want = (
            c.expected.span,
            c.expected.source.as_str(),
            c.expected.token_start,
            c.expected.token_count,
        );
        if got != want {
            failures.push(format!("{}: got {got:?}, want {want:?}", c.name));
        }
    }
    failures
}

/// Tagging/domain cells with fewer than five cases, and sources never exercised.
pub fn coverage_gaps(cases: &[Case]) -> Vec<String> {
    let mut gaps = Vec::new();
    for tagging in ["tagged", "untagged"] {
        for domain in ["code", "math", "sat"] {
            let n = cases
                .iter()
                .filter(|c| c.tagging == tagging && c.domain == domain)
                .count();
            if n < 5 {
                gaps.push(format!("{tagging}/{domain}: {n}"));
            }
        }
    }
    for source in SOURCES {
        if !cases.iter().any(|c| c.expected.source == source) {
            gaps.push(format!("no {source} case"));
        }
    }
    gaps
}

pub fn sat_ordering_holds(cases: &[Case]) -> bool {
    let parsed = [
        ("UNSATISFIABLE, not SATISFIABLE", SatAnswer::Unsat),
        ("SATISFIABLE, not UNSATISFIABLE", SatAnswer::Sat),
        ("the instance is unsatisfiable", SatAnswer::Unsat),
        ("**Unsatisfiable**", SatAnswer::Unsat),
        ("satisfiability only", SatAnswer::None),
    ]
    .iter()
    .all(|&(text, want)| parse_sat_answer(text) == want);
    let marker_first = cases
        .iter()
        .find(|c| c.name == "untagged_sat_unsat_before_sat")
        .is_some_and(|c| c.text[c.expected.span.1..].starts_with("UNSATISFIABLE"));
    parsed && marker_first
}
