//! Sentence-level judge labels: majority vote, per-item behavior rates,
//! inter-judge agreement and residualized indirect effects.

use crate::archive::csv_err;
use crate::error::{Error, Result};
use crate::linalg::{multiple_ols, residualize, simple_ols};
use crate::scalar::{mean, std_dev};
use crate::stats::{cohens_kappa, pearson, percentile_bootstrap, spearman};
use crate::table::{ColumnType, ResultTable, Value};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    StrategyShift,
    Uncertainty,
    SelfCorrect,
    Verify,
    Restate,
    Subgoal,
    None,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::StrategyShift,
        Category::Uncertainty,
        Category::SelfCorrect,
        Category::Verify,
        Category::Restate,
        Category::Subgoal,
        Category::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::StrategyShift => "strategy_shift",
            Category::Uncertainty => "uncertainty",
            Category::SelfCorrect => "self_correct",
            Category::Verify => "verify",
            Category::Restate => "restate",
            Category::Subgoal => "subgoal",
            Category::None => "none",
        }
    }

    fn index(self) -> usize {
        Category::ALL
            .iter()
            .position(|&c| c == self)
            .expect("listed")
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown behavior category '{s}'")))
    }
}

/// One judge's label for one sentence. Character offsets are optional and
/// only used for stripe spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub item_id: String,
    pub run_id: u32,
    pub sentence_index: u32,
    pub judge_id: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_end: Option<usize>,
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record([
        "item_id",
        "run_id",
        "sentence_index",
        "judge_id",
        "category",
        "char_start",
        "char_end",
    ])
    .map_err(|e| csv_err(path, e))?;
    for l in rows {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            l.item_id.clone(),
            l.run_id.to_string(),
            l.sentence_index.to_string(),
            l.judge_id.clone(),
            l.category.as_str().to_string(),
            opt(l.char_start),
            opt(l.char_end),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

type SentenceKey = (String, u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub item_id: String,
    pub run_id: u32,
    pub sentence_index: u32,
    pub category: Category,
    pub tie: bool,
    pub char_span: Option<(usize, usize)>,
}

fn judges(labels: &[LabelRow]) -> Result<Vec<String>> {
    let j: BTreeSet<&str> = labels.iter().map(|l| l.judge_id.as_str()).collect();
    if j.len() < 2 {
        return Err(Error::TooShort {
            what: "judges",
            needed: 2,
            have: j.len(),
        });
    }
    Ok(j.into_iter().map(String::from).collect())
}

fn by_sentence(labels: &[LabelRow]) -> BTreeMap<SentenceKey, Vec<&LabelRow>> {
    let mut m: BTreeMap<SentenceKey, Vec<&LabelRow>> = BTreeMap::new();
    for l in labels {
        m.entry((l.item_id.clone(), l.run_id, l.sentence_index))
            .or_default()
            .push(l);
    }
    m
}

/// Modal category per sentence; ties resolve to `none` with the tie flag set.
pub fn majority_vote(labels: &[LabelRow]) -> Result<Vec<Consensus>> {
    judges(labels)?;
    Ok(by_sentence(labels)
        .into_iter()
        .map(|((item_id, run_id, sentence_index), ls)| {
            let mut counts = [0usize; 7];
            for l in &ls {
                counts[l.category.index()] += 1;
            }
            let top = *counts.iter().max().expect("non-empty");
            let winners: Vec<usize> = (0..7).filter(|&k| counts[k] == top).collect();
            let (category, tie) = if winners.len() == 1 {
                (Category::ALL[winners[0]], false)
            } else {
                (Category::None, true)
            };
            let char_span = ls.iter().find_map(|l| Some((l.char_start?, l.char_end?)));
            Consensus {
                item_id,
                run_id,
                sentence_index,
                category,
                tie,
                char_span,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RatePooling {
    /// Rate per run, then the mean over runs.
    #[default]
    MeanOfRuns,
    /// Category count over all runs divided by total sentences.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorRates {
    pub item_id: String,
    pub rates: [f64; 7],
    pub runs: usize,
}

impl BehaviorRates {
    pub fn rate(&self, c: Category) -> f64 {
        self.rates[c.index()]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BehaviorTable {
    pub rows: Vec<BehaviorRates>,
    /// Runs dropped because their sentence count was zero.
    pub dropped_runs: usize,
}

impl BehaviorTable {
    pub fn rate_map(&self, c: Category) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .map(|r| (r.item_id.clone(), r.rate(c)))
            .collect()
    }

    pub fn to_table(&self) -> ResultTable {
        let mut cols = vec![("item_id", ColumnType::Str), ("runs", ColumnType::Int)];
        cols.extend(Category::ALL.iter().map(|c| (c.as_str(), ColumnType::Real)));
        let mut t = ResultTable::new(cols).expect("static schema");
        for r in &self.rows {
            let mut row: Vec<Value> = vec![r.item_id.as_str().into(), r.runs.into()];
            row.extend(r.rates.iter().map(|&x| Value::Real(x)));
            t.push_row(row).expect("schema");
        }
        t
    }
}

/// Per-item rates over the solution segment. `sentence_counts` gives the
/// segment's sentence total per (item, run); runs absent from it use the
/// number of labeled sentences.
pub fn behavior_rates(
    consensus: &[Consensus],
    sentence_counts: &BTreeMap<(String, u32), usize>,
    pooling: RatePooling,
) -> BehaviorTable {
    let mut per_run: BTreeMap<(String, u32), [usize; 7]> = BTreeMap::new();
    for c in consensus {
        per_run.entry((c.item_id.clone(), c.run_id)).or_default()[c.category.index()] += 1;
    }
    for key in sentence_counts.keys() {
        per_run.entry(key.clone()).or_default();
    }
    let mut per_item: BTreeMap<String, Vec<([usize; 7], usize)>> = BTreeMap::new();
    let mut dropped = 0;
    for (key, counts) in per_run {
        let total = sentence_counts
            .get(&key)
            .copied()
            .unwrap_or_else(|| counts.iter().sum());
        if total == 0 {
            dropped += 1;
            continue;
        }
        per_item
            .entry(key.0)
            .or_default()
            .push((counts, total.max(counts.iter().sum())));
    }
    let rows = per_item
        .into_iter()
        .map(|(item_id, runs)| {
            let mut rates = [0.0; 7];
            match pooling {
                RatePooling::MeanOfRuns => {
                    for (counts, total) in &runs {
                        for k in 0..7 {
                            rates[k] += counts[k] as f64 / *total as f64 / runs.len() as f64;
                        }
                    }
                }
                RatePooling::Pooled => {
                    let total: usize = runs.iter().map(|r| r.1).sum();
                    for k in 0..7 {
                        rates[k] = runs.iter().map(|r| r.0[k]).sum::<usize>() as f64 / total as f64;
                    }
                }
            }
            BehaviorRates {
                item_id,
                rates,
                runs: runs.len(),
            }
        })
        .collect();
    BehaviorTable {
        rows,
        dropped_runs: dropped,
    }
}

/// Pairwise Spearman on per-item rates per category and sentence-level
/// Cohen's κ per judge pair, with mean/min/max summaries.
pub fn agreement_report(labels: &[LabelRow]) -> Result<ResultTable> {
    let js = judges(labels)?;
    let sentences = by_sentence(labels);
    let mut t = ResultTable::new([
        ("statistic", ColumnType::Str),
        ("category", ColumnType::Str),
        ("judge_a", ColumnType::Str),
        ("judge_b", ColumnType::Str),
        ("value", ColumnType::Real),
        ("n", ColumnType::Int),
    ])?;

    // each judge's labels treated as its own consensus
    let per_judge: BTreeMap<&str, BehaviorTable> = js
        .iter()
        .map(|j| {
            let own: Vec<Consensus> = labels
                .iter()
                .filter(|l| &l.judge_id == j)
                .map(|l| Consensus {
                    item_id: l.item_id.clone(),
                    run_id: l.run_id,
                    sentence_index: l.sentence_index,
                    category: l.category,
                    tie: false,
                    char_span: None,
                })
                .collect();
            (
                j.as_str(),
                behavior_rates(&own, &BTreeMap::new(), RatePooling::MeanOfRuns),
            )
        })
        .collect();

    let summary = |t: &mut ResultTable, stat: &str, cat: &str, vals: &[f64]| -> Result<()> {
        if vals.is_empty() {
            return Ok(());
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (name, v) in [("mean", mean(vals)), ("min", lo), ("max", hi)] {
            t.push_row(vec![
                format!("{stat}_{name}").into(),
                cat.into(),
                Value::Null,
                Value::Null,
                v.into(),
                vals.len().into(),
            ])?;
        }
        Ok(())
    };

    let mut all_rho = Vec::new();
    for cat in Category::ALL {
        let mut rhos = Vec::new();
        for (a_i, a) in js.iter().enumerate() {
            for b in &js[a_i + 1..] {
                let ra = per_judge[a.as_str()].rate_map(cat);
                let rb = per_judge[b.as_str()].rate_map(cat);
                let (xa, xb): (Vec<f64>, Vec<f64>) = ra
                    .iter()
                    .filter_map(|(k, &v)| Some((v, *rb.get(k)?)))
                    .unzip();
                let rho = spearman(&xa, &xb).ok();
                if let Some(r) = rho {
                    rhos.push(r);
                }
                t.push_row(vec![
                    "spearman".into(),
                    cat.as_str().into(),
                    a.as_str().into(),
                    b.as_str().into(),
                    rho.into(),
                    xa.len().into(),
                ])?;
            }
        }
        summary(&mut t, "spearman", cat.as_str(), &rhos)?;
        all_rho.extend(rhos);
    }
    summary(&mut t, "spearman", "all", &all_rho)?;

    let mut kappas = Vec::new();
    for (a_i, a) in js.iter().enumerate() {
        for b in &js[a_i + 1..] {
            let (la, lb): (Vec<Category>, Vec<Category>) = sentences
                .values()
                .filter_map(|ls| {
                    let ca = ls.iter().find(|l| &l.judge_id == a)?.category;
                    let cb = ls.iter().find(|l| &l.judge_id == b)?.category;
                    Some((ca, cb))
                })
                .unzip();
            let k = if la.is_empty() {
                None
            } else {
                cohens_kappa(&la, &lb)?
            };
            if let Some(k) = k {
                kappas.push(k);
            }
            t.push_row(vec![
                "kappa".into(),
                "all".into(),
                a.as_str().into(),
                b.as_str().into(),
                k.into(),
                la.len().into(),
            ])?;
        }
    }
    summary(&mut t, "kappa", "all", &kappas)?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediationResult {
    pub category: String,
    pub a: f64,
    pub b: f64,
    pub c_prime: f64,
    pub indirect_proportion: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// ab + c′ too close to zero for the proportion to be meaningful.
    pub unstable: bool,
    pub n_items: usize,
}

pub const MEDIATION_COLUMNS: &[(&str, ColumnType)] = &[
    ("category", ColumnType::Str),
    ("a", ColumnType::Real),
    ("b", ColumnType::Real),
    ("c_prime", ColumnType::Real),
    ("indirect_proportion", ColumnType::Real),
    ("ci_low", ColumnType::Real),
    ("ci_high", ColumnType::Real),
    ("unstable", ColumnType::Bool),
    ("n_items", ColumnType::Int),
];

pub fn mediation_table(results: &[MediationResult]) -> ResultTable {
    let mut t = ResultTable::new(MEDIATION_COLUMNS.iter().copied()).expect("static schema");
    for r in results {
        t.push_row(vec![
            r.category.as_str().into(),
            r.a.into(),
            r.b.into(),
            r.c_prime.into(),
            r.indirect_proportion.into(),
            r.ci_low.into(),
            r.ci_high.into(),
            r.unstable.into(),
            r.n_items.into(),
        ])
        .expect("schema");
    }
    t
}

const MIN_MEDIATION_ITEMS: usize = 30;
const COLLINEAR_R: f64 = 1.0 - 1e-8;
const UNSTABLE_REL: f64 = 1e-6;

fn zscore(v: &[f64]) -> Option<Vec<f64>> {
    let m = mean(v);
    let s = std_dev(v, 1);
    (s > 0.0 && s.is_finite()).then(|| v.iter().map(|x| (x - m) / s).collect())
}

struct Paths {
    a: f64,
    b: f64,
    c_prime: f64,
    proportion: f64,
    unstable: bool,
}

fn paths(diff: &[f64], beh: &[f64], geo: &[f64], log_len: &[f64]) -> Result<Paths> {
    let d = zscore(&residualize(log_len, diff)?)
        .ok_or(Error::ConstantInput("residualized difficulty"))?;
    let m = zscore(&residualize(log_len, beh)?)
        .ok_or(Error::ConstantInput("residualized behavior rate"))?;
    let g =
        zscore(&residualize(log_len, geo)?).ok_or(Error::ConstantInput("residualized geometry"))?;
    if pearson(&d, &m)?.abs() > COLLINEAR_R {
        return Err(Error::Degenerate(
            "behavior rate collinear with difficulty".into(),
        ));
    }
    let a = simple_ols(&d, &m)?.slope;
    let coef = multiple_ols(&[&m, &d], &g)?;
    let (b, c_prime) = (coef[1], coef[2]);
    let total = a * b + c_prime;
    let unstable =
        total.abs() <= UNSTABLE_REL * ((a * b).abs() + c_prime.abs()).max(f64::MIN_POSITIVE);
    Ok(Paths {
        a,
        b,
        c_prime,
        proportion: a * b / total,
        unstable,
    })
}

/// Residualized three-variable decomposition with a percentile bootstrap
/// interval for ab/(ab + c′). Inputs are aligned by item.
pub fn indirect_effect(
    category: &str,
    difficulty: &[f64],
    behavior_rate: &[f64],
    geometry: &[f64],
    log_length: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<MediationResult> {
    let n = difficulty.len();
    for v in [behavior_rate, geometry, log_length] {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: v.len(),
            });
        }
    }
    if n < MIN_MEDIATION_ITEMS {
        return Err(Error::TooShort {
            what: "mediation items",
            needed: MIN_MEDIATION_ITEMS,
            have: n,
        });
    }
    let p = paths(difficulty, behavior_rate, geometry, log_length)?;
    let (lo, hi) = if p.unstable {
        (f64::NAN, f64::NAN)
    } else {
        let ci = percentile_bootstrap(
            n,
            |idx| {
                let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
                let q = paths(
                    &pick(difficulty),
                    &pick(behavior_rate),
                    &pick(geometry),
                    &pick(log_length),
                )
                .ok()?;
                (!q.unstable).then_some(q.proportion)
            },
            n_boot,
            seed,
        )?;
        (ci.lo.min(p.proportion), ci.hi.max(p.proportion))
    };
    Ok(MediationResult {
        category: category.to_string(),
        a: p.a,
        b: p.b,
        c_prime: p.c_prime,
        indirect_proportion: p.proportion,
        ci_low: lo,
        ci_high: hi,
        unstable: p.unstable,
        n_items: n,
    })
}

/// One labeled span for the stripe plot, as fractions of the full response.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeSpan {
    pub item_id: String,
    pub run_id: u32,
    pub start_frac: f64,
    pub end_frac: f64,
    pub category: Category,
}

/// Non-`none` consensus sentences as response fractions. Character offsets
/// are used when both they and the response length are known; otherwise the
/// sentence index over the run's sentence count.
pub fn stripe_spans(
    consensus: &[Consensus],
    sentence_counts: &BTreeMap<(String, u32), usize>,
    response_chars: &BTreeMap<(String, u32), usize>,
) -> Vec<StripeSpan> {
    let mut labeled: BTreeMap<(String, u32), usize> = BTreeMap::new();
    for c in consensus {
        let e = labeled.entry((c.item_id.clone(), c.run_id)).or_default();
        *e = (*e).max(c.sentence_index as usize + 1);
    }
    consensus
        .iter()
        .filter(|c| c.category != Category::None)
        .map(|c| {
            let key = (c.item_id.clone(), c.run_id);
            let (s, e) = match (c.char_span, response_chars.get(&key)) {
                (Some((a, b)), Some(&len)) if len > 0 => {
                    (a as f64 / len as f64, b as f64 / len as f64)
                }
                _ => {
                    let n = sentence_counts
                        .get(&key)
                        .copied()
                        .unwrap_or(labeled[&key])
                        .max(1) as f64;
                    (
                        c.sentence_index as f64 / n,
                        (c.sentence_index + 1) as f64 / n,
                    )
                }
            };
            StripeSpan {
                item_id: c.item_id.clone(),
                run_id: c.run_id,
                start_frac: s.clamp(0.0, 1.0),
                end_frac: e.clamp(0.0, 1.0),
                category: c.category,
            }
        })
        .collect()
}

pub fn stripe_table(spans: &[StripeSpan]) -> ResultTable {
    let mut t = ResultTable::new([
        ("item", ColumnType::Str),
        ("run_id", ColumnType::Int),
        ("span_start_frac", ColumnType::Real),
        ("span_end_frac", ColumnType::Real),
        ("category", ColumnType::Str),
    ])
    .expect("static schema");
    for s in spans {
        t.push_row(vec![
            s.item_id.as_str().into(),
            (s.run_id as usize).into(),
            s.start_frac.into(),
            s.end_frac.into(),
            s.category.as_str().into(),
        ])
        .expect("schema");
    }
    t
}
