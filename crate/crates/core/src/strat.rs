//! Sensitivity analyses on corrected coupling: correctness strata, prefix
//! curves, boundary-policy deltas, null-label shuffles and run-count
//! stability.

use crate::archive::{Cohort, ItemMeta};
use crate::error::{Error, Result};
use crate::geometry::{geometry_for_cohort, CohortGeometryOptions, CohortGeometryRow};
use crate::lencorr::{
    aggregate_runs, couple_items, fit_length_model, group_by_cell, residualize, BootstrapSpec,
    CouplingResult, Family, ItemGeometry, LengthAverage, Metric,
};
use crate::scalar::{mean, quantile};
use crate::stats::{icc_1_1, permutation_null_within, spearman, PermutationResult};
use crate::table::{ColumnType, ResultTable, Value};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

pub const LOW_N: usize = 10;

/// Corrected coupling without intervals, fit on the items that have a
/// difficulty.
pub fn rho_perp(
    items: &[ItemGeometry],
    difficulties: &BTreeMap<String, f64>,
    family: Family,
) -> Result<f64> {
    let matched: Vec<ItemGeometry> = items
        .iter()
        .filter(|i| difficulties.contains_key(&i.item_id))
        .cloned()
        .collect();
    let model = fit_length_model(&matched, family)?;
    let res = residualize(&matched, &model)?;
    let b: Vec<f64> = res.rows.iter().map(|r| difficulties[&r.item_id]).collect();
    spearman(&b, &res.residuals())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    All,
    Correct,
    Incorrect,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Correct => "correct",
            Stratum::Incorrect => "incorrect",
        }
    }
}

/// Item-level assignment: correct when strictly more than half of its runs
/// are correct.
pub fn majority_correct(runs: &BTreeMap<u32, bool>) -> bool {
    let k = runs.values().filter(|&&c| c).count();
    2 * k > runs.len()
}

fn stratum_columns() -> ResultTable {
    ResultTable::new([
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("stratum", ColumnType::Str),
        ("n_items", ColumnType::Int),
        ("rho_corrected", ColumnType::Real),
        ("ci_low", ColumnType::Real),
        ("ci_high", ColumnType::Real),
        ("low_n", ColumnType::Bool),
        ("error", ColumnType::Str),
    ])
    .expect("static schema")
}

/// ρ⊥ recomputed within correctness strata for one (model, layer) cell; the
/// length model is refit inside each stratum. `correctness` maps item →
/// run → correct for the cell's model.
pub fn correctness_stratified(
    items: &[ItemGeometry],
    difficulties: &BTreeMap<String, f64>,
    correctness: &BTreeMap<String, BTreeMap<u32, bool>>,
    metric: Metric,
    family: Family,
    spec: &BootstrapSpec,
) -> Result<ResultTable> {
    let matched: Vec<&ItemGeometry> = items
        .iter()
        .filter(|i| difficulties.contains_key(&i.item_id))
        .collect();
    let covered = matched
        .iter()
        .filter(|i| correctness.get(&i.item_id).is_some_and(|r| !r.is_empty()))
        .count();
    if matched.is_empty() || (covered as f64) < 0.8 * matched.len() as f64 {
        return Err(Error::InvalidArgument(format!(
            "correctness covers {covered} of {} items; at least 80% required",
            matched.len()
        )));
    }
    let (model_id, layer) = items
        .first()
        .map(|i| (i.model_id.clone(), i.layer_index))
        .unwrap_or_default();
    let mut t = stratum_columns();
    for stratum in [Stratum::All, Stratum::Correct, Stratum::Incorrect] {
        let subset: Vec<ItemGeometry> = matched
            .iter()
            .filter(|i| match (stratum, correctness.get(&i.item_id)) {
                (Stratum::All, _) => true,
                (_, None) => false,
                (Stratum::Correct, Some(r)) => !r.is_empty() && majority_correct(r),
                (Stratum::Incorrect, Some(r)) => !r.is_empty() && !majority_correct(r),
            })
            .map(|&i| i.clone())
            .collect();
        let low_n = subset.len() < LOW_N;
        let (rho, lo, hi, err) = if low_n {
            (None, None, None, Value::Null)
        } else {
            match couple_items(&subset, difficulties, metric, family, spec) {
                Ok((_, _, c)) => (
                    Some(c.rho_corrected),
                    Some(c.ci_low),
                    Some(c.ci_high),
                    Value::Null,
                ),
                Err(e) => (None, None, None, e.to_string().into()),
            }
        };
        t.push_row(vec![
            model_id.as_str().into(),
            (layer as usize).into(),
            stratum.as_str().into(),
            subset.len().into(),
            rho.into(),
            lo.into(),
            hi.into(),
            low_n.into(),
            err,
        ])?;
    }
    Ok(t)
}

/// Geometry rows for each prefix fraction.
pub fn prefix_geometry(
    cohort: &Cohort,
    items: &[ItemMeta],
    opts: &CohortGeometryOptions,
    fractions: &[f64],
) -> Result<Vec<(f64, Vec<CohortGeometryRow>)>> {
    check_fractions(fractions)?;
    fractions
        .iter()
        .map(|&f| {
            let o = CohortGeometryOptions {
                prefix_fraction: f,
                ..opts.clone()
            };
            Ok((f, geometry_for_cohort(cohort, items, &o)?.rows))
        })
        .collect()
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::InvalidArgument(
            "prefix fractions must lie in (0, 1]".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCurve {
    /// model_id, layer_index, fraction, rho, ci_lo, ci_hi, n_items, skipped, note.
    pub points: ResultTable,
    /// Per cell: max |ρ(f) − ρ(1)| over the computed fractions.
    pub flatness: ResultTable,
}

pub const FLAT_DELTA: f64 = 0.05;

/// Items whose usable runs all have fewer than 3 states.
fn short_share(rows: &[&CohortGeometryRow]) -> f64 {
    let mut by_item: BTreeMap<&str, bool> = BTreeMap::new();
    for r in rows {
        let ok = r.error.is_none() && r.record.sample_count >= 2;
        *by_item
            .entry(r.record.key.item_id.as_str())
            .or_insert(false) |= ok;
    }
    if by_item.is_empty() {
        return 1.0;
    }
    by_item.values().filter(|&&ok| !ok).count() as f64 / by_item.len() as f64
}

/// ρ⊥ with intervals per (model, layer) at each prefix fraction.
pub fn prefix_curve(
    rows_by_fraction: &[(f64, Vec<CohortGeometryRow>)],
    difficulties: &BTreeMap<String, f64>,
    metric: Metric,
    family: Family,
    spec: &BootstrapSpec,
) -> Result<PrefixCurve> {
    check_fractions(&rows_by_fraction.iter().map(|r| r.0).collect::<Vec<_>>())?;
    let mut points = ResultTable::new([
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("fraction", ColumnType::Real),
        ("rho", ColumnType::Real),
        ("ci_lo", ColumnType::Real),
        ("ci_hi", ColumnType::Real),
        ("n_items", ColumnType::Int),
        ("skipped", ColumnType::Bool),
        ("note", ColumnType::Str),
    ])?;
    let mut curves: BTreeMap<(String, u32), Vec<(f64, f64)>> = BTreeMap::new();
    for (f, rows) in rows_by_fraction {
        let mut cells: BTreeMap<(String, u32), Vec<&CohortGeometryRow>> = BTreeMap::new();
        for r in rows {
            cells
                .entry((r.record.key.model_id.clone(), r.record.key.layer_index))
                .or_default()
                .push(r);
        }
        let computed: Vec<_> = cells
            .into_par_iter()
            .map(|(cell, rs)| {
                let share = short_share(&rs);
                if share > 0.5 {
                    return (
                        cell,
                        Err(format!(
                            "{:.0}% of items have fewer than 3 states",
                            100.0 * share
                        )),
                    );
                }
                let owned: Vec<CohortGeometryRow> = rs.into_iter().cloned().collect();
                let items = aggregate_runs(&owned, metric, LengthAverage::default()).items;
                let r = couple_items(&items, difficulties, metric, family, spec)
                    .map(|t| t.2)
                    .map_err(|e| e.to_string());
                (cell, r)
            })
            .collect();
        for ((model, layer), r) in computed {
            let row = match &r {
                Ok(c) => {
                    curves
                        .entry((model.clone(), layer))
                        .or_default()
                        .push((*f, c.rho_corrected));
                    vec![
                        c.rho_corrected.into(),
                        c.ci_low.into(),
                        c.ci_high.into(),
                        c.n_items.into(),
                        false.into(),
                        Value::Null,
                    ]
                }
                Err(msg) => vec![
                    Value::Null,
                    Value::Null,
                    Value::Null,
                    Value::Null,
                    true.into(),
                    msg.as_str().into(),
                ],
            };
            let mut full = vec![model.as_str().into(), (layer as usize).into(), (*f).into()];
            full.extend(row);
            points.push_row(full)?;
        }
    }
    let mut flatness = ResultTable::new([
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("rho_full", ColumnType::Real),
        ("max_abs_delta", ColumnType::Real),
        ("flat", ColumnType::Bool),
        ("n_fractions", ColumnType::Int),
    ])?;
    for ((model, layer), pts) in curves {
        let Some(&(_, full)) = pts.iter().find(|p| p.0 == 1.0) else {
            continue;
        };
        let max_d = pts.iter().map(|p| (p.1 - full).abs()).fold(0.0, f64::max);
        flatness.push_row(vec![
            model.as_str().into(),
            (layer as usize).into(),
            full.into(),
            max_d.into(),
            (max_d < FLAT_DELTA).into(),
            pts.len().into(),
        ])?;
    }
    Ok(PrefixCurve { points, flatness })
}

/// One coupling computed under a named boundary policy, with the item set
/// it was computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCoupling {
    pub policy: String,
    pub result: CouplingResult,
    pub items: BTreeSet<String>,
}

pub const MAX_ITEM_MISMATCH: f64 = 0.05;

/// |ρ_policy − ρ_reference| per model and layer, with per-group mean and max.
/// `groups` maps model → group label; unlisted models fall under "ungrouped".
pub fn boundary_delta(
    reference: &str,
    couplings: &[PolicyCoupling],
    groups: &BTreeMap<String, String>,
) -> Result<ResultTable> {
    let policies: BTreeSet<&str> = couplings.iter().map(|c| c.policy.as_str()).collect();
    if policies.len() < 2 || !policies.contains(reference) {
        return Err(Error::InvalidArgument(format!(
            "boundary delta needs the reference policy '{reference}' and at least one other"
        )));
    }
    type Key = (String, Option<u32>, &'static str, &'static str);
    let key = |c: &CouplingResult| -> Key {
        (
            c.model_id.clone(),
            c.layer_index,
            c.metric.as_str(),
            c.family.as_str(),
        )
    };
    let refs: BTreeMap<Key, &PolicyCoupling> = couplings
        .iter()
        .filter(|c| c.policy == reference)
        .map(|c| (key(&c.result), c))
        .collect();
    let mut t = ResultTable::new([
        ("kind", ColumnType::Str),
        ("group", ColumnType::Str),
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("policy", ColumnType::Str),
        ("rho_reference", ColumnType::Real),
        ("rho_policy", ColumnType::Real),
        ("delta", ColumnType::Real),
    ])?;
    let mut by_group: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut others: Vec<&PolicyCoupling> =
        couplings.iter().filter(|c| c.policy != reference).collect();
    others.sort_by(|a, b| (key(&a.result), &a.policy).cmp(&(key(&b.result), &b.policy)));
    for c in others {
        let Some(r) = refs.get(&key(&c.result)) else {
            continue;
        };
        let union = r.items.union(&c.items).count();
        let diff = r.items.symmetric_difference(&c.items).count();
        if union > 0 && diff as f64 > MAX_ITEM_MISMATCH * union as f64 {
            return Err(Error::InvalidArgument(format!(
                "policy '{}' differs from '{reference}' on {diff} of {union} items for model {}",
                c.policy, c.result.model_id
            )));
        }
        let g = groups
            .get(&c.result.model_id)
            .cloned()
            .unwrap_or_else(|| "ungrouped".into());
        let delta = (c.result.rho_corrected - r.result.rho_corrected).abs();
        by_group
            .entry((g.clone(), c.policy.clone()))
            .or_default()
            .push(delta);
        t.push_row(vec![
            "model".into(),
            g.into(),
            c.result.model_id.as_str().into(),
            c.result.layer_index.map(|l| l as usize).into(),
            c.policy.as_str().into(),
            r.result.rho_corrected.into(),
            c.result.rho_corrected.into(),
            delta.into(),
        ])?;
    }
    for ((g, policy), ds) in by_group {
        let max = ds.iter().copied().fold(0.0, f64::max);
        for (kind, v) in [("group_mean", mean(&ds)), ("group_max", max)] {
            t.push_row(vec![
                kind.into(),
                g.as_str().into(),
                Value::Null,
                Value::Null,
                policy.as_str().into(),
                Value::Null,
                Value::Null,
                v.into(),
            ])?;
        }
    }
    Ok(t)
}

/// Null distribution of ρ⊥ with difficulties shuffled within domain. The
/// length model does not involve b, so residuals are computed once.
pub fn null_label_battery(
    items: &[ItemGeometry],
    difficulties: &BTreeMap<String, f64>,
    domains: &BTreeMap<String, String>,
    family: Family,
    n_shuffles: usize,
    seed: u64,
) -> Result<PermutationResult> {
    let matched: Vec<ItemGeometry> = items
        .iter()
        .filter(|i| difficulties.contains_key(&i.item_id))
        .cloned()
        .collect();
    let model = fit_length_model(&matched, family)?;
    let res = residualize(&matched, &model)?;
    let b: Vec<f64> = res.rows.iter().map(|r| difficulties[&r.item_id]).collect();
    let mut codes: BTreeMap<&str, usize> = BTreeMap::new();
    let strata: Vec<usize> = res
        .rows
        .iter()
        .map(|r| {
            let d = domains.get(&r.item_id).map_or("", String::as_str);
            let next = codes.len();
            *codes.entry(d).or_insert(next)
        })
        .collect();
    permutation_null_within(
        &res.residuals(),
        &b,
        Some(&strata),
        |x, y| spearman(y, x).ok(),
        n_shuffles,
        seed,
    )
}

pub fn null_battery_table(results: &[((String, u32), PermutationResult)]) -> ResultTable {
    let mut t = ResultTable::new([
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("observed", ColumnType::Real),
        ("tail_quantile", ColumnType::Real),
        ("p", ColumnType::Real),
        ("null_q95", ColumnType::Real),
        ("n_shuffles", ColumnType::Int),
    ])
    .expect("static schema");
    for ((m, l), r) in results {
        t.push_row(vec![
            m.as_str().into(),
            (*l as usize).into(),
            r.observed.into(),
            r.tail_quantile.into(),
            r.p.into(),
            r.null_q95.into(),
            r.n_perm.into(),
        ])
        .expect("schema");
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCountStability {
    pub k_sub: usize,
    pub full_rho: f64,
    pub subsample_mean: f64,
    pub subsample_lo: f64,
    pub subsample_hi: f64,
    pub n_resample: usize,
    pub icc: f64,
    pub icc_clipped: bool,
    pub items_used: usize,
    pub items_dropped: usize,
}

impl RunCountStability {
    pub fn to_table(&self) -> ResultTable {
        let mut t = ResultTable::new([("statistic", ColumnType::Str), ("value", ColumnType::Real)])
            .expect("static schema");
        for (k, v) in [
            ("k_sub", self.k_sub as f64),
            ("full_rho", self.full_rho),
            ("subsample_mean", self.subsample_mean),
            ("subsample_lo", self.subsample_lo),
            ("subsample_hi", self.subsample_hi),
            ("n_resample", self.n_resample as f64),
            ("icc_1_1", self.icc),
            ("icc_clipped", if self.icc_clipped { 1.0 } else { 0.0 }),
            ("items_used", self.items_used as f64),
            ("items_dropped", self.items_dropped as f64),
        ] {
            t.push_row(vec![k.into(), v.into()]).expect("schema");
        }
        t
    }
}

/// Subsamples `k_sub` runs per item `n_resample` times for one (model, layer)
/// and reports the ρ⊥ distribution plus ICC(1,1) of per-run metric values.
pub fn run_count_stability(
    rows: &[CohortGeometryRow],
    difficulties: &BTreeMap<String, f64>,
    metric: Metric,
    family: Family,
    k_sub: usize,
    n_resample: usize,
    seed: u64,
) -> Result<RunCountStability> {
    if k_sub == 0 || n_resample == 0 {
        return Err(Error::InvalidArgument(
            "k_sub and n_resample must be at least 1".into(),
        ));
    }
    let mut by_item: BTreeMap<&str, Vec<&CohortGeometryRow>> = BTreeMap::new();
    for r in rows {
        if r.error.is_none() && r.segment_tokens > 0 && metric.value(r).is_some() {
            by_item
                .entry(r.record.key.item_id.as_str())
                .or_default()
                .push(r);
        }
    }
    let total = by_item.len();
    by_item.retain(|_, runs| runs.len() >= k_sub);
    let dropped = total - by_item.len();
    for runs in by_item.values_mut() {
        runs.sort_by_key(|r| r.record.key.run_id);
    }
    let all: Vec<CohortGeometryRow> = by_item.values().flatten().map(|&r| r.clone()).collect();
    let full_items = aggregate_runs(&all, metric, LengthAverage::default()).items;
    let full_rho = rho_perp(&full_items, difficulties, family)?;

    let icc_groups: Vec<Vec<f64>> = by_item
        .values()
        .map(|runs| runs.iter().filter_map(|r| metric.value(r)).collect())
        .collect();
    let icc = icc_1_1(&icc_groups)?;

    let draws: Vec<f64> = (0..n_resample)
        .into_par_iter()
        .filter_map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let picked: Vec<CohortGeometryRow> = by_item
                .values()
                .flat_map(|runs| {
                    let mut idx = sample(&mut rng, runs.len(), k_sub).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| runs[i].clone()).collect::<Vec<_>>()
                })
                .collect();
            let items = aggregate_runs(&picked, metric, LengthAverage::default()).items;
            rho_perp(&items, difficulties, family).ok()
        })
        .collect();
    if draws.len() * 5 < n_resample * 4 {
        return Err(Error::UnstableResampling {
            undefined: n_resample - draws.len(),
            total: n_resample,
        });
    }
    Ok(RunCountStability {
        k_sub,
        full_rho,
        subsample_mean: mean(&draws),
        subsample_lo: quantile(&draws, 0.025),
        subsample_hi: quantile(&draws, 0.975),
        n_resample,
        icc: icc.icc,
        icc_clipped: icc.clipped,
        items_used: by_item.len(),
        items_dropped: dropped,
    })
}

/// Per-cell item lists keyed by (model, layer), for callers running a
/// battery over every cell.
pub fn cells(items: &[ItemGeometry]) -> BTreeMap<(String, u32), Vec<ItemGeometry>> {
    group_by_cell(items)
}
