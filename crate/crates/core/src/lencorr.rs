//! Run averaging, length-correction fits, residuals and corrected coupling.

use crate::error::{Error, Result};
use crate::geometry::CohortGeometryRow;
use crate::linalg::simple_ols;
use crate::scalar::{mean, median, quantile};
use crate::stats::{percentile_bootstrap, spearman};
use crate::table::{ColumnType, ResultTable, Value};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Directness,
    CurvatureVar,
    Twonn,
    Pca90,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Directness,
        Metric::CurvatureVar,
        Metric::Twonn,
        Metric::Pca90,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Directness => "directness",
            Metric::CurvatureVar => "curvature_var",
            Metric::Twonn => "twonn",
            Metric::Pca90 => "pca90",
        }
    }

    pub fn value(self, row: &CohortGeometryRow) -> Option<f64> {
        let r = &row.record;
        match self {
            Metric::Directness => r.directness,
            Metric::CurvatureVar => r.curvature_variability,
            Metric::Twonn => r.twonn_dimension,
            Metric::Pca90 => r.pca90.map(|k| k as f64),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LengthAverage {
    /// log of the mean raw token count.
    #[default]
    LogOfMean,
    /// mean of per-run log token counts.
    MeanOfLog,
}

/// Run-averaged metric for one (item, model, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ItemGeometry {
    pub item_id: String,
    pub model_id: String,
    pub layer_index: u32,
    pub value: f64,
    pub log_length: f64,
    pub log_samples: f64,
    pub run_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregated {
    pub items: Vec<ItemGeometry>,
    pub dropped_groups: usize,
}

fn log_avg(values: &[f64], how: LengthAverage) -> f64 {
    match how {
        LengthAverage::LogOfMean => mean(values).ln(),
        LengthAverage::MeanOfLog => mean(&values.iter().map(|v| v.ln()).collect::<Vec<_>>()),
    }
}

/// Averages a metric over runs with defined values, per (item, model, layer).
/// Lengths are averaged over the same contributing runs.
pub fn aggregate_runs(
    rows: &[CohortGeometryRow],
    metric: Metric,
    how: LengthAverage,
) -> Aggregated {
    let mut groups: BTreeMap<(&str, &str, u32), Vec<&CohortGeometryRow>> = BTreeMap::new();
    for r in rows {
        let k = &r.record.key;
        groups
            .entry((k.model_id.as_str(), k.item_id.as_str(), k.layer_index))
            .or_default()
            .push(r);
    }
    let mut out = Aggregated::default();
    for ((model, item, layer), runs) in groups {
        let used: Vec<(f64, f64, f64)> = runs
            .iter()
            .filter(|r| r.error.is_none() && r.segment_tokens > 0 && r.record.sample_count > 0)
            .filter_map(|r| {
                Some((
                    metric.value(r)?,
                    r.segment_tokens as f64,
                    r.record.sample_count as f64,
                ))
            })
            .collect();
        if used.is_empty() {
            out.dropped_groups += 1;
            continue;
        }
        let vals: Vec<f64> = used.iter().map(|u| u.0).collect();
        let ns: Vec<f64> = used.iter().map(|u| u.1).collect();
        let ts: Vec<f64> = used.iter().map(|u| u.2).collect();
        out.items.push(ItemGeometry {
            item_id: item.to_string(),
            model_id: model.to_string(),
            layer_index: layer,
            value: mean(&vals),
            log_length: log_avg(&ns, how),
            log_samples: log_avg(&ts, how),
            run_count: used.len(),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    LogN,
    InvSqrtN,
    LogLog,
    Binned,
    LogT,
    InvSqrtT,
    LogLogT,
    BinnedT,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::LogN,
        Family::InvSqrtN,
        Family::LogLog,
        Family::Binned,
        Family::LogT,
        Family::InvSqrtT,
        Family::LogLogT,
        Family::BinnedT,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::LogN => "logN",
            Family::InvSqrtN => "inv_sqrtN",
            Family::LogLog => "loglog",
            Family::Binned => "binned",
            Family::LogT => "logT",
            Family::InvSqrtT => "inv_sqrtT",
            Family::LogLogT => "loglogT",
            Family::BinnedT => "binnedT",
        }
    }

    fn uses_samples(self) -> bool {
        matches!(
            self,
            Family::LogT | Family::InvSqrtT | Family::LogLogT | Family::BinnedT
        )
    }

    pub fn is_binned(self) -> bool {
        matches!(self, Family::Binned | Family::BinnedT)
    }

    fn is_loglog(self) -> bool {
        matches!(self, Family::LogLog | Family::LogLogT)
    }

    /// Regressor for one item.
    pub fn regressor(self, item: &ItemGeometry) -> f64 {
        let log_len = if self.uses_samples() {
            item.log_samples
        } else {
            item.log_length
        };
        match self {
            Family::InvSqrtN | Family::InvSqrtT => (-0.5 * log_len).exp(),
            _ => log_len,
        }
    }

    /// Response for one item, `None` when the transform is undefined.
    pub fn response(self, item: &ItemGeometry) -> Option<f64> {
        if self.is_loglog() {
            (item.value > 0.0).then(|| item.value.ln())
        } else {
            Some(item.value)
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown correction family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthBin {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthModel {
    pub family: Family,
    pub intercept: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub r_squared: f64,
    pub bins: Option<Vec<LengthBin>>,
    pub n_used: usize,
    /// Rows dropped because the response transform was undefined.
    pub dropped: usize,
}

pub const N_BINS: usize = 10;
pub const MIN_BIN: usize = 5;

/// Equal-count bins over sorted regressor values. Ties never straddle a cut;
/// bins under `MIN_BIN` items merge into a neighbor.
pub fn build_bins(x: &[f64], y: &[f64]) -> Vec<LengthBin> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite regressor"));
    let n = order.len();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut start = 0;
    for b in 1..=N_BINS {
        let mut end = (b * n / N_BINS).max(start);
        while end < n && end > 0 && x[order[end]] == x[order[end - 1]] {
            end += 1;
        }
        if end > start {
            groups.push(order[start..end].to_vec());
            start = end;
        }
    }
    loop {
        let Some(small) = groups.iter().position(|g| g.len() < MIN_BIN) else {
            break;
        };
        if groups.len() == 1 {
            break;
        }
        let g = groups.remove(small);
        let target = if small < groups.len() {
            small
        } else {
            small - 1
        };
        if target == small {
            let mut merged = g;
            merged.extend(&groups[target]);
            groups[target] = merged;
        } else {
            groups[target].extend(g);
        }
    }
    groups
        .iter()
        .map(|g| {
            let xs: Vec<f64> = g.iter().map(|&i| x[i]).collect();
            let ys: Vec<f64> = g.iter().map(|&i| y[i]).collect();
            LengthBin {
                lo: xs.iter().copied().fold(f64::INFINITY, f64::min),
                hi: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: mean(&ys),
                count: g.len(),
            }
        })
        .collect()
}

fn family_xy(items: &[ItemGeometry], family: Family) -> (Vec<f64>, Vec<f64>, Vec<usize>, usize) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut idx = Vec::new();
    let mut dropped = 0;
    for (i, it) in items.iter().enumerate() {
        match family.response(it) {
            Some(v) => {
                x.push(family.regressor(it));
                y.push(v);
                idx.push(i);
            }
            None => dropped += 1,
        }
    }
    (x, y, idx, dropped)
}

pub fn fit_length_model(items: &[ItemGeometry], family: Family) -> Result<LengthModel> {
    let (x, y, _, dropped) = family_xy(items, family);
    if family.is_loglog() && x.is_empty() && !items.is_empty() {
        return Err(Error::Degenerate(
            "no positive metric values for loglog".into(),
        ));
    }
    if x.len() < 3 {
        return Err(Error::TooShort {
            what: "length model items",
            needed: 3,
            have: x.len(),
        });
    }
    if family.is_binned() {
        let bins = build_bins(&x, &y);
        let grand = mean(&y);
        let ss_tot: f64 = y.iter().map(|v| (v - grand).powi(2)).sum();
        let ss_between: f64 = bins
            .iter()
            .map(|b| b.count as f64 * (b.mean - grand).powi(2))
            .sum();
        return Ok(LengthModel {
            family,
            intercept: grand,
            slope: 0.0,
            slope_se: 0.0,
            r_squared: if ss_tot > 0.0 {
                ss_between / ss_tot
            } else {
                0.0
            },
            bins: Some(bins),
            n_used: x.len(),
            dropped,
        });
    }
    let fit = simple_ols(&x, &y)?;
    Ok(LengthModel {
        family,
        intercept: fit.intercept,
        slope: fit.slope,
        slope_se: fit.slope_se,
        r_squared: fit.r_squared,
        bins: None,
        n_used: x.len(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub item_id: String,
    pub observed: f64,
    pub fitted: f64,
    pub residual: f64,
    pub regressor: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualTable {
    pub rows: Vec<ResidualRow>,
    pub dropped: usize,
}

impl ResidualTable {
    pub fn residuals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.residual).collect()
    }

    pub fn regressors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.regressor).collect()
    }

    pub fn to_table(&self) -> ResultTable {
        let mut t = ResultTable::new([
            ("item_id", ColumnType::Str),
            ("observed", ColumnType::Real),
            ("fitted", ColumnType::Real),
            ("residual", ColumnType::Real),
            ("regressor", ColumnType::Real),
        ])
        .expect("static schema");
        for r in &self.rows {
            t.push_row(vec![
                r.item_id.as_str().into(),
                r.observed.into(),
                r.fitted.into(),
                r.residual.into(),
                r.regressor.into(),
            ])
            .expect("schema");
        }
        t
    }
}

/// Residuals of the family's response after removing the fitted length
/// component; `model` must come from the same items. OLS families are
/// evaluated in centered form with one refinement pass, so residuals are
/// orthogonal to the regressor to rounding; the fitted column is
/// `observed - residual`.
pub fn residualize(items: &[ItemGeometry], model: &LengthModel) -> Result<ResidualTable> {
    let (x, y, idx, mut dropped) = family_xy(items, model.family);
    let mut rows = Vec::with_capacity(x.len());
    if let Some(bins) = &model.bins {
        for ((&xi, &yi), &i) in x.iter().zip(&y).zip(&idx) {
            let bin = bins.iter().find(|b| xi >= b.lo && xi <= b.hi).or_else(|| {
                bins.windows(2)
                    .find(|w| xi > w[0].hi && xi < w[1].lo)
                    .map(|w| &w[0])
            });
            match bin {
                Some(b) => rows.push(ResidualRow {
                    item_id: items[i].item_id.clone(),
                    observed: yi,
                    fitted: b.mean,
                    residual: yi - b.mean,
                    regressor: xi,
                }),
                None => dropped += 1,
            }
        }
        return Ok(ResidualTable { rows, dropped });
    }
    if x.is_empty() {
        return Ok(ResidualTable { rows, dropped });
    }
    let mx = mean(&x);
    let my = mean(&y);
    let cx: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let sxx: f64 = cx.iter().map(|v| v * v).sum();
    let mut r: Vec<f64> = cx
        .iter()
        .zip(&y)
        .map(|(c, yi)| (yi - my) - model.slope * c)
        .collect();
    if sxx > 0.0 {
        let mr = mean(&r);
        let s: f64 = r.iter().zip(&cx).map(|(a, c)| a * c).sum::<f64>() / sxx;
        r.iter_mut().zip(&cx).for_each(|(a, c)| *a -= mr + s * c);
    }
    for (k, &i) in idx.iter().enumerate() {
        rows.push(ResidualRow {
            item_id: items[i].item_id.clone(),
            observed: y[k],
            fitted: y[k] - r[k],
            residual: r[k],
            regressor: x[k],
        });
    }
    Ok(ResidualTable { rows, dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapSpec {
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingResult {
    pub model_id: String,
    /// `None` for a cross-layer summary.
    pub layer_index: Option<u32>,
    pub metric: Metric,
    pub family: Family,
    pub rho_raw: f64,
    pub rho_corrected: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub raw_ci_low: f64,
    pub raw_ci_high: f64,
    pub n_items: usize,
}

pub const COUPLING_COLUMNS: &[(&str, ColumnType)] = &[
    ("model_id", ColumnType::Str),
    ("layer_index", ColumnType::Int),
    ("metric", ColumnType::Str),
    ("family", ColumnType::Str),
    ("rho_raw", ColumnType::Real),
    ("rho_corrected", ColumnType::Real),
    ("ci_low", ColumnType::Real),
    ("ci_high", ColumnType::Real),
    ("raw_ci_low", ColumnType::Real),
    ("raw_ci_high", ColumnType::Real),
    ("n_items", ColumnType::Int),
];

impl CouplingResult {
    pub fn row(&self) -> Vec<Value> {
        vec![
            self.model_id.as_str().into(),
            self.layer_index.map(|l| l as usize).into(),
            self.metric.as_str().into(),
            self.family.as_str().into(),
            self.rho_raw.into(),
            self.rho_corrected.into(),
            self.ci_low.into(),
            self.ci_high.into(),
            self.raw_ci_low.into(),
            self.raw_ci_high.into(),
            self.n_items.into(),
        ]
    }
}

pub fn couplings_table(results: &[CouplingResult]) -> ResultTable {
    let mut t = ResultTable::new(COUPLING_COLUMNS.iter().copied()).expect("static schema");
    for r in results {
        t.push_row(r.row()).expect("schema");
    }
    t
}

/// Spearman of `a` vs `b` over the resampled indices.
fn rho_on(idx: &[usize], a: &[f64], b: &[f64]) -> Option<f64> {
    let xs: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    spearman(&xs, &ys).ok()
}

/// Point estimate and percentile interval, widened when necessary so the
/// interval contains the estimate.
fn rho_with_ci(a: &[f64], b: &[f64], spec: &BootstrapSpec) -> Result<(f64, f64, f64)> {
    let rho = spearman(a, b)?;
    let ci = percentile_bootstrap(a.len(), |idx| rho_on(idx, a, b), spec.n_boot, spec.seed)?;
    Ok((rho, ci.lo.min(rho), ci.hi.max(rho)))
}

/// Corrected and raw Spearman coupling with item-level bootstrap intervals.
/// `items` supplies the unresidualized means for the raw coefficient.
pub fn corrected_coupling(
    items: &[ItemGeometry],
    residuals: &ResidualTable,
    difficulties: &BTreeMap<String, f64>,
    metric: Metric,
    family: Family,
    spec: &BootstrapSpec,
) -> Result<CouplingResult> {
    let raw: BTreeMap<&str, f64> = items
        .iter()
        .map(|i| (i.item_id.as_str(), i.value))
        .collect();
    let mut res = Vec::new();
    let mut raw_v = Vec::new();
    let mut b = Vec::new();
    for r in &residuals.rows {
        if let (Some(&bi), Some(&rv)) = (difficulties.get(&r.item_id), raw.get(r.item_id.as_str()))
        {
            res.push(r.residual);
            raw_v.push(rv);
            b.push(bi);
        }
    }
    if res.len() < 10 {
        return Err(Error::TooShort {
            what: "coupling items",
            needed: 10,
            have: res.len(),
        });
    }
    let (rho_c, lo, hi) = rho_with_ci(&b, &res, spec)?;
    let (rho_r, rlo, rhi) = rho_with_ci(&b, &raw_v, spec)?;
    let first = items.first();
    Ok(CouplingResult {
        model_id: first.map(|i| i.model_id.clone()).unwrap_or_default(),
        layer_index: first.map(|i| i.layer_index),
        metric,
        family,
        rho_raw: rho_r,
        rho_corrected: rho_c,
        ci_low: lo,
        ci_high: hi,
        raw_ci_low: rlo,
        raw_ci_high: rhi,
        n_items: res.len(),
    })
}

/// Fits, residualizes and couples one (model, layer) item set.
pub fn couple_items(
    items: &[ItemGeometry],
    difficulties: &BTreeMap<String, f64>,
    metric: Metric,
    family: Family,
    spec: &BootstrapSpec,
) -> Result<(LengthModel, ResidualTable, CouplingResult)> {
    // fit only on items that have a difficulty so residuals and b align
    let matched: Vec<ItemGeometry> = items
        .iter()
        .filter(|i| difficulties.contains_key(&i.item_id))
        .cloned()
        .collect();
    let model = fit_length_model(&matched, family)?;
    let res = residualize(&matched, &model)?;
    let c = corrected_coupling(&matched, &res, difficulties, metric, family, spec)?;
    Ok((model, res, c))
}

/// Groups items by (model, layer).
pub fn group_by_cell(items: &[ItemGeometry]) -> BTreeMap<(String, u32), Vec<ItemGeometry>> {
    let mut g: BTreeMap<(String, u32), Vec<ItemGeometry>> = BTreeMap::new();
    for it in items {
        g.entry((it.model_id.clone(), it.layer_index))
            .or_default()
            .push(it.clone());
    }
    g
}

/// Coupling for every (model, layer) cell; failures are returned per cell.
pub fn couple_all(
    items: &[ItemGeometry],
    difficulties: &BTreeMap<String, f64>,
    metric: Metric,
    family: Family,
    spec: &BootstrapSpec,
) -> Vec<((String, u32), Result<CouplingResult>)> {
    let cells: Vec<((String, u32), Vec<ItemGeometry>)> = group_by_cell(items).into_iter().collect();
    cells
        .into_par_iter()
        .map(|(key, its)| {
            let r = couple_items(&its, difficulties, metric, family, spec).map(|t| t.2);
            (key, r)
        })
        .collect()
}

/// Spearman of residuals against log length plus quantile summaries.
pub fn residual_diagnostics(residuals: &[f64], log_length: &[f64]) -> Result<ResultTable> {
    if residuals.len() != log_length.len() {
        return Err(Error::DimensionMismatch {
            expected: residuals.len(),
            found: log_length.len(),
        });
    }
    let n = residuals.len();
    if n < 3 {
        return Err(Error::TooShort {
            what: "residual diagnostics",
            needed: 3,
            have: n,
        });
    }
    let low_n = n < 10;
    let mut t = ResultTable::new([
        ("statistic", ColumnType::Str),
        ("value", ColumnType::Real),
        ("low_n", ColumnType::Bool),
    ])?;
    t.push_row(vec!["n".into(), (n as f64).into(), low_n.into()])?;
    t.push_row(vec![
        "spearman_residual_loglength".into(),
        spearman(residuals, log_length).ok().into(),
        low_n.into(),
    ])?;
    for q in [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0] {
        t.push_row(vec![
            format!("residual_q{q:.2}").into(),
            quantile(residuals, q).into(),
            low_n.into(),
        ])?;
        t.push_row(vec![
            format!("loglength_q{q:.2}").into(),
            quantile(log_length, q).into(),
            low_n.into(),
        ])?;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    /// Medians across layers (`layer_index` is `None`).
    pub summary: CouplingResult,
    pub min: f64,
    pub max: f64,
    pub n_layers: usize,
}

pub fn layer_summary(per_layer: &[CouplingResult]) -> Result<LayerSummary> {
    let first = per_layer.first().ok_or(Error::TooShort {
        what: "layers",
        needed: 1,
        have: 0,
    })?;
    let col = |f: fn(&CouplingResult) -> f64| -> Vec<f64> { per_layer.iter().map(f).collect() };
    let rho = col(|c| c.rho_corrected);
    Ok(LayerSummary {
        summary: CouplingResult {
            model_id: first.model_id.clone(),
            layer_index: None,
            metric: first.metric,
            family: first.family,
            rho_raw: median(&col(|c| c.rho_raw)),
            rho_corrected: median(&rho),
            ci_low: median(&col(|c| c.ci_low)),
            ci_high: median(&col(|c| c.ci_high)),
            raw_ci_low: median(&col(|c| c.raw_ci_low)),
            raw_ci_high: median(&col(|c| c.raw_ci_high)),
            n_items: median(&col(|c| c.n_items as f64)).round() as usize,
        },
        min: rho.iter().copied().fold(f64::INFINITY, f64::min),
        max: rho.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n_layers: per_layer.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::TrajectoryKey;
    use crate::geometry::{GeometryFlags, GeometryRecord};
    use crate::stats::pearson;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grow(item: &str, run: u32, d: Option<f64>, n: usize) -> CohortGeometryRow {
        CohortGeometryRow {
            record: GeometryRecord {
                key: TrajectoryKey {
                    item_id: item.into(),
                    model_id: "m".into(),
                    run_id: run,
                    layer_index: 0,
                },
                sample_count: n / 10,
                path_length: None,
                displacement: None,
                directness: d,
                curvature_profile: vec![],
                curvature_variability: None,
                twonn_dimension: None,
                pca90: None,
                flags: GeometryFlags::default(),
            },
            domain: "code".into(),
            boundary_source: None,
            segment_tokens: n,
            error: None,
        }
    }

    fn items_from(logn: &[f64], vals: &[f64]) -> Vec<ItemGeometry> {
        logn.iter()
            .zip(vals)
            .enumerate()
            .map(|(i, (&l, &v))| ItemGeometry {
                item_id: format!("i{i:04}"),
                model_id: "m".into(),
                layer_index: 0,
                value: v,
                log_length: l,
                log_samples: l - 10f64.ln(),
                run_count: 1,
            })
            .collect()
    }

    #[test]
    fn aggregation_rules() {
        let rows = vec![
            grow("a", 0, Some(0.2), 100),
            grow("a", 1, Some(0.4), 300),
            grow("b", 0, Some(0.5), 100),
            grow("b", 1, None, 100),
            grow("c", 0, None, 100),
        ];
        let agg = aggregate_runs(&rows, Metric::Directness, LengthAverage::LogOfMean);
        assert_eq!(agg.items.len(), 2);
        assert_eq!(agg.dropped_groups, 1);
        assert!((agg.items[0].value - 0.3).abs() < 1e-15);
        assert!((agg.items[0].log_length - 200f64.ln()).abs() < 1e-15);
        assert_eq!((agg.items[1].value, agg.items[1].run_count), (0.5, 1));
        let alt = aggregate_runs(&rows, Metric::Directness, LengthAverage::MeanOfLog);
        assert!((alt.items[0].log_length - (100f64.ln() + 300f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let logn: Vec<f64> = (0..50).map(|i| 4.0 + i as f64 * 0.05).collect();
        let vals: Vec<f64> = logn.iter().map(|l| 0.7 - 0.1 * l).collect();
        let items = items_from(&logn, &vals);
        let m = fit_length_model(&items, Family::LogN).unwrap();
        assert!((m.intercept - 0.7).abs() < 1e-10 && (m.slope + 0.1).abs() < 1e-10);
        assert!((m.r_squared - 1.0).abs() < 1e-10);
        let r = residualize(&items, &m).unwrap();
        assert!(r.rows.iter().all(|r| r.residual.abs() < 1e-12));
        // loglog on c·N^{-1/2}
        let vals: Vec<f64> = logn.iter().map(|l| 3.0 * (-0.5 * l).exp()).collect();
        let m = fit_length_model(&items_from(&logn, &vals), Family::LogLog).unwrap();
        assert!((m.slope + 0.5).abs() < 1e-6);
    }

    #[test]
    fn loglog_drops_nonpositive() {
        let logn = [1.0, 2.0, 3.0, 4.0, 5.0];
        let items = items_from(&logn, &[0.5, -0.1, 0.3, 0.2, 0.0]);
        let m = fit_length_model(&items, Family::LogLog).unwrap();
        assert_eq!((m.n_used, m.dropped), (3, 2));
        assert!(fit_length_model(&items_from(&logn, &[0.0; 5]), Family::LogLog).is_err());
        assert!(fit_length_model(
            &items_from(&[2.0; 5], &[0.1, 0.2, 0.3, 0.4, 0.5]),
            Family::LogN
        )
        .is_err());
    }

    #[test]
    fn residuals_orthogonal_all_ols_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logn: Vec<f64> = (0..300)
            .map(|_| 6.0 + rng.sample::<f64, _>(StandardNormal) * 0.5)
            .collect();
        let vals: Vec<f64> = logn
            .iter()
            .map(|l| 0.3 - 0.02 * l + 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let items = items_from(&logn, &vals);
        for fam in Family::ALL.into_iter().filter(|f| !f.is_binned()) {
            let m = fit_length_model(&items, fam).unwrap();
            let r = residualize(&items, &m).unwrap();
            for row in &r.rows {
                assert!((row.residual + row.fitted - row.observed).abs() < 1e-10);
            }
            let p = pearson(&r.residuals(), &r.regressors()).unwrap();
            assert!(p.abs() <= 1e-10, "{fam}: {p}");
        }
    }

    #[test]
    fn binned_construction() {
        let logn: Vec<f64> = (0..103).map(|i| i as f64 / 10.0).collect();
        let vals: Vec<f64> = logn.iter().map(|l| l * 2.0).collect();
        let items = items_from(&logn, &vals);
        let m = fit_length_model(&items, Family::Binned).unwrap();
        let bins = m.bins.as_ref().unwrap();
        assert_eq!(bins.len(), 10);
        assert!(bins.windows(2).all(|w| w[0].hi < w[1].lo));
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 103);
        let r = residualize(&items, &m).unwrap();
        assert_eq!(r.rows.len(), 103);
        // small sets collapse into fewer bins of at least MIN_BIN
        let few = items_from(&logn[..12], &vals[..12]);
        let m = fit_length_model(&few, Family::Binned).unwrap();
        assert!(m.bins.unwrap().iter().all(|b| b.count >= MIN_BIN));
        // ties do not straddle cuts
        let tied: Vec<f64> = (0..60).map(|i| (i / 20) as f64).collect();
        let m = fit_length_model(&items_from(&tied, &tied), Family::Binned).unwrap();
        assert_eq!(m.bins.unwrap().len(), 3);
    }

    #[test]
    fn planted_coupling_survives_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let logn: Vec<f64> = b
            .iter()
            .map(|bi| 6.0 + 0.5 * bi + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let vals: Vec<f64> = logn
            .iter()
            .zip(&b)
            .map(|(l, bi)| -0.1 * l + 0.05 * bi + 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let items = items_from(&logn, &vals);
        let diff: BTreeMap<String, f64> = items
            .iter()
            .map(|i| i.item_id.clone())
            .zip(b.iter().copied())
            .collect();
        let (_, res, c) = couple_items(
            &items,
            &diff,
            Metric::Directness,
            Family::LogN,
            &BootstrapSpec::default(),
        )
        .unwrap();
        assert!(c.rho_corrected > 0.3);
        assert!(c.rho_raw < 0.0);
        assert!(c.ci_low <= c.rho_corrected && c.rho_corrected <= c.ci_high);
        assert!(spearman(&res.residuals(), &res.regressors()).unwrap().abs() < 0.1);
    }

    #[test]
    fn identical_ranks_give_one() {
        let logn: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let vals: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let items = items_from(&logn, &vals);
        let m = fit_length_model(&items, Family::LogN).unwrap();
        let res = residualize(&items, &m).unwrap();
        let diff: BTreeMap<String, f64> = res
            .rows
            .iter()
            .map(|r| (r.item_id.clone(), r.residual))
            .collect();
        let c = corrected_coupling(
            &items,
            &res,
            &diff,
            Metric::Directness,
            Family::LogN,
            &BootstrapSpec::default(),
        )
        .unwrap();
        assert!((c.rho_corrected - 1.0).abs() < 1e-12);
        assert!(corrected_coupling(
            &items[..5],
            &res,
            &BTreeMap::new(),
            Metric::Directness,
            Family::LogN,
            &BootstrapSpec::default()
        )
        .is_err());
    }

    #[test]
    fn diagnostics_flags() {
        let t = residual_diagnostics(&[0.1, -0.2, 0.1], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.get(0, "low_n").unwrap().as_bool(), Some(true));
        // convex truth fitted linearly leaves a monotone residual pattern in the tails
        let logn: Vec<f64> = (0..500).map(|i| 4.0 + i as f64 / 100.0).collect();
        let vals: Vec<f64> = logn.iter().map(|l| (l - 6.5f64).powi(2)).collect();
        let items = items_from(&logn, &vals);
        let m = fit_length_model(&items, Family::LogN).unwrap();
        let r = residualize(&items, &m).unwrap();
        let rho = spearman(&r.residuals(), &logn).unwrap();
        let t = residual_diagnostics(&r.residuals(), &logn).unwrap();
        assert_eq!(t.get(1, "value").unwrap().as_f64(), Some(rho));
    }

    #[test]
    fn layer_summary_median() {
        let mk = |rho: f64, l: u32| CouplingResult {
            model_id: "m".into(),
            layer_index: Some(l),
            metric: Metric::Directness,
            family: Family::LogN,
            rho_raw: -rho,
            rho_corrected: rho,
            ci_low: rho - 0.1,
            ci_high: rho + 0.1,
            raw_ci_low: -rho - 0.1,
            raw_ci_high: -rho + 0.1,
            n_items: 100,
        };
        let s = layer_summary(&[mk(0.3, 0), mk(0.5, 1), mk(0.4, 2)]).unwrap();
        assert_eq!((s.summary.rho_corrected, s.min, s.max), (0.4, 0.3, 0.5));
        assert_eq!(
            layer_summary(&[mk(0.7, 0)]).unwrap().summary.rho_corrected,
            0.7
        );
        assert!(layer_summary(&[]).is_err());
    }

    #[test]
    fn names_parse() {
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert!("length".parse::<Metric>().is_err());
    }
}
