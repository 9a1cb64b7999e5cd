//! End-to-end orchestration: configuration, per-stage functions, the report
//! bundle and plot-ready tables.
//!
//! Every table in a bundle is written as CSV with a JSON sidecar carrying the
//! tool version and config hash. Bundles contain no timestamps, so a rerun
//! with the same config over the same cohort bytes is byte-identical.

use crate::archive::{
    Cohort, ItemMeta, ModelRole, Trajectory, LABELS_FILE, MANIFEST_FILE, RESPONSES_FILE,
};
use crate::behavior::{
    agreement_report, behavior_rates, indirect_effect, majority_vote, mediation_table, read_labels,
    stripe_spans, stripe_table, Category, RatePooling,
};
use crate::calib::{
    difficulties_from_table, fit_2pl, fit_rasch, validate_external, FitConfig, ResponseMatrix,
};
use crate::error::{Error, Result};
use crate::geometry::{
    geometry_for_cohort, policy_for, segmented_trajectories, CohortGeometryOptions,
    CohortGeometryRow,
};
use crate::lencorr::{
    aggregate_runs, couple_items, group_by_cell, layer_summary, BootstrapSpec, CouplingResult,
    Family, ItemGeometry, LengthAverage, Metric, COUPLING_COLUMNS,
};
use crate::probes::{
    fit_ridge_cv, inlp_erase, peak_cell, prepare_dataset, probe_permutation_p, PositionSpec,
    ProbeCell, ProbeConfig, DEFAULT_LAMBDAS,
};
use crate::scalar::median;
use crate::segment::{detect_boundary_with, PolicyVariant};
use crate::strat::{
    boundary_delta, correctness_stratified, null_battery_table, null_label_battery, prefix_curve,
    prefix_geometry, run_count_stability, PolicyCoupling,
};
use crate::table::{ColumnType, Provenance, ResultTable, TableFormat, Value};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StratConfig {
    pub enabled: bool,
    pub prefix_fractions: Vec<f64>,
    pub null_shuffles: usize,
    /// Runs kept per item in the run-count stability resampling.
    pub k_sub: usize,
    pub n_resample: usize,
    /// Extra boundary policies compared against the main one.
    pub policies: Vec<String>,
}

impl Default for StratConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            prefix_fractions: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            null_shuffles: 200,
            k_sub: 3,
            n_resample: 200,
            policies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeStageConfig {
    pub enabled: bool,
    pub positions: usize,
    pub folds: usize,
    pub lambdas: Vec<f64>,
    /// Permutations for the peak cell's p-value.
    pub n_perm: usize,
    pub inlp_threshold: f64,
    pub inlp_max_iters: usize,
}

impl Default for ProbeStageConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            positions: 5,
            folds: 5,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            n_perm: 100,
            inlp_threshold: 0.02,
            inlp_max_iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorStageConfig {
    pub enabled: bool,
    /// Model the label file refers to; the first reasoning model otherwise.
    pub model: Option<String>,
    /// Layer whose geometry enters the mediation; the middle layer otherwise.
    pub layer: Option<u32>,
    /// Pool sentences across runs instead of averaging per-run rates.
    pub pooled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub cohort: PathBuf,
    pub out: PathBuf,
    pub metrics: Vec<String>,
    pub family: String,
    pub policy: String,
    /// "rasch", "2pl" or "external".
    pub scale: String,
    /// Table with item_id and b columns, used when `scale = "external"`.
    pub external_scale: Option<PathBuf>,
    pub seed: u64,
    pub n_boot: usize,
    pub calib: FitConfig,
    pub strat: StratConfig,
    pub probes: ProbeStageConfig,
    pub behavior: BehaviorStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cohort: PathBuf::from("cohort"),
            out: PathBuf::from("report"),
            metrics: Metric::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            family: Family::LogN.as_str().into(),
            policy: "default".into(),
            scale: "rasch".into(),
            external_scale: None,
            seed: 0,
            n_boot: 1000,
            calib: FitConfig::default(),
            strat: StratConfig::default(),
            probes: ProbeStageConfig::default(),
            behavior: BehaviorStageConfig {
                enabled: true,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleSource {
    Rasch,
    TwoPl,
    External,
}

/// Parsed names from a validated config.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub metrics: Vec<Metric>,
    pub family: Family,
    pub variant: PolicyVariant,
    pub policies: Vec<PolicyVariant>,
    pub scale: ScaleSource,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Serialization without the output directory, which does not affect
    /// bundle contents.
    pub fn canonical(&self) -> String {
        let c = PipelineConfig {
            out: PathBuf::new(),
            ..self.clone()
        };
        c.to_toml()
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Checks names and sizes without touching the cohort.
    pub fn plan(&self) -> Result<Plan> {
        if self.metrics.is_empty() {
            return Err(Error::InvalidArgument(
                "config: metrics must not be empty".into(),
            ));
        }
        let metrics = self
            .metrics
            .iter()
            .map(|m| m.parse())
            .collect::<Result<Vec<Metric>>>()?;
        let family: Family = self.family.parse()?;
        let variant: PolicyVariant = self.policy.parse()?;
        let policies = self
            .strat
            .policies
            .iter()
            .map(|p| p.parse())
            .collect::<Result<Vec<PolicyVariant>>>()?;
        let scale = match self.scale.as_str() {
            "rasch" => ScaleSource::Rasch,
            "2pl" => ScaleSource::TwoPl,
            "external" if self.external_scale.is_some() => ScaleSource::External,
            "external" => {
                return Err(Error::InvalidArgument(
                    "config: scale = external needs external_scale".into(),
                ))
            }
            s => {
                return Err(Error::InvalidArgument(format!(
                    "config: unknown scale {s:?}"
                )))
            }
        };
        let sizes = [
            ("n_boot", self.n_boot),
            ("strat.null_shuffles", self.strat.null_shuffles),
            ("strat.k_sub", self.strat.k_sub),
            ("strat.n_resample", self.strat.n_resample),
            ("probes.positions", self.probes.positions),
            ("probes.n_perm", self.probes.n_perm),
        ];
        for (name, v) in sizes {
            if v < 1 {
                return Err(Error::InvalidArgument(format!(
                    "config: {name} must be at least 1"
                )));
            }
        }
        if self.probes.folds < 2
            || self.probes.lambdas.is_empty()
            || self.probes.lambdas.iter().any(|l| !(*l > 0.0))
        {
            return Err(Error::InvalidArgument(
                "config: probes need at least 2 folds and positive lambdas".into(),
            ));
        }
        if self
            .strat
            .prefix_fractions
            .iter()
            .any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(Error::InvalidArgument(
                "config: prefix fractions must lie in (0, 1]".into(),
            ));
        }
        self.calib.validate()?;
        Ok(Plan {
            metrics,
            family,
            variant,
            policies,
            scale,
        })
    }

    /// `plan` plus existence of the referenced paths.
    pub fn validate(&self) -> Result<Plan> {
        let plan = self.plan()?;
        if !self.cohort.join(MANIFEST_FILE).is_file() {
            return Err(Error::InvalidArgument(format!(
                "config: no cohort manifest under {}",
                self.cohort.display()
            )));
        }
        if let Some(p) = &self.external_scale {
            if !p.is_file() {
                return Err(Error::InvalidArgument(format!(
                    "config: missing {}",
                    p.display()
                )));
            }
        }
        Ok(plan)
    }

    fn bootstrap(&self) -> BootstrapSpec {
        BootstrapSpec {
            n_boot: self.n_boot,
            seed: self.seed,
        }
    }

    fn geometry_options(&self, variant: PolicyVariant) -> CohortGeometryOptions {
        CohortGeometryOptions {
            variant,
            ..Default::default()
        }
    }
}

/// Writes a table and its sidecar under `dir`.
pub fn write_table(dir: &Path, name: &str, table: ResultTable, config_hash: &str) -> Result<()> {
    table
        .with_provenance(Provenance::current(config_hash))
        .write(&dir.join(name), TableFormat::Csv)
}

fn read_table(dir: &Path, name: &str, stage: &str) -> Result<ResultTable> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(Error::MissingStage(format!(
            "{name} (from the {stage} stage)"
        )));
    }
    ResultTable::read(&p)
}

// segment

pub fn segment_table(
    cohort: &Cohort,
    items: &[ItemMeta],
    variant: PolicyVariant,
) -> Result<ResultTable> {
    let traces = cohort.traces()?;
    let domains: BTreeMap<&str, &str> = items
        .iter()
        .map(|m| (m.item_id.as_str(), m.domain.as_str()))
        .collect();
    let mut keys: Vec<&(String, String, u32)> = traces.keys().collect();
    keys.sort();
    let mut t = ResultTable::new([
        ("item_id", ColumnType::Str),
        ("model_id", ColumnType::Str),
        ("run_id", ColumnType::Int),
        ("domain", ColumnType::Str),
        ("boundary_source", ColumnType::Str),
        ("span_start", ColumnType::Int),
        ("span_end", ColumnType::Int),
        ("segment_token_start", ColumnType::Int),
        ("segment_tokens", ColumnType::Int),
        ("truncated", ColumnType::Bool),
    ])?;
    let patterns = Default::default();
    for key in keys {
        let trace = &traces[key];
        let domain = domains.get(key.0.as_str()).copied().unwrap_or("code");
        let policy = policy_for(cohort, domain, &key.1, variant);
        let seg = detect_boundary_with(trace, &policy, &patterns);
        t.push_row(vec![
            key.0.as_str().into(),
            key.1.as_str().into(),
            (key.2 as usize).into(),
            domain.into(),
            seg.boundary_source.as_str().into(),
            seg.span.0.into(),
            seg.span.1.into(),
            seg.segment_token_start.into(),
            seg.segment_token_count.into(),
            trace.truncated.into(),
        ])?;
    }
    Ok(t)
}

// calib

/// Difficulty table (item_id, b, a) and, for fitted scales, the model
/// table and external-label validation.
pub struct Calibration {
    pub difficulty: ResultTable,
    pub abilities: Option<ResultTable>,
    pub validation: Option<ResultTable>,
    pub map: BTreeMap<String, f64>,
}

pub fn calibrate(
    config: &PipelineConfig,
    scale: ScaleSource,
    items: &[ItemMeta],
) -> Result<Calibration> {
    if scale == ScaleSource::External {
        let path = config.external_scale.as_ref().expect("validated");
        let t = ResultTable::read(path)?;
        let map = difficulties_from_table(&t)?;
        return Ok(Calibration {
            difficulty: t,
            abilities: None,
            validation: None,
            map,
        });
    }
    let m = ResponseMatrix::read_csv(&config.cohort.join(RESPONSES_FILE))?;
    let fit = FitConfig {
        seed: config.seed,
        ..config.calib
    };
    let s = match scale {
        ScaleSource::Rasch => fit_rasch(&m, &fit)?,
        _ => fit_2pl(&m, &fit)?,
    };
    Ok(Calibration {
        difficulty: s.item_table(),
        abilities: Some(s.model_table()),
        validation: validate_external(&s, items).ok(),
        map: s.difficulty_map(),
    })
}

// lencorr

pub struct LencorrOutput {
    /// Per (domain, model, layer, metric).
    pub couplings: ResultTable,
    /// Cross-layer medians per (domain, model, metric).
    pub by_model: ResultTable,
    /// Medians per (group, domain, metric), raw and corrected.
    pub summary: ResultTable,
    pub residuals: ResultTable,
    pub length_models: ResultTable,
    pub errors: Vec<String>,
}

fn role_map(cohort: &Cohort) -> BTreeMap<String, String> {
    cohort
        .manifest
        .models
        .iter()
        .map(|m| (m.id.clone(), m.role.as_str().to_string()))
        .collect()
}

fn domain_map(items: &[ItemMeta]) -> BTreeMap<String, String> {
    items
        .iter()
        .map(|m| (m.item_id.clone(), m.domain.clone()))
        .collect()
}

pub fn lencorr_stage(
    rows: &[CohortGeometryRow],
    difficulties: &BTreeMap<String, f64>,
    roles: &BTreeMap<String, String>,
    domains: &BTreeMap<String, String>,
    metrics: &[Metric],
    family: Family,
    spec: &BootstrapSpec,
) -> Result<LencorrOutput> {
    let mut cols: Vec<(&str, ColumnType)> = vec![("domain", ColumnType::Str)];
    cols.extend(COUPLING_COLUMNS.iter().copied());
    let mut couplings = ResultTable::new(cols)?;
    let mut by_model = ResultTable::new([
        ("domain", ColumnType::Str),
        ("group", ColumnType::Str),
        ("model_id", ColumnType::Str),
        ("metric", ColumnType::Str),
        ("rho_raw", ColumnType::Real),
        ("rho_corrected", ColumnType::Real),
        ("ci_low", ColumnType::Real),
        ("ci_high", ColumnType::Real),
        ("layer_min", ColumnType::Real),
        ("layer_max", ColumnType::Real),
        ("n_layers", ColumnType::Int),
    ])?;
    let mut residuals = ResultTable::new([
        ("domain", ColumnType::Str),
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("metric", ColumnType::Str),
        ("item_id", ColumnType::Str),
        ("difficulty", ColumnType::Real),
        ("log_length", ColumnType::Real),
        ("regressor", ColumnType::Real),
        ("residual", ColumnType::Real),
    ])?;
    let mut length_models = ResultTable::new([
        ("domain", ColumnType::Str),
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("metric", ColumnType::Str),
        ("family", ColumnType::Str),
        ("intercept", ColumnType::Real),
        ("slope", ColumnType::Real),
        ("slope_se", ColumnType::Real),
        ("r_squared", ColumnType::Real),
        ("n_used", ColumnType::Int),
        ("dropped", ColumnType::Int),
    ])?;
    let mut errors = Vec::new();
    let all_domains: BTreeSet<&str> = domains.values().map(String::as_str).collect();
    // (group, domain, metric) -> per-model (raw, corrected)
    let mut grouped: BTreeMap<(String, String, Metric), Vec<(f64, f64)>> = BTreeMap::new();
    for &metric in metrics {
        let agg = aggregate_runs(rows, metric, LengthAverage::default());
        for &domain in &all_domains {
            let items: Vec<ItemGeometry> = agg
                .items
                .iter()
                .filter(|i| domains.get(&i.item_id).map(String::as_str) == Some(domain))
                .cloned()
                .collect();
            let cells: Vec<((String, u32), Vec<ItemGeometry>)> =
                group_by_cell(&items).into_iter().collect();
            let fitted: Vec<_> = cells
                .into_par_iter()
                .map(|(key, its)| {
                    let r = couple_items(&its, difficulties, metric, family, spec);
                    (key, its, r)
                })
                .collect();
            let mut per_model: BTreeMap<String, Vec<CouplingResult>> = BTreeMap::new();
            for ((model, layer), its, r) in fitted {
                let (lm, res, c) = match r {
                    Ok(t) => t,
                    Err(e) => {
                        errors.push(format!("{domain}/{model}/layer {layer}/{metric}: {e}"));
                        continue;
                    }
                };
                let mut row = vec![Value::from(domain)];
                row.extend(c.row());
                couplings.push_row(row)?;
                length_models.push_row(vec![
                    domain.into(),
                    model.as_str().into(),
                    (layer as usize).into(),
                    metric.as_str().into(),
                    family.as_str().into(),
                    lm.intercept.into(),
                    lm.slope.into(),
                    lm.slope_se.into(),
                    lm.r_squared.into(),
                    lm.n_used.into(),
                    lm.dropped.into(),
                ])?;
                let ll: BTreeMap<&str, f64> = its
                    .iter()
                    .map(|i| (i.item_id.as_str(), i.log_length))
                    .collect();
                for rr in &res.rows {
                    residuals.push_row(vec![
                        domain.into(),
                        model.as_str().into(),
                        (layer as usize).into(),
                        metric.as_str().into(),
                        rr.item_id.as_str().into(),
                        difficulties.get(&rr.item_id).copied().into(),
                        ll.get(rr.item_id.as_str()).copied().into(),
                        rr.regressor.into(),
                        rr.residual.into(),
                    ])?;
                }
                per_model.entry(model).or_default().push(c);
            }
            for (model, cs) in per_model {
                let s = layer_summary(&cs)?;
                let group = roles
                    .get(&model)
                    .cloned()
                    .unwrap_or_else(|| "unknown".into());
                by_model.push_row(vec![
                    domain.into(),
                    group.as_str().into(),
                    model.as_str().into(),
                    metric.as_str().into(),
                    s.summary.rho_raw.into(),
                    s.summary.rho_corrected.into(),
                    s.summary.ci_low.into(),
                    s.summary.ci_high.into(),
                    s.min.into(),
                    s.max.into(),
                    s.n_layers.into(),
                ])?;
                grouped
                    .entry((group, domain.to_string(), metric))
                    .or_default()
                    .push((s.summary.rho_raw, s.summary.rho_corrected));
            }
        }
    }
    let mut summary = ResultTable::new([
        ("group", ColumnType::Str),
        ("domain", ColumnType::Str),
        ("metric", ColumnType::Str),
        ("n_models", ColumnType::Int),
        ("median_raw", ColumnType::Real),
        ("median_corrected", ColumnType::Real),
    ])?;
    for ((group, domain, metric), v) in grouped {
        let raw: Vec<f64> = v.iter().map(|p| p.0).collect();
        let cor: Vec<f64> = v.iter().map(|p| p.1).collect();
        summary.push_row(vec![
            group.into(),
            domain.into(),
            metric.as_str().into(),
            v.len().into(),
            median(&raw).into(),
            median(&cor).into(),
        ])?;
    }
    Ok(LencorrOutput {
        couplings,
        by_model,
        summary,
        residuals,
        length_models,
        errors,
    })
}

// strat

/// Named tables plus messages for the parts that could not be computed.
#[derive(Default)]
pub struct StageTables {
    pub tables: Vec<(String, ResultTable)>,
    pub errors: Vec<String>,
}

impl StageTables {
    fn push(&mut self, name: &str, t: ResultTable) {
        self.tables.push((name.to_string(), t));
    }

    fn record<T>(&mut self, what: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{what}: {e}"));
                None
            }
        }
    }
}

fn correctness_for(items: &[ItemMeta], model: &str) -> BTreeMap<String, BTreeMap<u32, bool>> {
    items
        .iter()
        .filter_map(|m| {
            Some((
                m.item_id.clone(),
                m.correctness.as_ref()?.get(model)?.clone(),
            ))
        })
        .collect()
}

pub struct StratInputs<'a> {
    pub cohort: &'a Cohort,
    pub items: &'a [ItemMeta],
    pub rows: &'a [CohortGeometryRow],
    pub difficulties: &'a BTreeMap<String, f64>,
}

pub fn strat_stage(
    config: &PipelineConfig,
    plan: &Plan,
    input: &StratInputs,
) -> Result<StageTables> {
    let metric = plan.metrics[0];
    let family = plan.family;
    let spec = config.bootstrap();
    let mut out = StageTables::default();
    let agg = aggregate_runs(input.rows, metric, LengthAverage::default());
    let cells = group_by_cell(&agg.items);

    let mut strata: Option<ResultTable> = None;
    for ((model, layer), its) in &cells {
        let corr = correctness_for(input.items, model);
        let r = correctness_stratified(its, input.difficulties, &corr, metric, family, &spec);
        if let Some(t) = out.record(&format!("strata {model}/layer {layer}"), r) {
            match &mut strata {
                Some(s) => s.extend(t)?,
                None => strata = Some(t),
            }
        }
    }
    if let Some(s) = strata {
        out.push("strata.csv", s);
    }

    if !config.strat.prefix_fractions.is_empty() {
        let opts = config.geometry_options(plan.variant);
        let curve = prefix_geometry(
            input.cohort,
            input.items,
            &opts,
            &config.strat.prefix_fractions,
        )
        .and_then(|rows| prefix_curve(&rows, input.difficulties, metric, family, &spec));
        if let Some(c) = out.record("prefix curve", curve) {
            out.push("prefix.csv", c.points);
            out.push("prefix_flatness.csv", c.flatness);
        }
    }

    let domains = domain_map(input.items);
    let nulls: Vec<_> = cells
        .par_iter()
        .map(|(key, its)| {
            let r = null_label_battery(
                its,
                input.difficulties,
                &domains,
                family,
                config.strat.null_shuffles,
                config.seed,
            );
            (key.clone(), r)
        })
        .collect();
    let mut ok = Vec::new();
    for (key, r) in nulls {
        if let Some(p) = out.record(&format!("null battery {}/layer {}", key.0, key.1), r) {
            ok.push((key, p));
        }
    }
    out.push("null_battery.csv", null_battery_table(&ok));

    let mut stability = ResultTable::new([
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("statistic", ColumnType::Str),
        ("value", ColumnType::Real),
    ])?;
    let mut by_cell: BTreeMap<(String, u32), Vec<CohortGeometryRow>> = BTreeMap::new();
    for r in input.rows {
        by_cell
            .entry((r.record.key.model_id.clone(), r.record.key.layer_index))
            .or_default()
            .push(r.clone());
    }
    for ((model, layer), rows) in &by_cell {
        let r = run_count_stability(
            rows,
            input.difficulties,
            metric,
            family,
            config.strat.k_sub,
            config.strat.n_resample,
            config.seed,
        );
        if let Some(s) = out.record(&format!("run-count stability {model}/layer {layer}"), r) {
            for row in s.to_table().rows() {
                stability.push_row(vec![
                    model.as_str().into(),
                    (*layer as usize).into(),
                    row[0].clone(),
                    row[1].clone(),
                ])?;
            }
        }
    }
    out.push("run_stability.csv", stability);

    if !plan.policies.is_empty() {
        let r = policy_deltas(config, plan, input, metric);
        if let Some(t) = out.record("boundary delta", r) {
            out.push("boundary_delta.csv", t);
        }
    }
    Ok(out)
}

fn policy_deltas(
    config: &PipelineConfig,
    plan: &Plan,
    input: &StratInputs,
    metric: Metric,
) -> Result<ResultTable> {
    let spec = config.bootstrap();
    let reference = plan.variant.to_string();
    let mut couplings = Vec::new();
    let mut variants = vec![plan.variant];
    variants.extend(plan.policies.iter().copied().filter(|v| *v != plan.variant));
    for v in variants {
        let rows = if v == plan.variant {
            input.rows.to_vec()
        } else {
            geometry_for_cohort(input.cohort, input.items, &config.geometry_options(v))?.rows
        };
        let agg = aggregate_runs(&rows, metric, LengthAverage::default());
        for (_, its) in group_by_cell(&agg.items) {
            let (_, res, c) = couple_items(&its, input.difficulties, metric, plan.family, &spec)?;
            couplings.push(PolicyCoupling {
                policy: v.to_string(),
                result: c,
                items: res.rows.iter().map(|r| r.item_id.clone()).collect(),
            });
        }
    }
    boundary_delta(&reference, &couplings, &role_map(input.cohort))
}

// probes

pub fn probe_stage(
    config: &PipelineConfig,
    plan: &Plan,
    input: &StratInputs,
) -> Result<StageTables> {
    let mut out = StageTables::default();
    let cfg = ProbeConfig {
        lambdas: config.probes.lambdas.clone(),
        folds: config.probes.folds,
        seed: config.seed,
    };
    let agg = aggregate_runs(input.rows, plan.metrics[0], LengthAverage::default());
    let opts = config.geometry_options(plan.variant);
    let mut grid = ResultTable::new([
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("position", ColumnType::Int),
        ("cv_r2", ColumnType::Real),
        ("perm_p", ColumnType::Real),
        ("n_items", ColumnType::Int),
    ])?;
    let mut inlp = ResultTable::new([
        ("model_id", ColumnType::Str),
        ("layer_index", ColumnType::Int),
        ("position", ColumnType::Int),
        ("iteration", ColumnType::Int),
        ("cv_r2", ColumnType::Real),
    ])?;
    let count = config.probes.positions;
    for model in input.cohort.manifest.trajectory_models() {
        let mut cells: Vec<ProbeCell> = Vec::new();
        let mut datasets = BTreeMap::new();
        for layer in model.layers() {
            let trajs = segmented_trajectories(input.cohort, input.items, &opts, |k| {
                k.model_id == model.id && k.layer_index == layer
            })?;
            let mut by_item: BTreeMap<String, Vec<Trajectory<f64>>> = BTreeMap::new();
            for (k, t) in trajs {
                by_item.entry(k.item_id).or_default().push(t);
            }
            let grouped: Vec<(String, Vec<Trajectory<f64>>)> = by_item.into_iter().collect();
            let log_lengths: BTreeMap<String, f64> = agg
                .items
                .iter()
                .filter(|i| i.model_id == model.id && i.layer_index == layer)
                .map(|i| (i.item_id.clone(), i.log_length))
                .collect();
            let fitted: Vec<_> = (0..count)
                .into_par_iter()
                .map(|index| {
                    let ds = prepare_dataset(
                        &grouped,
                        PositionSpec { index, count },
                        input.difficulties,
                        &log_lengths,
                        true,
                    )?;
                    let probe = fit_ridge_cv(&ds, &cfg)?;
                    Ok((index, ds, probe.cv_r2))
                })
                .collect();
            for r in fitted {
                let Some((index, ds, r2)) =
                    out.record(&format!("probe {}/layer {layer}", model.id), r)
                else {
                    continue;
                };
                cells.push(ProbeCell {
                    layer_index: layer,
                    position: index,
                    cv_r2: r2,
                    perm_p: None,
                    n_items: ds.n_items(),
                });
                datasets.insert((layer, index), ds);
            }
        }
        if let Some(peak) = peak_cell(&cells).cloned() {
            let ds = &datasets[&(peak.layer_index, peak.position)];
            let p = probe_permutation_p(ds, &cfg, peak.cv_r2, config.probes.n_perm, config.seed);
            if let Some(p) = out.record(&format!("probe permutation {}", model.id), p) {
                for c in cells
                    .iter_mut()
                    .filter(|c| c.layer_index == peak.layer_index && c.position == peak.position)
                {
                    c.perm_p = Some(p);
                }
            }
            let erased = inlp_erase(
                ds,
                &cfg,
                config.probes.inlp_threshold,
                config.probes.inlp_max_iters,
            );
            if let Some(e) = out.record(&format!("INLP {}", model.id), erased) {
                for (it, r2) in e.r2_history.iter().enumerate() {
                    inlp.push_row(vec![
                        model.id.as_str().into(),
                        (peak.layer_index as usize).into(),
                        peak.position.into(),
                        it.into(),
                        (*r2).into(),
                    ])?;
                }
            }
        }
        for c in &cells {
            grid.push_row(vec![
                model.id.as_str().into(),
                (c.layer_index as usize).into(),
                c.position.into(),
                c.cv_r2.into(),
                c.perm_p.into(),
                c.n_items.into(),
            ])?;
        }
    }
    out.push("probe_grid.csv", grid);
    out.push("inlp.csv", inlp);
    Ok(out)
}

// behavior

/// The model a label file refers to.
pub fn behavior_model(config: &PipelineConfig, cohort: &Cohort) -> Result<String> {
    if let Some(m) = &config.behavior.model {
        return cohort
            .manifest
            .model(m)
            .map(|d| d.id.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("behavior model {m} not in manifest")));
    }
    let models: Vec<_> = cohort.manifest.trajectory_models().collect();
    models
        .iter()
        .find(|m| m.role == ModelRole::Reasoning)
        .or(models.first())
        .map(|m| m.id.clone())
        .ok_or_else(|| Error::InvalidArgument("cohort has no trajectory model".into()))
}

pub fn behavior_stage(
    config: &PipelineConfig,
    plan: &Plan,
    input: &StratInputs,
) -> Result<StageTables> {
    let mut out = StageTables::default();
    let path = input.cohort.root().join(LABELS_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let labels = read_labels(&path)?;
    let model = behavior_model(config, input.cohort)?;
    let consensus = majority_vote(&labels)?;
    let pooling = if config.behavior.pooled {
        RatePooling::Pooled
    } else {
        RatePooling::MeanOfRuns
    };
    let counts = BTreeMap::new();
    let rates = behavior_rates(&consensus, &counts, pooling);
    out.push("behavior_rates.csv", rates.to_table());
    if let Some(t) = out.record("agreement", agreement_report(&labels)) {
        out.push("agreement.csv", t);
    }
    let chars: BTreeMap<(String, u32), usize> = input
        .cohort
        .traces()?
        .into_values()
        .filter(|t| t.model_id == model)
        .map(|t| ((t.item_id, t.run_id), t.text.len()))
        .collect();
    out.push(
        "stripes.csv",
        stripe_table(&stripe_spans(&consensus, &counts, &chars)),
    );

    let layers: Vec<u32> = input
        .cohort
        .manifest
        .model(&model)
        .map(|m| m.layers().collect())
        .unwrap_or_default();
    let layer = config
        .behavior
        .layer
        .or_else(|| layers.get(layers.len() / 2).copied())
        .ok_or_else(|| Error::InvalidArgument(format!("model {model} has no layers")))?;
    let agg = aggregate_runs(input.rows, plan.metrics[0], LengthAverage::default());
    let geo: BTreeMap<&str, &ItemGeometry> = agg
        .items
        .iter()
        .filter(|i| i.model_id == model && i.layer_index == layer)
        .map(|i| (i.item_id.as_str(), i))
        .collect();
    let mut results = Vec::new();
    for cat in Category::ALL.into_iter().filter(|c| *c != Category::None) {
        let rate = rates.rate_map(cat);
        let (mut d, mut m, mut g, mut l) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (item, r) in &rate {
            if let (Some(b), Some(gi)) = (input.difficulties.get(item), geo.get(item.as_str())) {
                d.push(*b);
                m.push(*r);
                g.push(gi.value);
                l.push(gi.log_length);
            }
        }
        let r = indirect_effect(cat.as_str(), &d, &m, &g, &l, config.n_boot, config.seed);
        if let Some(r) = out.record(&format!("mediation {cat}"), r) {
            results.push(r);
        }
    }
    out.push("mediation.csv", mediation_table(&results));
    Ok(out)
}

// pipeline

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    /// "ok", "partial", "failed" or "skipped".
    pub status: String,
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub cohort_manifest_sha256: String,
    pub seed: u64,
    pub n_boot: usize,
    pub config: String,
    pub stages: Vec<StageStatus>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub provenance: ProvenanceManifest,
}

struct Writer<'a> {
    dir: &'a Path,
    hash: &'a str,
    files: Vec<String>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, t: ResultTable) -> Result<()> {
        write_table(self.dir, name, t, self.hash)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn status_of(stage: &str, r: Result<StageTables>, w: &mut Writer) -> Result<StageStatus> {
    Ok(match r {
        Ok(st) => {
            for (name, t) in st.tables {
                w.put(&name, t)?;
            }
            StageStatus {
                stage: stage.into(),
                status: if st.errors.is_empty() {
                    "ok"
                } else {
                    "partial"
                }
                .into(),
                messages: st.errors,
            }
        }
        Err(e) => StageStatus {
            stage: stage.into(),
            status: "failed".into(),
            messages: vec![e.to_string()],
        },
    })
}

fn skipped(stage: &str) -> StageStatus {
    StageStatus {
        stage: stage.into(),
        status: "skipped".into(),
        messages: Vec::new(),
    }
}

/// Runs every configured stage and writes the bundle to `config.out`.
/// Segment, geometry, calibration and length correction are fatal; the
/// sensitivity, probe and behavior stages record failures and continue.
pub fn run_pipeline(config: &PipelineConfig) -> Result<ReportBundle> {
    let plan = config.validate()?;
    let hash = config.hash();
    let cohort = Cohort::open(&config.cohort)?;
    let items = crate::archive::load_items(&config.cohort)?;
    let dir = config.out.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut w = Writer {
        dir: &dir,
        hash: &hash,
        files: Vec::new(),
    };
    let mut stages = Vec::new();
    let ok = |s: &str| StageStatus {
        stage: s.into(),
        status: "ok".into(),
        messages: Vec::new(),
    };

    w.put("segment.csv", segment_table(&cohort, &items, plan.variant)?)?;
    stages.push(ok("segment"));

    let geo = geometry_for_cohort(&cohort, &items, &config.geometry_options(plan.variant))?;
    w.put("geometry.csv", geo.to_table())?;
    stages.push(ok("geometry"));

    let cal = calibrate(config, plan.scale, &items)?;
    w.put("difficulty.csv", cal.difficulty)?;
    if let Some(t) = cal.abilities {
        w.put("abilities.csv", t)?;
    }
    if let Some(t) = cal.validation {
        w.put("difficulty_validation.csv", t)?;
    }
    stages.push(ok("calib"));

    let lc = lencorr_stage(
        &geo.rows,
        &cal.map,
        &role_map(&cohort),
        &domain_map(&items),
        &plan.metrics,
        plan.family,
        &config.bootstrap(),
    )?;
    if lc.couplings.is_empty() {
        return Err(Error::Degenerate(format!(
            "no (model, layer) cell could be coupled: {}",
            lc.errors.join("; ")
        )));
    }
    w.put("couplings.csv", lc.couplings)?;
    w.put("couplings_by_model.csv", lc.by_model)?;
    w.put("summary.csv", lc.summary)?;
    w.put("residuals.csv", lc.residuals)?;
    w.put("length_models.csv", lc.length_models)?;
    stages.push(StageStatus {
        stage: "lencorr".into(),
        status: if lc.errors.is_empty() {
            "ok"
        } else {
            "partial"
        }
        .into(),
        messages: lc.errors,
    });

    let input = StratInputs {
        cohort: &cohort,
        items: &items,
        rows: &geo.rows,
        difficulties: &cal.map,
    };
    stages.push(if config.strat.enabled {
        status_of("strat", strat_stage(config, &plan, &input), &mut w)?
    } else {
        skipped("strat")
    });
    stages.push(if config.probes.enabled {
        status_of("probes", probe_stage(config, &plan, &input), &mut w)?
    } else {
        skipped("probes")
    });
    stages.push(if config.behavior.enabled {
        status_of("behavior", behavior_stage(config, &plan, &input), &mut w)?
    } else {
        skipped("behavior")
    });

    let manifest_bytes =
        fs::read(config.cohort.join(MANIFEST_FILE)).map_err(|e| Error::io(&config.cohort, e))?;
    let provenance = ProvenanceManifest {
        tool_version: Provenance::current("").tool_version,
        config_hash: hash.clone(),
        cohort_manifest_sha256: hex::encode(Sha256::digest(&manifest_bytes)),
        seed: config.seed,
        n_boot: config.n_boot,
        config: config.canonical(),
        stages,
        files: w.files,
    };
    let text = serde_json::to_string_pretty(&provenance).expect("provenance serializes") + "\n";
    let p = dir.join(PROVENANCE_FILE);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(ReportBundle { dir, provenance })
}

// plot data

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Dumbbell,
    Prefix,
    Heatmap,
    ResidualScatter,
    Stripe,
}

impl PlotKind {
    pub const ALL: [PlotKind; 5] = [
        PlotKind::Dumbbell,
        PlotKind::Prefix,
        PlotKind::Heatmap,
        PlotKind::ResidualScatter,
        PlotKind::Stripe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Dumbbell => "dumbbell",
            PlotKind::Prefix => "prefix",
            PlotKind::Heatmap => "heatmap",
            PlotKind::ResidualScatter => "residual_scatter",
            PlotKind::Stripe => "stripe",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown plot kind {s:?}")))
    }
}

/// Copies the named columns of `src`, optionally renaming, keeping rows
/// accepted by `keep`.
fn select(
    src: &ResultTable,
    cols: &[(&str, &str)],
    keep: impl Fn(&[Value]) -> bool,
) -> Result<ResultTable> {
    let idx: Vec<usize> = cols
        .iter()
        .map(|(from, _)| {
            src.column_index(from)
                .ok_or_else(|| Error::schema("plot source", format!("missing column {from}")))
        })
        .collect::<Result<_>>()?;
    let mut t = ResultTable::new(
        cols.iter()
            .zip(&idx)
            .map(|((_, to), &i)| (*to, src.columns()[i].ty)),
    )?;
    for row in src.rows().iter().filter(|r| keep(r)) {
        t.push_row(idx.iter().map(|&i| row[i].clone()).collect())?;
    }
    t.provenance = src.provenance.clone();
    Ok(t)
}

/// Plot-ready table for `kind` from a bundle directory.
///
/// - dumbbell: domain, group, model, metric, raw, corrected, ci_lo, ci_hi
/// - prefix: model, layer, fraction, rho, ci_lo, ci_hi (skipped fractions dropped)
/// - heatmap: model, layer, position, cv_r2, perm_p
/// - residual_scatter: model, layer, metric, item, log_length, residual, difficulty
/// - stripe: item, run_id, span_start_frac, span_end_frac, category
pub fn emit_plot_data(bundle: &Path, kind: PlotKind) -> Result<ResultTable> {
    let all = |_: &[Value]| true;
    match kind {
        PlotKind::Dumbbell => select(
            &read_table(bundle, "couplings_by_model.csv", "lencorr")?,
            &[
                ("domain", "domain"),
                ("group", "group"),
                ("model_id", "model"),
                ("metric", "metric"),
                ("rho_raw", "raw"),
                ("rho_corrected", "corrected"),
                ("ci_low", "ci_lo"),
                ("ci_high", "ci_hi"),
            ],
            all,
        ),
        PlotKind::Prefix => {
            let src = read_table(bundle, "prefix.csv", "strat")?;
            let skip = src
                .column_index("skipped")
                .ok_or_else(|| Error::schema("prefix.csv", "missing column skipped"))?;
            select(
                &src,
                &[
                    ("model_id", "model"),
                    ("layer_index", "layer"),
                    ("fraction", "fraction"),
                    ("rho", "rho"),
                    ("ci_lo", "ci_lo"),
                    ("ci_hi", "ci_hi"),
                ],
                |r| r[skip].as_bool() != Some(true),
            )
        }
        PlotKind::Heatmap => select(
            &read_table(bundle, "probe_grid.csv", "probes")?,
            &[
                ("model_id", "model"),
                ("layer_index", "layer"),
                ("position", "position"),
                ("cv_r2", "cv_r2"),
                ("perm_p", "perm_p"),
            ],
            all,
        ),
        PlotKind::ResidualScatter => select(
            &read_table(bundle, "residuals.csv", "lencorr")?,
            &[
                ("model_id", "model"),
                ("layer_index", "layer"),
                ("metric", "metric"),
                ("item_id", "item"),
                ("log_length", "log_length"),
                ("residual", "residual"),
                ("difficulty", "difficulty"),
            ],
            all,
        ),
        PlotKind::Stripe => select(
            &read_table(bundle, "stripes.csv", "behavior")?,
            &[
                ("item", "item"),
                ("run_id", "run_id"),
                ("span_start_frac", "span_start_frac"),
                ("span_end_frac", "span_end_frac"),
                ("category", "category"),
            ],
            all,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_cohort, IrtLaw, LengthLaw, SynthSpec};

    fn small_cohort(dir: &Path) {
        let spec = SynthSpec {
            n_items: 60,
            domains: vec!["code".into(), "math".into()],
            runs: 3,
            hidden_dim: 6,
            layers: vec![1, 2],
            irt: IrtLaw {
                calibration_models: 10,
                ..IrtLaw::default()
            },
            length: LengthLaw {
                log_n_mean: 300f64.ln(),
                ..LengthLaw::default()
            },
            seed: 4,
            ..SynthSpec::default()
        };
        synth_cohort(&spec, dir).unwrap();
    }

    fn config(cohort: &Path, out: &Path) -> PipelineConfig {
        PipelineConfig {
            cohort: cohort.to_path_buf(),
            out: out.to_path_buf(),
            n_boot: 50,
            strat: StratConfig {
                null_shuffles: 20,
                n_resample: 20,
                k_sub: 2,
                policies: vec!["full_output".into()],
                ..StratConfig::default()
            },
            probes: ProbeStageConfig {
                positions: 3,
                n_perm: 10,
                ..ProbeStageConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn unknown_names_are_usage_errors() {
        for (field, bad) in [
            ("metrics", "[\"straightness\"]"),
            ("family", "\"cubic\""),
            ("policy", "\"halfway\""),
        ] {
            let c = PipelineConfig::from_toml(&format!("{field} = {bad}")).unwrap();
            assert!(
                matches!(c.plan(), Err(Error::InvalidArgument(_))),
                "{field}"
            );
        }
        assert!(PipelineConfig::from_toml("nonsense = 1").is_err());
        let c = PipelineConfig {
            n_boot: 0,
            ..PipelineConfig::default()
        };
        assert!(matches!(c.plan(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn config_roundtrip_and_hash() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let d = PipelineConfig {
            seed: 1,
            ..c.clone()
        };
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn end_to_end_bundle_is_deterministic_and_plottable() {
        let root = tempfile::tempdir().unwrap();
        let cohort = root.path().join("cohort");
        small_cohort(&cohort);
        let a = run_pipeline(&config(&cohort, &root.path().join("a"))).unwrap();
        let b = run_pipeline(&config(&cohort, &root.path().join("b"))).unwrap();
        assert_eq!(a.provenance.files, b.provenance.files);
        let mut names: Vec<_> = fs::read_dir(&a.dir)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(names.len() > 2 * a.provenance.files.len());
        for f in names {
            let x = fs::read(a.dir.join(&f)).unwrap();
            let y = fs::read(b.dir.join(&f)).unwrap();
            assert!(x == y, "{f:?} differs");
        }
        let statuses: BTreeMap<&str, &str> = a
            .provenance
            .stages
            .iter()
            .map(|s| (s.stage.as_str(), s.status.as_str()))
            .collect();
        for s in [
            "segment", "geometry", "calib", "lencorr", "strat", "probes", "behavior",
        ] {
            assert_ne!(statuses[s], "failed", "{s}: {:?}", a.provenance.stages);
        }
        let dumbbell = emit_plot_data(&a.dir, PlotKind::Dumbbell).unwrap();
        // 2 domains × 2 models × 4 metrics
        assert_eq!(dumbbell.len(), 16);
        for kind in PlotKind::ALL {
            assert!(!emit_plot_data(&a.dir, kind).unwrap().is_empty(), "{kind}");
        }
        let prefix = emit_plot_data(&a.dir, PlotKind::Prefix).unwrap();
        let names: Vec<&str> = prefix.columns().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            ["model", "layer", "fraction", "rho", "ci_lo", "ci_hi"]
        );
    }

    #[test]
    fn missing_stage_output_is_named() {
        let dir = tempfile::tempdir().unwrap();
        match emit_plot_data(dir.path(), PlotKind::Stripe) {
            Err(Error::MissingStage(m)) => {
                assert!(m.contains("stripes.csv") && m.contains("behavior"))
            }
            other => panic!("{other:?}"),
        }
    }
}
