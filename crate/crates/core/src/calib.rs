//! Binomial Rasch (1PL) and 2PL calibration by MAP with Adam, boundary-item
//! classification, leave-one-model-out stability and external validation.

use crate::archive::ItemMeta;
use crate::error::{Error, Result};
use crate::stats::{kruskal_wallis, pearson, spearman};
use crate::table::{ColumnType, ResultTable, Value};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Successes and attempts per (item, model), stored item-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    pub items: Vec<String>,
    pub models: Vec<String>,
    k: Vec<u32>,
    n: Vec<u32>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ResponseRow {
    item_id: String,
    model_id: String,
    k: u32,
    n: u32,
}

impl ResponseMatrix {
    pub fn new(items: Vec<String>, models: Vec<String>, k: Vec<u32>, n: Vec<u32>) -> Result<Self> {
        let cells = items.len() * models.len();
        if k.len() != cells || n.len() != cells {
            return Err(Error::DimensionMismatch {
                expected: cells,
                found: k.len().min(n.len()),
            });
        }
        if let Some(i) = (0..cells).find(|&c| k[c] > n[c]) {
            return Err(Error::schema(
                "response matrix",
                format!(
                    "k > n for item {} model {}",
                    items[i / models.len()],
                    models[i % models.len()]
                ),
            ));
        }
        Ok(Self {
            items,
            models,
            k,
            n,
        })
    }

    /// Builds a matrix from sparse cells; missing cells have n = 0.
    pub fn from_cells(cells: impl IntoIterator<Item = (String, String, u32, u32)>) -> Result<Self> {
        let cells: Vec<_> = cells.into_iter().collect();
        let items: Vec<String> = cells
            .iter()
            .map(|c| c.0.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let models: Vec<String> = cells
            .iter()
            .map(|c| c.1.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let ii: BTreeMap<&str, usize> = items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mi: BTreeMap<&str, usize> = models
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let m = models.len();
        let mut k = vec![0; items.len() * m];
        let mut n = vec![0; items.len() * m];
        for (item, model, kk, nn) in &cells {
            let c = ii[item.as_str()] * m + mi[model.as_str()];
            k[c] += kk;
            n[c] += nn;
        }
        Self::new(items, models, k, n)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut cells = Vec::new();
        for row in rdr.deserialize() {
            let r: ResponseRow = row.map_err(|e| csv_error(path, e))?;
            cells.push((r.item_id, r.model_id, r.k, r.n));
        }
        Self::from_cells(cells)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for (i, item) in self.items.iter().enumerate() {
            for (j, model) in self.models.iter().enumerate() {
                w.serialize(ResponseRow {
                    item_id: item.clone(),
                    model_id: model.clone(),
                    k: self.k(i, j),
                    n: self.n(i, j),
                })
                .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn k(&self, item: usize, model: usize) -> u32 {
        self.k[item * self.models.len() + model]
    }

    pub fn n(&self, item: usize, model: usize) -> u32 {
        self.n[item * self.models.len() + model]
    }

    pub fn set(&mut self, item: usize, model: usize, k: u32, n: u32) {
        assert!(k <= n);
        let c = item * self.models.len() + model;
        self.k[c] = k;
        self.n[c] = n;
    }

    /// The same matrix without one model column.
    pub fn without_model(&self, model: usize) -> Self {
        let keep: Vec<usize> = (0..self.n_models()).filter(|&j| j != model).collect();
        let mut k = Vec::with_capacity(self.n_items() * keep.len());
        let mut n = Vec::with_capacity(k.capacity());
        for i in 0..self.n_items() {
            for &j in &keep {
                k.push(self.k(i, j));
                n.push(self.n(i, j));
            }
        }
        Self {
            items: self.items.clone(),
            models: keep.iter().map(|&j| self.models[j].clone()).collect(),
            k,
            n,
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::schema(path.display().to_string(), format!("{other:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    /// Minimum number of epochs before the patience rule may stop the fit.
    pub max_epochs: usize,
    pub patience: usize,
    pub prior_sd: f64,
    /// Prior sd on log-discrimination (2PL only).
    pub log_a_prior_sd: f64,
    /// Minimum loss decrease that resets the patience counter.
    pub tolerance: f64,
    /// Absolute epoch limit.
    pub hard_cap: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_epochs: 2000,
            patience: 200,
            prior_sd: 1.0,
            log_a_prior_sd: 0.5,
            tolerance: 1e-6,
            hard_cap: 50_000,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidArgument(
                "patience must not exceed max_epochs".into(),
            ));
        }
        if !(self.prior_sd > 0.0) || !(self.log_a_prior_sd > 0.0) {
            return Err(Error::InvalidArgument("prior sd must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub stopped_epoch: usize,
    pub converged: bool,
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyScale {
    pub items: Vec<String>,
    pub models: Vec<String>,
    pub difficulties: Vec<f64>,
    pub abilities: Vec<f64>,
    pub discriminations: Option<Vec<f64>>,
    pub report: FitReport,
}

impl DifficultyScale {
    pub fn difficulty_map(&self) -> BTreeMap<String, f64> {
        self.items
            .iter()
            .cloned()
            .zip(self.difficulties.iter().copied())
            .collect()
    }

    pub fn item_table(&self) -> ResultTable {
        let mut t = ResultTable::new([
            ("item_id", ColumnType::Str),
            ("b", ColumnType::Real),
            ("a", ColumnType::Real),
        ])
        .expect("static schema");
        for (i, item) in self.items.iter().enumerate() {
            let a = self.discriminations.as_ref().map(|a| a[i]);
            t.push_row(vec![
                item.as_str().into(),
                self.difficulties[i].into(),
                a.into(),
            ])
            .expect("schema");
        }
        t
    }

    pub fn model_table(&self) -> ResultTable {
        let mut t = ResultTable::new([("model_id", ColumnType::Str), ("theta", ColumnType::Real)])
            .expect("static schema");
        for (m, th) in self.models.iter().zip(&self.abilities) {
            t.push_row(vec![m.as_str().into(), (*th).into()])
                .expect("schema");
        }
        t
    }
}

/// Reads item difficulties from a table with `item_id` and `b` columns.
pub fn difficulties_from_table(t: &ResultTable) -> Result<BTreeMap<String, f64>> {
    let ids = t.str_column("item_id")?;
    let b = t.real_column("b")?;
    Ok(ids
        .into_iter()
        .zip(b)
        .filter_map(|(id, b)| b.map(|b| (id, b)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrtModel {
    Rasch,
    TwoPl,
}

/// Parameter vector layout: θ (models), b (items), then log a (items, 2PL).
fn n_params(m: &ResponseMatrix, model: IrtModel) -> usize {
    match model {
        IrtModel::Rasch => m.n_models() + m.n_items(),
        IrtModel::TwoPl => m.n_models() + 2 * m.n_items(),
    }
}

/// Negative log posterior and its gradient.
pub fn objective(
    m: &ResponseMatrix,
    model: IrtModel,
    params: &[f64],
    config: &FitConfig,
) -> (f64, Vec<f64>) {
    let nm = m.n_models();
    let ni = m.n_items();
    let (theta, rest) = params.split_at(nm);
    let (b, log_a) = rest.split_at(ni);
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for i in 0..ni {
        let a = if model == IrtModel::TwoPl {
            log_a[i].exp()
        } else {
            1.0
        };
        for j in 0..nm {
            let n = m.n(i, j) as f64;
            if n == 0.0 {
                continue;
            }
            let k = m.k(i, j) as f64;
            let diff = theta[j] - b[i];
            let z = a * diff;
            // log σ(−z) = log σ(z) − z; one exp serves both terms
            let e = (-z.abs()).exp();
            let (log_sig, sig) = if z >= 0.0 {
                (-e.ln_1p(), 1.0 / (1.0 + e))
            } else {
                (z - e.ln_1p(), e / (1.0 + e))
            };
            loss -= n * log_sig - (n - k) * z;
            let g = n * sig - k;
            grad[j] += g * a;
            grad[nm + i] -= g * a;
            if model == IrtModel::TwoPl {
                grad[nm + ni + i] += g * z;
            }
        }
    }
    let v = config.prior_sd * config.prior_sd;
    for (idx, &p) in params[..nm + ni].iter().enumerate() {
        loss += p * p / (2.0 * v);
        grad[idx] += p / v;
    }
    if model == IrtModel::TwoPl {
        let va = config.log_a_prior_sd * config.log_a_prior_sd;
        for (off, &p) in log_a.iter().enumerate() {
            loss += p * p / (2.0 * va);
            grad[nm + ni + off] += p / va;
        }
    }
    (loss, grad)
}

const MIN_STEP_SCALE: f64 = 1.0 / 1_048_576.0;

fn fit(m: &ResponseMatrix, model: IrtModel, config: &FitConfig) -> Result<DifficultyScale> {
    config.validate()?;
    if !(0..m.n_items()).any(|i| (0..m.n_models()).any(|j| m.n(i, j) > 0)) {
        return Err(Error::Degenerate("no cells with attempts".into()));
    }
    let p = n_params(m, model);
    let mut x = vec![0.0; p];
    let mut m1 = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut loss, mut grad) = objective(m, model, &x, config);
    let mut history = vec![loss];
    let mut best = loss;
    let mut stale = 0usize;
    let mut converged = false;
    let mut epoch = 0usize;
    let mut scale = 1.0f64;
    while epoch < config.hard_cap {
        epoch += 1;
        let t = epoch as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut step = vec![0.0; p];
        for q in 0..p {
            m1[q] = beta1 * m1[q] + (1.0 - beta1) * grad[q];
            m2[q] = beta2 * m2[q] + (1.0 - beta2) * grad[q] * grad[q];
            step[q] = config.learning_rate * (m1[q] / bc1) / ((m2[q] / bc2).sqrt() + eps);
        }
        // Backtrack until the step does not increase the loss; keep the
        // current point when no trial succeeds. The scale carries over and
        // doubles each epoch.
        scale = (2.0 * scale).min(1.0);
        let mut accepted = None;
        loop {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a - scale * s).collect();
            let (l, g) = objective(m, model, &trial, config);
            if l.is_nan() {
                return Err(Error::Diverged { epoch });
            }
            if l <= loss {
                accepted = Some((trial, l, g));
                break;
            }
            if scale <= MIN_STEP_SCALE {
                break;
            }
            scale *= 0.5;
        }
        if let Some((trial, l, g)) = accepted {
            x = trial;
            loss = l;
            grad = g;
        }
        history.push(loss);
        if best - loss > config.tolerance {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
        }
        if epoch >= config.max_epochs && stale >= config.patience {
            converged = true;
            break;
        }
    }
    if !loss.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { epoch });
    }
    let nm = m.n_models();
    let ni = m.n_items();
    Ok(DifficultyScale {
        items: m.items.clone(),
        models: m.models.clone(),
        abilities: x[..nm].to_vec(),
        difficulties: x[nm..nm + ni].to_vec(),
        discriminations: (model == IrtModel::TwoPl)
            .then(|| x[nm + ni..].iter().map(|v| v.exp()).collect()),
        report: FitReport {
            final_loss: loss,
            stopped_epoch: epoch,
            converged,
            loss_history: history,
        },
    })
}

pub fn fit_rasch(m: &ResponseMatrix, config: &FitConfig) -> Result<DifficultyScale> {
    fit(m, IrtModel::Rasch, config)
}

pub fn fit_2pl(m: &ResponseMatrix, config: &FitConfig) -> Result<DifficultyScale> {
    if m.n_models() < 2 {
        return Err(Error::Unidentifiable(
            "item discriminations need at least two models",
        ));
    }
    fit(m, IrtModel::TwoPl, config)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BoundaryReport {
    pub informative: BTreeSet<String>,
    pub floor: BTreeSet<String>,
    pub ceiling: BTreeSet<String>,
}

/// Floor: never solved; ceiling: solved on every attempt. Items without any
/// attempts count as informative.
pub fn classify_boundary_items(m: &ResponseMatrix) -> BoundaryReport {
    let mut r = BoundaryReport::default();
    for (i, item) in m.items.iter().enumerate() {
        let (mut sk, mut sn, mut all) = (0u64, 0u64, true);
        for j in 0..m.n_models() {
            let (k, n) = (m.k(i, j), m.n(i, j));
            sk += k as u64;
            sn += n as u64;
            all &= k == n;
        }
        let set = if sn > 0 && sk == 0 {
            &mut r.floor
        } else if sn > 0 && all {
            &mut r.ceiling
        } else {
            &mut r.informative
        };
        set.insert(item.clone());
    }
    r
}

pub fn loo_recalibration(m: &ResponseMatrix, config: &FitConfig) -> Result<ResultTable> {
    if m.n_models() < 3 {
        return Err(Error::TooShort {
            what: "loo models",
            needed: 3,
            have: m.n_models(),
        });
    }
    let full = fit_rasch(m, config)?;
    let folds: Vec<(String, std::result::Result<f64, String>)> = (0..m.n_models())
        .into_par_iter()
        .map(|j| {
            let rho = fit_rasch(&m.without_model(j), config)
                .and_then(|s| spearman(&s.difficulties, &full.difficulties))
                .map_err(|e| e.to_string());
            (m.models[j].clone(), rho)
        })
        .collect();
    let mut t = ResultTable::new([
        ("held_out", ColumnType::Str),
        ("spearman", ColumnType::Real),
        ("error", ColumnType::Str),
    ])?;
    let mut ok = Vec::new();
    for (model, rho) in &folds {
        match rho {
            Ok(r) => {
                ok.push(*r);
                t.push_row(vec![model.as_str().into(), (*r).into(), "".into()])?;
            }
            Err(e) => t.push_row(vec![model.as_str().into(), Value::Null, e.as_str().into()])?,
        }
    }
    let summary = |v: Option<f64>| -> Value { v.into() };
    let med = (!ok.is_empty()).then(|| crate::scalar::median(&ok));
    let min = ok.iter().copied().reduce(f64::min);
    t.push_row(vec!["__median__".into(), summary(med), "".into()])?;
    t.push_row(vec!["__min__".into(), summary(min), "".into()])?;
    Ok(t)
}

/// Agreement of fitted difficulties with native labels. Integer-valued labels
/// with at most ten levels additionally get a Kruskal–Wallis test.
pub fn validate_external(scale: &DifficultyScale, items: &[ItemMeta]) -> Result<ResultTable> {
    let b = scale.difficulty_map();
    let pairs: Vec<(f64, f64)> = items
        .iter()
        .filter_map(|m| Some((*b.get(&m.item_id)?, m.native_label?)))
        .collect();
    if pairs.len() < 10 {
        return Err(Error::TooShort {
            what: "labeled items",
            needed: 10,
            have: pairs.len(),
        });
    }
    let (bs, ls): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let mut t = ResultTable::new([
        ("statistic", ColumnType::Str),
        ("value", ColumnType::Real),
        ("df", ColumnType::Int),
        ("p", ColumnType::Real),
        ("n", ColumnType::Int),
    ])?;
    let n = pairs.len();
    t.push_row(vec![
        "pearson".into(),
        pearson(&bs, &ls)?.into(),
        Value::Null,
        Value::Null,
        n.into(),
    ])?;
    t.push_row(vec![
        "spearman".into(),
        spearman(&bs, &ls)?.into(),
        Value::Null,
        Value::Null,
        n.into(),
    ])?;
    let levels: BTreeSet<i64> = ls.iter().map(|&l| l as i64).collect();
    if ls.iter().all(|l| l.fract() == 0.0) && levels.len() <= 10 && levels.len() >= 2 {
        let groups: Vec<Vec<f64>> = levels
            .iter()
            .map(|&lv| {
                pairs
                    .iter()
                    .filter(|p| p.1 as i64 == lv)
                    .map(|p| p.0)
                    .collect()
            })
            .collect();
        let kw = kruskal_wallis(&groups)?;
        t.push_row(vec![
            "kruskal_wallis".into(),
            kw.h.into(),
            kw.df.into(),
            kw.p.into(),
            n.into(),
        ])?;
    }
    Ok(t)
}
