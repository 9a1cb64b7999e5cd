//! Ridge difficulty probes, direction extraction, nullspace projection,
//! INLP erasure, variance-decomposition mediation and steering arithmetic.

use crate::archive::Trajectory;
use crate::error::{Error, Result};
use crate::linalg::{multiple_ols, residualize, simple_ols, solve, symmetric_eigen, Matrix};
use crate::scalar::{dot, mean, norm, std_dev, Scalar};
use crate::stats::percentile_bootstrap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::collections::BTreeMap;

pub const DEFAULT_LAMBDAS: [f64; 7] = [1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4];

/// Run-averaged features for one (layer, position) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub item_ids: Vec<String>,
    pub x: Matrix<f64>,
    pub y: Vec<f64>,
    pub log_length: Vec<f64>,
    pub residualized: bool,
    pub dropped: usize,
}

impl ProbeDataset {
    pub fn new(
        item_ids: Vec<String>,
        x: Matrix<f64>,
        y: Vec<f64>,
        log_length: Vec<f64>,
    ) -> Result<Self> {
        let n = x.rows();
        if y.len() != n || log_length.len() != n || item_ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: y.len(),
            });
        }
        if x.cols() == 0 {
            return Err(Error::InvalidArgument(
                "probe dataset needs at least one feature".into(),
            ));
        }
        Ok(Self {
            item_ids,
            x,
            y,
            log_length,
            residualized: false,
            dropped: 0,
        })
    }

    pub fn n_items(&self) -> usize {
        self.x.rows()
    }

    /// Removes the OLS fit on log length from every feature column and from y.
    pub fn residualize(mut self) -> Result<Self> {
        for j in 0..self.x.cols() {
            let col = self.x.column(j);
            let r = residualize(&self.log_length, &col)?;
            self.x.set_column(j, &r);
        }
        self.y = residualize(&self.log_length, &self.y)?;
        self.residualized = true;
        Ok(self)
    }

    fn subset(&self, idx: &[usize]) -> (Matrix<f64>, Vec<f64>) {
        let p = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        (
            Matrix::from_vec(idx.len(), p, data).expect("consistent shape"),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }
}

/// `count` evenly spaced state indices over `n_states`, including both ends.
pub fn position_grid(n_states: usize, count: usize) -> Vec<usize> {
    if n_states == 0 || count == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![0];
    }
    (0..count)
        .map(|k| ((k * (n_states - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionSpec {
    pub index: usize,
    pub count: usize,
}

/// Per-item rows averaged over runs at one grid position. Items missing a
/// difficulty, a length, or any usable run are dropped and counted.
pub fn prepare_dataset(
    items: &[(String, Vec<Trajectory<f64>>)],
    position: PositionSpec,
    difficulties: &BTreeMap<String, f64>,
    log_lengths: &BTreeMap<String, f64>,
    residualize: bool,
) -> Result<ProbeDataset> {
    if position.index >= position.count {
        return Err(Error::InvalidArgument("position index outside grid".into()));
    }
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut ll = Vec::new();
    let mut dropped = 0;
    let mut dim = None;
    for (id, runs) in items {
        let (Some(&b), Some(&l)) = (difficulties.get(id), log_lengths.get(id)) else {
            dropped += 1;
            continue;
        };
        let usable: Vec<&[f64]> = runs
            .iter()
            .filter(|t| !t.is_empty())
            .map(|t| t.state(position_grid(t.n_states(), position.count)[position.index]))
            .collect();
        if usable.is_empty() {
            dropped += 1;
            continue;
        }
        let d = usable[0].len();
        if *dim.get_or_insert(d) != d || usable.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: dim.unwrap_or(d),
                found: d,
            });
        }
        let mut avg = vec![0.0; d];
        for r in &usable {
            avg.iter_mut().zip(r.iter()).for_each(|(a, v)| *a += v);
        }
        avg.iter_mut().for_each(|a| *a /= usable.len() as f64);
        ids.push(id.clone());
        rows.push(avg);
        y.push(b);
        ll.push(l);
    }
    if rows.is_empty() {
        return Err(Error::TooShort {
            what: "probe items",
            needed: 1,
            have: 0,
        });
    }
    let mut ds = ProbeDataset::new(ids, Matrix::from_rows(&rows)?, y, ll)?;
    ds.dropped = dropped;
    if residualize {
        ds = ds.residualize()?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lambdas: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeProbe {
    /// Weights on standardized features; zero for constant features.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub feature_means: Vec<f64>,
    /// Population sds; constant features keep 1 and are excluded.
    pub feature_sds: Vec<f64>,
    pub retained: Vec<bool>,
    pub lambda: f64,
    pub cv_r2: f64,
    pub fold_r2: Vec<f64>,
}

impl RidgeProbe {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept
            + x.iter()
                .zip(&self.feature_means)
                .zip(&self.feature_sds)
                .zip(&self.weights)
                .map(|(((v, m), s), w)| w * (v - m) / s)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &Matrix<f64>) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

struct Standardized {
    z: Matrix<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
    retained: Vec<bool>,
}

fn standardize(x: &Matrix<f64>) -> Standardized {
    let (n, p) = (x.rows(), x.cols());
    let means = x.column_means();
    let mut sds = vec![1.0; p];
    let mut retained = vec![false; p];
    for j in 0..p {
        let col = x.column(j);
        let s = std_dev(&col, 0);
        let scale = col.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        if s > 1e-12 * scale {
            sds[j] = s;
            retained[j] = true;
        }
    }
    let mut z = Matrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            if retained[j] {
                z[(i, j)] = (x[(i, j)] - means[j]) / sds[j];
            }
        }
    }
    Standardized {
        z,
        means,
        sds,
        retained,
    }
}

/// Orthonormal left factor `U` and squared singular values of a centered
/// design, via the eigendecomposition of the smaller Gram matrix.
struct Spectrum {
    u: Matrix<f64>,
    s2: Vec<f64>,
}

fn spectrum(z: &Matrix<f64>) -> Result<Spectrum> {
    let (n, p) = (z.rows(), z.cols());
    if p <= n {
        let e = symmetric_eigen(&z.gram())?;
        let top = e.values.first().copied().unwrap_or(0.0).max(0.0);
        let keep: Vec<usize> = (0..p)
            .filter(|&k| e.values[k] > top * 1e-12 && e.values[k] > 0.0)
            .collect();
        let mut u = Matrix::zeros(n, keep.len());
        for (c, &k) in keep.iter().enumerate() {
            let v = e.vectors.column(k);
            let s = e.values[k].sqrt();
            let col: Vec<f64> = z.matvec(&v).into_iter().map(|x| x / s).collect();
            u.set_column(c, &col);
        }
        Ok(Spectrum {
            u,
            s2: keep.iter().map(|&k| e.values[k]).collect(),
        })
    } else {
        let e = symmetric_eigen(&z.outer_gram())?;
        let top = e.values.first().copied().unwrap_or(0.0).max(0.0);
        let keep: Vec<usize> = (0..n)
            .filter(|&k| e.values[k] > top * 1e-12 && e.values[k] > 0.0)
            .collect();
        let mut u = Matrix::zeros(n, keep.len());
        for (c, &k) in keep.iter().enumerate() {
            u.set_column(c, &e.vectors.column(k));
        }
        Ok(Spectrum {
            u,
            s2: keep.iter().map(|&k| e.values[k]).collect(),
        })
    }
}

/// Closed-form leave-one-out residuals for ridge with an unpenalized
/// intercept on a fixed centered design.
fn loo_residuals(sp: &Spectrum, yc: &[f64], lambda: f64) -> Vec<f64> {
    let n = yc.len();
    let r = sp.s2.len();
    let shrink: Vec<f64> = sp.s2.iter().map(|s| s / (s + lambda)).collect();
    let uty: Vec<f64> = (0..r)
        .map(|k| (0..n).map(|i| sp.u[(i, k)] * yc[i]).sum())
        .collect();
    (0..n)
        .map(|i| {
            let mut fit = 0.0;
            let mut h = 1.0 / n as f64;
            for k in 0..r {
                let uik = sp.u[(i, k)];
                fit += uik * shrink[k] * uty[k];
                h += uik * uik * shrink[k];
            }
            let denom = 1.0 - h;
            if denom.abs() < 1e-12 {
                f64::INFINITY
            } else {
                (yc[i] - fit) / denom
            }
        })
        .collect()
}

/// Mean squared LOO error for each λ.
pub fn loo_errors(x: &Matrix<f64>, y: &[f64], lambdas: &[f64]) -> Result<Vec<f64>> {
    let st = standardize(x);
    let sp = spectrum(&st.z)?;
    let my = mean(y);
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    Ok(lambdas
        .iter()
        .map(|&l| {
            loo_residuals(&sp, &yc, l)
                .iter()
                .map(|e| e * e)
                .sum::<f64>()
                / y.len() as f64
        })
        .collect())
}

/// Ridge weights on the standardized design for one λ.
fn ridge_weights(z: &Matrix<f64>, yc: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let (n, p) = (z.rows(), z.cols());
    if p <= n {
        let mut a = z.gram();
        for j in 0..p {
            a[(j, j)] += lambda;
        }
        let zty: Vec<f64> = (0..p)
            .map(|j| (0..n).map(|i| z[(i, j)] * yc[i]).sum())
            .collect();
        solve(&a, &zty)
    } else {
        let mut a = z.outer_gram();
        for i in 0..n {
            a[(i, i)] += lambda;
        }
        let alpha = solve(&a, yc)?;
        Ok((0..p)
            .map(|j| (0..n).map(|i| z[(i, j)] * alpha[i]).sum())
            .collect())
    }
}

/// Standardizes, picks λ by closed-form LOO and fits. `cv_r2` is left NaN.
fn fit_ridge_loo(x: &Matrix<f64>, y: &[f64], lambdas: &[f64]) -> Result<RidgeProbe> {
    let my = mean(y);
    if y.iter().all(|v| (v - my).abs() <= 1e-300) {
        return Err(Error::ConstantInput("probe target"));
    }
    let st = standardize(x);
    if !st.retained.iter().any(|&r| r) {
        return Err(Error::ConstantInput("all probe features"));
    }
    let sp = spectrum(&st.z)?;
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    let mut best = (f64::INFINITY, lambdas[0]);
    for &l in lambdas {
        let e = loo_residuals(&sp, &yc, l)
            .iter()
            .map(|e| e * e)
            .sum::<f64>();
        if e < best.0 {
            best = (e, l);
        }
    }
    let weights = ridge_weights(&st.z, &yc, best.1)?;
    Ok(RidgeProbe {
        weights,
        intercept: my,
        feature_means: st.means,
        feature_sds: st.sds,
        retained: st.retained,
        lambda: best.1,
        cv_r2: f64::NAN,
        fold_r2: Vec::new(),
    })
}

/// Item folds from a seeded shuffle, dealt round-robin.
pub fn item_folds(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (k, i) in idx.into_iter().enumerate() {
        out[k % folds].push(i);
    }
    out
}

fn r2(y: &[f64], pred: &[f64]) -> f64 {
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        0.0
    }
}

/// Out-of-fold R² averaged over folds; λ is chosen inside each fold.
pub fn cross_validated_r2(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<Vec<f64>> {
    let n = ds.n_items();
    if cfg.folds < 2 || n <= cfg.folds {
        return Err(Error::TooShort {
            what: "probe items per fold",
            needed: cfg.folds.max(2) + 1,
            have: n,
        });
    }
    let folds = item_folds(n, cfg.folds, cfg.seed);
    folds
        .iter()
        .map(|test| {
            let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
            let (xt, yt) = ds.subset(&train);
            let probe = fit_ridge_loo(&xt, &yt, &cfg.lambdas)?;
            let (xs, ys) = ds.subset(test);
            Ok(r2(&ys, &probe.predict(&xs)))
        })
        .collect()
}

pub fn fit_ridge_cv(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<RidgeProbe> {
    if cfg.lambdas.is_empty() || cfg.lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument(
            "lambda grid must be non-empty and positive".into(),
        ));
    }
    let fold_r2 = cross_validated_r2(ds, cfg)?;
    let mut probe = fit_ridge_loo(&ds.x, &ds.y, &cfg.lambdas)?;
    probe.cv_r2 = mean(&fold_r2);
    probe.fold_r2 = fold_r2;
    Ok(probe)
}

/// Out-of-fold predictions of y.
pub fn out_of_fold_predictions(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<Vec<f64>> {
    let n = ds.n_items();
    let mut pred = vec![0.0; n];
    for test in item_folds(n, cfg.folds, cfg.seed) {
        let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
        let (xt, yt) = ds.subset(&train);
        let probe = fit_ridge_loo(&xt, &yt, &cfg.lambdas)?;
        for &i in &test {
            pred[i] = probe.predict_row(ds.x.row(i));
        }
    }
    Ok(pred)
}

/// Permutation p-value of cv_r2 with y shuffled across items.
pub fn probe_permutation_p(
    ds: &ProbeDataset,
    cfg: &ProbeConfig,
    observed: f64,
    n_perm: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<f64>> = (0..n_perm)
        .map(|_| {
            let mut y = ds.y.clone();
            y.shuffle(&mut rng);
            y
        })
        .collect();
    let null: Vec<f64> = perms
        .into_par_iter()
        .map(|y| {
            let mut d = ds.clone();
            d.y = y;
            cross_validated_r2(&d, cfg).map(|f| mean(&f))
        })
        .collect::<Result<_>>()?;
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    Ok((1 + exceed) as f64 / (n_perm + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyDirection {
    pub unit: Vec<f64>,
    pub sigma_proj: f64,
}

/// d̂ = (w ⊘ s)/‖w ⊘ s‖ and σ_proj = sd of X·d̂ in raw feature space.
pub fn extract_direction(probe: &RidgeProbe, x_train: &Matrix<f64>) -> Result<DifficultyDirection> {
    if x_train.cols() != probe.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: probe.weights.len(),
            found: x_train.cols(),
        });
    }
    let raw: Vec<f64> = probe
        .weights
        .iter()
        .zip(&probe.feature_sds)
        .map(|(w, s)| w / s)
        .collect();
    let nrm = norm(&raw);
    if !(nrm > 0.0) {
        return Err(Error::Degenerate("zero probe weights".into()));
    }
    let unit: Vec<f64> = raw.iter().map(|v| v / nrm).collect();
    let proj: Vec<f64> = (0..x_train.rows())
        .map(|i| dot(x_train.row(i), &unit))
        .collect();
    Ok(DifficultyDirection {
        sigma_proj: std_dev(&proj, 0),
        unit,
    })
}

/// h − (h·d̂)d̂ in place.
pub fn project_out<T: Scalar>(h: &mut [T], unit: &[T]) {
    let c = dot(h, unit);
    h.iter_mut().zip(unit).for_each(|(x, &u)| *x -= c * u);
}

pub fn nullspace_project<T: Scalar>(
    traj: &Trajectory<T>,
    direction: &[T],
) -> Result<Trajectory<T>> {
    if direction.len() != traj.dim() {
        return Err(Error::DimensionMismatch {
            expected: traj.dim(),
            found: direction.len(),
        });
    }
    Ok(traj.map_states(|src, dst| {
        dst.copy_from_slice(src);
        project_out(dst, direction);
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringRequest {
    pub alpha: f64,
    pub layer_index: u32,
}

/// h + α·σ_proj·d̂ on every state.
pub fn apply_steering(
    traj: &Trajectory<f64>,
    direction: &DifficultyDirection,
    request: &SteeringRequest,
) -> Result<Trajectory<f64>> {
    if !request.alpha.is_finite() {
        return Err(Error::InvalidArgument(
            "steering coefficient must be finite".into(),
        ));
    }
    if direction.unit.len() != traj.dim() {
        return Err(Error::DimensionMismatch {
            expected: traj.dim(),
            found: direction.unit.len(),
        });
    }
    let c = request.alpha * direction.sigma_proj;
    Ok(traj.map_states(|src, dst| {
        for ((o, &x), u) in dst.iter_mut().zip(src).zip(&direction.unit) {
            *o = x + c * u;
        }
    }))
}

/// Unit vectors uniform on the sphere, scaled to `norm`.
pub fn random_directions(dim: usize, count: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&v);
            v.into_iter().map(|x| scale * x / n).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InlpResult {
    /// Orthonormal directions removed, in order.
    pub directions: Vec<Vec<f64>>,
    pub iterations: usize,
    /// cv_r2 before each projection and after the last one.
    pub r2_history: Vec<f64>,
}

impl InlpResult {
    /// Applies the composed projector to a row.
    pub fn project(&self, h: &mut [f64]) {
        for d in &self.directions {
            project_out(h, d);
        }
    }
}

/// Removes probe directions until cv_r2 falls below `threshold`.
pub fn inlp_erase(
    ds: &ProbeDataset,
    cfg: &ProbeConfig,
    threshold: f64,
    max_iters: usize,
) -> Result<InlpResult> {
    let mut work = ds.clone();
    let mut directions: Vec<Vec<f64>> = Vec::new();
    let mut history = Vec::new();
    let mut rising = 0;
    loop {
        let probe = match fit_ridge_cv(&work, cfg) {
            Ok(p) => p,
            // every feature projected to a constant: nothing left to decode
            Err(Error::ConstantInput(_)) => {
                history.push(0.0);
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(&prev) = history.last() {
            rising = if probe.cv_r2 >= prev { rising + 1 } else { 0 };
            if rising >= 3 {
                return Err(Error::Degenerate(format!(
                    "INLP cv_r2 did not decrease for 3 iterations (history {history:?})"
                )));
            }
        }
        history.push(probe.cv_r2);
        if probe.cv_r2 < threshold || directions.len() >= max_iters {
            break;
        }
        let mut d = extract_direction(&probe, &work.x)?.unit;
        for prev in &directions {
            project_out(&mut d, prev);
        }
        let nd = norm(&d);
        if !(nd > 1e-12) {
            break;
        }
        d.iter_mut().for_each(|v| *v /= nd);
        for i in 0..work.x.rows() {
            project_out(work.x.row_mut(i), &d);
        }
        directions.push(d);
    }
    Ok(InlpResult {
        iterations: directions.len(),
        directions,
        r2_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VdResult {
    pub vd_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// 1 − c′/c from the difference in difficulty coefficients with and
    /// without the encoded prediction; signed.
    pub proportion_mediated: f64,
}

fn vd_parts(enc: &[f64], truth: &[f64], out: &[f64]) -> Option<(f64, f64)> {
    let r2_enc = simple_ols(enc, out).ok()?.r_squared;
    let total = simple_ols(truth, out).ok()?;
    if !(total.r_squared > 0.0) {
        return None;
    }
    // collinear encoded and true difficulty leave c' unidentified
    let prop = match multiple_ols(&[truth, enc], out) {
        Ok(both) if total.slope != 0.0 => 1.0 - both[1] / total.slope,
        _ => f64::NAN,
    };
    Some((r2_enc / total.r_squared, prop))
}

pub fn vd_mediation(
    encoded: &[f64],
    truth: &[f64],
    outcome: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<VdResult> {
    let n = encoded.len();
    if truth.len() != n || outcome.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: truth.len().min(outcome.len()),
        });
    }
    let (vd, prop) = vd_parts(encoded, truth, outcome)
        .ok_or_else(|| Error::Degenerate("outcome not explained by true difficulty".into()))?;
    let ci = percentile_bootstrap(
        n,
        |idx| {
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            vd_parts(&pick(encoded), &pick(truth), &pick(outcome)).map(|p| p.0)
        },
        n_boot,
        seed,
    )?;
    Ok(VdResult {
        vd_ratio: vd,
        ci_low: ci.lo.min(vd),
        ci_high: ci.hi.max(vd),
        proportion_mediated: prop,
    })
}

/// One heatmap cell of the layer × position probe grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCell {
    pub layer_index: u32,
    pub position: usize,
    pub cv_r2: f64,
    pub perm_p: Option<f64>,
    pub n_items: usize,
}

/// Highest cv_r2; ties go to the lower layer, then the earlier position.
pub fn peak_cell(cells: &[ProbeCell]) -> Option<&ProbeCell> {
    cells.iter().filter(|c| c.cv_r2.is_finite()).min_by(|a, b| {
        b.cv_r2
            .partial_cmp(&a.cv_r2)
            .expect("finite")
            .then(a.layer_index.cmp(&b.layer_index))
            .then(a.position.cmp(&b.position))
    })
}
