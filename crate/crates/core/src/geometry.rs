//! Per-trajectory geometry: directness, Menger curvature, curvature
//! variability, TwoNN intrinsic dimension and PCA90.

use crate::archive::{Cohort, ItemMeta, Trajectory, TrajectoryKey};
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::{dot, norm, sq_dist, std_dev, Scalar};
use crate::segment::{
    detect_boundary_with, slice_states, BoundaryPolicy, BoundarySource, Domain, PolicyVariant,
    SamplingSpec, SegmentPatterns, Tagging,
};
use crate::table::{ColumnType, ResultTable, Value};
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GeometryFlags {
    pub too_short: bool,
    pub degenerate_step: bool,
    pub duplicate_neighbors: bool,
}

impl fmt::Display for GeometryFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.too_short, "too_short"),
            (self.degenerate_step, "degenerate_step"),
            (self.duplicate_neighbors, "duplicate_neighbors"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join("|"))
    }
}

/// Tunables with fixed defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryConfig {
    /// Relative tolerance for coincident points in curvature triples.
    pub degenerate_eps: f64,
    /// Divisor offset for curvature variability (1 = sample sd).
    pub sd_ddof: usize,
    /// Variance fraction for PCA dimensionality.
    pub pca_fraction: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            degenerate_eps: 1e-12,
            sd_ddof: 1,
            pca_fraction: 0.90,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Directness<T> {
    pub path_length: T,
    pub displacement: T,
    /// Undefined when the path length is zero.
    pub directness: Option<T>,
}

pub fn directness<T: Scalar>(traj: &Trajectory<T>) -> Result<Directness<T>> {
    let n = traj.n_states();
    if n < 2 {
        return Err(Error::TooShort {
            what: "directness",
            needed: 2,
            have: n,
        });
    }
    let path_length: T = (1..n)
        .map(|t| sq_dist(traj.state(t), traj.state(t - 1)).sqrt())
        .sum();
    let displacement = sq_dist(traj.state(n - 1), traj.state(0)).sqrt();
    let directness = (path_length > T::zero()).then(|| (displacement / path_length).min(T::one()));
    Ok(Directness {
        path_length,
        displacement,
        directness,
    })
}

/// Menger curvature 4·Area/(|AB|·|BC|·|AC|) of one triple; `None` when two
/// points are closer than `eps`.
pub fn menger_curvature<T: Scalar>(a: &[T], b: &[T], c: &[T], eps: T) -> Option<T> {
    let u: Vec<T> = b.iter().zip(a).map(|(&x, &y)| x - y).collect();
    let v: Vec<T> = c.iter().zip(a).map(|(&x, &y)| x - y).collect();
    let uu = dot(&u, &u);
    let ab = uu.sqrt();
    let ac = norm(&v);
    let bc = sq_dist(c, b).sqrt();
    if ab <= eps || ac <= eps || bc <= eps {
        return None;
    }
    // Component of v orthogonal to u; |u|·|w| = √(|u|²|v|² − (u·v)²) = 2·Area.
    let proj = dot(&u, &v) / uu;
    let w2: T = v
        .iter()
        .zip(&u)
        .map(|(&vi, &ui)| {
            let wi = vi - proj * ui;
            wi * wi
        })
        .sum();
    let twice_area = ab * w2.sqrt();
    Some(T::lit(2.0) * twice_area / (ab * bc * ac))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureProfile<T> {
    pub values: Vec<T>,
    pub degenerate_steps: usize,
}

/// Length scale used to make the degenerate-triple threshold relative.
fn trajectory_scale<T: Scalar>(traj: &Trajectory<T>) -> T {
    (1..traj.n_states())
        .map(|t| sq_dist(traj.state(t), traj.state(t - 1)).sqrt())
        .fold(T::zero(), T::max)
}

pub fn menger_curvature_profile<T: Scalar>(
    traj: &Trajectory<T>,
    config: &GeometryConfig,
) -> Result<CurvatureProfile<T>> {
    let n = traj.n_states();
    if n < 3 {
        return Err(Error::TooShort {
            what: "curvature",
            needed: 3,
            have: n,
        });
    }
    let eps = T::lit(config.degenerate_eps) * trajectory_scale(traj);
    let mut degenerate_steps = 0;
    let values = (1..n - 1)
        .map(|t| {
            menger_curvature(traj.state(t - 1), traj.state(t), traj.state(t + 1), eps)
                .unwrap_or_else(|| {
                    degenerate_steps += 1;
                    T::zero()
                })
        })
        .collect();
    Ok(CurvatureProfile {
        values,
        degenerate_steps,
    })
}

/// Standard deviation of the curvature profile (divisor `n - ddof`);
/// `None` for a single-entry profile.
pub fn curvature_variability<T: Scalar>(profile: &[T], ddof: usize) -> Result<Option<T>> {
    if profile.is_empty() {
        return Err(Error::TooShort {
            what: "curvature variability",
            needed: 1,
            have: 0,
        });
    }
    if profile.len() <= ddof {
        return Ok(None);
    }
    Ok(Some(std_dev(profile, ddof)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoNn<T> {
    /// `None` when every ratio equals one.
    pub dimension: Option<T>,
    pub used: usize,
    pub duplicates: usize,
}

/// TwoNN estimate `(mean log(r2/r1))⁻¹` with exact neighbors inside the
/// trajectory. States whose nearest neighbor coincides with them are skipped.
pub fn twonn_dimension<T: Scalar>(traj: &Trajectory<T>) -> Result<TwoNn<T>> {
    let n = traj.n_states();
    let mut r1 = vec![T::infinity(); n];
    let mut r2 = vec![T::infinity(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(traj.state(i), traj.state(j));
            for (k, d) in [(i, d), (j, d)] {
                if d < r1[k] {
                    r2[k] = r1[k];
                    r1[k] = d;
                } else if d < r2[k] {
                    r2[k] = d;
                }
            }
        }
    }
    let mut sum_log = T::zero();
    let mut used = 0usize;
    let mut duplicates = 0usize;
    for k in 0..n {
        if !(r2[k].is_finite()) {
            continue;
        }
        if r1[k] == T::zero() {
            duplicates += 1;
            continue;
        }
        // squared distances: log μ = ½ log(r2² / r1²)
        sum_log += T::half() * (r2[k] / r1[k]).ln();
        used += 1;
    }
    if used < 4 {
        return Err(Error::TooShort {
            what: "twonn",
            needed: 4,
            have: used,
        });
    }
    let dimension = (sum_log > T::zero()).then(|| T::from_usize_lossy(used) / sum_log);
    Ok(TwoNn {
        dimension,
        used,
        duplicates,
    })
}

/// Eigenvalues (descending) of the sample covariance of the states, computed
/// from whichever Gram matrix is smaller.
pub fn covariance_spectrum<T: Scalar>(traj: &Trajectory<T>) -> Result<Vec<T>> {
    let n = traj.n_states();
    let d = traj.dim();
    if n < 2 {
        return Err(Error::TooShort {
            what: "pca",
            needed: 2,
            have: n,
        });
    }
    let mut z = Matrix::from_vec(n, d, traj.as_flat().to_vec())?;
    let means = z.column_means();
    for i in 0..n {
        for (x, &m) in z.row_mut(i).iter_mut().zip(&means) {
            *x -= m;
        }
    }
    let g = if n <= d { z.outer_gram() } else { z.gram() };
    let scale = T::one() / T::from_usize_lossy(n - 1);
    Ok(symmetric_eigen(&g)?
        .values
        .into_iter()
        .map(|l| l.max(T::zero()) * scale)
        .collect())
}

/// Smallest k whose leading eigenvalues reach `fraction` of the variance;
/// `None` when all states coincide.
pub fn pca_dimension<T: Scalar>(traj: &Trajectory<T>, fraction: f64) -> Result<Option<usize>> {
    let spectrum = covariance_spectrum(traj)?;
    let top = spectrum.first().copied().unwrap_or(T::zero());
    if top <= T::zero() {
        return Ok(None);
    }
    let cutoff = top * T::lit(1e-12);
    let nonzero: Vec<T> = spectrum.into_iter().filter(|&l| l > cutoff).collect();
    let total: T = nonzero.iter().copied().sum();
    let target = T::lit(fraction) * total;
    let mut acc = T::zero();
    for (k, &l) in nonzero.iter().enumerate() {
        acc += l;
        // relative slack absorbs rounding when the ratio lands exactly on the target
        if acc >= target - total * T::lit(1e-12) {
            return Ok(Some(k + 1));
        }
    }
    Ok(Some(nonzero.len()))
}

pub fn pca90<T: Scalar>(traj: &Trajectory<T>) -> Result<Option<usize>> {
    pca_dimension(traj, 0.90)
}

/// All metrics for one trajectory; undefined metrics are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryRecord<T> {
    pub key: TrajectoryKey,
    pub sample_count: usize,
    pub path_length: Option<T>,
    pub displacement: Option<T>,
    pub directness: Option<T>,
    pub curvature_profile: Vec<T>,
    pub curvature_variability: Option<T>,
    pub twonn_dimension: Option<T>,
    pub pca90: Option<usize>,
    pub flags: GeometryFlags,
}

pub fn compute_geometry<T: Scalar>(
    traj: &Trajectory<T>,
    config: &GeometryConfig,
) -> GeometryRecord<T> {
    let mut flags = GeometryFlags::default();
    let mut rec = GeometryRecord {
        key: traj.key(),
        sample_count: traj.sample_count(),
        path_length: None,
        displacement: None,
        directness: None,
        curvature_profile: Vec::new(),
        curvature_variability: None,
        twonn_dimension: None,
        pca90: None,
        flags,
    };
    match directness(traj) {
        Ok(d) => {
            rec.path_length = Some(d.path_length);
            rec.displacement = Some(d.displacement);
            rec.directness = d.directness;
            flags.degenerate_step |= d.directness.is_none();
        }
        Err(_) => flags.too_short = true,
    }
    match menger_curvature_profile(traj, config) {
        Ok(p) => {
            flags.degenerate_step |= p.degenerate_steps > 0;
            rec.curvature_variability = curvature_variability(&p.values, config.sd_ddof)
                .ok()
                .flatten();
            rec.curvature_profile = p.values;
        }
        Err(_) => flags.too_short = true,
    }
    match twonn_dimension(traj) {
        Ok(t) => {
            rec.twonn_dimension = t.dimension;
            flags.duplicate_neighbors |= t.duplicates > 0;
        }
        Err(_) => flags.too_short = true,
    }
    if traj.n_states() >= 2 {
        rec.pca90 = pca_dimension(traj, config.pca_fraction).ok().flatten();
    }
    rec.flags = flags;
    rec
}

/// Options for a whole-cohort geometry pass.
#[derive(Debug, Clone)]
pub struct CohortGeometryOptions {
    pub variant: PolicyVariant,
    pub prefix_fraction: f64,
    pub config: GeometryConfig,
    pub patterns: SegmentPatterns,
    /// Drop traces flagged as truncated.
    pub skip_truncated: bool,
}

impl Default for CohortGeometryOptions {
    fn default() -> Self {
        Self {
            variant: PolicyVariant::Default,
            prefix_fraction: 1.0,
            config: GeometryConfig::default(),
            patterns: SegmentPatterns::default(),
            skip_truncated: false,
        }
    }
}

/// One cohort geometry row: the record plus segmentation context.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortGeometryRow {
    pub record: GeometryRecord<f64>,
    pub domain: String,
    pub boundary_source: Option<BoundarySource>,
    pub segment_tokens: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ExclusionCounts {
    pub directness: usize,
    pub curvature: usize,
    pub twonn: usize,
    pub pca90: usize,
    pub errors: usize,
    pub truncated: usize,
}

#[derive(Debug, Clone)]
pub struct CohortGeometry {
    pub rows: Vec<CohortGeometryRow>,
    pub exclusions: ExclusionCounts,
}

pub const GEOMETRY_COLUMNS: &[(&str, ColumnType)] = &[
    ("item_id", ColumnType::Str),
    ("model_id", ColumnType::Str),
    ("run_id", ColumnType::Int),
    ("layer_index", ColumnType::Int),
    ("domain", ColumnType::Str),
    ("boundary_source", ColumnType::Str),
    ("segment_tokens", ColumnType::Int),
    ("sample_count", ColumnType::Int),
    ("path_length", ColumnType::Real),
    ("displacement", ColumnType::Real),
    ("directness", ColumnType::Real),
    ("curvature_variability", ColumnType::Real),
    ("twonn", ColumnType::Real),
    ("pca90", ColumnType::Int),
    ("flags", ColumnType::Str),
    ("error", ColumnType::Str),
];

impl CohortGeometry {
    pub fn to_table(&self) -> ResultTable {
        let mut t = ResultTable::new(GEOMETRY_COLUMNS.iter().copied()).expect("static schema");
        for r in &self.rows {
            let g = &r.record;
            t.push_row(vec![
                Value::from(g.key.item_id.as_str()),
                Value::from(g.key.model_id.as_str()),
                Value::Int(g.key.run_id as i64),
                Value::Int(g.key.layer_index as i64),
                Value::from(r.domain.as_str()),
                Value::from(r.boundary_source.map_or("", |s| s.as_str())),
                Value::from(r.segment_tokens),
                Value::from(g.sample_count),
                Value::from(g.path_length),
                Value::from(g.displacement),
                Value::from(g.directness),
                Value::from(g.curvature_variability),
                Value::from(g.twonn_dimension),
                Value::from(g.pca90),
                Value::from(g.flags.to_string()),
                Value::from(r.error.clone().unwrap_or_default()),
            ])
            .expect("row matches schema");
        }
        t
    }
}

fn segmented_trajectory(
    cohort: &Cohort,
    key: &TrajectoryKey,
    policy: &BoundaryPolicy,
    trace: &crate::archive::TraceRecord,
    opts: &CohortGeometryOptions,
) -> Result<(Trajectory<f64>, BoundarySource, usize)> {
    let traj = cohort.load(key)?;
    let seg = detect_boundary_with(trace, policy, &opts.patterns);
    let spec = SamplingSpec::new(cohort.manifest.stride_tokens, opts.prefix_fraction)?;
    let sliced = slice_states(&traj, &seg, &spec)?;
    Ok((sliced, seg.boundary_source, seg.segment_token_count))
}

/// Boundary policy for one model's traces in a domain. Unknown domains fall
/// back to the code markers.
pub fn policy_for(
    cohort: &Cohort,
    domain: &str,
    model_id: &str,
    variant: PolicyVariant,
) -> BoundaryPolicy {
    let tagging = if cohort
        .manifest
        .model(model_id)
        .is_some_and(|m| m.is_tagged())
    {
        Tagging::Tagged
    } else {
        Tagging::Untagged
    };
    BoundaryPolicy {
        domain: domain.parse().unwrap_or(Domain::Code),
        tagging,
        variant,
    }
}

/// Segment-sliced trajectories for the indexed keys accepted by `keep`,
/// in index order. Keys without a trace are skipped.
pub fn segmented_trajectories(
    cohort: &Cohort,
    items: &[ItemMeta],
    opts: &CohortGeometryOptions,
    keep: impl Fn(&TrajectoryKey) -> bool + Sync,
) -> Result<Vec<(TrajectoryKey, Trajectory<f64>)>> {
    let traces = cohort.traces()?;
    let domains: HashMap<&str, &str> = items
        .iter()
        .map(|m| (m.item_id.as_str(), m.domain.as_str()))
        .collect();
    let keys: Vec<&TrajectoryKey> = cohort.index.keys().filter(|k| keep(k)).collect();
    let out: Vec<Option<(TrajectoryKey, Trajectory<f64>)>> = keys
        .par_iter()
        .map(|key| {
            let Some(trace) = traces.get(&(key.item_id.clone(), key.model_id.clone(), key.run_id))
            else {
                return Ok(None);
            };
            if opts.skip_truncated && trace.truncated {
                return Ok(None);
            }
            let domain = domains.get(key.item_id.as_str()).copied().unwrap_or("code");
            let policy = policy_for(cohort, domain, &key.model_id, opts.variant);
            let (t, _, _) = segmented_trajectory(cohort, key, &policy, trace, opts)?;
            Ok(Some(((*key).clone(), t)))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Computes one row per indexed trajectory. Failures on individual
/// trajectories are reported in the row instead of aborting the pass.
pub fn geometry_for_cohort(
    cohort: &Cohort,
    items: &[ItemMeta],
    opts: &CohortGeometryOptions,
) -> Result<CohortGeometry> {
    let traces = cohort.traces()?;
    let domains: HashMap<&str, &str> = items
        .iter()
        .map(|m| (m.item_id.as_str(), m.domain.as_str()))
        .collect();
    let keys: Vec<&TrajectoryKey> = cohort.index.keys().collect();
    let rows: Vec<Option<CohortGeometryRow>> = keys
        .par_iter()
        .map(|key| {
            let domain_name = domains.get(key.item_id.as_str()).copied().unwrap_or("code");
            let policy = policy_for(cohort, domain_name, &key.model_id, opts.variant);
            let mut row = CohortGeometryRow {
                record: GeometryRecord {
                    key: (*key).clone(),
                    sample_count: 0,
                    path_length: None,
                    displacement: None,
                    directness: None,
                    curvature_profile: Vec::new(),
                    curvature_variability: None,
                    twonn_dimension: None,
                    pca90: None,
                    flags: GeometryFlags {
                        too_short: true,
                        ..Default::default()
                    },
                },
                domain: domain_name.to_string(),
                boundary_source: None,
                segment_tokens: 0,
                error: None,
            };
            let Some(trace) = traces.get(&(key.item_id.clone(), key.model_id.clone(), key.run_id))
            else {
                row.error = Some("missing trace".into());
                return Some(row);
            };
            if opts.skip_truncated && trace.truncated {
                return None;
            }
            match segmented_trajectory(cohort, key, &policy, trace, opts) {
                Ok((sliced, source, tokens)) => {
                    row.record = compute_geometry(&sliced, &opts.config);
                    row.record.key = (*key).clone();
                    row.boundary_source = Some(source);
                    row.segment_tokens = tokens;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            Some(row)
        })
        .collect();
    let truncated = rows.iter().filter(|r| r.is_none()).count();
    let rows: Vec<CohortGeometryRow> = rows.into_iter().flatten().collect();
    let mut ex = ExclusionCounts {
        truncated,
        ..Default::default()
    };
    for r in &rows {
        ex.errors += r.error.is_some() as usize;
        ex.directness += r.record.directness.is_none() as usize;
        ex.curvature += r.record.curvature_variability.is_none() as usize;
        ex.twonn += r.record.twonn_dimension.is_none() as usize;
        ex.pca90 += r.record.pca90.is_none() as usize;
    }
    Ok(CohortGeometry {
        rows,
        exclusions: ex,
    })
}

/// Reads a geometry table back into rows (curvature profiles are not stored).
pub fn rows_from_table(table: &ResultTable) -> Result<Vec<CohortGeometryRow>> {
    let col = |name: &str| {
        table
            .column_index(name)
            .ok_or_else(|| Error::schema("geometry table", format!("missing column {name}")))
    };
    let idx: BTreeMap<&str, usize> = GEOMETRY_COLUMNS
        .iter()
        .map(|(n, _)| col(n).map(|i| (*n, i)))
        .collect::<Result<_>>()?;
    table
        .rows()
        .iter()
        .map(|r| {
            let s = |n: &str| r[idx[n]].as_str().unwrap_or("").to_string();
            let f = |n: &str| r[idx[n]].as_f64();
            let i = |n: &str| r[idx[n]].as_i64();
            let flags = s("flags");
            Ok(CohortGeometryRow {
                record: GeometryRecord {
                    key: TrajectoryKey {
                        item_id: s("item_id"),
                        model_id: s("model_id"),
                        run_id: i("run_id").unwrap_or(0) as u32,
                        layer_index: i("layer_index").unwrap_or(0) as u32,
                    },
                    sample_count: i("sample_count").unwrap_or(0) as usize,
                    path_length: f("path_length"),
                    displacement: f("displacement"),
                    directness: f("directness"),
                    curvature_profile: Vec::new(),
                    curvature_variability: f("curvature_variability"),
                    twonn_dimension: f("twonn"),
                    pca90: i("pca90").map(|v| v as usize),
                    flags: GeometryFlags {
                        too_short: flags.contains("too_short"),
                        degenerate_step: flags.contains("degenerate_step"),
                        duplicate_neighbors: flags.contains("duplicate_neighbors"),
                    },
                },
                domain: s("domain"),
                boundary_source: s("boundary_source").parse().ok(),
                segment_tokens: i("segment_tokens").unwrap_or(0) as usize,
                error: Some(s("error")).filter(|e| !e.is_empty()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn traj(rows: &[Vec<f64>]) -> Trajectory<f64> {
        Trajectory::from_rows(rows).unwrap()
    }

    #[test]
    fn directness_examples() {
        let d = directness(&traj(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]])).unwrap();
        assert_eq!(
            (d.path_length, d.displacement, d.directness),
            (2.0, 2.0, Some(1.0))
        );
        let d = directness(&traj(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]])).unwrap();
        assert_eq!(d.displacement, 0.0);
        assert_eq!(d.directness, Some(0.0));
        let d = directness(&traj(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]])).unwrap();
        assert!((d.path_length - 2.0).abs() < 1e-15);
        assert!((d.displacement - 2f64.sqrt()).abs() < 1e-15);
        assert!((d.directness.unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
        let d = directness(&traj(&[vec![1.0, 1.0], vec![1.0, 1.0]])).unwrap();
        assert_eq!(d.directness, None);
        assert!(directness(&traj(&[vec![0.0]])).is_err());
    }

    #[test]
    fn curvature_examples() {
        let r = 2.0f64;
        let pts: Vec<Vec<f64>> = [0.1f64, 0.9, 2.3]
            .iter()
            .map(|a| vec![r * a.cos(), r * a.sin()])
            .collect();
        let p = menger_curvature_profile(&traj(&pts), &GeometryConfig::default()).unwrap();
        assert!((p.values[0] - 0.5).abs() < 1e-9);
        let p = menger_curvature_profile(
            &traj(&[vec![0.0], vec![1.0], vec![3.0]]),
            &GeometryConfig::default(),
        )
        .unwrap();
        assert_eq!(p.values, vec![0.0]);
        let t = traj(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]);
        let rec = compute_geometry(&t, &GeometryConfig::default());
        assert_eq!(rec.curvature_profile, vec![0.0]);
        assert!(rec.flags.degenerate_step);
        assert!(menger_curvature_profile(
            &traj(&[vec![0.0], vec![1.0]]),
            &GeometryConfig::default()
        )
        .is_err());
    }

    #[test]
    fn curvature_matches_literal_gram_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    (0..5)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let u: Vec<f64> = p[1].iter().zip(&p[0]).map(|(a, b)| a - b).collect();
            let v: Vec<f64> = p[2].iter().zip(&p[0]).map(|(a, b)| a - b).collect();
            let area = 0.5
                * (dot(&u, &u) * dot(&v, &v) - dot(&u, &v).powi(2))
                    .max(0.0)
                    .sqrt();
            let lit = 4.0 * area / (norm(&u) * norm(&v) * sq_dist(&p[2], &p[1]).sqrt());
            let got = menger_curvature(&p[0], &p[1], &p[2], 0.0).unwrap();
            assert!((got - lit).abs() <= 1e-9 * lit.max(1.0));
        }
    }

    #[test]
    fn variability_examples() {
        assert_eq!(
            curvature_variability(&[0.3, 0.3, 0.3], 1).unwrap(),
            Some(0.0)
        );
        assert!(
            (curvature_variability(&[0.0, 1.0], 1).unwrap().unwrap() - 0.5f64.sqrt()).abs() < 1e-15
        );
        assert_eq!(curvature_variability(&[0.7], 1).unwrap(), None);
        assert!(curvature_variability::<f64>(&[], 1).is_err());
    }

    #[test]
    fn twonn_line_and_short_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![rng.random::<f64>(), 0.0, 0.0])
            .collect();
        let d = twonn_dimension(&traj(&pts)).unwrap().dimension.unwrap();
        assert!((d - 1.0).abs() < 0.2, "{d}");
        let three = traj(&[vec![0.0], vec![1.0], vec![3.0]]);
        assert!(matches!(
            twonn_dimension(&three),
            Err(Error::TooShort { .. })
        ));
        // duplicates are excluded and flagged
        let dup = traj(&[
            vec![0.0],
            vec![0.0],
            vec![1.0],
            vec![2.5],
            vec![4.0],
            vec![6.1],
            vec![9.0],
        ]);
        let t = twonn_dimension(&dup).unwrap();
        assert_eq!(t.duplicates, 2);
        assert_eq!(t.used, 5);
    }

    #[test]
    fn twonn_square_in_64d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let mut v = vec![0.0; 64];
                v[0] = rng.random();
                v[1] = rng.random();
                v
            })
            .collect();
        let d = twonn_dimension(&traj(&pts)).unwrap().dimension.unwrap();
        assert!((1.7..=2.3).contains(&d), "{d}");
    }

    #[test]
    fn pca_examples() {
        // ±e_j on three axes: equal variances on an exact 3-d subspace
        let mut rows = Vec::new();
        for j in 0..3 {
            for s in [-1.0, 1.0] {
                let mut v = vec![0.0; 8];
                v[j] = s;
                rows.push(v);
            }
        }
        assert_eq!(pca90(&traj(&rows)).unwrap(), Some(3));
        assert_eq!(
            pca90(&traj(&[vec![0.0, 1.0], vec![2.0, 5.0]])).unwrap(),
            Some(1)
        );
        assert_eq!(
            pca90(&traj(&[vec![1.0, 1.0], vec![1.0, 1.0]])).unwrap(),
            None
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud: Vec<Vec<f64>> = (0..201)
            .map(|_| {
                (0..10)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let k = pca90(&traj(&cloud)).unwrap().unwrap();
        assert!((8..=9).contains(&k), "{k}");
    }

    #[test]
    fn record_for_two_states() {
        let rec = compute_geometry(
            &traj(&[vec![0.0, 0.0], vec![1.0, 2.0]]),
            &GeometryConfig::default(),
        );
        assert!(rec.directness.is_some());
        assert!(rec.curvature_variability.is_none());
        assert!(rec.flags.too_short);
        assert_eq!(rec.pca90, Some(1));
    }

    #[test]
    fn works_in_f32() {
        let t: Trajectory<f32> =
            Trajectory::from_rows(&[vec![0.0f32, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let d = directness(&t).unwrap();
        assert!((d.directness.unwrap() - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Matrix<f64> {
        // Gram–Schmidt on a Gaussian matrix
        let mut q = Matrix::zeros(d, d);
        for j in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for k in 0..j {
                let col = q.column(k);
                let p = dot(&v, &col);
                v.iter_mut().zip(&col).for_each(|(x, c)| *x -= p * c);
            }
            let nv = norm(&v);
            q.set_column(j, &v.iter().map(|x| x / nv).collect::<Vec<_>>());
        }
        q
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn invariances(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let base = compute_geometry(&traj(&rows), &GeometryConfig::default());
            // scaling
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
            let s = compute_geometry(&traj(&scaled), &GeometryConfig::default());
            prop_assert!((s.directness.unwrap() - base.directness.unwrap()).abs() < 1e-12);
            prop_assert!((s.curvature_variability.unwrap() * c - base.curvature_variability.unwrap()).abs() < 1e-9 * base.curvature_variability.unwrap().max(1.0));
            prop_assert!((s.twonn_dimension.unwrap() - base.twonn_dimension.unwrap()).abs() < 1e-9);
            prop_assert_eq!(s.pca90, base.pca90);
            // rigid motion
            let q = random_rotation(&mut rng, d);
            let shift: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 5.0).collect();
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| q.matvec(r).iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let m = compute_geometry(&traj(&moved), &GeometryConfig::default());
            prop_assert!((m.directness.unwrap() - base.directness.unwrap()).abs() < 1e-9);
            for (a, b) in m.curvature_profile.iter().zip(&base.curvature_profile) {
                prop_assert!((a - b).abs() < 1e-9 * b.max(1.0));
            }
            prop_assert!((m.twonn_dimension.unwrap() - base.twonn_dimension.unwrap()).abs() < 1e-9);
            prop_assert_eq!(m.pca90, base.pca90);
            prop_assert!(base.displacement.unwrap() <= base.path_length.unwrap() * (1.0 + 1e-12));
        }
    }
}
