//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//! Run with `cargo test --release --test acceptance`.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};
use trajgeom::archive::Trajectory;
use trajgeom::behavior::indirect_effect;
use trajgeom::calib::{
    fit_2pl, fit_rasch, loo_recalibration, objective, FitConfig, IrtModel, ResponseMatrix,
};
use trajgeom::geometry::{directness, menger_curvature, pca90, twonn_dimension};
use trajgeom::lencorr::{fit_length_model, residualize, Family, ItemGeometry};
use trajgeom::linalg::Matrix;
use trajgeom::probes::{
    extract_direction, fit_ridge_cv, inlp_erase, nullspace_project, ProbeConfig, ProbeDataset,
};
use trajgeom::stats::{
    cohens_kappa, icc_1_1, pearson, percentile_bootstrap, permutation_null, spearman,
};
use trajgeom::strat::rho_perp;
use trajgeom::synth::{synth_cohort, SynthSpec};
use trajgeom::{run_pipeline, PipelineConfig, ResultTable};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `k` orthonormal vectors in `d` dimensions by Gram–Schmidt.
fn orthonormal(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < k {
        let mut v = gaussian(rng, d);
        for u in &basis {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn embed(coords: &[f64], basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (c, u) in coords.iter().zip(basis) {
        out.iter_mut().zip(u).for_each(|(o, x)| *o += c * x);
    }
    out
}

fn traj(rows: &[Vec<f64>]) -> Trajectory<f64> {
    Trajectory::from_rows(rows).unwrap()
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn random_walk_law() -> Outcome {
    let start = Instant::now();
    let d = 64;
    let lengths = [10usize, 30, 100, 300, 1000];
    let means: Vec<f64> = lengths
        .par_iter()
        .map(|&t| {
            let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
            let mut total = 0.0;
            for _ in 0..200 {
                let mut h = vec![0.0; d];
                let mut rows = vec![h.clone()];
                for _ in 0..t {
                    let step = gaussian(&mut rng, d);
                    h.iter_mut().zip(&step).for_each(|(a, b)| *a += b);
                    rows.push(h.clone());
                }
                total += directness(&traj(&rows)).unwrap().directness.unwrap();
            }
            total / 200.0
        })
        .collect();
    let lx: Vec<f64> = lengths.iter().map(|&t| (t as f64).ln()).collect();
    let ly: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    let slope = ols_slope(&lx, &ly);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        (slope + 0.5).abs() <= 0.05 && secs < 60.0,
        format!("slope {slope:.4} (target -0.5 ± 0.05), {secs:.1} s"),
    )
}

fn by_model(table: &ResultTable, model: &str, column: &str) -> f64 {
    let ids = table.str_column("model_id").unwrap();
    let metrics = table.str_column("metric").unwrap();
    let values = table.real_column(column).unwrap();
    (0..table.len())
        .find(|&r| ids[r] == model && metrics[r] == "directness")
        .and_then(|r| values[r])
        .unwrap_or(f64::NAN)
}

fn sign_reversal(root: &Path) -> Outcome {
    let start = Instant::now();
    let cohort = root.join("reversal");
    synth_cohort(&SynthSpec::reversal(1), &cohort).unwrap();
    let mut config = PipelineConfig {
        cohort: cohort.clone(),
        out: root.join("reversal_core"),
        seed: 1,
        ..Default::default()
    };
    config.metrics = vec!["directness".into()];
    config.strat.enabled = false;
    config.probes.enabled = false;
    config.behavior.enabled = false;
    let bundle = run_pipeline(&config).unwrap();
    let t = ResultTable::read(&bundle.dir.join("couplings_by_model.csv")).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let get = |m: &str, c: &str| by_model(&t, m, c);
    let (r_raw, r_perp, r_lo, r_hi) = (
        get("reasoning_0", "rho_raw"),
        get("reasoning_0", "rho_corrected"),
        get("reasoning_0", "ci_low"),
        get("reasoning_0", "ci_high"),
    );
    let (b_perp, b_lo, b_hi) = (
        get("baseline_0", "rho_corrected"),
        get("baseline_0", "ci_low"),
        get("baseline_0", "ci_high"),
    );
    let pass = r_raw <= -0.5
        && r_perp >= 0.5
        && r_lo > 0.0
        && b_perp.abs() <= 0.15
        && b_lo <= 0.0
        && b_hi >= 0.0
        && secs < 300.0;
    outcome(
        pass,
        format!(
            "reasoning raw {r_raw:.3} perp {r_perp:.3} [{r_lo:.3}, {r_hi:.3}]; \
             baseline perp {b_perp:.3} [{b_lo:.3}, {b_hi:.3}]; {secs:.1} s"
        ),
    )
}

fn menger_circle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for r in [0.1, 1.0, 10.0] {
        for trial in 0..20 {
            let angles: Vec<f64> = (0..3)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let planar: Vec<[f64; 2]> = angles.iter().map(|a| [r * a.cos(), r * a.sin()]).collect();
            let points: Vec<Vec<f64>> = if trial % 2 == 0 {
                planar.iter().map(|p| p.to_vec()).collect()
            } else {
                let basis = orthonormal(&mut rng, 2, 64);
                let centre = gaussian(&mut rng, 64);
                planar
                    .iter()
                    .map(|p| {
                        let mut v = embed(p, &basis, 64);
                        v.iter_mut().zip(&centre).for_each(|(a, c)| *a += c);
                        v
                    })
                    .collect()
            };
            let k = menger_curvature(&points[0], &points[1], &points[2], 1e-12).unwrap();
            worst = worst.max((k * r - 1.0).abs());
        }
    }
    outcome(worst <= 1e-9, format!("max relative error {worst:.2e}"))
}

/// Mean estimate over independent 500-point draws; the single-draw spread is
/// reported alongside.
fn twonn_cube() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pass = true;
    let mut parts = Vec::new();
    for k in [1usize, 2, 5, 10] {
        let draws: Vec<f64> = (0..20)
            .map(|_| {
                let basis = orthonormal(&mut rng, k, 64);
                let rows: Vec<Vec<f64>> = (0..500)
                    .map(|_| {
                        let u: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                        embed(&u, &basis, 64)
                    })
                    .collect();
                twonn_dimension(&traj(&rows)).unwrap().dimension.unwrap()
            })
            .collect();
        let est = draws.iter().sum::<f64>() / draws.len() as f64;
        let lo = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        pass &= (est / k as f64 - 1.0).abs() <= 0.2;
        parts.push(format!("k={k}: {est:.2} (draws {lo:.2}..{hi:.2})"));
    }
    outcome(pass, parts.join(", "))
}

fn pca_subspace() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pass = true;
    let mut parts = Vec::new();
    for k in [1usize, 3, 9] {
        let basis = orthonormal(&mut rng, k, 64);
        let mut rows = Vec::new();
        for u in &basis {
            rows.push(u.clone());
            rows.push(u.iter().map(|x| -x).collect::<Vec<_>>());
        }
        let got = pca90(&traj(&rows)).unwrap();
        pass &= got == Some(k);
        parts.push(format!("k={k}: {got:?}"));
    }
    outcome(pass, parts.join(", "))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn planted_responses(rng: &mut ChaCha8Rng, b: &[f64], theta: &[f64], n: u32) -> ResponseMatrix {
    let mut k = Vec::new();
    for bi in b {
        for th in theta {
            k.push(
                Binomial::new(n as u64, sigmoid(th - bi))
                    .unwrap()
                    .sample(rng) as u32,
            );
        }
    }
    let items = (0..b.len()).map(|i| format!("i{i:03}")).collect();
    let models = (0..theta.len()).map(|m| format!("m{m:02}")).collect();
    ResponseMatrix::new(items, models, k, vec![n; b.len() * theta.len()]).unwrap()
}

fn gradient_error(
    m: &ResponseMatrix,
    model: IrtModel,
    cfg: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = match model {
        IrtModel::Rasch => m.n_models() + m.n_items(),
        IrtModel::TwoPl => m.n_models() + 2 * m.n_items(),
    };
    let params: Vec<f64> = (0..n).map(|_| 0.5 * normal(rng)).collect();
    let (_, grad) = objective(m, model, &params, cfg);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let mut p = params.clone();
        p[j] += h;
        let up = objective(m, model, &p, cfg).0;
        p[j] -= 2.0 * h;
        let down = objective(m, model, &p, cfg).0;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((numeric - grad[j]).abs() / grad[j].abs().max(1.0));
    }
    worst
}

fn rasch_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b = gaussian(&mut rng, 200);
    let theta = gaussian(&mut rng, 30);
    let m = planted_responses(&mut rng, &b, &theta, 5);
    let cfg = FitConfig::default();
    let rasch = fit_rasch(&m, &cfg).unwrap();
    let recovery = spearman(&rasch.difficulties, &b).unwrap();
    let two = fit_2pl(&m, &cfg).unwrap();
    let self_consistency = spearman(&rasch.difficulties, &two.difficulties).unwrap();
    let grad = gradient_error(&m, IrtModel::Rasch, &cfg, &mut rng).max(gradient_error(
        &m,
        IrtModel::TwoPl,
        &cfg,
        &mut rng,
    ));
    let loo = loo_recalibration(&m, &cfg).unwrap();
    let held = loo.str_column("held_out").unwrap();
    let rho = loo.real_column("spearman").unwrap();
    let loo_median = held
        .iter()
        .zip(&rho)
        .find(|(h, _)| h.as_str() == "__median__")
        .and_then(|(_, r)| *r)
        .unwrap_or(f64::NAN);
    outcome(
        recovery >= 0.95 && grad <= 1e-6 && self_consistency >= 0.98 && loo_median >= 0.99,
        format!(
            "recovery {recovery:.4}, gradient error {grad:.1e}, 1PL-vs-2PL {self_consistency:.4}, LOO median {loo_median:.4}"
        ),
    )
}

fn geometry_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<ItemGeometry> {
    (0..n)
        .map(|i| {
            let log_length = 5.0 + 1.5 * rng.random::<f64>();
            let log_samples = log_length - 2.3 + 0.1 * normal(rng);
            ItemGeometry {
                item_id: format!("i{i}"),
                model_id: "m".into(),
                layer_index: 0,
                value: (-0.5 * log_length + 0.3 * normal(rng)).exp(),
                log_length,
                log_samples,
                run_count: 1,
            }
        })
        .collect()
}

fn residual_orthogonality() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut fits = 0;
    for (seed, n) in [(7u64, 30usize), (8, 200), (9, 1000)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = geometry_items(&mut rng, n);
        for family in Family::ALL.into_iter().filter(|f| !f.is_binned()) {
            let model = fit_length_model(&items, family).unwrap();
            let res = residualize(&items, &model).unwrap();
            worst = worst.max(pearson(&res.residuals(), &res.regressors()).unwrap().abs());
            fits += 1;
        }
    }
    outcome(
        worst <= 1e-10,
        format!("max |pearson| {worst:.1e} over {fits} fits"),
    )
}

fn bootstrap_coverage() -> Outcome {
    let rho = 0.4f64;
    // population Spearman of a bivariate normal
    let truth = 6.0 / std::f64::consts::PI * (rho / 2.0).asin();
    let covered = (0..200u64)
        .into_par_iter()
        .filter(|&rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let x = gaussian(&mut rng, 500);
            let y: Vec<f64> = x
                .iter()
                .map(|&a| rho * a + (1.0 - rho * rho).sqrt() * normal(&mut rng))
                .collect();
            let ci = percentile_bootstrap(
                500,
                |idx| {
                    let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
                    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                    spearman(&xs, &ys).ok()
                },
                1000,
                rep,
            )
            .unwrap();
            ci.lo <= truth && truth <= ci.hi
        })
        .count();
    let rate = covered as f64 / 200.0;
    outcome(
        rate >= 0.90,
        format!("coverage {rate:.3} of true spearman {truth:.4}"),
    )
}

fn permutation_calibration() -> Outcome {
    let rejections = (0..200u64)
        .into_par_iter()
        .filter(|&rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + rep);
            let x = gaussian(&mut rng, 60);
            let y = gaussian(&mut rng, 60);
            let r = permutation_null(&x, &y, |a, b| spearman(a, b).ok(), 999, rep).unwrap();
            r.p < 0.05
        })
        .count();
    let rate = rejections as f64 / 200.0;
    outcome(rate <= 0.10, format!("false positive rate {rate:.3}"))
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<f64>, rng: &mut ChaCha8Rng) -> ProbeDataset {
    let n = y.len();
    let ids = (0..n).map(|i| format!("i{i}")).collect();
    let ll = (0..n).map(|_| 5.0 + rng.random::<f64>()).collect();
    ProbeDataset::new(ids, Matrix::from_rows(&x).unwrap(), y, ll).unwrap()
}

fn probe_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = ProbeConfig::default();
    let (n, p) = (400, 20);
    let x: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut rng, p)).collect();
    let beta = gaussian(&mut rng, p);

    let y: Vec<f64> = x
        .iter()
        .map(|r| dot(r, &beta) + 0.05 * normal(&mut rng))
        .collect();
    let planted = fit_ridge_cv(&dataset(x.clone(), y, &mut rng), &cfg)
        .unwrap()
        .cv_r2;
    let y = gaussian(&mut rng, n);
    let null = fit_ridge_cv(&dataset(x.clone(), y, &mut rng), &cfg)
        .unwrap()
        .cv_r2;

    // signal spread over three correlated features
    let mixed: Vec<Vec<f64>> = x
        .iter()
        .map(|r| {
            let mut m = r.clone();
            m[1] = 0.8 * r[0] + 0.6 * r[1];
            m[2] = 0.5 * r[0] - 0.4 * r[1] + 0.77 * r[2];
            m
        })
        .collect();
    let y: Vec<f64> = mixed
        .iter()
        .map(|r| r[0] + 2.0 * r[1] - 1.5 * r[2] + 0.1 * normal(&mut rng))
        .collect();
    let inlp = inlp_erase(&dataset(mixed, y, &mut rng), &cfg, 0.02, 10).unwrap();
    let final_r2 = *inlp.r2_history.last().unwrap();

    let d = 12;
    let rows: Vec<Vec<f64>> = (0..30).map(|_| gaussian(&mut rng, d)).collect();
    let dir = orthonormal(&mut rng, 1, d).remove(0);
    let once = nullspace_project(&traj(&rows), &dir).unwrap();
    let twice = nullspace_project(&once, &dir).unwrap();
    let idem = once
        .states()
        .zip(twice.states())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    let shift = invariance_shift(&mut rng);
    let pass = planted >= 0.99
        && null <= 0.05
        && inlp.iterations <= 4
        && final_r2 < 0.02
        && idem <= 1e-10
        && shift <= 1e-10;
    outcome(
        pass,
        format!(
            "planted {planted:.4}, null {null:.4}, INLP {} iterations to {final_r2:.4}, \
             idempotence {idem:.1e}, rho_perp shift {shift:.1e}",
            inlp.iterations
        ),
    )
}

/// |Δρ⊥| after projecting out a learned d̂ from trajectories whose motion is
/// orthogonal to it.
fn invariance_shift(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (150, 16);
    let b = gaussian(rng, n);
    let origins: Vec<Vec<f64>> = b
        .iter()
        .map(|&bi| {
            let mut h = gaussian(rng, d);
            h[0] = 2.0 * bi + 0.1 * normal(rng);
            h
        })
        .collect();
    let probe = fit_ridge_cv(
        &dataset(origins.clone(), b.clone(), rng),
        &ProbeConfig::default(),
    )
    .unwrap();
    let x = Matrix::from_rows(&origins).unwrap();
    let unit = extract_direction(&probe, &x).unwrap().unit;
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut diffs = BTreeMap::new();
    for (i, (origin, &bi)) in origins.iter().zip(&b).enumerate() {
        let steps = rng.random_range(20..120usize);
        let drift = gaussian(rng, d);
        let pull = 0.3 * sigmoid(bi);
        let mut h = origin.clone();
        let mut rows = vec![h.clone()];
        for _ in 0..steps {
            let mut s: Vec<f64> = gaussian(rng, d)
                .iter()
                .zip(&drift)
                .map(|(e, m)| e + pull * m)
                .collect();
            let c = dot(&s, &unit);
            s.iter_mut().zip(&unit).for_each(|(v, u)| *v -= c * u);
            h.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
            rows.push(h.clone());
        }
        let t = traj(&rows);
        let id = format!("i{i}");
        let item = |value: f64| ItemGeometry {
            item_id: id.clone(),
            model_id: "m".into(),
            layer_index: 0,
            value,
            log_length: ((steps * 10) as f64).ln(),
            log_samples: (steps as f64).ln(),
            run_count: 1,
        };
        before.push(item(directness(&t).unwrap().directness.unwrap()));
        let projected = nullspace_project(&t, &unit).unwrap();
        after.push(item(directness(&projected).unwrap().directness.unwrap()));
        diffs.insert(id, bi);
    }
    let r0 = rho_perp(&before, &diffs, Family::LogN).unwrap();
    let r1 = rho_perp(&after, &diffs, Family::LogN).unwrap();
    (r0 - r1).abs()
}

fn mediation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 400;
    let d = gaussian(&mut rng, n);
    let ll: Vec<f64> = (0..n).map(|_| 5.0 + rng.random::<f64>()).collect();
    let m: Vec<f64> = d.iter().map(|&x| x + 0.5 * normal(&mut rng)).collect();
    let g: Vec<f64> = m.iter().map(|&x| x + 0.5 * normal(&mut rng)).collect();
    let full = indirect_effect("shift", &d, &m, &g, &ll, 1000, 1).unwrap();
    let g: Vec<f64> = m
        .iter()
        .zip(&d)
        .map(|(&x, &y)| x - 0.6 * y + 0.3 * normal(&mut rng))
        .collect();
    let sup = indirect_effect("shift", &d, &m, &g, &ll, 1000, 2).unwrap();
    let pass = (full.indirect_proportion - 1.0).abs() <= 0.1
        && full.ci_low > 0.0
        && sup.a * sup.b > 0.0
        && sup.c_prime < 0.0
        && sup.indirect_proportion > 1.0;
    outcome(
        pass,
        format!(
            "full {:.3} [{:.3}, {:.3}]; suppression ab {:.3}, c' {:.3}, proportion {:.3}",
            full.indirect_proportion,
            full.ci_low,
            full.ci_high,
            sup.a * sup.b,
            sup.c_prime,
            sup.indirect_proportion
        ),
    )
}

fn agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..7)).collect();
    let same = cohens_kappa(&a, &a).unwrap().unwrap();
    let b: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..7)).collect();
    let indep = cohens_kappa(&a, &b).unwrap().unwrap();
    let groups: Vec<Vec<f64>> = (0..400)
        .map(|_| {
            let mu = 2.0 * normal(&mut rng);
            (0..5).map(|_| mu + normal(&mut rng)).collect()
        })
        .collect();
    let icc = icc_1_1(&groups).unwrap().icc;
    outcome(
        (same - 1.0).abs() <= 1e-12 && indep.abs() <= 0.05 && (icc - 0.8).abs() <= 0.05,
        format!("identical {same:.4}, independent {indep:.4}, ICC {icc:.4}"),
    )
}

fn segmentation() -> Outcome {
    let cases = common::corpus();
    let wrong = common::mismatches(&cases);
    let gaps = common::coverage_gaps(&cases);
    let ordering = common::sat_ordering_holds(&cases);
    let mut detail = format!(
        "{} cases, {} mismatches, {} coverage gaps, unsat ordering {}",
        cases.len(),
        wrong.len(),
        gaps.len(),
        if ordering { "ok" } else { "broken" }
    );
    for w in wrong.iter().chain(&gaps).take(3) {
        detail.push_str(&format!("; {w}"));
    }
    outcome(
        cases.len() >= 40 && wrong.is_empty() && gaps.is_empty() && ordering,
        detail,
    )
}

fn bundles_identical(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    let other = fs::read_dir(b).unwrap().count();
    if names.len() != other {
        return Err(format!("{} vs {} files", names.len(), other));
    }
    names.sort();
    for f in &names {
        if fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() {
            return Err(format!("{f:?} differs"));
        }
    }
    Ok(names.len())
}

fn determinism(root: &Path) -> Outcome {
    let cohort = root.join("reversal");
    let start = Instant::now();
    let run = |out: &str| {
        let config = PipelineConfig {
            cohort: cohort.clone(),
            out: root.join(out),
            seed: 1,
            ..Default::default()
        };
        run_pipeline(&config).unwrap()
    };
    let a = run("bundle_a");
    let b = run("bundle_b");
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = a
        .provenance
        .stages
        .iter()
        .filter(|s| s.status.as_str() == "failed")
        .map(|s| s.stage.as_str())
        .collect();
    match bundles_identical(&a.dir, &b.dir) {
        Ok(n) => outcome(
            secs < 600.0 && failed.is_empty(),
            format!("{n} files identical, failed stages {failed:?}, {secs:.1} s"),
        ),
        Err(e) => outcome(false, format!("{e}, {secs:.1} s")),
    }
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("random-walk length law", Box::new(random_walk_law)),
        ("sign reversal", Box::new(|| sign_reversal(root.path()))),
        ("menger curvature", Box::new(menger_circle)),
        ("twonn", Box::new(twonn_cube)),
        ("pca90", Box::new(pca_subspace)),
        ("rasch recovery", Box::new(rasch_recovery)),
        ("residual orthogonality", Box::new(residual_orthogonality)),
        ("bootstrap coverage", Box::new(bootstrap_coverage)),
        ("permutation calibration", Box::new(permutation_calibration)),
        ("probe suite", Box::new(probe_suite)),
        ("mediation", Box::new(mediation)),
        ("agreement", Box::new(agreement)),
        ("segmentation corpus", Box::new(segmentation)),
        (
            "end-to-end determinism",
            Box::new(|| determinism(root.path())),
        ),
    ];
    let mut failures = 0;
    let mut total = Duration::ZERO;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        total += took;
        failures += usize::from(!o.pass);
        println!(
            "{} {:>2} {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        criteria.len() - failures,
        criteria.len(),
        total.as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
