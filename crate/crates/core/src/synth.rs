//! Synthetic cohorts with planted length, geometry, difficulty and behavior
//! laws, written in the canonical on-disk layout.
//!
//! Each run's solution segment is a bridge-conditioned walk: unit-norm noise
//! steps orthogonal to a drift axis, centered so they sum to zero, plus a
//! displacement of norm √T (jittered) orthogonal to the drift and a drift of
//! magnitude `m` per step. With `|ξ_t| ≈ 1` the directness is
//! `D² = (1 + m²T) / (T(1 + m²))`, so a target `D_t` gives
//! `m² = (D_t²T − 1) / (T(1 − D_t²))`. The target is
//! `T^{-1/2} + g·T₀^{-1/2}·Φ(b)`: the first term is the mechanical length
//! confound, the second the planted difficulty coupling.

use crate::archive::{
    write_f32_rows, write_jsonl, CohortIndex, CohortManifest, DomainDescriptor, ItemMeta,
    ModelDescriptor, ModelRole, TraceRecord, TrajectoryKey, LABELS_FILE, SCHEMA_VERSION,
};
use crate::behavior::{write_labels, Category, LabelRow};
use crate::calib::ResponseMatrix;
use crate::error::{Error, Result};
use crate::segment::{detect_boundary, segment_state_range, BoundaryPolicy, Domain, Tagging};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const TRUTH_FILE: &str = "truth.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthLaw {
    /// Mean of log N at b = 0.
    pub log_n_mean: f64,
    /// Change in log N per unit difficulty.
    pub log_n_slope: f64,
    /// Item-level sd of log N around the difficulty trend.
    pub log_n_item_sd: f64,
    /// Run-level sd of log N within an item.
    pub log_n_run_sd: f64,
    pub min_tokens: usize,
}

impl Default for LengthLaw {
    fn default() -> Self {
        Self {
            log_n_mean: 1000f64.ln(),
            log_n_slope: 0.22,
            log_n_item_sd: 0.20,
            log_n_run_sd: 0.0,
            min_tokens: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryLaw {
    /// Coupling gain g for reasoning models.
    pub reasoning_gain: f64,
    /// Coupling gain g for baseline models.
    pub baseline_gain: f64,
    /// Reference step count T₀ scaling the coupling term.
    pub reference_steps: f64,
    /// Relative sd of the displacement norm per run.
    pub displacement_jitter: f64,
}

impl Default for GeometryLaw {
    fn default() -> Self {
        Self {
            reasoning_gain: 0.12,
            baseline_gain: 0.0,
            reference_steps: 100.0,
            displacement_jitter: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrtLaw {
    pub difficulty_sd: f64,
    pub ability_sd: f64,
    /// Calibration-only models that contribute responses but no states.
    pub calibration_models: usize,
    pub calibration_runs: u32,
    pub reasoning_ability: f64,
    pub baseline_ability: f64,
}

impl Default for IrtLaw {
    fn default() -> Self {
        Self {
            difficulty_sd: 1.0,
            ability_sd: 1.0,
            calibration_models: 40,
            calibration_runs: 10,
            reasoning_ability: 0.5,
            baseline_ability: -0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorLaw {
    pub judges: usize,
    /// Probability that a judge reports the true category.
    pub judge_accuracy: f64,
    pub sentence_tokens: usize,
    /// Strategy-shift rate is `base + slope·Φ(b)`.
    pub shift_base: f64,
    pub shift_slope: f64,
    /// Rate of each other non-`none` category.
    pub other_rate: f64,
}

impl Default for BehaviorLaw {
    fn default() -> Self {
        Self {
            judges: 3,
            judge_accuracy: 0.85,
            sentence_tokens: 40,
            shift_base: 0.05,
            shift_slope: 0.15,
            other_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_items: usize,
    /// Items are dealt to domains in turn.
    pub domains: Vec<String>,
    pub n_reasoning: usize,
    pub n_baseline: usize,
    pub runs: usize,
    pub hidden_dim: usize,
    pub layers: Vec<u32>,
    pub stride: usize,
    /// Answer tokens after the solution segment.
    pub answer_tokens: usize,
    /// Offset b·strength along a fixed axis, added to every state.
    pub probe_strength: f64,
    pub length: LengthLaw,
    pub geometry: GeometryLaw,
    pub irt: IrtLaw,
    pub behavior: BehaviorLaw,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_items: 500,
            domains: vec!["code".into()],
            n_reasoning: 1,
            n_baseline: 1,
            runs: 5,
            hidden_dim: 16,
            layers: vec![4, 8, 12],
            stride: 10,
            answer_tokens: 12,
            probe_strength: 0.5,
            length: LengthLaw::default(),
            geometry: GeometryLaw::default(),
            irt: IrtLaw::default(),
            behavior: BehaviorLaw::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Reversal cohort: coupled reasoning group, uncoupled baseline group.
    pub fn reversal(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// No planted coupling in either group.
    pub fn null(seed: u64) -> Self {
        let mut s = Self::reversal(seed);
        s.geometry.reasoning_gain = 0.0;
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("synth spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth spec: {m}")));
        if self.n_items == 0 || self.runs == 0 || self.hidden_dim < 3 || self.stride == 0 {
            return bad("n_items, runs and stride must be positive and hidden_dim at least 3");
        }
        if self.n_reasoning + self.n_baseline == 0 {
            return bad("at least one trajectory model is required");
        }
        if self.layers.is_empty() || self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layers must be non-empty and strictly increasing");
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required");
        }
        for d in &self.domains {
            d.parse::<Domain>()?;
        }
        if self.length.min_tokens < 3 * self.stride {
            return bad("min_tokens must cover at least three states");
        }
        if !(0.0..=1.0).contains(&self.behavior.judge_accuracy)
            || self.behavior.sentence_tokens == 0
        {
            return bad("judge_accuracy must lie in [0, 1] and sentence_tokens be positive");
        }
        if self.behavior.judges < 2 && self.n_reasoning > 0 {
            return bad("at least two judges are required");
        }
        let finite = [
            self.probe_strength,
            self.length.log_n_mean,
            self.length.log_n_slope,
            self.length.log_n_item_sd,
            self.length.log_n_run_sd,
            self.geometry.reasoning_gain,
            self.geometry.baseline_gain,
            self.geometry.reference_steps,
            self.geometry.displacement_jitter,
            self.irt.difficulty_sd,
            self.irt.ability_sd,
            self.irt.reasoning_ability,
            self.irt.baseline_ability,
            self.behavior.shift_base,
            self.behavior.shift_slope,
            self.behavior.other_rate,
        ];
        if finite.iter().any(|x| !x.is_finite()) || self.geometry.reference_steps <= 0.0 {
            return bad("coefficients must be finite and reference_steps positive");
        }
        if self.behavior.shift_base + self.behavior.shift_slope + 5.0 * self.behavior.other_rate
            > 1.0
        {
            return bad("behavior rates exceed 1");
        }
        Ok(())
    }

    fn models(&self) -> Vec<ModelDescriptor> {
        let layers: Vec<i64> = self.layers.iter().map(|&l| l as i64).collect();
        let mut out = Vec::new();
        for k in 0..self.n_reasoning {
            out.push(ModelDescriptor {
                id: format!("reasoning_{k}"),
                role: ModelRole::Reasoning,
                matched_baseline_id: (k < self.n_baseline).then(|| format!("baseline_{k}")),
                layer_indices: layers.clone(),
                hidden_dim: self.hidden_dim,
                tagged: None,
            });
        }
        for k in 0..self.n_baseline {
            out.push(ModelDescriptor {
                id: format!("baseline_{k}"),
                role: ModelRole::Baseline,
                matched_baseline_id: None,
                layer_indices: layers.clone(),
                hidden_dim: self.hidden_dim,
                tagged: None,
            });
        }
        for k in 0..self.irt.calibration_models {
            out.push(ModelDescriptor {
                id: format!("calib_{k:02}"),
                role: ModelRole::Calibration,
                matched_baseline_id: None,
                layer_indices: Vec::new(),
                hidden_dim: self.hidden_dim,
                tagged: None,
            });
        }
        out
    }
}

/// Planted per-item quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTruth {
    pub item_id: String,
    pub domain: String,
    pub difficulty: f64,
    pub log_n: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn phi(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Target directness for `steps` steps under gain `g`.
pub fn target_directness(steps: usize, b: f64, g: f64, reference_steps: f64) -> f64 {
    let t = steps as f64;
    (t.powf(-0.5) + g * reference_steps.powf(-0.5) * phi(b)).clamp(t.powf(-0.5), 0.99)
}

/// Per-step drift magnitude that yields `target` directness.
pub fn drift_for(target: f64, steps: usize) -> f64 {
    let t = steps as f64;
    let m2 = (target * target * t - 1.0) / (t * (1.0 - target * target));
    m2.max(0.0).sqrt()
}

fn unit_in_complement(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        v[0] = 0.0;
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Bridge-conditioned walk with `steps` steps along axis 0 of `d` dims,
/// starting at `origin`.
pub fn bridge_walk(
    rng: &mut ChaCha8Rng,
    origin: &[f64],
    steps: usize,
    target: f64,
    jitter: f64,
) -> Vec<f64> {
    let d = origin.len();
    let mut xi: Vec<Vec<f64>> = (0..steps).map(|_| unit_in_complement(rng, d)).collect();
    for j in 0..d {
        let m = xi.iter().map(|s| s[j]).sum::<f64>() / steps as f64;
        xi.iter_mut().for_each(|s| s[j] -= m);
    }
    let norm = (steps as f64).sqrt() * (1.0 + jitter * normal(rng));
    let w: Vec<f64> = unit_in_complement(rng, d)
        .into_iter()
        .map(|x| x * norm / steps as f64)
        .collect();
    let m = drift_for(target, steps);
    let mut out = Vec::with_capacity((steps + 1) * d);
    out.extend_from_slice(origin);
    let mut h = origin.to_vec();
    for s in &xi {
        for j in 0..d {
            h[j] += s[j] + w[j] + if j == 0 { m } else { 0.0 };
        }
        out.extend_from_slice(&h);
    }
    out
}

/// Isotropic unit steps from `from`, `count` states long (excluding `from`).
fn free_steps(rng: &mut ChaCha8Rng, from: &[f64], count: usize) -> Vec<Vec<f64>> {
    let d = from.len();
    let mut h = from.to_vec();
    (0..count)
        .map(|_| {
            let mut s: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            let n = s.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            s.iter_mut().for_each(|x| *x /= n);
            h.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            h.clone()
        })
        .collect()
}

const WORDS: [&str; 8] = [
    "consider ",
    "the ",
    "case ",
    "where ",
    "we ",
    "check ",
    "each ",
    "value ",
];

fn answer_tokens(domain: Domain, count: usize) -> Vec<String> {
    let head = match domain {
        Domain::Code => "```python\n",
        Domain::Math => "\\boxed{42}",
        Domain::Sat => "SATISFIABLE",
    };
    let mut t = vec![" ".to_string(), head.to_string()];
    t.extend((2..count.max(2)).map(|k| format!(" a{k}")));
    if domain == Domain::Code {
        t.push("\n```".into());
    }
    t
}

/// Tokens of one synthetic generation and the index of the first segment token.
fn trace_tokens(
    domain: Domain,
    tagged: bool,
    n: usize,
    sentence_tokens: usize,
    answer: usize,
) -> (Vec<String>, usize) {
    let mut toks = Vec::with_capacity(n + answer + 2);
    if tagged {
        toks.push("<think>".to_string());
    }
    let first = toks.len();
    for k in 0..n {
        let w = WORDS[k % WORDS.len()];
        if (k + 1) % sentence_tokens == 0 || k + 1 == n {
            toks.push(format!("{}. ", w.trim_end()));
        } else {
            toks.push(w.to_string());
        }
    }
    if tagged {
        toks.push("</think>".to_string());
    }
    toks.extend(answer_tokens(domain, answer));
    (toks, first)
}

fn build_trace(item: &str, model: &str, run: u32, toks: &[String]) -> TraceRecord {
    let mut offsets = Vec::with_capacity(toks.len());
    let mut text = String::new();
    for t in toks {
        offsets.push(text.len());
        text.push_str(t);
    }
    TraceRecord {
        item_id: item.to_string(),
        model_id: model.to_string(),
        run_id: run,
        text,
        token_count: toks.len(),
        truncated: false,
        token_offsets: Some(offsets),
    }
}

struct RunOutput {
    trace: TraceRecord,
    files: Vec<(TrajectoryKey, PathBuf, Vec<f32>)>,
    labels: Vec<LabelRow>,
    correct: bool,
}

/// Writes a full cohort under `root` (created if needed) and returns the
/// planted item truths.
pub fn synth_cohort(spec: &SynthSpec, root: &Path) -> Result<Vec<ItemTruth>> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let models = spec.models();
    let traj_models: Vec<&ModelDescriptor> = models
        .iter()
        .filter(|m| !m.layer_indices.is_empty())
        .collect();

    let mut item_rng = stream(spec.seed, 0);
    let truths: Vec<ItemTruth> = (0..spec.n_items)
        .map(|i| {
            let b = spec.irt.difficulty_sd * normal(&mut item_rng);
            let eps = normal(&mut item_rng);
            ItemTruth {
                item_id: format!("item_{i:04}"),
                domain: spec.domains[i % spec.domains.len()].clone(),
                difficulty: b,
                log_n: spec.length.log_n_mean
                    + spec.length.log_n_slope * b
                    + spec.length.log_n_item_sd * eps,
            }
        })
        .collect();
    let item_origins: Vec<Vec<f64>> = (0..spec.n_items)
        .map(|_| {
            (0..spec.hidden_dim)
                .map(|_| normal(&mut item_rng))
                .collect()
        })
        .collect();
    let abilities: BTreeMap<String, f64> = models
        .iter()
        .map(|m| {
            let theta = match m.role {
                ModelRole::Reasoning => spec.irt.reasoning_ability,
                ModelRole::Baseline => spec.irt.baseline_ability,
                ModelRole::Calibration => spec.irt.ability_sd * normal(&mut item_rng),
            };
            (m.id.clone(), theta)
        })
        .collect();

    let jobs: Vec<(usize, usize, u32)> = (0..spec.n_items)
        .flat_map(|i| {
            (0..traj_models.len()).flat_map(move |m| (0..spec.runs as u32).map(move |r| (i, m, r)))
        })
        .collect();
    let outputs: Vec<RunOutput> = jobs
        .par_iter()
        .map(|&(i, mi, run)| {
            let id = ((i * traj_models.len() + mi) * spec.runs + run as usize) as u64;
            generate_run(
                spec,
                &truths[i],
                &item_origins[i],
                traj_models[mi],
                &abilities,
                run,
                id + 1,
            )
        })
        .collect::<Result<_>>()?;

    let mut index = CohortIndex::default();
    let mut traces = Vec::with_capacity(outputs.len());
    let mut labels = Vec::new();
    let mut correctness: BTreeMap<String, BTreeMap<String, BTreeMap<u32, bool>>> = BTreeMap::new();
    for out in outputs {
        for (key, rel, _) in &out.files {
            index.insert(key.clone(), rel.clone());
        }
        out.files
            .par_iter()
            .try_for_each(|(_, rel, data)| write_f32_rows(&root.join(rel), data))?;
        correctness
            .entry(out.trace.item_id.clone())
            .or_default()
            .entry(out.trace.model_id.clone())
            .or_default()
            .insert(out.trace.run_id, out.correct);
        labels.extend(out.labels);
        traces.push(out.trace);
    }

    // responses: trajectory models from their run outcomes, calibration models drawn
    let mut resp_rng = stream(spec.seed, u64::MAX - 1);
    let mut cells = Vec::new();
    for t in &truths {
        for m in &models {
            let (k, n) = match m.role {
                ModelRole::Calibration => {
                    let p = sigmoid(abilities[&m.id] - t.difficulty);
                    let n = spec.irt.calibration_runs;
                    let k = resp_rng.sample(
                        Binomial::new(n as u64, p).map_err(|e| Error::Degenerate(e.to_string()))?,
                    );
                    (k as u32, n)
                }
                _ => {
                    let runs = &correctness[&t.item_id][&m.id];
                    (
                        runs.values().filter(|&&c| c).count() as u32,
                        runs.len() as u32,
                    )
                }
            };
            cells.push((t.item_id.clone(), m.id.clone(), k, n));
        }
    }
    ResponseMatrix::from_cells(cells)?.write_csv(&root.join(crate::archive::RESPONSES_FILE))?;

    let mut native_rng = stream(spec.seed, u64::MAX - 2);
    let items: Vec<ItemMeta> = truths
        .iter()
        .map(|t| ItemMeta {
            item_id: t.item_id.clone(),
            domain: t.domain.clone(),
            native_label: Some(
                (1500.0 + 300.0 * t.difficulty + 100.0 * normal(&mut native_rng)).round(),
            ),
            correctness: correctness.remove(&t.item_id),
        })
        .collect();
    write_jsonl(&root.join(crate::archive::ITEMS_FILE), &items)?;
    write_jsonl(&root.join(crate::archive::TRACES_FILE), &traces)?;
    if !labels.is_empty() {
        write_labels(&root.join(LABELS_FILE), &labels)?;
    }
    index.write(root)?;

    let mut domain_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &truths {
        *domain_counts.entry(t.domain.as_str()).or_default() += 1;
    }
    let manifest = CohortManifest {
        schema_version: SCHEMA_VERSION,
        runs_per_item: spec.runs,
        stride_tokens: spec.stride,
        domains: domain_counts
            .into_iter()
            .map(|(name, item_count)| DomainDescriptor {
                name: name.to_string(),
                item_count,
            })
            .collect(),
        models,
        root: root.to_path_buf(),
    };
    manifest.write(root)?;
    write_truth(root, &truths)?;
    Ok(truths)
}

fn write_truth(root: &Path, truths: &[ItemTruth]) -> Result<()> {
    let p = root.join(TRUTH_FILE);
    let mut w = csv::Writer::from_path(&p).map_err(|e| crate::archive::csv_err(&p, e))?;
    w.write_record(["item_id", "domain", "difficulty", "log_n"])
        .map_err(|e| crate::archive::csv_err(&p, e))?;
    for t in truths {
        w.write_record([
            t.item_id.clone(),
            t.domain.clone(),
            t.difficulty.to_string(),
            t.log_n.to_string(),
        ])
        .map_err(|e| crate::archive::csv_err(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))
}

/// Planted difficulties from a synthetic cohort's truth file.
pub fn read_truth(root: &Path) -> Result<BTreeMap<String, f64>> {
    let p = root.join(TRUTH_FILE);
    let mut r = csv::Reader::from_path(&p).map_err(|e| crate::archive::csv_err(&p, e))?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| crate::archive::csv_err(&p, e))?;
        let b: f64 = rec[2]
            .parse()
            .map_err(|_| Error::schema(p.display().to_string(), "bad difficulty"))?;
        out.insert(rec[0].to_string(), b);
    }
    Ok(out)
}

fn generate_run(
    spec: &SynthSpec,
    truth: &ItemTruth,
    origin: &[f64],
    model: &ModelDescriptor,
    abilities: &BTreeMap<String, f64>,
    run: u32,
    stream_id: u64,
) -> Result<RunOutput> {
    let mut rng = stream(spec.seed, stream_id);
    let domain: Domain = truth.domain.parse()?;
    let tagged = model.is_tagged();
    let log_n = truth.log_n + spec.length.log_n_run_sd * normal(&mut rng);
    let n = (log_n.exp().round() as usize).max(spec.length.min_tokens);
    let (toks, _) = trace_tokens(
        domain,
        tagged,
        n,
        spec.behavior.sentence_tokens,
        spec.answer_tokens,
    );
    let trace = build_trace(&truth.item_id, &model.id, run, &toks);
    let tagging = if tagged {
        Tagging::Tagged
    } else {
        Tagging::Untagged
    };
    let seg = detect_boundary(&trace, &BoundaryPolicy::new(domain, tagging));
    let n_states = trace.token_count.div_ceil(spec.stride);
    let range = segment_state_range(&seg, spec.stride, n_states);
    if range.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "synthetic segment for {} has {} states",
            truth.item_id,
            range.len()
        )));
    }
    let steps = range.len() - 1;
    let gain = match model.role {
        ModelRole::Reasoning => spec.geometry.reasoning_gain,
        _ => spec.geometry.baseline_gain,
    };
    let target = target_directness(steps, truth.difficulty, gain, spec.geometry.reference_steps);
    let d = spec.hidden_dim;

    let mut files = Vec::with_capacity(model.layer_indices.len());
    for layer in model.layers() {
        let mut start = origin.to_vec();
        start[1] += truth.difficulty * spec.probe_strength;
        let head = free_steps(&mut rng, &start, range.start);
        let seg_origin = head.last().cloned().unwrap_or(start.clone());
        let walk = bridge_walk(
            &mut rng,
            &seg_origin,
            steps,
            target,
            spec.geometry.displacement_jitter,
        );
        let last = walk[walk.len() - d..].to_vec();
        let tail = free_steps(&mut rng, &last, n_states - range.end);
        let mut rows: Vec<f64> = Vec::with_capacity(n_states * d);
        if range.start > 0 {
            rows.extend_from_slice(&start);
            for h in head.iter().take(range.start - 1) {
                rows.extend_from_slice(h);
            }
        }
        rows.extend_from_slice(&walk);
        for h in &tail {
            rows.extend_from_slice(h);
        }
        debug_assert_eq!(rows.len(), n_states * d);
        let key = TrajectoryKey {
            item_id: truth.item_id.clone(),
            model_id: model.id.clone(),
            run_id: run,
            layer_index: layer,
        };
        let rel = PathBuf::from("models")
            .join(&model.id)
            .join(format!("{}_r{run}_l{layer}.f32", truth.item_id));
        files.push((key, rel, rows.into_iter().map(|x| x as f32).collect()));
    }

    let correct = rng.random::<f64>() < sigmoid(abilities[&model.id] - truth.difficulty);
    let labels = if model.role == ModelRole::Reasoning && model.id == "reasoning_0" {
        judge_labels(spec, truth, run, &trace, &seg, &mut rng)
    } else {
        Vec::new()
    };
    Ok(RunOutput {
        trace,
        files,
        labels,
        correct,
    })
}

fn judge_labels(
    spec: &SynthSpec,
    truth: &ItemTruth,
    run: u32,
    trace: &TraceRecord,
    seg: &crate::segment::SegmentedTrace,
    rng: &mut ChaCha8Rng,
) -> Vec<LabelRow> {
    let law = &spec.behavior;
    let offsets = trace
        .token_offsets
        .as_ref()
        .expect("synthetic traces carry offsets");
    let first = seg.segment_token_start;
    let count = seg.segment_token_count;
    let shift = law.shift_base + law.shift_slope * phi(truth.difficulty);
    let mut out = Vec::new();
    for (s, start) in (first..first + count)
        .step_by(law.sentence_tokens)
        .enumerate()
    {
        let end = (start + law.sentence_tokens).min(first + count);
        let u: f64 = rng.random();
        let truth_cat = if u < shift {
            Category::StrategyShift
        } else {
            let k = ((u - shift) / law.other_rate) as usize;
            match k {
                0 => Category::Uncertainty,
                1 => Category::SelfCorrect,
                2 => Category::Verify,
                3 => Category::Restate,
                4 => Category::Subgoal,
                _ => Category::None,
            }
        };
        let char_start = offsets[start];
        let char_end = offsets.get(end).copied().unwrap_or(trace.text.len());
        for j in 0..law.judges {
            let category = if rng.random::<f64>() < law.judge_accuracy {
                truth_cat
            } else {
                Category::ALL[rng.random_range(0..Category::ALL.len())]
            };
            out.push(LabelRow {
                item_id: truth.item_id.clone(),
                run_id: run,
                sentence_index: s as u32,
                judge_id: format!("judge_{j}"),
                category,
                char_start: Some(char_start),
                char_end: Some(char_end),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Trajectory;
    use crate::archive::{load_items, Cohort};
    use crate::geometry::directness;

    #[test]
    fn walk_hits_target_directness() {
        let mut rng = stream(1, 1);
        for &(steps, target) in &[(100usize, 0.1f64), (100, 0.2), (300, 0.3), (50, 0.5)] {
            let mut ds = Vec::new();
            for _ in 0..50 {
                let w = bridge_walk(
                    &mut rng,
                    &[0.0; 16],
                    steps,
                    target.max((steps as f64).powf(-0.5)),
                    0.0,
                );
                let t = Trajectory::new(TrajectoryKey::default(), 1, 16, w).unwrap();
                ds.push(directness(&t).unwrap().directness.unwrap());
            }
            let m = ds.iter().sum::<f64>() / ds.len() as f64;
            assert!(
                (m - target).abs() / target < 0.03,
                "T={steps} target {target}: {m}"
            );
        }
    }

    #[test]
    fn small_cohort_roundtrip_and_determinism() {
        let spec = SynthSpec {
            n_items: 12,
            domains: vec!["code".into(), "math".into(), "sat".into()],
            runs: 2,
            hidden_dim: 6,
            layers: vec![1, 2],
            irt: IrtLaw {
                calibration_models: 3,
                ..IrtLaw::default()
            },
            length: LengthLaw {
                log_n_mean: 200f64.ln(),
                ..LengthLaw::default()
            },
            seed: 9,
            ..SynthSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_cohort(&spec, a.path()).unwrap();
        synth_cohort(&spec, b.path()).unwrap();
        for f in [
            "manifest.toml",
            "index.csv",
            "traces.jsonl",
            "items.jsonl",
            "responses.csv",
            "labels.csv",
            "truth.csv",
        ] {
            let x = fs::read(a.path().join(f)).unwrap();
            let y = fs::read(b.path().join(f)).unwrap();
            assert!(x == y, "{f} differs");
        }
        let cohort = Cohort::open(a.path()).unwrap();
        assert_eq!(cohort.index.len(), 12 * 2 * 2 * 2);
        let key = cohort.index.keys().next().unwrap().clone();
        let x = fs::read(a.path().join(cohort.index.get(&key).unwrap())).unwrap();
        let y = fs::read(b.path().join(cohort.index.get(&key).unwrap())).unwrap();
        assert_eq!(x, y);
        assert_eq!(load_items(a.path()).unwrap().len(), 12);
        let m = ResponseMatrix::read_csv(&a.path().join("responses.csv")).unwrap();
        assert_eq!(m.n_models(), 5);
        // every synthetic trace segments on its marker
        let items = load_items(a.path()).unwrap();
        let geo =
            crate::geometry::geometry_for_cohort(&cohort, &items, &Default::default()).unwrap();
        assert!(geo.rows.iter().all(|r| r.error.is_none()));
        assert!(geo
            .rows
            .iter()
            .all(|r| r.boundary_source != Some(crate::segment::BoundarySource::FallbackFull)));
    }

    #[test]
    fn invalid_specs() {
        assert!(SynthSpec {
            n_items: 0,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            layers: vec![2, 1],
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
        assert!(SynthSpec::from_toml("n_items = 10\nbogus = 1").is_err());
        assert_eq!(SynthSpec::from_toml("n_items = 10").unwrap().n_items, 10);
    }
}
