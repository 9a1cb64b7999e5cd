//! On-disk cohort layout.
//!
//! ```text
//! <root>/manifest.toml          cohort manifest
//! <root>/index.csv              item_id,model_id,run_id,layer_index,path
//! <root>/models/<model_id>/...  raw little-endian f32 trajectory arrays
//! <root>/traces.jsonl           one TraceRecord per line
//! <root>/items.jsonl            one ItemMeta per line
//! <root>/responses.csv          item_id,model_id,k,n
//! <root>/labels.csv             optional sentence labels
//! ```

use crate::error::{Error, ManifestViolation, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: i64 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const INDEX_FILE: &str = "index.csv";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const RESPONSES_FILE: &str = "responses.csv";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Reasoning,
    Baseline,
    Calibration,
}

impl ModelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Reasoning => "reasoning",
            ModelRole::Baseline => "baseline",
            ModelRole::Calibration => "calibration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub name: String,
    pub item_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub id: String,
    pub role: ModelRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_baseline_id: Option<String>,
    #[serde(default)]
    pub layer_indices: Vec<i64>,
    pub hidden_dim: usize,
    /// Whether the model emits explicit thinking delimiters. Defaults to
    /// `role == reasoning`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagged: Option<bool>,
}

impl ModelDescriptor {
    pub fn is_tagged(&self) -> bool {
        self.tagged.unwrap_or(self.role == ModelRole::Reasoning)
    }

    pub fn layers(&self) -> impl Iterator<Item = u32> + '_ {
        self.layer_indices.iter().map(|&l| l as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub schema_version: i64,
    pub runs_per_item: usize,
    pub stride_tokens: usize,
    #[serde(default)]
    pub domains: Vec<DomainDescriptor>,
    #[serde(default)]
    pub models: Vec<ModelDescriptor>,
    /// Cohort root directory; set on load, never serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl CohortManifest {
    /// Checks every structural invariant that does not touch the filesystem.
    pub fn validate(&self) -> std::result::Result<(), ManifestViolation> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ManifestViolation::SchemaVersion(self.schema_version));
        }
        if self.stride_tokens < 1 {
            return Err(ManifestViolation::Stride);
        }
        if self.runs_per_item < 1 {
            return Err(ManifestViolation::Runs);
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            if !ids.insert(m.id.as_str()) {
                return Err(ManifestViolation::DuplicateModel(m.id.clone()));
            }
            if m.hidden_dim < 1 {
                return Err(ManifestViolation::HiddenDim(m.id.clone()));
            }
            if m.layer_indices.iter().any(|&l| l < 0) {
                return Err(ManifestViolation::NegativeLayer(m.id.clone()));
            }
            if m.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ManifestViolation::LayersNotIncreasing(m.id.clone()));
            }
        }
        for m in &self.models {
            if let Some(base) = &m.matched_baseline_id {
                match self.model(base) {
                    None => {
                        return Err(ManifestViolation::UnknownBaseline {
                            model: m.id.clone(),
                            baseline: base.clone(),
                        })
                    }
                    Some(b) if b.role != ModelRole::Baseline => {
                        return Err(ManifestViolation::BaselineRole {
                            model: m.id.clone(),
                            baseline: base.clone(),
                        })
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    pub fn model(&self, id: &str) -> Option<&ModelDescriptor> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn model_dir(&self, id: &str) -> PathBuf {
        self.root.join("models").join(id)
    }

    /// Models that carry hidden states (at least one layer).
    pub fn trajectory_models(&self) -> impl Iterator<Item = &ModelDescriptor> {
        self.models.iter().filter(|m| !m.layer_indices.is_empty())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let p = root.join(MANIFEST_FILE);
        fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))
    }
}

/// Parses a manifest from text without filesystem checks.
pub fn parse_manifest(text: &str, context: &str) -> Result<CohortManifest> {
    let m: CohortManifest =
        toml::from_str(text).map_err(|e| Error::schema(context, e.to_string()))?;
    m.validate()?;
    Ok(m)
}

/// Loads and validates `<root>/manifest.toml` (or the manifest file itself).
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut m = parse_manifest(&text, &file.display().to_string())?;
    m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    for model in m.trajectory_models() {
        if !m.model_dir(&model.id).is_dir() {
            return Err(ManifestViolation::MissingModelDir(model.id.clone()).into());
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrajectoryKey {
    pub item_id: String,
    pub model_id: String,
    pub run_id: u32,
    pub layer_index: u32,
}

/// Sidecar mapping from trajectory ids to relative array paths.
#[derive(Debug, Clone, Default)]
pub struct CohortIndex {
    entries: BTreeMap<TrajectoryKey, PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    item_id: String,
    model_id: String,
    run_id: u32,
    layer_index: u32,
    path: String,
}

impl CohortIndex {
    pub fn insert(&mut self, key: TrajectoryKey, rel_path: PathBuf) {
        self.entries.insert(key, rel_path);
    }

    pub fn get(&self, key: &TrajectoryKey) -> Option<&Path> {
        self.entries.get(key).map(PathBuf::as_path)
    }

    pub fn keys(&self) -> impl Iterator<Item = &TrajectoryKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join(INDEX_FILE);
        let mut r = csv::Reader::from_path(&p).map_err(|e| csv_err(&p, e))?;
        let mut idx = Self::default();
        for row in r.deserialize::<IndexRow>() {
            let row = row.map_err(|e| csv_err(&p, e))?;
            idx.insert(
                TrajectoryKey {
                    item_id: row.item_id,
                    model_id: row.model_id,
                    run_id: row.run_id,
                    layer_index: row.layer_index,
                },
                PathBuf::from(row.path),
            );
        }
        Ok(idx)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let p = root.join(INDEX_FILE);
        let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
        for (k, v) in &self.entries {
            w.serialize(IndexRow {
                item_id: k.item_id.clone(),
                model_id: k.model_id.clone(),
                run_id: k.run_id,
                layer_index: k.layer_index,
                path: v.to_string_lossy().into_owned(),
            })
            .map_err(|e| csv_err(&p, e))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::schema(path.display().to_string(), format!("{other:?}")),
    }
}

/// Sampled hidden states for one (item, model, run, layer); row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub item_id: String,
    pub model_id: String,
    pub run_id: u32,
    pub layer_index: u32,
    pub stride_tokens: usize,
    dim: usize,
    states: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(
        key: TrajectoryKey,
        stride_tokens: usize,
        dim: usize,
        states: Vec<T>,
    ) -> Result<Self> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: states.len(),
            });
        }
        if let Some(pos) = states.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self {
            item_id: key.item_id,
            model_id: key.model_id,
            run_id: key.run_id,
            layer_index: key.layer_index,
            stride_tokens,
            dim,
            states,
        })
    }

    /// Builds a trajectory from state rows with placeholder ids.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        let mut states = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            states.extend_from_slice(r);
        }
        Self::new(TrajectoryKey::default(), 1, dim, states)
    }

    pub fn key(&self) -> TrajectoryKey {
        TrajectoryKey {
            item_id: self.item_id.clone(),
            model_id: self.model_id.clone(),
            run_id: self.run_id,
            layer_index: self.layer_index,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.states.len() / self.dim
    }

    /// Number of sampled steps T (states minus one); zero for an empty trajectory.
    pub fn sample_count(&self) -> usize {
        self.n_states().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, t: usize) -> &[T] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[T]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[T] {
        &self.states
    }

    pub fn map_states(&self, f: impl Fn(&[T], &mut [T])) -> Self {
        let mut out = self.states.clone();
        for (src, dst) in self
            .states
            .chunks_exact(self.dim)
            .zip(out.chunks_exact_mut(self.dim))
        {
            f(src, dst);
        }
        Self {
            states: out,
            ..self.clone()
        }
    }

    /// Sub-trajectory of rows `range`; provenance fields preserved.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        let end = range.end.min(self.n_states());
        let start = range.start.min(end);
        Self {
            states: self.states[start * self.dim..end * self.dim].to_vec(),
            ..self.clone()
        }
    }

    pub fn cast<U: Scalar>(&self) -> Trajectory<U> {
        Trajectory {
            item_id: self.item_id.clone(),
            model_id: self.model_id.clone(),
            run_id: self.run_id,
            layer_index: self.layer_index,
            stride_tokens: self.stride_tokens,
            dim: self.dim,
            states: self
                .states
                .iter()
                .map(|x| U::from_f64(x.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

impl Default for TrajectoryKey {
    fn default() -> Self {
        Self {
            item_id: String::new(),
            model_id: String::new(),
            run_id: 0,
            layer_index: 0,
        }
    }
}

/// Reads a headerless little-endian f32 array of `dim` columns.
pub fn read_f32_rows(path: &Path, dim: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let row_bytes = 4 * dim;
    if dim == 0 || bytes.len() % row_bytes != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_rows(path: &Path, values: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads one trajectory, upcasting storage `f32` to `f64`.
pub fn load_trajectory(
    manifest: &CohortManifest,
    index: &CohortIndex,
    key: &TrajectoryKey,
) -> Result<Trajectory<f64>> {
    let model = manifest
        .model(&key.model_id)
        .ok_or_else(|| Error::schema("trajectory", format!("unknown model {}", key.model_id)))?;
    let rel = index.get(key).ok_or_else(|| {
        Error::MissingFile(PathBuf::from(format!(
            "{}/{}/run{}/layer{}",
            key.model_id, key.item_id, key.run_id, key.layer_index
        )))
    })?;
    let path = manifest.root.join(rel);
    let raw = read_f32_rows(&path, model.hidden_dim)?;
    let states: Vec<f64> = raw.into_iter().map(f64::from).collect();
    Trajectory::new(
        key.clone(),
        manifest.stride_tokens,
        model.hidden_dim,
        states,
    )
}

/// Generated output for one (item, model, run).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub item_id: String,
    pub model_id: String,
    pub run_id: u32,
    pub text: String,
    pub token_count: usize,
    #[serde(default)]
    pub truncated: bool,
    /// Byte offset at which each generated token starts, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_offsets: Option<Vec<usize>>,
}

impl TraceRecord {
    /// Number of tokens whose start falls inside the byte span `[start, end)`,
    /// and the index of the first such token.
    ///
    /// Without explicit offsets, tokens are assumed evenly spread over bytes.
    pub fn token_range(&self, start: usize, end: usize) -> (usize, usize) {
        match &self.token_offsets {
            Some(offsets) => {
                let first = offsets.partition_point(|&o| o < start);
                let last = offsets.partition_point(|&o| o < end);
                (first, last.saturating_sub(first))
            }
            None => {
                let len = self.text.len().max(1) as f64;
                let n = self.token_count as f64;
                let first = (start as f64 / len * n).round() as usize;
                let last = (end as f64 / len * n).round() as usize;
                (first, last.saturating_sub(first))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native_label: Option<f64>,
    /// model_id → run_id → correct.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness: Option<BTreeMap<String, BTreeMap<u32, bool>>>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| {
                Error::schema(format!("{}:{}", path.display(), i + 1), e.to_string())
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_traces(root: &Path) -> Result<Vec<TraceRecord>> {
    let traces: Vec<TraceRecord> = read_jsonl(&root.join(TRACES_FILE))?;
    Ok(traces)
}

pub fn load_items(root: &Path) -> Result<Vec<ItemMeta>> {
    let items: Vec<ItemMeta> = read_jsonl(&root.join(ITEMS_FILE))?;
    if let Some(bad) = items
        .iter()
        .find(|m| m.native_label.is_some_and(|x| !x.is_finite()))
    {
        return Err(Error::schema(
            "items",
            format!("non-finite native label for {}", bad.item_id),
        ));
    }
    Ok(items)
}

/// Everything needed to address a cohort on disk.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub manifest: CohortManifest,
    pub index: CohortIndex,
}

impl Cohort {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        let index = CohortIndex::load(&manifest.root)?;
        Ok(Self { manifest, index })
    }

    pub fn root(&self) -> &Path {
        &self.manifest.root
    }

    pub fn load(&self, key: &TrajectoryKey) -> Result<Trajectory<f64>> {
        load_trajectory(&self.manifest, &self.index, key)
    }

    pub fn traces(&self) -> Result<HashMap<(String, String, u32), TraceRecord>> {
        Ok(load_traces(self.root())?
            .into_iter()
            .map(|t| ((t.item_id.clone(), t.model_id.clone(), t.run_id), t))
            .collect())
    }
}
