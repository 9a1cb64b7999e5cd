//! Typed result tables with CSV / JSON-lines persistence.
//!
//! CSV output is RFC-4180 with a header row; column types and provenance go to
//! a `<file>.meta.json` sidecar. JSON-lines output carries the same metadata
//! on its first line. Reals are written in shortest round-trip form, so a
//! write/read cycle is bit-exact.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Str,
    Real,
    Int,
    Bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    Real(f64),
    Int(i64),
    Bool(bool),
    Null,
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Real(x) => Some(x),
            Value::Int(i) => Some(i as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Value::Int(i) => Some(i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            Value::Bool(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    fn fits(&self, ty: ColumnType) -> bool {
        matches!(
            (self, ty),
            (Value::Null, _)
                | (Value::Str(_), ColumnType::Str)
                | (Value::Real(_), ColumnType::Real)
                | (Value::Int(_), ColumnType::Int)
                | (Value::Bool(_), ColumnType::Bool)
        )
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Real(x)
    }
}

impl From<Option<f64>> for Value {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Value::Null, Value::Real)
    }
}

impl From<i64> for Value {
    fn from(x: i64) -> Self {
        Value::Int(x)
    }
}

impl From<usize> for Value {
    fn from(x: usize) -> Self {
        Value::Int(x as i64)
    }
}

impl From<Option<usize>> for Value {
    fn from(x: Option<usize>) -> Self {
        x.map_or(Value::Null, |v| Value::Int(v as i64))
    }
}

impl From<bool> for Value {
    fn from(x: bool) -> Self {
        Value::Bool(x)
    }
}

impl From<&str> for Value {
    fn from(x: &str) -> Self {
        Value::Str(x.to_string())
    }
}

impl From<String> for Value {
    fn from(x: String) -> Self {
        Value::Str(x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn current(config_hash: impl Into<String>) -> Self {
        Self {
            tool_version: format!("trajgeom {}", env!("CARGO_PKG_VERSION")),
            config_hash: config_hash.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    JsonLines,
}

impl TableFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => TableFormat::JsonLines,
            _ => TableFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    columns: Vec<Column>,
    rows: Vec<Vec<Value>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    columns: Vec<Column>,
    provenance: Provenance,
}

impl ResultTable {
    pub fn new<S: Into<String>>(
        columns: impl IntoIterator<Item = (S, ColumnType)>,
    ) -> Result<Self> {
        let columns: Vec<Column> = columns
            .into_iter()
            .map(|(n, ty)| Column { name: n.into(), ty })
            .collect();
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::schema(
                    "result table",
                    format!("duplicate column {}", c.name),
                ));
            }
        }
        Ok(Self {
            columns,
            rows: Vec::new(),
            provenance: Provenance::default(),
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn push_row(&mut self, row: Vec<Value>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                found: row.len(),
            });
        }
        for (v, c) in row.iter().zip(&self.columns) {
            if !v.fits(c.ty) {
                return Err(Error::schema(
                    "result table",
                    format!("value {v:?} does not fit column {} ({:?})", c.name, c.ty),
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, row: usize, column: &str) -> Option<&Value> {
        let j = self.column_index(column)?;
        self.rows.get(row).map(|r| &r[j])
    }

    /// All values of a column converted to `f64`, `None` where null.
    pub fn real_column(&self, column: &str) -> Result<Vec<Option<f64>>> {
        let j = self
            .column_index(column)
            .ok_or_else(|| Error::schema("result table", format!("no column {column}")))?;
        Ok(self.rows.iter().map(|r| r[j].as_f64()).collect())
    }

    pub fn str_column(&self, column: &str) -> Result<Vec<String>> {
        let j = self
            .column_index(column)
            .ok_or_else(|| Error::schema("result table", format!("no column {column}")))?;
        Ok(self
            .rows
            .iter()
            .map(|r| r[j].as_str().unwrap_or("").to_string())
            .collect())
    }

    /// Appends all rows from `other`, which must share the column schema.
    pub fn extend(&mut self, other: ResultTable) -> Result<()> {
        if other.columns != self.columns {
            return Err(Error::schema("result table", "column schemas differ"));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    pub fn write(&self, path: &Path, format: TableFormat) -> Result<()> {
        match format {
            TableFormat::Csv => self.write_csv(path),
            TableFormat::JsonLines => self.write_jsonl(path),
        }
    }

    fn meta(&self) -> Meta {
        Meta {
            columns: self.columns.clone(),
            provenance: self.provenance.clone(),
        }
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(io)?;
        let mut buf: Vec<String> = Vec::with_capacity(self.columns.len());
        for row in &self.rows {
            buf.clear();
            buf.extend(row.iter().map(render_cell));
            w.write_record(&buf).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        std::fs::write(meta_path(path), meta + "\n").map_err(|e| Error::io(meta_path(path), e))
    }

    fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut header = Map::new();
        header.insert(
            "__meta__".into(),
            serde_json::to_value(self.meta()).expect("meta serializes"),
        );
        writeln!(w, "{}", Json::Object(header)).map_err(|e| Error::io(path, e))?;
        for row in &self.rows {
            let mut obj = Map::new();
            for (c, v) in self.columns.iter().zip(row) {
                obj.insert(c.name.clone(), to_json(v));
            }
            writeln!(w, "{}", Json::Object(obj)).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        match TableFormat::from_path(path) {
            TableFormat::Csv => Self::read_csv(path),
            TableFormat::JsonLines => Self::read_jsonl(path),
        }
    }

    fn read_csv(path: &Path) -> Result<Self> {
        let mp = meta_path(path);
        let meta_text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: Meta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::schema(mp.display().to_string(), e.to_string()))?;
        let mut table = ResultTable::new(meta.columns.iter().map(|c| (c.name.clone(), c.ty)))?
            .with_provenance(meta.provenance);
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::schema(path.display().to_string(), format!("{other:?}")),
        })?;
        let ctx = path.display().to_string();
        let header = r
            .headers()
            .map_err(|e| Error::schema(&ctx, e.to_string()))?
            .clone();
        if header
            .iter()
            .ne(table.columns.iter().map(|c| c.name.as_str()))
        {
            return Err(Error::schema(&ctx, "header does not match sidecar columns"));
        }
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::schema(&ctx, e.to_string()))?;
            let row = rec
                .iter()
                .zip(&table.columns)
                .map(|(cell, c)| parse_cell(cell, c.ty).map_err(|m| Error::schema(&ctx, m)))
                .collect::<Result<Vec<_>>>()?;
            table.push_row(row)?;
        }
        Ok(table)
    }

    fn read_jsonl(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::schema(&ctx, "empty file"))?
            .map_err(|e| Error::io(path, e))?;
        let head: Json =
            serde_json::from_str(&first).map_err(|e| Error::schema(&ctx, e.to_string()))?;
        let meta: Meta = serde_json::from_value(
            head.get("__meta__")
                .cloned()
                .ok_or_else(|| Error::schema(&ctx, "missing __meta__ line"))?,
        )
        .map_err(|e| Error::schema(&ctx, e.to_string()))?;
        let mut table = ResultTable::new(meta.columns.iter().map(|c| (c.name.clone(), c.ty)))?
            .with_provenance(meta.provenance);
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let obj: Map<String, Json> =
                serde_json::from_str(&line).map_err(|e| Error::schema(&ctx, e.to_string()))?;
            let row = table
                .columns
                .iter()
                .map(|c| {
                    from_json(obj.get(&c.name).unwrap_or(&Json::Null), c.ty)
                        .map_err(|m| Error::schema(&ctx, m))
                })
                .collect::<Result<Vec<_>>>()?;
            table.push_row(row)?;
        }
        Ok(table)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn render_real(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:?}")
    }
}

fn render_cell(v: &Value) -> String {
    match v {
        Value::Str(s) => s.clone(),
        Value::Real(x) => render_real(*x),
        Value::Int(i) => i.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Null => String::new(),
    }
}

fn parse_cell(cell: &str, ty: ColumnType) -> std::result::Result<Value, String> {
    if cell.is_empty() && ty != ColumnType::Str {
        return Ok(Value::Null);
    }
    Ok(match ty {
        ColumnType::Str => Value::Str(cell.to_string()),
        ColumnType::Real => Value::Real(cell.parse::<f64>().map_err(|e| format!("{cell:?}: {e}"))?),
        ColumnType::Int => Value::Int(cell.parse::<i64>().map_err(|e| format!("{cell:?}: {e}"))?),
        ColumnType::Bool => {
            Value::Bool(cell.parse::<bool>().map_err(|e| format!("{cell:?}: {e}"))?)
        }
    })
}

fn to_json(v: &Value) -> Json {
    match v {
        Value::Str(s) => Json::String(s.clone()),
        Value::Real(x) if x.is_finite() => {
            serde_json::Number::from_f64(*x).map_or(Json::Null, Json::Number)
        }
        Value::Real(x) => Json::String(render_real(*x)),
        Value::Int(i) => Json::from(*i),
        Value::Bool(b) => Json::Bool(*b),
        Value::Null => Json::Null,
    }
}

fn from_json(v: &Json, ty: ColumnType) -> std::result::Result<Value, String> {
    if v.is_null() {
        return Ok(Value::Null);
    }
    let bad = || format!("{v} is not {ty:?}");
    Ok(match ty {
        ColumnType::Str => Value::Str(v.as_str().ok_or_else(bad)?.to_string()),
        ColumnType::Real => match v {
            Json::String(s) => Value::Real(s.parse().map_err(|_| bad())?),
            _ => Value::Real(v.as_f64().ok_or_else(bad)?),
        },
        ColumnType::Int => Value::Int(v.as_i64().ok_or_else(bad)?),
        ColumnType::Bool => Value::Bool(v.as_bool().ok_or_else(bad)?),
    })
}

/// Convenience for building a table row by row with mixed values.
#[macro_export]
macro_rules! row {
    ($($v:expr),* $(,)?) => {
        vec![$($crate::table::Value::from($v)),*]
    };
}
