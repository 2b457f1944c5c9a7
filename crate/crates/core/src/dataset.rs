//! Feature and auxiliary-semantics containers, their file formats, synthetic
//! data generation and train/query/retrieval splits.
//!
//! Matrices are stored column-per-item: a feature file with `d` rows and `n`
//! columns describes `n` items of dimension `d`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const BINARY_MAGIC: [u8; 4] = *b"LGNF";
const BINARY_VERSION: u32 = 1;
const BINARY_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFormat {
    TextCsv,
    RawBinary,
}

impl FeatureFormat {
    /// `.bin` selects the binary format, anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => FeatureFormat::RawBinary,
            _ => FeatureFormat::TextCsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f32>,
    item_ids: Vec<String>,
}

impl FeatureMatrix {
    /// Builds a matrix with positional ids `"0" .. "n-1"`.
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let ids = (0..data.ncols()).map(|i| i.to_string()).collect();
        Self::with_ids(data, ids)
    }

    pub fn with_ids(data: Array2<f32>, item_ids: Vec<String>) -> Result<Self> {
        let (d, n) = data.dim();
        if d == 0 || n == 0 {
            return Err(Error::Shape(format!("feature matrix must be non-empty, got {d}x{n}")));
        }
        if item_ids.len() != n {
            return Err(Error::Shape(format!(
                "{} item ids for {n} columns",
                item_ids.len()
            )));
        }
        if let Some(((row, col), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data {
                row,
                col,
                msg: format!("non-finite feature value {v}"),
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &item_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data {
                    row: 0,
                    col: 0,
                    msg: format!("duplicate item id {id:?}"),
                });
            }
        }
        Ok(Self { data, item_ids })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// Columns at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        check_indices(indices, self.len())?;
        let data = self.data.select(Axis(1), indices);
        let ids = indices.iter().map(|&i| self.item_ids[i].clone()).collect();
        Self::with_ids(data, ids)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxSemantics {
    data: Array2<u8>,
    category_names: Vec<String>,
}

impl AuxSemantics {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        let names = (0..data.nrows()).map(|j| format!("c{j}")).collect();
        Self::with_names(data, names)
    }

    pub fn with_names(data: Array2<u8>, category_names: Vec<String>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Shape("auxiliary semantics need at least one category".into()));
        }
        if category_names.len() != data.nrows() {
            return Err(Error::Shape(format!(
                "{} category names for {} rows",
                category_names.len(),
                data.nrows()
            )));
        }
        if let Some(((row, col), v)) = data.indexed_iter().find(|(_, &v)| v > 1) {
            return Err(Error::Data {
                row,
                col,
                msg: format!("entry {v} is not 0 or 1"),
            });
        }
        Ok(Self {
            data,
            category_names,
        })
    }

    /// One-hot matrix for integer class labels.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut data = Array2::zeros((classes, labels.len()));
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::Parameter(format!("label {l} out of range for {classes} classes")));
            }
            data[[l, i]] = 1;
        }
        Self::new(data)
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn categories(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// Item indices whose auxiliary vector is all zeros.
    pub fn empty_columns(&self) -> Vec<usize> {
        self.data
            .axis_iter(Axis(1))
            .enumerate()
            .filter(|(_, col)| col.iter().all(|&v| v == 0))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_paired(&self, features: &FeatureMatrix) -> Result<()> {
        if self.len() != features.len() {
            return Err(Error::Shape(format!(
                "auxiliary semantics cover {} items but features cover {}",
                self.len(),
                features.len()
            )));
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        check_indices(indices, self.len())?;
        Self::with_names(
            self.data.select(Axis(1), indices),
            self.category_names.clone(),
        )
    }
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::Parameter(format!("index {i} out of range for {n} items"))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// File formats

fn parse_header(text: &str) -> Result<(usize, usize, std::str::Lines<'_>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Format("missing \"rows cols\" header".into()))?;
    let mut parts = header.split_whitespace();
    let mut next = || -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed header {header:?}")))
    };
    let rows = next()?;
    let cols = next()?;
    if parts.next().is_some() {
        return Err(Error::Format(format!("malformed header {header:?}")));
    }
    Ok((rows, cols, lines))
}

fn parse_text_matrix<T>(
    text: &str,
    mut parse: impl FnMut(&str, usize, usize) -> Result<T>,
) -> Result<(usize, usize, Vec<T>)> {
    let (rows, cols, lines) = parse_header(text)?;
    let mut values = Vec::with_capacity(rows * cols);
    let mut row = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        if row == rows {
            return Err(Error::Shape(format!("more than the declared {rows} rows")));
        }
        let mut count = 0;
        for (col, tok) in line.split(',').enumerate() {
            if col >= cols {
                return Err(Error::Shape(format!("row {row} has more than {cols} columns")));
            }
            values.push(parse(tok.trim(), row, col)?);
            count += 1;
        }
        if count != cols {
            return Err(Error::Shape(format!("row {row} has {count} columns, expected {cols}")));
        }
        row += 1;
    }
    if row != rows {
        return Err(Error::Shape(format!("found {row} rows, header declares {rows}")));
    }
    Ok((rows, cols, values))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureMatrix> {
    match format {
        FeatureFormat::TextCsv => parse_features_text(&read_to_string(path)?),
        FeatureFormat::RawBinary => {
            parse_features_binary(&fs::read(path).map_err(|e| Error::io(path, e))?)
        }
    }
}

pub fn parse_features_text(text: &str) -> Result<FeatureMatrix> {
    let (d, n, values) = parse_text_matrix(text, |tok, row, col| {
        let v: f32 = tok.parse().map_err(|_| Error::Data {
            row,
            col,
            msg: format!("cannot parse {tok:?} as a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Data {
                row,
                col,
                msg: format!("non-finite value {tok:?}"),
            });
        }
        Ok(v)
    })?;
    let data = Array2::from_shape_vec((d, n), values).map_err(|e| Error::Shape(e.to_string()))?;
    FeatureMatrix::new(data)
}

pub fn parse_features_binary(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::Format(format!(
            "binary feature file shorter than its {BINARY_HEADER_LEN}-byte header"
        )));
    }
    if bytes[..4] != BINARY_MAGIC {
        return Err(Error::Format("bad magic in binary feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported binary version {version}")));
    }
    let (d, n) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[BINARY_HEADER_LEN..];
    if payload.len() != d * n * 4 {
        return Err(Error::Shape(format!(
            "payload holds {} bytes, header {d}x{n} requires {}",
            payload.len(),
            d * n * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((d, n), values).map_err(|e| Error::Shape(e.to_string()))?;
    FeatureMatrix::new(data)
}

pub fn features_to_text(features: &FeatureMatrix) -> String {
    let data = features.data();
    let mut out = format!("{} {}\n", data.nrows(), data.ncols());
    for row in data.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn features_to_binary(features: &FeatureMatrix) -> Vec<u8> {
    let data = features.data();
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + data.len() * 4);
    out.extend_from_slice(&BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(data.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(data.ncols() as u32).to_le_bytes());
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_features(path: &Path, features: &FeatureMatrix, format: FeatureFormat) -> Result<()> {
    let bytes = match format {
        FeatureFormat::TextCsv => features_to_text(features).into_bytes(),
        FeatureFormat::RawBinary => features_to_binary(features),
    };
    write_bytes(path, &bytes)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn load_aux(path: &Path) -> Result<AuxSemantics> {
    parse_aux_text(&read_to_string(path)?)
}

/// Ground-truth evaluation labels share the auxiliary file format.
pub fn load_labels(path: &Path) -> Result<AuxSemantics> {
    load_aux(path)
}

pub fn parse_aux_text(text: &str) -> Result<AuxSemantics> {
    let (c, n, values) = parse_text_matrix(text, |tok, row, col| match tok {
        "0" => Ok(0u8),
        "1" => Ok(1u8),
        _ => Err(Error::Data {
            row,
            col,
            msg: format!("entry {tok:?} is not 0 or 1"),
        }),
    })?;
    let data = Array2::from_shape_vec((c, n), values).map_err(|e| Error::Shape(e.to_string()))?;
    let aux = AuxSemantics::new(data)?;
    let empty = aux.empty_columns();
    if !empty.is_empty() {
        warn!(
            "{} item(s) have no auxiliary semantics (first: column {})",
            empty.len(),
            empty[0]
        );
    }
    Ok(aux)
}

pub fn aux_to_text(aux: &AuxSemantics) -> String {
    let data = aux.data();
    let mut out = format!("{} {}\n", data.nrows(), data.ncols());
    for row in data.rows() {
        let line: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_aux(path: &Path, aux: &AuxSemantics) -> Result<()> {
    write_bytes(path, aux_to_text(aux).as_bytes())
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    pub sep: f64,
    pub label_noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub features: FeatureMatrix,
    pub aux: AuxSemantics,
    /// Cluster index per item.
    pub labels: Vec<usize>,
}

impl SynthData {
    pub fn label_matrix(&self) -> AuxSemantics {
        AuxSemantics::one_hot(&self.labels, self.aux.categories())
            .expect("labels are in range by construction")
    }
}

/// Isotropic unit-variance Gaussian clusters whose means are pairwise `sep`
/// apart. For `clusters <= d` the means sit on scaled coordinate axes; beyond
/// that they are random directions of the same norm, so distances are only
/// approximately `sep`.
pub fn synth_dataset(p: &SynthParams) -> Result<SynthData> {
    if p.clusters == 0 || p.d == 0 {
        return Err(Error::Parameter("clusters and d must be at least 1".into()));
    }
    if p.n < p.clusters {
        return Err(Error::Parameter(format!(
            "n = {} is smaller than the number of clusters {}",
            p.n, p.clusters
        )));
    }
    if !(p.sep >= 0.0 && p.sep.is_finite()) {
        return Err(Error::Parameter(format!("sep must be finite and >= 0, got {}", p.sep)));
    }
    if !(0.0..=1.0).contains(&p.label_noise) {
        return Err(Error::Parameter(format!(
            "label_noise must lie in [0, 1], got {}",
            p.label_noise
        )));
    }
    let mut rng = stream_rng(p.seed, Stream::Synth);
    let radius = p.sep / std::f64::consts::SQRT_2;
    let mut means = Array2::<f64>::zeros((p.d, p.clusters));
    for k in 0..p.clusters {
        if p.clusters <= p.d {
            means[[k, k]] = radius;
        } else {
            let dir: Vec<f64> = (0..p.d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (j, v) in dir.iter().enumerate() {
                means[[j, k]] = radius * v / norm;
            }
        }
    }

    let mut labels: Vec<usize> = (0..p.n).map(|i| i % p.clusters).collect();
    labels.shuffle(&mut rng);

    let mut data = Array2::<f32>::zeros((p.d, p.n));
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..p.d {
            let noise: f64 = rng.sample(StandardNormal);
            data[[j, i]] = (means[[j, l]] + noise) as f32;
        }
    }

    let mut aux = Array2::<u8>::zeros((p.clusters, p.n));
    for (i, &l) in labels.iter().enumerate() {
        for k in 0..p.clusters {
            let bit = u8::from(k == l);
            let flip = p.label_noise > 0.0 && rng.random_bool(p.label_noise);
            aux[[k, i]] = if flip { 1 - bit } else { bit };
        }
    }

    Ok(SynthData {
        features: FeatureMatrix::new(data)?,
        aux: AuxSemantics::new(aux)?,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub retrieval: Vec<usize>,
}

impl DatasetSplit {
    pub fn validate(&self, n: usize) -> Result<()> {
        for set in [&self.train, &self.query, &self.retrieval] {
            check_indices(set, n)?;
        }
        let query: HashSet<_> = self.query.iter().collect();
        if self.train.iter().any(|i| query.contains(i)) {
            return Err(Error::Contract("train and query sets overlap".into()));
        }
        if self.retrieval.iter().any(|i| query.contains(i)) {
            return Err(Error::Contract("query and retrieval sets overlap".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_to_string(path)?)
            .map_err(|e| Error::Format(format!("split file {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("split serializes");
        write_bytes(path, text.as_bytes())
    }
}

/// Uniformly random disjoint train and query sets; the retrieval set is the
/// complement of the query set, so it contains the training items.
pub fn make_split(n: usize, train: usize, query: usize, seed: u64) -> Result<DatasetSplit> {
    make_split_with(n, train, query, seed, true)
}

/// As [`make_split`], optionally excluding training items from retrieval.
pub fn make_split_with(
    n: usize,
    train: usize,
    query: usize,
    seed: u64,
    train_in_retrieval: bool,
) -> Result<DatasetSplit> {
    if train + query > n {
        return Err(Error::Parameter(format!(
            "train ({train}) + query ({query}) exceeds n ({n})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split));
    let mut train_set = order[..train].to_vec();
    let mut query_set = order[train..train + query].to_vec();
    let mut retrieval: Vec<usize> = if train_in_retrieval {
        order[..train].iter().chain(&order[train + query..]).copied().collect()
    } else {
        order[train + query..].to_vec()
    };
    train_set.sort_unstable();
    query_set.sort_unstable();
    retrieval.sort_unstable();
    Ok(DatasetSplit {
        train: train_set,
        query: query_set,
        retrieval,
    })
}
