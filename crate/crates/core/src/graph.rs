//! Visual, auxiliary and fused item-item similarity graphs, and the
//! symmetric degree normalization fed to the graph convolution.

use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::write_bytes;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median of pairwise Euclidean distances.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphVariant {
    Augmented,
    VisualOnly,
    AuxOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub mu: f64,
    pub bandwidth: Bandwidth,
    pub variant: GraphVariant,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            bandwidth: Bandwidth::Median,
            variant: GraphVariant::Augmented,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Parameter(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!("fixed bandwidth must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    /// Weights `(visual, aux)` of the two similarity terms in the graph fed
    /// to the network.
    pub fn weights(&self) -> (f64, f64) {
        match self.variant {
            GraphVariant::Augmented => (self.mu, 1.0),
            GraphVariant::VisualOnly => (1.0, 0.0),
            GraphVariant::AuxOnly => (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    pub s: Array2<f64>,
    pub s_tilde: Array2<f64>,
    pub degrees: Array1<f64>,
}

/// Squared distances between all column pairs, mirrored so the result is
/// exactly symmetric with a zero diagonal.
pub(crate) fn self_sq_dists(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.ncols();
    let norms = x.map_axis(Axis(0), |c| c.dot(&c));
    let gram = x.t().dot(&x);
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0);
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

fn median(mut values: Vec<f64>) -> f64 {
    let mid = values.len() / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if values.len() % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Resolves the kernel bandwidth from precomputed squared distances.
pub fn resolve_bandwidth(sq_dists: ArrayView2<f64>, mode: Bandwidth) -> Result<f64> {
    match mode {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
        Bandwidth::Fixed(s) => Err(Error::Parameter(format!("fixed bandwidth must be > 0, got {s}"))),
        Bandwidth::Median => {
            let n = sq_dists.nrows();
            if n < 2 {
                return Err(Error::Parameter("median bandwidth needs at least two items".into()));
            }
            let mut dists = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    dists.push(sq_dists[[i, j]].sqrt());
                }
            }
            let m = median(dists);
            if m > 0.0 {
                Ok(m)
            } else {
                warn!("median pairwise distance is zero; falling back to bandwidth 1");
                Ok(1.0)
            }
        }
    }
}

pub fn gaussian_kernel(sq_dists: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let denom = 2.0 * sigma * sigma;
    sq_dists.mapv(|d| (-d / denom).exp())
}

/// Gaussian-kernel similarity of attentive features. Returns the matrix and
/// the bandwidth that was used.
pub fn visual_similarity(xatt: ArrayView2<f64>, bandwidth: Bandwidth) -> Result<(Array2<f64>, f64)> {
    let sq = self_sq_dists(xatt);
    let sigma = resolve_bandwidth(sq.view(), bandwidth)?;
    Ok((gaussian_kernel(sq.view(), sigma), sigma))
}

/// Shared-category counts `y_i . y_j`.
pub fn aux_similarity(y: ArrayView2<f64>) -> Array2<f64> {
    let mut s = y.t().dot(&y);
    let n = s.nrows();
    for i in 0..n {
        for j in i + 1..n {
            s[[j, i]] = s[[i, j]];
        }
    }
    s
}

pub fn fuse(visual: ArrayView2<f64>, aux: ArrayView2<f64>, mu: f64) -> Result<Array2<f64>> {
    if visual.dim() != aux.dim() {
        return Err(Error::Shape(format!(
            "visual graph is {:?}, auxiliary graph {:?}",
            visual.dim(),
            aux.dim()
        )));
    }
    Ok(&visual * mu + aux)
}

/// `D^{-1/2} S D^{-1/2}`; nodes with zero degree get zero rows and columns.
pub fn normalize(s: Array2<f64>) -> Result<SemanticGraph> {
    let (n, m) = s.dim();
    if n != m {
        return Err(Error::Contract(format!("graph must be square, got {n}x{m}")));
    }
    let scale = s.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in 0..n {
            let v = s[[i, j]];
            if v.is_nan() || v < 0.0 {
                return Err(Error::Contract(format!("negative or NaN entry {v} at ({i}, {j})")));
            }
            if j > i && (v - s[[j, i]]).abs() > 1e-12 * scale {
                return Err(Error::Contract(format!("graph is not symmetric at ({i}, {j})")));
            }
        }
    }
    let degrees = s.sum_axis(Axis(1));
    let inv_sqrt = degrees.mapv(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let mut s_tilde = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = s[[i, j]] * inv_sqrt[i] * inv_sqrt[j];
            s_tilde[[i, j]] = v;
            s_tilde[[j, i]] = v;
        }
    }
    Ok(SemanticGraph { s, s_tilde, degrees })
}

/// Every graph derived from one set of attentive features and semantics.
#[derive(Debug, Clone)]
pub struct GraphParts {
    pub visual: Array2<f64>,
    pub aux: Array2<f64>,
    /// The matrix actually fed to the network before normalization.
    pub graph: SemanticGraph,
    pub sigma: f64,
}

impl GraphParts {
    /// `mu * S^v + S^a` as written, regardless of which variant feeds the network.
    pub fn augmented(&self, mu: f64) -> Array2<f64> {
        &self.visual * mu + &self.aux
    }
}

pub fn build_graph(xatt: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &GraphConfig) -> Result<GraphParts> {
    cfg.validate()?;
    if xatt.ncols() != y.ncols() {
        return Err(Error::Shape(format!(
            "{} feature columns but {} semantic columns",
            xatt.ncols(),
            y.ncols()
        )));
    }
    let (visual, sigma) = visual_similarity(xatt, cfg.bandwidth)?;
    let aux = aux_similarity(y);
    let s = match cfg.variant {
        GraphVariant::Augmented => fuse(visual.view(), aux.view(), cfg.mu)?,
        GraphVariant::VisualOnly => visual.clone(),
        GraphVariant::AuxOnly => aux.clone(),
    };
    let degrees_zero = s.sum_axis(Axis(1)).iter().filter(|&&d| d == 0.0).count();
    if degrees_zero > 0 {
        warn!("{degrees_zero} graph node(s) have zero degree");
    }
    Ok(GraphParts {
        visual,
        aux,
        graph: normalize(s)?,
        sigma,
    })
}

pub fn graph_to_text(s: ArrayView2<f64>) -> String {
    let mut out = format!("{}\n", s.nrows());
    for row in s.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn export_graph(path: &Path, s: ArrayView2<f64>) -> Result<()> {
    write_bytes(path, graph_to_text(s).as_bytes())
}
