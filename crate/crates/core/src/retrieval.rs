//! Packed binary codes, Hamming ranking and the MAP@K / topK-precision
//! evaluation.

use std::path::Path;
use std::time::Instant;

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_bytes, AuxSemantics};
use crate::error::{Error, Result};

/// `+1` for positive and zero entries, `-1` otherwise.
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sign_matrix(z: ArrayView2<f64>) -> Array2<f64> {
    z.mapv(sign)
}

/// `n` codes of `r` bits, each stored as `ceil(r / 64)` little-endian words.
/// Bit `k` of a code is set when coordinate `k` is `+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCodes {
    words: Vec<u64>,
    r: usize,
    item_ids: Vec<String>,
}

pub fn words_per_code(r: usize) -> usize {
    r.div_ceil(64)
}

impl HashCodes {
    pub fn from_words(words: Vec<u64>, r: usize, item_ids: Vec<String>) -> Result<Self> {
        if r == 0 {
            return Err(Error::Shape("code length must be >= 1".into()));
        }
        let wpc = words_per_code(r);
        if words.len() != wpc * item_ids.len() {
            return Err(Error::Shape(format!(
                "{} words for {} codes of {r} bits",
                words.len(),
                item_ids.len()
            )));
        }
        let tail = r % 64;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            if let Some(i) = (0..item_ids.len()).find(|i| words[i * wpc + wpc - 1] & mask != 0) {
                return Err(Error::Data {
                    row: i,
                    col: wpc - 1,
                    msg: "bits set beyond the code length".into(),
                });
            }
        }
        Ok(Self { words, r, item_ids })
    }

    pub fn code_len(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn words_per_code(&self) -> usize {
        words_per_code(self.r)
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> &[u64] {
        let w = self.words_per_code();
        &self.words[i * w..(i + 1) * w]
    }

    /// Codes at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> HashCodes {
        let mut words = Vec::with_capacity(indices.len() * self.words_per_code());
        for &i in indices {
            words.extend_from_slice(self.code(i));
        }
        HashCodes {
            words,
            r: self.r,
            item_ids: indices.iter().map(|&i| self.item_ids[i].clone()).collect(),
        }
    }

    /// Concatenates two code sets of equal length.
    pub fn concat(&self, other: &HashCodes) -> Result<HashCodes> {
        if self.r != other.r {
            return Err(Error::Config(format!("code lengths differ: {} vs {}", self.r, other.r)));
        }
        let mut words = self.words.clone();
        words.extend_from_slice(&other.words);
        let mut ids = self.item_ids.clone();
        ids.extend_from_slice(&other.item_ids);
        Ok(HashCodes {
            words,
            r: self.r,
            item_ids: ids,
        })
    }

    /// Back to an `r x n` matrix over `{-1, +1}`.
    pub fn unpack(&self) -> Array2<f64> {
        let mut out = Array2::from_elem((self.r, self.len()), -1.0);
        for (i, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let code = self.code(i);
            for k in 0..self.r {
                if code[k / 64] >> (k % 64) & 1 == 1 {
                    col[k] = 1.0;
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.r);
        for (i, id) in self.item_ids.iter().enumerate() {
            out.push_str(id);
            for w in self.code(i) {
                out.push_str(&format!(" {w:016x}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty code file".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("malformed code header {header:?}")))?;
        let [n, r] = nums[..] else {
            return Err(Error::Format(format!("malformed code header {header:?}")));
        };
        let wpc = words_per_code(r);
        let mut words = Vec::with_capacity(n * wpc);
        let mut ids = Vec::with_capacity(n);
        for (row, line) in lines.enumerate() {
            let mut toks = line.split_whitespace();
            let id = toks.next().expect("non-empty line");
            ids.push(id.to_string());
            let mut count = 0;
            for (col, t) in toks.enumerate() {
                let w = u64::from_str_radix(t, 16).map_err(|_| Error::Data {
                    row,
                    col,
                    msg: format!("bad hex word {t:?}"),
                })?;
                words.push(w);
                count += 1;
            }
            if count != wpc {
                return Err(Error::Shape(format!("code {row} has {count} words, expected {wpc}")));
            }
        }
        if ids.len() != n {
            return Err(Error::Shape(format!("found {} codes, header declares {n}", ids.len())));
        }
        Self::from_words(words, r, ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Packs an `r x n` matrix over `{-1, +1}`.
pub fn pack(b: ArrayView2<f64>, item_ids: Vec<String>) -> Result<HashCodes> {
    let (r, n) = b.dim();
    if item_ids.len() != n {
        return Err(Error::Shape(format!("{} ids for {n} codes", item_ids.len())));
    }
    let wpc = words_per_code(r);
    let mut words = vec![0u64; n * wpc];
    for (i, col) in b.axis_iter(Axis(1)).enumerate() {
        for (k, &v) in col.iter().enumerate() {
            if v == 1.0 {
                words[i * wpc + k / 64] |= 1u64 << (k % 64);
            } else if v != -1.0 {
                return Err(Error::Data {
                    row: k,
                    col: i,
                    msg: format!("code entry {v} is not +1 or -1"),
                });
            }
        }
    }
    HashCodes::from_words(words, r, item_ids)
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Number of differing bits between two packed codes.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("codes span {} and {} words", a.len(), b.len())));
    }
    Ok(hamming_words(a, b))
}

/// Database indices by ascending Hamming distance to `query`, ties by
/// ascending index. A counting sort over the `r + 1` possible distances.
pub fn rank(query: &[u64], db: &HashCodes) -> Result<Vec<usize>> {
    if query.len() != db.words_per_code() {
        return Err(Error::Shape(format!(
            "query spans {} words, database codes {}",
            query.len(),
            db.words_per_code()
        )));
    }
    let dists: Vec<u32> = (0..db.len()).map(|i| hamming_words(query, db.code(i))).collect();
    let mut starts = vec![0usize; db.code_len() + 2];
    for &d in &dists {
        starts[d as usize + 1] += 1;
    }
    for k in 1..starts.len() {
        starts[k] += starts[k - 1];
    }
    let mut out = vec![0usize; dists.len()];
    for (i, &d) in dists.iter().enumerate() {
        out[starts[d as usize]] = i;
        starts[d as usize] += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApDenominator {
    /// `min(R, K)` with `R` the relevant items in the whole database.
    #[default]
    MinRk,
    /// Relevant items among the top `K`.
    Retrieved,
}

/// AP@K of a ranking. `relevance[i]` tells whether database item `i` is
/// relevant; it is 0 when nothing relevant exists.
pub fn average_precision(ranking: &[usize], relevance: &[bool], k: usize, denom: ApDenominator) -> f64 {
    let total: usize = relevance.iter().filter(|&&r| r).count();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &idx) in ranking.iter().take(k).enumerate() {
        if relevance[idx] {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    let d = match denom {
        ApDenominator::MinRk => total.min(k),
        ApDenominator::Retrieved => hits,
    };
    if d == 0 {
        0.0
    } else {
        sum / d as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub encode_seconds: f64,
    pub evaluate_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub map_at_k: f64,
    pub precision_curve: Vec<(usize, f64)>,
    pub per_query_ap: Vec<f64>,
    pub timing: Timing,
}

impl EvalReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("K,precision\n");
        for (k, p) in &self.precision_curve {
            out.push_str(&format!("{k},{p}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn label_bits(labels: &AuxSemantics) -> (Vec<u64>, usize) {
    let wpc = labels.categories().div_ceil(64);
    let mut bits = vec![0u64; wpc * labels.len()];
    for ((c, i), &v) in labels.data().indexed_iter() {
        if v == 1 {
            bits[i * wpc + c / 64] |= 1 << (c % 64);
        }
    }
    (bits, wpc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub curve_points: Vec<usize>,
    pub denominator: ApDenominator,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 1000,
            curve_points: vec![100, 200, 500, 1000],
            denominator: ApDenominator::MinRk,
        }
    }
}

/// MAP@K and topK-precision with relevance "shares at least one label".
/// Queries are scored in parallel; the result equals the sequential one.
pub fn evaluate(
    query_codes: &HashCodes,
    db_codes: &HashCodes,
    query_labels: &AuxSemantics,
    db_labels: &AuxSemantics,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let start = Instant::now();
    if query_codes.is_empty() {
        return Err(Error::Parameter("empty query set".into()));
    }
    if db_codes.is_empty() {
        return Err(Error::Parameter("empty database".into()));
    }
    if query_codes.code_len() != db_codes.code_len() {
        return Err(Error::Config(format!(
            "query codes have {} bits, database codes {}",
            query_codes.code_len(),
            db_codes.code_len()
        )));
    }
    if query_labels.categories() != db_labels.categories() {
        return Err(Error::Shape(format!(
            "query labels have {} categories, database labels {}",
            query_labels.categories(),
            db_labels.categories()
        )));
    }
    if query_labels.len() != query_codes.len() || db_labels.len() != db_codes.len() {
        return Err(Error::Shape("label and code counts differ".into()));
    }
    if opts.k == 0 {
        return Err(Error::Parameter("K must be >= 1".into()));
    }
    let n_db = db_codes.len();
    let k = if opts.k > n_db {
        warn!("K = {} exceeds the database size; clamped to {n_db}", opts.k);
        n_db
    } else {
        opts.k
    };
    let mut curve_k: Vec<usize> = opts
        .curve_points
        .iter()
        .filter(|&&p| p > 0)
        .map(|&p| p.min(n_db))
        .collect();
    curve_k.sort_unstable();
    curve_k.dedup();

    let (qbits, wpc) = label_bits(query_labels);
    let (dbits, _) = label_bits(db_labels);

    let per_query: Vec<(f64, Vec<f64>)> = (0..query_codes.len())
        .into_par_iter()
        .map(|q| {
            let ranking = rank(query_codes.code(q), db_codes).expect("code widths checked");
            let ql = &qbits[q * wpc..(q + 1) * wpc];
            let relevance: Vec<bool> = (0..n_db)
                .map(|i| {
                    dbits[i * wpc..(i + 1) * wpc]
                        .iter()
                        .zip(ql)
                        .any(|(a, b)| a & b != 0)
                })
                .collect();
            let ap = average_precision(&ranking, &relevance, k, opts.denominator);
            let mut precisions = Vec::with_capacity(curve_k.len());
            let mut hits = 0usize;
            let mut next = 0;
            for (pos, &idx) in ranking.iter().enumerate() {
                if next == curve_k.len() {
                    break;
                }
                hits += usize::from(relevance[idx]);
                if pos + 1 == curve_k[next] {
                    precisions.push(hits as f64 / curve_k[next] as f64);
                    next += 1;
                }
            }
            (ap, precisions)
        })
        .collect();

    let nq = per_query.len() as f64;
    let per_query_ap: Vec<f64> = per_query.iter().map(|(ap, _)| *ap).collect();
    let map_at_k = per_query_ap.iter().sum::<f64>() / nq;
    let precision_curve = curve_k
        .iter()
        .enumerate()
        .map(|(j, &kk)| (kk, per_query.iter().map(|(_, p)| p[j]).sum::<f64>() / nq))
        .collect();
    Ok(EvalReport {
        k,
        map_at_k,
        precision_curve,
        per_query_ap,
        timing: Timing {
            encode_seconds: 0.0,
            evaluate_seconds: start.elapsed().as_secs_f64(),
        },
    })
}
