//! Two-layer graph convolutional generator, three-layer discriminator,
//! classification head, parameter initialization and the checkpoint container.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::dataset::write_bytes;
use crate::error::{check_shape, Error, Result};
use crate::linalg::{gaussian, relu, sigmoid};
use crate::rng::{stream_rng, Stream};

pub const DISC_HIDDEN1: usize = 64;
pub const DISC_HIDDEN2: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// `h x d'`
    pub w1: Array2<f64>,
    /// `r x h`
    pub w2: Array2<f64>,
}

impl GcnParams {
    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn code_len(&self) -> usize {
        self.w2.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscParams {
    pub a1: Array2<f64>,
    pub b1: Array1<f64>,
    pub a2: Array2<f64>,
    pub b2: Array1<f64>,
    pub a3: Array2<f64>,
    pub b3: f64,
}

impl DiscParams {
    pub fn zeros(r: usize) -> Self {
        Self {
            a1: Array2::zeros((DISC_HIDDEN1, r)),
            b1: Array1::zeros(DISC_HIDDEN1),
            a2: Array2::zeros((DISC_HIDDEN2, DISC_HIDDEN1)),
            b2: Array1::zeros(DISC_HIDDEN2),
            a3: Array2::zeros((1, DISC_HIDDEN2)),
            b3: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.a1.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead {
    /// `c x r`
    pub wc: Array2<f64>,
}

/// Linear decoder from codes back to attentive features, used only by the
/// feature-reconstruction variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `d' x r`
    pub wd: Array2<f64>,
}

fn he(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    gaussian(rows, cols, (2.0 / cols as f64).sqrt(), rng)
}

/// Gaussian weights with standard deviation `sqrt(2 / fan_in)`, zero biases.
pub fn init_params(
    d_prime: usize,
    hidden: usize,
    r: usize,
    c: usize,
    seed: u64,
) -> Result<(GcnParams, DiscParams, ClsHead)> {
    if d_prime == 0 || hidden == 0 || r == 0 || c == 0 {
        return Err(Error::Parameter("network dimensions must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Network);
    let w1 = he(hidden, d_prime, &mut rng);
    let w2 = he(r, hidden, &mut rng);
    let wc = he(c, r, &mut rng);
    let disc = DiscParams {
        a1: he(DISC_HIDDEN1, r, &mut rng),
        b1: Array1::zeros(DISC_HIDDEN1),
        a2: he(DISC_HIDDEN2, DISC_HIDDEN1, &mut rng),
        b2: Array1::zeros(DISC_HIDDEN2),
        a3: he(1, DISC_HIDDEN2, &mut rng),
        b3: 0.0,
    };
    Ok((GcnParams { w1, w2 }, disc, ClsHead { wc }))
}

pub fn init_decoder(d_prime: usize, r: usize, seed: u64) -> Decoder {
    let mut rng = stream_rng(seed ^ 0x5eed_dec0, Stream::Network);
    Decoder {
        wd: he(d_prime, r, &mut rng),
    }
}

/// Intermediates of a generator pass.
#[derive(Debug, Clone)]
pub struct GcnForward {
    /// `X_att S~`
    pub xs: Array2<f64>,
    /// Layer-1 pre-activation `W1 X_att S~`.
    pub pre1: Array2<f64>,
    pub z1: Array2<f64>,
    pub z: Array2<f64>,
}

/// `X_att S~`, the graph-propagated input. Constant while the attention
/// projections are fixed.
pub fn propagate_input(xatt: ArrayView2<f64>, s_tilde: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = xatt.ncols();
    check_shape("normalized graph", s_tilde.dim(), (n, n))?;
    Ok(xatt.dot(&s_tilde))
}

pub fn gcn_forward_propagated(
    xs: Array2<f64>,
    s_tilde: ArrayView2<f64>,
    p: &GcnParams,
) -> Result<GcnForward> {
    if xs.nrows() != p.input_dim() {
        return Err(Error::Shape(format!(
            "GCN expects input dimension {}, got {}",
            p.input_dim(),
            xs.nrows()
        )));
    }
    let n = xs.ncols();
    check_shape("normalized graph", s_tilde.dim(), (n, n))?;
    let pre1 = p.w1.dot(&xs);
    let z1 = pre1.mapv(relu);
    let z = p.w2.dot(&z1).dot(&s_tilde);
    Ok(GcnForward { xs, pre1, z1, z })
}

/// `Z1 = ReLU(W1 X_att S~)`, `Z = W2 Z1 S~`.
pub fn gcn_forward(
    xatt: ArrayView2<f64>,
    s_tilde: ArrayView2<f64>,
    p: &GcnParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let xs = propagate_input(xatt, s_tilde)?;
    let fwd = gcn_forward_propagated(xs, s_tilde, p)?;
    Ok((fwd.z1, fwd.z))
}

#[derive(Debug, Clone)]
pub struct DiscForward {
    pub pre1: Array2<f64>,
    pub h1: Array2<f64>,
    pub pre2: Array2<f64>,
    pub h2: Array2<f64>,
    /// One logit per input column.
    pub logits: Array1<f64>,
}

impl DiscForward {
    pub fn probabilities(&self) -> Array1<f64> {
        self.logits.mapv(sigmoid)
    }
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    for mut col in m.axis_iter_mut(Axis(1)) {
        col += b;
    }
    m
}

pub fn disc_forward_logits(v: ArrayView2<f64>, p: &DiscParams) -> Result<DiscForward> {
    if v.nrows() != p.input_dim() {
        return Err(Error::Shape(format!(
            "discriminator expects input length {}, got {}",
            p.input_dim(),
            v.nrows()
        )));
    }
    let pre1 = add_bias(p.a1.dot(&v), &p.b1);
    let h1 = pre1.mapv(relu);
    let pre2 = add_bias(p.a2.dot(&h1), &p.b2);
    let h2 = pre2.mapv(relu);
    let logits = p.a3.dot(&h2).row(0).mapv(|l| l + p.b3);
    Ok(DiscForward {
        pre1,
        h1,
        pre2,
        h2,
        logits,
    })
}

/// Probability that each column of `v` came from the prior.
pub fn disc_forward(v: ArrayView2<f64>, p: &DiscParams) -> Result<Array1<f64>> {
    Ok(disc_forward_logits(v, p)?.probabilities())
}

pub fn cls_logits(z: ArrayView2<f64>, head: &ClsHead) -> Result<Array2<f64>> {
    if z.nrows() != head.wc.ncols() {
        return Err(Error::Shape(format!(
            "classification head expects code length {}, got {}",
            head.wc.ncols(),
            z.nrows()
        )));
    }
    Ok(head.wc.dot(&z))
}

/// Elementwise logistic of `Wc z_i`: a `c x n` matrix of probabilities.
pub fn cls_forward(z: ArrayView2<f64>, head: &ClsHead) -> Result<Array2<f64>> {
    Ok(cls_logits(z, head)?.mapv(sigmoid))
}

// ---------------------------------------------------------------------------
// Checkpoint container

const CKPT_MAGIC: [u8; 8] = *b"LAGNHCKP";
const CKPT_VERSION: u32 = 1;

/// Named `f64` matrices plus a UTF-8 metadata blob. Serialization is
/// deterministic and round-trips bit-exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    entries: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: String) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, m: Array2<f64>) {
        self.entries.retain(|(n, _)| n != name);
        self.entries.push((name.to_string(), m));
    }

    pub fn insert_vector(&mut self, name: &str, v: &Array1<f64>) {
        self.insert(name, v.clone().insert_axis(Axis(0)));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<Array2<f64>> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn require_vector(&self, name: &str) -> Result<Array1<f64>> {
        let m = self.require(name)?;
        if m.nrows() != 1 {
            return Err(Error::Format(format!("checkpoint tensor {name:?} is not a vector")));
        }
        Ok(m.row(0).to_owned())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} shape overflows")))?;
            let data = r
                .take(len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            entries.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let (g, d, c) = init_params(8, 8, 4, 3, 1).unwrap();
        assert_eq!(g.w1.dim(), (8, 8));
        assert_eq!(g.w2.dim(), (4, 8));
        assert_eq!(c.wc.dim(), (3, 4));
        assert_eq!(d.a1.dim(), (64, 4));
        assert_eq!(d.a2.dim(), (32, 64));
        assert_eq!(d.a3.dim(), (1, 32));
        let again = init_params(8, 8, 4, 3, 1).unwrap();
        assert_eq!((g.clone(), d.clone(), c.clone()), again);
        let other = init_params(8, 8, 4, 3, 2).unwrap();
        assert_ne!(g, other.0);
    }

    #[test]
    fn gcn_zero_weights_annihilate() {
        let p = GcnParams { w1: Array2::zeros((3, 2)), w2: Array2::ones((2, 3)) };
        let (z1, z) = gcn_forward(array![[1.0, 2.0], [3.0, 4.0]].view(), Array2::eye(2).view(), &p).unwrap();
        assert!(z1.iter().chain(z.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_single_node_passthrough() {
        let p = GcnParams { w1: Array2::eye(3), w2: Array2::eye(3) };
        let x = array![[1.0], [2.0], [0.5]];
        let (_, z) = gcn_forward(x.view(), array![[1.0]].view(), &p).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn gcn_hand_chain() {
        let p = GcnParams { w1: array![[1.0]], w2: array![[1.0]] };
        let s = array![[0.5, 0.5], [0.5, 0.5]];
        let (z1, z) = gcn_forward(array![[1.0, -1.0]].view(), s.view(), &p).unwrap();
        assert_eq!(z1, array![[0.0, 0.0]]);
        assert_eq!(z, array![[0.0, 0.0]]);
    }

    #[test]
    fn gcn_shape_errors() {
        let p = GcnParams { w1: Array2::eye(2), w2: Array2::eye(2) };
        assert!(matches!(gcn_forward(Array2::ones((3, 2)).view(), Array2::eye(2).view(), &p), Err(Error::Shape(_))));
        assert!(matches!(gcn_forward(Array2::ones((2, 2)).view(), Array2::eye(3).view(), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn disc_zero_params_is_one_half() {
        let d = DiscParams::zeros(3);
        let p = disc_forward(array![[1.0, -4.0], [2.0, 0.0], [3.0, 9.0]].view(), &d).unwrap();
        assert_eq!(p, array![0.5, 0.5]);
        assert!(matches!(disc_forward(Array2::ones((2, 1)).view(), &d), Err(Error::Shape(_))));
    }

    #[test]
    fn disc_scalar_trace() {
        let d = DiscParams {
            a1: Array2::ones((64, 1)),
            b1: Array1::ones(64),
            a2: Array2::ones((32, 64)),
            b2: Array1::ones(32),
            a3: Array2::ones((1, 32)),
            b3: 1.0,
        };
        // hidden1 = relu(1 + 1) = 2 on each of 64 units
        // hidden2 = relu(64 * 2 + 1) = 129 on each of 32 units
        // logit = 32 * 129 + 1 = 4129
        let f = disc_forward_logits(array![[1.0]].view(), &d).unwrap();
        assert_eq!(f.logits[0], 4129.0);
        let mut d = d;
        d.a3.fill(-1.0 / 4128.0);
        // logit = 1 - 32 * 129 / 4128 = 0
        let p = disc_forward(array![[1.0]].view(), &d).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cls_examples() {
        let head = ClsHead { wc: Array2::zeros((2, 3)) };
        let p = cls_forward(Array2::ones((3, 4)).view(), &head).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
        let head = ClsHead { wc: array![[3f64.ln()]] };
        let p = cls_forward(array![[1.0]].view(), &head).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], 0.75, epsilon = 1e-12);
        let head = ClsHead { wc: array![[1.0]] };
        let p = cls_forward(array![[800.0]].view(), &head).unwrap();
        assert_eq!(p[[0, 0]], 1.0);
    }

    #[test]
    fn relu_layer_is_idempotent() {
        let m = array![[-1.0, 2.0], [0.0, -3.0]];
        let once = m.mapv(relu);
        assert_eq!(once.mapv(relu), once);
    }

    #[test]
    fn gcn_is_linear_with_positive_preactivations() {
        let p = GcnParams { w1: array![[1.0, 0.5], [0.2, 1.0]], w2: array![[1.0, -1.0]] };
        let s = array![[0.6, 0.4], [0.4, 0.6]];
        let x = array![[1.0, 2.0], [3.0, 1.0]];
        let (_, z) = gcn_forward(x.view(), s.view(), &p).unwrap();
        let (_, z2) = gcn_forward((&x * 2.0).view(), s.view(), &p).unwrap();
        assert_abs_diff_eq!(z2, z * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gcn_is_permutation_equivariant() {
        let (p, _, _) = init_params(3, 5, 2, 1, 4).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.7 + 0.3);
        let s = crate::graph::normalize(Array2::from_shape_fn((4, 4), |(i, j)| 1.0 / (1.0 + (i + j) as f64))).unwrap();
        let perm = [2, 0, 3, 1];
        let xp = x.select(Axis(1), &perm);
        let sp = s.s_tilde.select(Axis(0), &perm).select(Axis(1), &perm);
        let (_, z) = gcn_forward(x.view(), s.s_tilde.view(), &p).unwrap();
        let (_, zp) = gcn_forward(xp.view(), sp.view(), &p).unwrap();
        assert_abs_diff_eq!(zp, z.select(Axis(1), &perm), epsilon = 1e-12);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut c = Checkpoint::new("{}".into());
        c.insert("a", array![[1.0]]);
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn disc_output_in_open_unit_interval(v in proptest::collection::vec(-3.0f64..3.0, 4), seed in 0u64..50) {
            let (_, d, _) = init_params(2, 2, 4, 2, seed).unwrap();
            let p = disc_forward(Array2::from_shape_vec((4, 1), v).unwrap().view(), &d).unwrap();
            prop_assert!(p[0] > 0.0 && p[0] < 1.0);
        }

        #[test]
        fn checkpoint_round_trips(
            rows in 1usize..4,
            cols in 1usize..4,
            raw in proptest::collection::vec(proptest::num::f64::ANY, 16),
            meta in "[a-z{}\":,0-9]{0,20}",
        ) {
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| raw[i * cols + j]);
            let mut c = Checkpoint::new(meta);
            c.insert("m", m);
            c.insert_vector("v", &Array1::from(raw[..3].to_vec()));
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }
}
