//! Small dense helpers shared by the attention, graph and loss code.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn column_norms(m: ArrayView2<f64>) -> Array1<f64> {
    m.map_axis(Axis(0), |c| c.dot(&c).sqrt())
}

/// Unit-norm columns; zero columns stay zero. Returns the normalized matrix
/// and the original norms.
pub(crate) fn normalize_columns(m: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = column_norms(m);
    let mut out = m.to_owned();
    for (mut col, &norm) in out.axis_iter_mut(Axis(1)).zip(norms.iter()) {
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        } else {
            col.fill(0.0);
        }
    }
    (out, norms)
}

/// Backward pass of [`normalize_columns`]: maps a gradient with respect to the
/// unit columns to a gradient with respect to the raw columns.
pub(crate) fn normalize_columns_backward(
    unit: ArrayView2<f64>,
    norms: &Array1<f64>,
    grad_unit: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(unit.raw_dim());
    for (i, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let norm = norms[i];
        if norm > 0.0 {
            let u = unit.column(i);
            let g = grad_unit.column(i);
            let along = u.dot(&g);
            Zip::from(&mut col)
                .and(&u)
                .and(&g)
                .for_each(|o, &u, &g| *o = (g - along * u) / norm);
        }
    }
    out
}

/// Squared Euclidean distances between every column of `a` and every column of `b`.
pub(crate) fn pairwise_sq_dists(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let na = a.map_axis(Axis(0), |c| c.dot(&c));
    let nb = b.map_axis(Axis(0), |c| c.dot(&c));
    let mut g = a.t().dot(&b);
    Zip::indexed(&mut g).for_each(|(i, j), v| *v = (na[i] + nb[j] - 2.0 * *v).max(0.0));
    g
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub(crate) fn has_non_finite(m: &Array2<f64>) -> bool {
    m.iter().any(|v| !v.is_finite())
}
