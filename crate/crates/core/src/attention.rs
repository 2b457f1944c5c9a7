//! Cross-modal attention: features and auxiliary semantics are projected into
//! a shared space, scored by clipped cosine similarity, and each feature gets
//! the score-weighted mean of the projected semantics added as a residual.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{gaussian, normalize_columns, normalize_columns_backward};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `d' x d` feature projection.
    pub proj_x: Array2<f64>,
    /// `d' x c` semantic projection.
    pub proj_y: Array2<f64>,
}

impl AttentionParams {
    /// Gaussian entries with standard deviation `1/sqrt(fan_in)`.
    pub fn init(d: usize, c: usize, d_prime: usize, seed: u64) -> Result<Self> {
        if d == 0 || c == 0 || d_prime == 0 {
            return Err(Error::Parameter("attention dimensions must be >= 1".into()));
        }
        let mut rng = stream_rng(seed, Stream::Attention);
        let proj_x = gaussian(d_prime, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let proj_y = gaussian(d_prime, c, 1.0 / (c as f64).sqrt(), &mut rng);
        Ok(Self { proj_x, proj_y })
    }

    pub fn d_prime(&self) -> usize {
        self.proj_x.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.proj_x.ncols()
    }

    pub fn aux_dim(&self) -> usize {
        self.proj_y.ncols()
    }

    pub fn project(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((self.project_features(x)?, self.project_aux(y)?))
    }

    pub fn project_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature projection expects dimension {}, got {}",
                self.feature_dim(),
                x.nrows()
            )));
        }
        Ok(self.proj_x.dot(&x))
    }

    pub fn project_aux(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        if y.nrows() != self.aux_dim() {
            return Err(Error::Shape(format!(
                "semantic projection expects {} categories, got {}",
                self.aux_dim(),
                y.nrows()
            )));
        }
        Ok(self.proj_y.dot(&y))
    }
}

/// `alpha[[i, j]]` scores feature item `i` against semantic item `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub alpha: Array2<f64>,
}

/// Clipped cosine between every projected feature and every projected
/// semantic vector. A zero vector has cosine 0 with everything.
pub fn attention_scores(xbar: ArrayView2<f64>, ybar: ArrayView2<f64>) -> Result<AttentionScores> {
    if xbar.nrows() != ybar.nrows() {
        return Err(Error::Shape(format!(
            "projected features have {} rows, projected semantics {}",
            xbar.nrows(),
            ybar.nrows()
        )));
    }
    let (xhat, _) = normalize_columns(xbar);
    let (yhat, _) = normalize_columns(ybar);
    let alpha = xhat.t().dot(&yhat).mapv(|c| c.clamp(0.0, 1.0));
    Ok(AttentionScores { alpha })
}

/// `x_att_i = sum_j alpha_ij ybar_j / sum_j alpha_ij + xbar_i`, with the
/// weighted mean taken as zero when item `i` attends to nothing.
pub fn attentive_features(
    xbar: ArrayView2<f64>,
    ybar: ArrayView2<f64>,
    scores: &AttentionScores,
) -> Result<Array2<f64>> {
    let (m, n) = scores.alpha.dim();
    if xbar.ncols() != m || ybar.ncols() != n || xbar.nrows() != ybar.nrows() {
        return Err(Error::Shape(format!(
            "scores are {m}x{n} but features are {:?} and semantics {:?}",
            xbar.dim(),
            ybar.dim()
        )));
    }
    let weights = scores.alpha.sum_axis(Axis(1));
    let mut out = ybar.dot(&scores.alpha.t());
    for (i, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let w = weights[i];
        if w > 0.0 {
            col.mapv_inplace(|v| v / w);
        } else {
            col.fill(0.0);
        }
    }
    out += &xbar;
    Ok(out)
}

/// Intermediates of one attention pass, kept for the backward pass when the
/// projections are trained jointly.
#[derive(Debug, Clone)]
pub struct AttentionForward {
    pub xbar: Array2<f64>,
    pub ybar: Array2<f64>,
    pub xatt: Array2<f64>,
    xhat: Array2<f64>,
    xnorm: Array1<f64>,
    yhat: Array2<f64>,
    ynorm: Array1<f64>,
    cosine: Array2<f64>,
    alpha: Array2<f64>,
    weights: Array1<f64>,
    mixture: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub proj_x: Array2<f64>,
    pub proj_y: Array2<f64>,
}

impl AttentionForward {
    pub fn run(params: &AttentionParams, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Self> {
        let (xbar, ybar) = params.project(x, y)?;
        let (xhat, xnorm) = normalize_columns(xbar.view());
        let (yhat, ynorm) = normalize_columns(ybar.view());
        let cosine = xhat.t().dot(&yhat);
        let alpha = cosine.mapv(|c| c.clamp(0.0, 1.0));
        let weights = alpha.sum_axis(Axis(1));
        let mut mixture = ybar.dot(&alpha.t());
        for (i, mut col) in mixture.axis_iter_mut(Axis(1)).enumerate() {
            if weights[i] > 0.0 {
                let w = weights[i];
                col.mapv_inplace(|v| v / w);
            } else {
                col.fill(0.0);
            }
        }
        let xatt = &mixture + &xbar;
        Ok(Self {
            xbar,
            ybar,
            xatt,
            xhat,
            xnorm,
            yhat,
            ynorm,
            cosine,
            alpha,
            weights,
            mixture,
        })
    }

    pub fn scores(&self) -> AttentionScores {
        AttentionScores {
            alpha: self.alpha.clone(),
        }
    }

    /// Gradients of a scalar loss with respect to both projections, given its
    /// gradient with respect to the attentive features.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        grad_xatt: ArrayView2<f64>,
    ) -> AttentionGrads {
        let (m, n) = self.alpha.dim();
        let mut grad_xbar = grad_xatt.to_owned();

        // mixture_i = ybar alpha_i / w_i
        let mut scaled = Array2::<f64>::zeros((grad_xatt.nrows(), m));
        let mut grad_alpha = Array2::<f64>::zeros((m, n));
        let proj = self.ybar.t().dot(&grad_xatt);
        for i in 0..m {
            let w = self.weights[i];
            if w <= 0.0 {
                continue;
            }
            let g = grad_xatt.column(i);
            scaled.column_mut(i).assign(&g.mapv(|v| v / w));
            let along_mix = self.mixture.column(i).dot(&g);
            for j in 0..n {
                if self.cosine[[i, j]] > 0.0 {
                    grad_alpha[[i, j]] = (proj[[j, i]] - along_mix) / w;
                }
            }
        }
        let mut grad_ybar = scaled.dot(&self.alpha);

        let grad_xhat = self.yhat.dot(&grad_alpha.t());
        let grad_yhat = self.xhat.dot(&grad_alpha);
        grad_xbar += &normalize_columns_backward(self.xhat.view(), &self.xnorm, grad_xhat.view());
        grad_ybar += &normalize_columns_backward(self.yhat.view(), &self.ynorm, grad_yhat.view());

        AttentionGrads {
            proj_x: grad_xbar.dot(&x.t()),
            proj_y: grad_ybar.dot(&y.t()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn params(px: Array2<f64>, py: Array2<f64>) -> AttentionParams {
        AttentionParams { proj_x: px, proj_y: py }
    }

    #[test]
    fn identity_and_zero_projection() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let y = array![[1.0, 0.0]];
        let p = params(Array2::eye(2), Array2::zeros((2, 1)));
        let (xbar, _) = p.project(x.view(), y.view()).unwrap();
        assert_eq!(xbar, x);
        let p = params(Array2::zeros((2, 2)), Array2::zeros((2, 1)));
        let (xbar, _) = p.project(x.view(), y.view()).unwrap();
        assert_eq!(xbar, Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn hand_projection() {
        let p = params(array![[1.0, 1.0]], array![[1.0]]);
        let (xbar, _) = p.project(array![[3.0], [4.0]].view(), array![[1.0]].view()).unwrap();
        assert_eq!(xbar, array![[7.0]]);
    }

    #[test]
    fn projection_shape_mismatch() {
        let p = params(array![[1.0, 1.0]], array![[1.0]]);
        assert!(matches!(
            p.project(array![[3.0]].view(), array![[1.0]].view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn score_examples() {
        let v = array![[0.3], [-1.2]];
        let s = attention_scores(v.view(), v.view()).unwrap();
        assert_abs_diff_eq!(s.alpha[[0, 0]], 1.0, epsilon = 1e-15);
        let s = attention_scores(v.view(), (-&v).view()).unwrap();
        assert_eq!(s.alpha[[0, 0]], 0.0);
        let s = attention_scores(array![[1.0], [0.0]].view(), array![[1.0], [1.0]].view()).unwrap();
        assert_abs_diff_eq!(s.alpha[[0, 0]], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        let s = attention_scores(array![[0.0], [0.0]].view(), array![[1.0], [1.0]].view()).unwrap();
        assert_eq!(s.alpha[[0, 0]], 0.0);
    }

    #[test]
    fn zero_attention_falls_back_to_projection() {
        let xbar = array![[1.0], [2.0]];
        let ybar = array![[5.0, 6.0], [7.0, 8.0]];
        let scores = AttentionScores { alpha: array![[0.0, 0.0]] };
        let xatt = attentive_features(xbar.view(), ybar.view(), &scores).unwrap();
        assert_eq!(xatt, xbar);
    }

    #[test]
    fn single_and_pair_neighbours() {
        let xbar = array![[1.0], [-2.0]];
        let ybar = array![[3.0], [4.0]];
        let scores = AttentionScores { alpha: array![[1.0]] };
        let xatt = attentive_features(xbar.view(), ybar.view(), &scores).unwrap();
        assert_eq!(xatt, array![[4.0], [2.0]]);

        let xbar = array![[1.0, 0.0], [1.0, 0.0]];
        let ybar = array![[2.0, 0.0], [0.0, 2.0]];
        let scores = AttentionScores { alpha: array![[1.0, 1.0], [0.0, 0.0]] };
        let xatt = attentive_features(xbar.view(), ybar.view(), &scores).unwrap();
        assert_eq!(xatt.column(0), array![2.0, 2.0]);
    }

    #[test]
    fn zero_semantic_projection_is_pure_residual() {
        let p = AttentionParams::init(5, 3, 4, 11).unwrap();
        let p = params(p.proj_x, Array2::zeros((4, 3)));
        let x = Array2::from_shape_fn((5, 6), |(i, j)| (i * 7 + j) as f64 - 10.0);
        let y = Array2::from_shape_fn((3, 6), |(i, j)| ((i + j) % 2) as f64);
        let fwd = AttentionForward::run(&p, x.view(), y.view()).unwrap();
        assert_eq!(fwd.xatt, fwd.xbar);
    }

    #[test]
    fn forward_matches_stepwise_functions() {
        let p = AttentionParams::init(6, 3, 4, 2).unwrap();
        let x = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let y = Array2::from_shape_fn((3, 5), |(i, j)| ((i + 2 * j) % 3 == 0) as u8 as f64);
        let fwd = AttentionForward::run(&p, x.view(), y.view()).unwrap();
        let (xbar, ybar) = p.project(x.view(), y.view()).unwrap();
        let scores = attention_scores(xbar.view(), ybar.view()).unwrap();
        let xatt = attentive_features(xbar.view(), ybar.view(), &scores).unwrap();
        assert_abs_diff_eq!(fwd.xatt, xatt, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn scores_in_unit_range_and_scale_free(
            raw in proptest::collection::vec(-5.0f64..5.0, 24),
            s in 0.01f64..100.0,
            t in 0.01f64..100.0,
        ) {
            let xbar = Array2::from_shape_vec((3, 4), raw[..12].to_vec()).unwrap();
            let ybar = Array2::from_shape_vec((3, 4), raw[12..].to_vec()).unwrap();
            let a = attention_scores(xbar.view(), ybar.view()).unwrap();
            prop_assert!(a.alpha.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let b = attention_scores((&xbar * s).view(), (&ybar * t).view()).unwrap();
            for (u, v) in a.alpha.iter().zip(b.alpha.iter()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
