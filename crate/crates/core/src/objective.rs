//! Loss terms of the hash-learning objective and their hand-derived
//! gradients.
//!
//! The generator minimizes
//! `l_gen_adv + lambda1 * l_recons + lambda2 * l_quan + lambda3 * l_cl`,
//! the discriminator minimizes the negated GAN log-likelihood. Every loss is a
//! sum over items except the adversarial terms, which are means.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionForward, AttentionGrads, AttentionParams};
use crate::error::{check_shape, Error, Result};
use crate::linalg::{normalize_columns, normalize_columns_backward, sigmoid, softplus};
use crate::network::{
    cls_logits, disc_forward_logits, gcn_forward_propagated, ClsHead, Decoder, DiscForward,
    DiscParams, GcnForward, GcnParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconTarget {
    /// Clipped cosine of codes against `k * S^a`.
    Aux,
    /// Clipped cosine against `k * S^v`.
    Visual,
    /// Clipped cosine against `k * (mu S^v + S^a)`.
    Augmented,
    /// Raw inner products `Z^T Z` against `k * (mu S^v + S^a)`.
    InnerProduct,
    /// Linear decoder back to the attentive features.
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// Generator minimizes `-mean log D(z)`.
    NonSaturating,
    /// Generator minimizes `mean log(1 - D(z))`.
    Saturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub k: f64,
    pub recon_target: ReconTarget,
    pub adversarial: AdversarialForm,
}

impl Hyperparams {
    /// `lambda1 = 100, lambda2 = 1, lambda3 = 1, k = 1`.
    pub fn coco() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 1.0,
            lambda3: 1.0,
            k: 1.0,
            recon_target: ReconTarget::Aux,
            adversarial: AdversarialForm::NonSaturating,
        }
    }

    /// As [`Hyperparams::coco`] with `lambda3 = 0.1`.
    pub fn nus_wide() -> Self {
        Self {
            lambda3: 0.1,
            ..Self::coco()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Parameter(format!("k must be > 0, got {}", self.k)));
        }
        Ok(())
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::coco()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_quan: f64,
    pub l_recons: f64,
    pub l_cl: f64,
    pub l_gen_adv: f64,
    pub l_disc: f64,
    pub total_gen: f64,
}

pub fn total_generator_loss(l_gen_adv: f64, l_recons: f64, l_quan: f64, l_cl: f64, hp: &Hyperparams) -> f64 {
    l_gen_adv + hp.lambda1 * l_recons + hp.lambda2 * l_quan + hp.lambda3 * l_cl
}

// ---------------------------------------------------------------------------
// Individual terms

/// `||B - Z||_F^2` and its gradient `2 (Z - B)`.
pub fn quantization_loss(b: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_shape("binary codes", b.dim(), z.dim())?;
    let diff = &z - &b;
    let loss = diff.iter().map(|v| v * v).sum();
    Ok((loss, diff * 2.0))
}

/// Pairwise column cosines; a zero column has cosine 0 with everything,
/// itself included.
pub fn cosine_matrix(z: ArrayView2<f64>) -> Array2<f64> {
    let (zhat, _) = normalize_columns(z);
    zhat.t().dot(&zhat)
}

/// `||k T - [cos(Z^T, Z)]_+||_F^2`.
pub fn reconstruction_loss(z: ArrayView2<f64>, target: ArrayView2<f64>, k: f64) -> Result<(f64, Array2<f64>)> {
    let n = z.ncols();
    check_shape("reconstruction target", target.dim(), (n, n))?;
    let (zhat, norms) = normalize_columns(z);
    let cos = zhat.t().dot(&zhat);
    let mut loss = 0.0;
    let mut grad_cos = Array2::<f64>::zeros((n, n));
    Zip::from(&mut grad_cos)
        .and(&cos)
        .and(&target)
        .for_each(|g, &c, &t| {
            let clipped = c.max(0.0);
            let resid = k * t - clipped;
            loss += resid * resid;
            if c > 0.0 {
                *g = -2.0 * resid;
            }
        });
    let sym = &grad_cos + &grad_cos.t();
    let grad_zhat = zhat.dot(&sym);
    let grad = normalize_columns_backward(zhat.view(), &norms, grad_zhat.view());
    Ok((loss, grad))
}

/// `||k T - Z^T Z||_F^2`.
pub fn inner_product_reconstruction_loss(
    z: ArrayView2<f64>,
    target: ArrayView2<f64>,
    k: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = z.ncols();
    check_shape("reconstruction target", target.dim(), (n, n))?;
    let resid = &target * k - z.t().dot(&z);
    let loss = resid.iter().map(|v| v * v).sum();
    let sym = &resid + &resid.t();
    Ok((loss, z.dot(&sym) * -2.0))
}

/// `||X - Wd Z||_F^2`; returns the loss and the gradients for `Z` and `Wd`.
pub fn feature_reconstruction_loss(
    z: ArrayView2<f64>,
    target: ArrayView2<f64>,
    decoder: &Decoder,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_shape("decoder", decoder.wd.dim(), (target.nrows(), z.nrows()))?;
    check_shape("feature target", target.dim(), (decoder.wd.nrows(), z.ncols()))?;
    let resid = &target - &decoder.wd.dot(&z);
    let loss = resid.iter().map(|v| v * v).sum();
    let grad_z = decoder.wd.t().dot(&resid) * -2.0;
    let grad_wd = resid.dot(&z.t()) * -2.0;
    Ok((loss, grad_z, grad_wd))
}

/// Summed binary cross-entropy from logits and its gradient `sigmoid(L) - Y`.
pub fn classification_loss_logits(
    logits: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_shape("auxiliary labels", y.dim(), logits.dim())?;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    Zip::from(&mut grad).and(&logits).and(&y).for_each(|g, &l, &t| {
        loss += softplus(l) - t * l;
        *g = sigmoid(l) - t;
    });
    Ok((loss, grad))
}

const PROB_FLOOR: f64 = 1e-12;

/// Summed binary cross-entropy from probabilities, logs clamped away from 0.
/// The gradient is with respect to the logits, `P - Y`.
pub fn classification_loss(p: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_shape("auxiliary labels", y.dim(), p.dim())?;
    let mut loss = 0.0;
    Zip::from(&p).and(&y).for_each(|&p, &t| {
        let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    });
    Ok((loss, &p - &y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscGrads {
    pub a1: Array2<f64>,
    pub b1: Array1<f64>,
    pub a2: Array2<f64>,
    pub b2: Array1<f64>,
    pub a3: Array2<f64>,
    pub b3: f64,
}

impl DiscGrads {
    fn add(&mut self, o: &DiscGrads) {
        self.a1 += &o.a1;
        self.b1 += &o.b1;
        self.a2 += &o.a2;
        self.b2 += &o.b2;
        self.a3 += &o.a3;
        self.b3 += o.b3;
    }
}

/// Backward pass of the discriminator for upstream logit gradients. Returns
/// parameter gradients and the gradient with respect to the input columns.
fn disc_backward(
    v: ArrayView2<f64>,
    fwd: &DiscForward,
    p: &DiscParams,
    grad_logits: &Array1<f64>,
) -> (DiscGrads, Array2<f64>) {
    let gl = grad_logits.view().insert_axis(Axis(0));
    let a3 = gl.dot(&fwd.h2.t());
    let b3 = grad_logits.sum();
    let mut g2 = p.a3.t().dot(&gl);
    Zip::from(&mut g2).and(&fwd.pre2).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    let a2 = g2.dot(&fwd.h1.t());
    let b2 = g2.sum_axis(Axis(1));
    let mut g1 = p.a2.t().dot(&g2);
    Zip::from(&mut g1).and(&fwd.pre1).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    let a1 = g1.dot(&v.t());
    let b1 = g1.sum_axis(Axis(1));
    let grad_v = p.a1.t().dot(&g1);
    (DiscGrads { a1, b1, a2, b2, a3, b3 }, grad_v)
}

#[derive(Debug, Clone)]
pub struct GanTerms {
    pub l_disc: f64,
    pub l_gen_adv: f64,
    pub disc_grads: DiscGrads,
    /// Gradient of `l_gen_adv` with respect to the generated codes.
    pub grad_z: Array2<f64>,
}

/// Discriminator loss `-mean log D(z') - mean log(1 - D(z))` with its
/// gradients, together with the generator's adversarial term and its
/// gradient with respect to `Z`.
pub fn gan_losses(
    z: ArrayView2<f64>,
    prior: ArrayView2<f64>,
    disc: &DiscParams,
    form: AdversarialForm,
) -> Result<GanTerms> {
    let (l_disc, disc_grads) = discriminator_loss(z, prior, disc)?;
    let (l_gen_adv, grad_z) = generator_adversarial_loss(z, disc, form)?;
    Ok(GanTerms {
        l_disc,
        l_gen_adv,
        disc_grads,
        grad_z,
    })
}

pub fn discriminator_loss(
    z: ArrayView2<f64>,
    prior: ArrayView2<f64>,
    disc: &DiscParams,
) -> Result<(f64, DiscGrads)> {
    if z.nrows() != prior.nrows() {
        return Err(Error::Shape(format!(
            "codes have length {}, prior samples {}",
            z.nrows(),
            prior.nrows()
        )));
    }
    let real = disc_forward_logits(prior, disc)?;
    let fake = disc_forward_logits(z, disc)?;
    let (m_real, m_fake) = (prior.ncols() as f64, z.ncols() as f64);
    let loss = real.logits.iter().map(|&l| softplus(-l)).sum::<f64>() / m_real
        + fake.logits.iter().map(|&l| softplus(l)).sum::<f64>() / m_fake;
    let g_real = real.logits.mapv(|l| (sigmoid(l) - 1.0) / m_real);
    let g_fake = fake.logits.mapv(|l| sigmoid(l) / m_fake);
    let (mut grads, _) = disc_backward(prior, &real, disc, &g_real);
    let (fake_grads, _) = disc_backward(z, &fake, disc, &g_fake);
    grads.add(&fake_grads);
    Ok((loss, grads))
}

pub fn generator_adversarial_loss(
    z: ArrayView2<f64>,
    disc: &DiscParams,
    form: AdversarialForm,
) -> Result<(f64, Array2<f64>)> {
    let fake = disc_forward_logits(z, disc)?;
    let m = z.ncols() as f64;
    let (loss, grad_logits) = match form {
        AdversarialForm::NonSaturating => (
            fake.logits.iter().map(|&l| softplus(-l)).sum::<f64>() / m,
            fake.logits.mapv(|l| (sigmoid(l) - 1.0) / m),
        ),
        AdversarialForm::Saturating => (
            -fake.logits.iter().map(|&l| softplus(l)).sum::<f64>() / m,
            fake.logits.mapv(|l| -sigmoid(l) / m),
        ),
    };
    let (_, grad_z) = disc_backward(z, &fake, disc, &grad_logits);
    Ok((loss, grad_z))
}

// ---------------------------------------------------------------------------
// Whole-model backpropagation

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub attention: AttentionParams,
    pub gcn: GcnParams,
    pub disc: DiscParams,
    pub cls: ClsHead,
    pub decoder: Option<Decoder>,
}

/// How the generator input is produced.
#[derive(Debug, Clone)]
pub enum GeneratorInput {
    /// Frozen projections: the propagated input `X_att S~` is precomputed.
    Fixed { xs: Array2<f64> },
    /// Projections trained jointly from raw features `x` (`d x n`). With
    /// `attend = false` the input is the plain projection `P_x x`.
    Joint { x: Array2<f64>, attend: bool },
}

/// Everything about one training problem that stays constant within a step.
#[derive(Debug, Clone)]
pub struct Problem {
    pub input: GeneratorInput,
    pub s_tilde: Array2<f64>,
    /// `c x n` auxiliary semantics.
    pub y: Array2<f64>,
    /// `n x n` graph for the graph targets, `d' x n` features for
    /// [`ReconTarget::Feature`].
    pub recon_target: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratorForward {
    pub attention: Option<AttentionForward>,
    pub gcn: GcnForward,
}

impl GeneratorForward {
    pub fn z(&self) -> &Array2<f64> {
        &self.gcn.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGrads {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub wc: Array2<f64>,
    pub decoder: Option<Array2<f64>>,
    pub proj_x: Option<Array2<f64>>,
    pub proj_y: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct AllGrads {
    pub generator: GeneratorGrads,
    pub disc: DiscGrads,
    pub losses: LossBreakdown,
}

impl Problem {
    pub fn n(&self) -> usize {
        self.s_tilde.nrows()
    }

    pub fn forward(&self, params: &ModelParams) -> Result<GeneratorForward> {
        let (attention, xs) = match &self.input {
            GeneratorInput::Fixed { xs } => (None, xs.clone()),
            GeneratorInput::Joint { x, attend: true } => {
                let fwd = AttentionForward::run(&params.attention, x.view(), self.y.view())?;
                let xs = fwd.xatt.dot(&self.s_tilde);
                (Some(fwd), xs)
            }
            GeneratorInput::Joint { x, attend: false } => {
                let xbar = params.attention.project_features(x.view())?;
                (None, xbar.dot(&self.s_tilde))
            }
        };
        let gcn = gcn_forward_propagated(xs, self.s_tilde.view(), &params.gcn)?;
        Ok(GeneratorForward { attention, gcn })
    }

    /// Generator loss terms and gradients for a completed forward pass.
    /// `b` is the constant binary target, `disc` the current discriminator.
    pub fn generator_backward(
        &self,
        params: &ModelParams,
        fwd: &GeneratorForward,
        b: ArrayView2<f64>,
        hp: &Hyperparams,
    ) -> Result<(LossBreakdown, GeneratorGrads)> {
        let z = fwd.z().view();

        let (l_quan, g_quan) = quantization_loss(b, z)?;
        let mut grad_decoder = None;
        let (l_recons, g_recons) = match hp.recon_target {
            ReconTarget::Aux | ReconTarget::Visual | ReconTarget::Augmented => {
                reconstruction_loss(z, self.recon_target.view(), hp.k)?
            }
            ReconTarget::InnerProduct => {
                inner_product_reconstruction_loss(z, self.recon_target.view(), hp.k)?
            }
            ReconTarget::Feature => {
                let dec = params.decoder.as_ref().ok_or_else(|| {
                    Error::Config("feature reconstruction requires a decoder".into())
                })?;
                let (l, gz, gwd) = feature_reconstruction_loss(z, self.recon_target.view(), dec)?;
                grad_decoder = Some(gwd * hp.lambda1);
                (l, gz)
            }
        };
        let logits = cls_logits(z, &params.cls)?;
        let (l_cl, g_logits) = classification_loss_logits(logits.view(), self.y.view())?;
        let (l_gen_adv, g_adv) = generator_adversarial_loss(z, &params.disc, hp.adversarial)?;

        let mut grad_z = g_adv;
        grad_z.scaled_add(hp.lambda1, &g_recons);
        grad_z.scaled_add(hp.lambda2, &g_quan);
        grad_z.scaled_add(hp.lambda3, &params.cls.wc.t().dot(&g_logits));
        let wc = g_logits.dot(&z.t()) * hp.lambda3;

        // Z = (W2 Z1) S~
        let gcn = &fwd.gcn;
        let grad_m = grad_z.dot(&self.s_tilde.t());
        let w2 = grad_m.dot(&gcn.z1.t());
        let mut grad_pre1 = params.gcn.w2.t().dot(&grad_m);
        Zip::from(&mut grad_pre1).and(&gcn.pre1).for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = grad_pre1.dot(&gcn.xs.t());

        let (proj_x, proj_y) = match &self.input {
            GeneratorInput::Fixed { .. } => (None, None),
            GeneratorInput::Joint { x, attend } => {
                let grad_input = params.gcn.w1.t().dot(&grad_pre1).dot(&self.s_tilde.t());
                if *attend {
                    let att = fwd.attention.as_ref().expect("joint attention forward");
                    let AttentionGrads { proj_x, proj_y } =
                        att.backward(x.view(), self.y.view(), grad_input.view());
                    (Some(proj_x), Some(proj_y))
                } else {
                    (
                        Some(grad_input.dot(&x.t())),
                        Some(Array2::zeros(params.attention.proj_y.raw_dim())),
                    )
                }
            }
        };

        let losses = LossBreakdown {
            l_quan,
            l_recons,
            l_cl,
            l_gen_adv,
            l_disc: 0.0,
            total_gen: total_generator_loss(l_gen_adv, l_recons, l_quan, l_cl, hp),
        };
        Ok((
            losses,
            GeneratorGrads {
                w1,
                w2,
                wc,
                decoder: grad_decoder,
                proj_x,
                proj_y,
            },
        ))
    }

    /// Exact gradients of the total generator loss and of the discriminator
    /// loss at `params`.
    pub fn backprop_all(
        &self,
        params: &ModelParams,
        b: ArrayView2<f64>,
        prior: ArrayView2<f64>,
        hp: &Hyperparams,
    ) -> Result<AllGrads> {
        let fwd = self.forward(params)?;
        let (mut losses, generator) = self.generator_backward(params, &fwd, b, hp)?;
        let (l_disc, disc) = discriminator_loss(fwd.z().view(), prior, &params.disc)?;
        losses.l_disc = l_disc;
        Ok(AllGrads {
            generator,
            disc,
            losses,
        })
    }
}
