//! Shared test helpers: random small training problems and a loop-based
//! reference implementation of the losses, written independently of the
//! library's matrix code.
#![allow(clippy::needless_range_loop)]

#![allow(dead_code)]

use lagnh::attention::AttentionParams;
use lagnh::graph::{build_graph, GraphConfig};
use lagnh::network::{init_decoder, init_params};
use lagnh::objective::{AdversarialForm, AllGrads, GeneratorInput, Hyperparams, ModelParams, Problem, ReconTarget};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub problem: Problem,
    /// Raw features for the joint modes, attentive features otherwise.
    pub x: Array2<f64>,
    pub xatt_fixed: Option<Array2<f64>>,
    pub params: ModelParams,
    pub b: Array2<f64>,
    pub prior: Array2<f64>,
    pub hp: Hyperparams,
}

pub const N: usize = 16;
pub const D: usize = 5;
pub const D_PRIME: usize = 8;
pub const H: usize = 8;
pub const R: usize = 4;
pub const C: usize = 3;

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Instance `i` cycles through input modes, reconstruction targets and
/// adversarial forms.
pub fn make_instance(i: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
    let x = normal(D, N, &mut rng);
    let mut y = Array2::from_shape_simple_fn((C, N), || if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    for j in 0..N {
        if y.column(j).sum() == 0.0 {
            y[[rng.random_range(0..C), j]] = 1.0;
        }
    }
    let attention = AttentionParams::init(D, C, D_PRIME, i).unwrap();
    let (gcn, mut disc, cls) = init_params(D_PRIME, H, R, C, i).unwrap();
    disc.b1.mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
    disc.b2.mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
    disc.b3 = 0.1 * rng.sample::<f64, _>(StandardNormal);
    let targets = [
        ReconTarget::Aux,
        ReconTarget::Visual,
        ReconTarget::Augmented,
        ReconTarget::InnerProduct,
        ReconTarget::Feature,
    ];
    let target = targets[(i % 5) as usize];
    let hp = Hyperparams {
        recon_target: target,
        adversarial: if i.is_multiple_of(2) { AdversarialForm::NonSaturating } else { AdversarialForm::Saturating },
        ..Hyperparams::coco()
    };
    let decoder = (target == ReconTarget::Feature).then(|| init_decoder(D_PRIME, R, i));
    let params = ModelParams { attention, gcn, disc, cls, decoder };

    let mode = i % 4;
    let xatt = if mode == 1 {
        params.attention.project_features(x.view()).unwrap()
    } else {
        lagnh::attention::AttentionForward::run(&params.attention, x.view(), y.view()).unwrap().xatt
    };
    let parts = build_graph(xatt.view(), y.view(), &GraphConfig::default()).unwrap();
    let recon = match target {
        ReconTarget::Aux => parts.aux.clone(),
        ReconTarget::Visual => parts.visual.clone(),
        ReconTarget::Augmented | ReconTarget::InnerProduct => parts.augmented(1.0),
        ReconTarget::Feature => xatt.clone(),
    };
    let (input, xatt_fixed) = match mode {
        0 | 3 => (GeneratorInput::Joint { x: x.clone(), attend: true }, None),
        1 => (GeneratorInput::Joint { x: x.clone(), attend: false }, None),
        _ => (GeneratorInput::Fixed { xs: xatt.dot(&parts.graph.s_tilde) }, Some(xatt.clone())),
    };
    let problem = Problem { input, s_tilde: parts.graph.s_tilde.clone(), y, recon_target: recon };
    let z = problem.forward(&params).unwrap().z().clone();
    let b = z.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    let prior = normal(R, N, &mut rng);
    Instance { problem, x, xatt_fixed, params, b, prior, hp }
}

// ---------------------------------------------------------------------------
// Loop-based reference

type M = Vec<Vec<f64>>;

/// Activation pattern of every ReLU and clip in evaluation order. Recording
/// mode evaluates the gates; frozen mode replays a recorded pattern, which
/// evaluates the smooth piece of the loss containing the recorded point.
pub struct Masks {
    bits: Vec<bool>,
    frozen: bool,
    pos: usize,
}

impl Masks {
    pub fn record() -> Self {
        Self { bits: Vec::new(), frozen: false, pos: 0 }
    }

    pub fn frozen(bits: Vec<bool>) -> Self {
        Self { bits, frozen: true, pos: 0 }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    fn gate(&mut self, v: f64) -> bool {
        if self.frozen {
            self.pos += 1;
            self.bits[self.pos - 1]
        } else {
            self.bits.push(v > 0.0);
            v > 0.0
        }
    }

    fn relu(&mut self, v: f64) -> f64 {
        if self.gate(v) {
            v
        } else {
            0.0
        }
    }
}

fn to_m(a: &Array2<f64>) -> M {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn col(a: &M, j: usize) -> Vec<f64> {
    a.iter().map(|r| r[j]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn log1pexp(v: f64) -> f64 {
    // ln(1 + e^v)
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn network_input(inst: &Instance, p: &ModelParams, pat: &mut Masks) -> M {
    if let Some(x) = &inst.xatt_fixed {
        return to_m(x);
    }
    let px = to_m(&p.attention.proj_x);
    let xbar = matmul(&px, &to_m(&inst.x));
    let attend = matches!(inst.problem.input, GeneratorInput::Joint { attend: true, .. });
    if !attend {
        return xbar;
    }
    let ybar = matmul(&to_m(&p.attention.proj_y), &to_m(&inst.problem.y));
    let (dp, n) = (xbar.len(), xbar[0].len());
    let mut out = xbar.clone();
    for i in 0..n {
        let xi = col(&xbar, i);
        let cos: Vec<f64> = (0..n).map(|j| cosine(&xi, &col(&ybar, j))).collect();
        let alphas: Vec<f64> = cos.iter().map(|&c| if pat.gate(c) { c.min(1.0) } else { 0.0 }).collect();
        let total: f64 = alphas.iter().sum();
        if total > 0.0 {
            for r in 0..dp {
                let mix: f64 = (0..n).map(|j| alphas[j] * ybar[r][j]).sum();
                out[r][i] += mix / total;
            }
        }
    }
    out
}

pub fn oracle_codes(inst: &Instance, p: &ModelParams, pat: &mut Masks) -> M {
    let st = to_m(&inst.problem.s_tilde);
    let xs = matmul(&network_input(inst, p, pat), &st);
    let pre = matmul(&to_m(&p.gcn.w1), &xs);
    let z1: M = pre.into_iter().map(|r| r.into_iter().map(|v| pat.relu(v)).collect()).collect();
    matmul(&matmul(&to_m(&p.gcn.w2), &z1), &st)
}

fn disc_logit(p: &ModelParams, v: &[f64], pat: &mut Masks) -> f64 {
    let d = &p.disc;
    let h1: Vec<f64> = (0..d.a1.nrows())
        .map(|i| (0..v.len()).map(|j| d.a1[[i, j]] * v[j]).sum::<f64>() + d.b1[i])
        .collect();
    let h1: Vec<f64> = h1.into_iter().map(|v| pat.relu(v)).collect();
    let h2: Vec<f64> = (0..d.a2.nrows())
        .map(|i| (0..h1.len()).map(|j| d.a2[[i, j]] * h1[j]).sum::<f64>() + d.b2[i])
        .collect();
    let h2: Vec<f64> = h2.into_iter().map(|v| pat.relu(v)).collect();
    (0..h2.len()).map(|j| d.a3[[0, j]] * h2[j]).sum::<f64>() + d.b3
}

/// The four generator terms `(quan, recons, cl, adv)` and their weighted sum.
pub fn oracle_generator_terms(inst: &Instance, p: &ModelParams) -> ([f64; 4], f64) {
    generator_terms(inst, p, &mut Masks::record())
}

fn generator_terms(inst: &Instance, p: &ModelParams, pat: &mut Masks) -> ([f64; 4], f64) {
    let z = oracle_codes(inst, p, pat);
    let (r, n) = (z.len(), z[0].len());
    let hp = &inst.hp;
    let mut quan = 0.0;
    for k in 0..r {
        for j in 0..n {
            quan += (inst.b[[k, j]] - z[k][j]).powi(2);
        }
    }
    let t = &inst.problem.recon_target;
    let recons = match hp.recon_target {
        ReconTarget::Feature => {
            let wd = &p.decoder.as_ref().unwrap().wd;
            let mut s = 0.0;
            for a in 0..wd.nrows() {
                for j in 0..n {
                    let rec: f64 = (0..r).map(|k| wd[[a, k]] * z[k][j]).sum();
                    s += (t[[a, j]] - rec).powi(2);
                }
            }
            s
        }
        ReconTarget::InnerProduct => {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += (hp.k * t[[i, j]] - dot(&col(&z, i), &col(&z, j))).powi(2);
                }
            }
            s
        }
        _ => {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let c = cosine(&col(&z, i), &col(&z, j));
                    let c = pat.relu(c);
                    s += (hp.k * t[[i, j]] - c).powi(2);
                }
            }
            s
        }
    };
    let wc = &p.cls.wc;
    let mut cl = 0.0;
    for c in 0..wc.nrows() {
        for j in 0..n {
            let l: f64 = (0..r).map(|k| wc[[c, k]] * z[k][j]).sum();
            let y = inst.problem.y[[c, j]];
            cl += log1pexp(l) - y * l;
        }
    }
    let mut adv = 0.0;
    for j in 0..n {
        let f = disc_logit(p, &col(&z, j), pat);
        adv += match hp.adversarial {
            AdversarialForm::NonSaturating => log1pexp(-f),
            AdversarialForm::Saturating => -log1pexp(f),
        };
    }
    adv /= n as f64;
    let total = adv + hp.lambda1 * recons + hp.lambda2 * quan + hp.lambda3 * cl;
    ([quan, recons, cl, adv], total)
}

pub fn oracle_generator_loss(inst: &Instance, p: &ModelParams) -> f64 {
    oracle_generator_terms(inst, p).1
}

pub fn oracle_disc_loss(inst: &Instance, p: &ModelParams) -> f64 {
    disc_loss(inst, p, &mut Masks::record())
}

fn disc_loss(inst: &Instance, p: &ModelParams, pat: &mut Masks) -> f64 {
    let z = oracle_codes(inst, p, pat);
    let n = z[0].len();
    let m = inst.prior.ncols();
    let real: f64 = (0..m).map(|j| log1pexp(-disc_logit(p, &inst.prior.column(j).to_vec(), pat))).sum::<f64>() / m as f64;
    let fake: f64 = (0..n).map(|j| log1pexp(disc_logit(p, &col(&z, j), pat))).sum::<f64>() / n as f64;
    real + fake
}

// ---------------------------------------------------------------------------
// Finite differences

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Generator,
    Discriminator,
}

/// Mutable flat view of a named parameter tensor.
pub fn tensor_mut<'a>(p: &'a mut ModelParams, name: &str) -> &'a mut [f64] {
    let s = match name {
        "proj_x" => p.attention.proj_x.as_slice_mut(),
        "proj_y" => p.attention.proj_y.as_slice_mut(),
        "w1" => p.gcn.w1.as_slice_mut(),
        "w2" => p.gcn.w2.as_slice_mut(),
        "wc" => p.cls.wc.as_slice_mut(),
        "wd" => p.decoder.as_mut().unwrap().wd.as_slice_mut(),
        "a1" => p.disc.a1.as_slice_mut(),
        "b1" => p.disc.b1.as_slice_mut(),
        "a2" => p.disc.a2.as_slice_mut(),
        "b2" => p.disc.b2.as_slice_mut(),
        "a3" => p.disc.a3.as_slice_mut(),
        "b3" => return std::slice::from_mut(&mut p.disc.b3),
        _ => panic!("unknown tensor {name}"),
    };
    s.expect("standard layout")
}

/// Trainable tensors of each loss and their analytic gradients.
pub fn analytic(inst: &Instance, g: &AllGrads) -> Vec<(&'static str, Loss, Vec<f64>)> {
    let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    let mut out = vec![
        ("w1", Loss::Generator, flat(&g.generator.w1)),
        ("w2", Loss::Generator, flat(&g.generator.w2)),
        ("wc", Loss::Generator, flat(&g.generator.wc)),
        ("a1", Loss::Discriminator, flat(&g.disc.a1)),
        ("b1", Loss::Discriminator, g.disc.b1.to_vec()),
        ("a2", Loss::Discriminator, flat(&g.disc.a2)),
        ("b2", Loss::Discriminator, g.disc.b2.to_vec()),
        ("a3", Loss::Discriminator, flat(&g.disc.a3)),
        ("b3", Loss::Discriminator, vec![g.disc.b3]),
    ];
    if let Some(wd) = &g.generator.decoder {
        out.push(("wd", Loss::Generator, flat(wd)));
    }
    if let (Some(px), Some(py)) = (&g.generator.proj_x, &g.generator.proj_y) {
        out.push(("proj_x", Loss::Generator, flat(px)));
        if matches!(inst.problem.input, GeneratorInput::Joint { attend: true, .. }) {
            out.push(("proj_y", Loss::Generator, flat(py)));
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Entries whose `+-EPS` probe crosses a ReLU or clipping boundary.
    pub near_kink: usize,
    /// Entries whose plain central difference missed the tolerance and were
    /// re-measured with one Richardson step.
    pub extrapolated: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

/// Relative error with an absolute floor: errors below the floor pass.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

pub fn eval(inst: &Instance, p: &ModelParams, loss: Loss, masks: &mut Masks) -> f64 {
    match loss {
        Loss::Generator => generator_terms(inst, p, masks).1,
        Loss::Discriminator => disc_loss(inst, p, masks),
    }
}

/// Compares every analytic gradient entry with a central difference of the
/// reference loss. The probes replay the base point's activation pattern;
/// when a probe would cross a kink this measures the one-sided derivative
/// of the piece that contains the base point, which is what the analytic
/// gradient (subgradient 0 at ties) reports. Entries where the central
/// quotient's truncation error exceeds the tolerance get one Richardson step
/// from the same base step.
pub fn check_instance(inst: &Instance) -> GradReport {
    let g = inst.problem.backprop_all(&inst.params, inst.b.view(), inst.prior.view(), &inst.hp).unwrap();
    let mut report = GradReport::default();
    for (name, loss, grads) in analytic(inst, &g) {
        let mut rec = Masks::record();
        eval(inst, &inst.params, loss, &mut rec);
        let base = rec.bits().to_vec();
        let mut p = inst.params.clone();
        for (idx, &a) in grads.iter().enumerate() {
            let orig = tensor_mut(&mut p, name)[idx];
            let mut side = |h: f64| {
                tensor_mut(&mut p, name)[idx] = orig + h;
                let mut free = Masks::record();
                eval(inst, &p, loss, &mut free);
                let v = eval(inst, &p, loss, &mut Masks::frozen(base.clone()));
                tensor_mut(&mut p, name)[idx] = orig;
                (v, free.bits() != base.as_slice())
            };
            let (up, kink_up) = side(EPS);
            let (down, kink_down) = side(-EPS);
            if kink_up || kink_down {
                report.near_kink += 1;
            }
            let mut numeric = (up - down) / (2.0 * EPS);
            let mut err = grad_error(a, numeric);
            if err >= REL_TOL {
                // cancel the O(EPS^2) truncation term of the central quotient
                let half = (side(EPS / 2.0).0 - side(-EPS / 2.0).0) / EPS;
                numeric = (4.0 * half - numeric) / 3.0;
                err = grad_error(a, numeric);
                report.extrapolated += 1;
            }
            report.checked += 1;
            report.max_rel = report.max_rel.max(err);
            if err >= REL_TOL {
                report.failures.push(format!("{name}[{idx}]: analytic {a:e}, numeric {numeric:e}, rel {err:e}"));
            }
        }
    }
    report
}
