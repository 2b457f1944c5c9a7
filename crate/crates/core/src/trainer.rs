//! Adam optimization of the adversarial graph hashing model, checkpointing,
//! and inductive encoding of items outside the training graph.

use log::{debug, warn};
use ndarray::{arr0, Array, Array1, Array2, ArrayView2, Axis, Dimension, Ix0, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{attention_scores, attentive_features, AttentionForward, AttentionParams};
use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::{features_to_binary, AuxSemantics, FeatureMatrix};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphParts};
use crate::linalg::{has_non_finite, pairwise_sq_dists, relu};
use crate::network::{init_decoder, init_params, propagate_input, Checkpoint, DiscParams};
use crate::objective::{
    discriminator_loss, GeneratorInput, LossBreakdown, ModelParams, Problem, ReconTarget,
};
use crate::retrieval::{pack, sign_matrix, HashCodes};
use crate::rng::{stream_rng, Stream};

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(t: &TrainConfig) -> Self {
        Self {
            lr: t.lr,
            beta1: t.adam_beta1,
            beta2: t.adam_beta2,
            eps: t.adam_eps,
        }
    }
}

/// First and second moments of one parameter tensor plus its step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<D: Dimension> {
    pub m: Array<f64, D>,
    pub v: Array<f64, D>,
    pub t: u64,
}

impl<D: Dimension> AdamState<D> {
    pub fn zeros(shape: D) -> Self {
        Self {
            m: Array::zeros(shape.clone()),
            v: Array::zeros(shape),
            t: 0,
        }
    }

    pub fn like(param: &Array<f64, D>) -> Self {
        Self::zeros(param.raw_dim())
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<D: Dimension>(
    param: &mut Array<f64, D>,
    grad: &Array<f64, D>,
    state: &mut AdamState<D>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::Shape(format!(
            "adam: parameter {:?}, gradient {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    ndarray::Zip::from(param)
        .and(grad)
        .and(&mut state.m)
        .and(&mut state.v)
        .for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        });
    Ok(())
}

fn adam_scalar(param: &mut f64, grad: f64, state: &mut AdamState<Ix0>, cfg: &AdamConfig) -> Result<()> {
    let mut p = arr0(*param);
    adam_step(&mut p, &arr0(grad), state, cfg)?;
    *param = p.into_scalar();
    Ok(())
}

#[derive(Debug, Clone)]
struct DiscOpt {
    a1: AdamState<Ix2>,
    b1: AdamState<Ix1>,
    a2: AdamState<Ix2>,
    b2: AdamState<Ix1>,
    a3: AdamState<Ix2>,
    b3: AdamState<Ix0>,
}

impl DiscOpt {
    fn new(d: &DiscParams) -> Self {
        Self {
            a1: AdamState::like(&d.a1),
            b1: AdamState::like(&d.b1),
            a2: AdamState::like(&d.a2),
            b2: AdamState::like(&d.b2),
            a3: AdamState::like(&d.a3),
            b3: AdamState::zeros(Ix0()),
        }
    }
}

#[derive(Debug, Clone)]
struct GenOpt {
    w1: AdamState<Ix2>,
    w2: AdamState<Ix2>,
    wc: AdamState<Ix2>,
    wd: Option<AdamState<Ix2>>,
    proj_x: Option<AdamState<Ix2>>,
    proj_y: Option<AdamState<Ix2>>,
}

// ---------------------------------------------------------------------------
// Training

/// Header of the per-epoch training log.
pub const LOG_HEADER: &str = "epoch,l_quan,l_recons,l_cl,l_gen_adv,l_disc,total";

pub fn log_row(epoch: usize, l: &LossBreakdown) -> String {
    format!(
        "{epoch},{},{},{},{},{},{}",
        l.l_quan, l.l_recons, l.l_cl, l.l_gen_adv, l.l_disc, l.total_gen
    )
}

pub fn training_log_csv(log: &[LossBreakdown]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for (i, l) in log.iter().enumerate() {
        out.push_str(&log_row(i + 1, l));
        out.push('\n');
    }
    out
}

/// Hex SHA-256 of the binary serialization of a feature matrix.
pub fn features_digest(features: &FeatureMatrix) -> String {
    hex::encode(Sha256::digest(features_to_binary(features)))
}

/// Attentive (or merely projected) features for the training set.
fn network_input(
    params: &AttentionParams,
    attention: bool,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if attention {
        Ok(AttentionForward::run(params, x, y)?.xatt)
    } else {
        params.project_features(x)
    }
}

fn recon_target(parts: &GraphParts, xatt: &Array2<f64>, cfg: &ModelConfig) -> Array2<f64> {
    match cfg.hp.recon_target {
        ReconTarget::Aux => parts.aux.clone(),
        ReconTarget::Visual => parts.visual.clone(),
        ReconTarget::Augmented | ReconTarget::InnerProduct => parts.augmented(cfg.graph.mu),
        ReconTarget::Feature => xatt.clone(),
    }
}

fn non_finite_check(named: &[(&str, &Array2<f64>)], epoch: usize) -> Result<()> {
    for (name, m) in named {
        if has_non_finite(m) {
            return Err(Error::NonFinite {
                tensor: (*name).to_string(),
                epoch,
            });
        }
    }
    Ok(())
}

/// Stepwise trainer over the full training graph.
pub struct Trainer {
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    adam: AdamConfig,
    params: ModelParams,
    problem: Problem,
    /// Raw `d x n` training features.
    x: Array2<f64>,
    xatt: Array2<f64>,
    parts: GraphParts,
    gen_opt: GenOpt,
    disc_opt: DiscOpt,
    prior_rng: ChaCha8Rng,
    epoch: usize,
    item_ids: Vec<String>,
    digest: String,
    log: Vec<LossBreakdown>,
}

impl Trainer {
    pub fn new(
        features: &FeatureMatrix,
        aux: &AuxSemantics,
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        aux.check_paired(features)?;
        let seed = train_cfg.seed;
        let x = features.to_f64();
        let y = aux.to_f64();
        let (d, c) = (features.dim(), aux.categories());

        let attention = AttentionParams::init(d, c, model_cfg.d_prime, seed)?;
        let (gcn, disc, cls) =
            init_params(model_cfg.d_prime, model_cfg.hidden, model_cfg.code_len, c, seed)?;
        let decoder = (model_cfg.hp.recon_target == ReconTarget::Feature)
            .then(|| init_decoder(model_cfg.d_prime, model_cfg.code_len, seed));
        let params = ModelParams {
            attention,
            gcn,
            disc,
            cls,
            decoder,
        };

        let xatt = network_input(&params.attention, model_cfg.attention, x.view(), y.view())?;
        let parts = build_graph(xatt.view(), y.view(), &model_cfg.graph)?;
        let target = recon_target(&parts, &xatt, model_cfg);
        if model_cfg.hp.recon_target != ReconTarget::Feature
            && model_cfg.hp.recon_target != ReconTarget::InnerProduct
        {
            let top = target.iter().fold(0.0f64, |a, &v| a.max(v)) * model_cfg.hp.k;
            if top > 1.0 {
                warn!(
                    "reconstruction target reaches {top}, above the clipped cosine range; \
                     l_recons has a positive floor"
                );
            }
        }
        let input = if model_cfg.joint_attention {
            GeneratorInput::Joint {
                x: x.clone(),
                attend: model_cfg.attention,
            }
        } else {
            GeneratorInput::Fixed {
                xs: propagate_input(xatt.view(), parts.graph.s_tilde.view())?,
            }
        };
        let problem = Problem {
            input,
            s_tilde: parts.graph.s_tilde.clone(),
            y,
            recon_target: target,
        };
        let joint = model_cfg.joint_attention;
        let gen_opt = GenOpt {
            w1: AdamState::like(&params.gcn.w1),
            w2: AdamState::like(&params.gcn.w2),
            wc: AdamState::like(&params.cls.wc),
            wd: params.decoder.as_ref().map(|dec| AdamState::like(&dec.wd)),
            proj_x: joint.then(|| AdamState::like(&params.attention.proj_x)),
            proj_y: joint.then(|| AdamState::like(&params.attention.proj_y)),
        };
        let disc_opt = DiscOpt::new(&params.disc);
        Ok(Self {
            model_cfg: *model_cfg,
            train_cfg: *train_cfg,
            adam: AdamConfig::from(train_cfg),
            params,
            problem,
            x,
            xatt,
            parts,
            gen_opt,
            disc_opt,
            prior_rng: stream_rng(seed, Stream::Prior),
            epoch: 0,
            item_ids: features.item_ids().to_vec(),
            digest: features_digest(features),
            log: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn log(&self) -> &[LossBreakdown] {
        &self.log
    }

    pub fn sigma(&self) -> f64 {
        self.parts.sigma
    }

    fn prior(&mut self, r: usize, n: usize) -> Array2<f64> {
        let rng = &mut self.prior_rng;
        Array2::from_shape_simple_fn((r, n), || rng.sample::<f64, _>(StandardNormal))
    }

    /// Runs one epoch: sign targets, discriminator update(s), then one
    /// generator update against the refreshed discriminator.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let epoch = self.epoch + 1;
        let hp = self.model_cfg.hp;
        let fwd = self.problem.forward(&self.params)?;
        non_finite_check(&[("Z", fwd.z())], epoch)?;
        let b = sign_matrix(fwd.z().view());
        let (r, n) = fwd.z().dim();

        let mut l_disc = 0.0;
        for _ in 0..self.train_cfg.disc_steps_per_gen_step {
            let prior = self.prior(r, n);
            let (l, g) = discriminator_loss(fwd.z().view(), prior.view(), &self.params.disc)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    tensor: "l_disc".into(),
                    epoch,
                });
            }
            l_disc = l;
            let (d, o, a) = (&mut self.params.disc, &mut self.disc_opt, &self.adam);
            adam_step(&mut d.a1, &g.a1, &mut o.a1, a)?;
            adam_step(&mut d.b1, &g.b1, &mut o.b1, a)?;
            adam_step(&mut d.a2, &g.a2, &mut o.a2, a)?;
            adam_step(&mut d.b2, &g.b2, &mut o.b2, a)?;
            adam_step(&mut d.a3, &g.a3, &mut o.a3, a)?;
            adam_scalar(&mut d.b3, g.b3, &mut o.b3, a)?;
        }

        let (mut losses, g) = self.problem.generator_backward(&self.params, &fwd, b.view(), &hp)?;
        losses.l_disc = l_disc;
        for (name, v) in [
            ("l_quan", losses.l_quan),
            ("l_recons", losses.l_recons),
            ("l_cl", losses.l_cl),
            ("l_gen_adv", losses.l_gen_adv),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    tensor: name.into(),
                    epoch,
                });
            }
        }
        non_finite_check(&[("grad W1", &g.w1), ("grad W2", &g.w2), ("grad Wc", &g.wc)], epoch)?;

        let (p, o, a) = (&mut self.params, &mut self.gen_opt, &self.adam);
        adam_step(&mut p.gcn.w1, &g.w1, &mut o.w1, a)?;
        adam_step(&mut p.gcn.w2, &g.w2, &mut o.w2, a)?;
        adam_step(&mut p.cls.wc, &g.wc, &mut o.wc, a)?;
        if let (Some(dec), Some(gd), Some(st)) = (p.decoder.as_mut(), g.decoder.as_ref(), o.wd.as_mut()) {
            adam_step(&mut dec.wd, gd, st, a)?;
        }
        if let (Some(gx), Some(st)) = (g.proj_x.as_ref(), o.proj_x.as_mut()) {
            adam_step(&mut p.attention.proj_x, gx, st, a)?;
        }
        if let (Some(gy), Some(st)) = (g.proj_y.as_ref(), o.proj_y.as_mut()) {
            adam_step(&mut p.attention.proj_y, gy, st, a)?;
        }
        if self.model_cfg.joint_attention {
            self.refresh_graph()?;
        }
        self.epoch = epoch;
        debug!("epoch {epoch}: total {} disc {}", losses.total_gen, losses.l_disc);
        self.log.push(losses);
        Ok(losses)
    }

    /// Rebuilds the graph and reconstruction target from the current
    /// projections. Within a step the graph is treated as a constant.
    fn refresh_graph(&mut self) -> Result<()> {
        self.xatt = network_input(
            &self.params.attention,
            self.model_cfg.attention,
            self.x.view(),
            self.problem.y.view(),
        )?;
        non_finite_check(&[("X_att", &self.xatt)], self.epoch + 1)?;
        self.parts = build_graph(self.xatt.view(), self.problem.y.view(), &self.model_cfg.graph)?;
        self.problem.s_tilde = self.parts.graph.s_tilde.clone();
        self.problem.recon_target = recon_target(&self.parts, &self.xatt, &self.model_cfg);
        Ok(())
    }

    /// Runs the remaining epochs up to the configured count.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.train_cfg.epochs {
            self.step()?;
        }
        Ok(())
    }

    /// The model at the current parameters, with caches from one fresh
    /// forward pass.
    pub fn snapshot(&self) -> Result<TrainedModel> {
        let fwd = self.problem.forward(&self.params)?;
        non_finite_check(&[("Z", fwd.z())], self.epoch)?;
        let ybar = self.params.attention.project_aux(self.problem.y.view())?;
        Ok(TrainedModel {
            model_config: self.model_cfg,
            train_config: TrainConfig {
                epochs: self.epoch.max(1),
                ..self.train_cfg
            },
            params: self.params.clone(),
            sigma: self.parts.sigma,
            xatt: self.xatt.clone(),
            ybar,
            z1: fwd.gcn.z1.clone(),
            z: fwd.gcn.z.clone(),
            degrees: self.parts.graph.degrees.clone(),
            y_train: self.problem.y.clone(),
            item_ids: self.item_ids.clone(),
            features_digest: self.digest.clone(),
        })
    }
}

/// Trains for `train_cfg.epochs` epochs and returns the model with the
/// per-epoch loss breakdown.
pub fn fit(
    features: &FeatureMatrix,
    aux: &AuxSemantics,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainedModel, Vec<LossBreakdown>)> {
    let mut trainer = Trainer::new(features, aux, model_cfg, train_cfg)?;
    trainer.run()?;
    Ok((trainer.snapshot()?, trainer.log))
}

// ---------------------------------------------------------------------------
// Trained model

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams,
    /// Visual-graph bandwidth resolved on the training set.
    pub sigma: f64,
    /// `d' x n` training inputs of the network.
    pub xatt: Array2<f64>,
    /// `d' x n` projected training semantics, `P_y Y`.
    pub ybar: Array2<f64>,
    pub z1: Array2<f64>,
    pub z: Array2<f64>,
    pub degrees: Array1<f64>,
    /// `c x n`
    pub y_train: Array2<f64>,
    pub item_ids: Vec<String>,
    pub features_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    version: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    sigma: f64,
    item_ids: Vec<String>,
    features_digest: String,
}

impl TrainedModel {
    pub fn code_len(&self) -> usize {
        self.model_config.code_len
    }

    pub fn feature_dim(&self) -> usize {
        self.params.attention.feature_dim()
    }

    pub fn categories(&self) -> usize {
        self.params.attention.aux_dim()
    }

    pub fn n_train(&self) -> usize {
        self.z.ncols()
    }

    /// `sgn(Z)` of the training items.
    pub fn encode_train(&self) -> HashCodes {
        pack(sign_matrix(self.z.view()).view(), self.item_ids.clone()).expect("sign codes pack")
    }

    /// Real-valued codes of out-of-sample items: `x` is `d x m`, `y` is
    /// `c x m`. Each query is attached to the training graph as one extra
    /// node with a self loop; the training nodes are left unchanged.
    pub fn encode_query_real(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (d, c) = (self.feature_dim(), self.categories());
        if x.nrows() != d {
            return Err(Error::Shape(format!("query features have dimension {}, model expects {d}", x.nrows())));
        }
        if y.nrows() != c {
            return Err(Error::Shape(format!("query semantics have {} categories, model expects {c}", y.nrows())));
        }
        if x.ncols() != y.ncols() {
            return Err(Error::Shape(format!("{} query features but {} semantic vectors", x.ncols(), y.ncols())));
        }
        let att = &self.params.attention;
        let xbar = att.project_features(x)?;
        let xatt_q = if self.model_config.attention {
            let scores = attention_scores(xbar.view(), self.ybar.view())?;
            attentive_features(xbar.view(), self.ybar.view(), &scores)?
        } else {
            xbar
        };

        let (w_v, w_a) = self.model_config.graph.weights();
        let two_sigma_sq = 2.0 * self.sigma * self.sigma;
        // m x n
        let mut s = pairwise_sq_dists(xatt_q.view(), self.xatt.view()).mapv(|d2| w_v * (-d2 / two_sigma_sq).exp());
        if w_a != 0.0 {
            s.scaled_add(w_a, &y.t().dot(&self.y_train));
        }
        let s_self: Array1<f64> = y.axis_iter(Axis(1)).map(|col| w_v + w_a * col.dot(&col)).collect();
        let inv_sqrt_deg = self.degrees.mapv(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
        let mut self_weight = Array1::zeros(s.nrows());
        for (q, mut row) in s.axis_iter_mut(Axis(0)).enumerate() {
            let dq = row.sum() + s_self[q];
            if dq > 0.0 {
                let scale = 1.0 / dq.sqrt();
                row.zip_mut_with(&inv_sqrt_deg, |v, &inv| *v *= scale * inv);
                self_weight[q] = s_self[q] / dq;
            } else {
                row.fill(0.0);
            }
        }
        let st = s.t();
        let mut h = self.xatt.dot(&st);
        h.zip_mut_with(&(&xatt_q * &self_weight), |a, b| *a += b);
        let z1_q = self.params.gcn.w1.dot(&h).mapv(relu);
        let mut h2 = self.z1.dot(&st);
        h2 += &(&z1_q * &self_weight);
        Ok(self.params.gcn.w2.dot(&h2))
    }

    /// Binary codes of out-of-sample items.
    pub fn encode_query(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, item_ids: Vec<String>) -> Result<HashCodes> {
        let z = self.encode_query_real(x, y)?;
        pack(sign_matrix(z.view()).view(), item_ids)
    }

    /// Encodes a feature/semantics pair. Items that are the training set
    /// (same digest) get their cached codes; anything else is encoded
    /// inductively.
    pub fn encode(&self, features: &FeatureMatrix, aux: &AuxSemantics) -> Result<HashCodes> {
        aux.check_paired(features)?;
        if features_digest(features) == self.features_digest && features.item_ids() == self.item_ids.as_slice() {
            return Ok(self.encode_train());
        }
        self.encode_query(
            features.to_f64().view(),
            aux.to_f64().view(),
            features.item_ids().to_vec(),
        )
    }

    /// Codes for the `subset` columns of a dataset whose `train` columns are
    /// this model's training set. Training items reuse their cached codes.
    pub fn encode_subset(
        &self,
        features: &FeatureMatrix,
        aux: &AuxSemantics,
        train: &[usize],
        subset: &[usize],
    ) -> Result<HashCodes> {
        aux.check_paired(features)?;
        if features_digest(&features.select(train)?) != self.features_digest {
            return Err(Error::Config(
                "the split's training items do not match the model's training set".into(),
            ));
        }
        let mut train_pos = std::collections::HashMap::with_capacity(train.len());
        for (pos, &i) in train.iter().enumerate() {
            train_pos.insert(i, pos);
        }
        let outside: Vec<usize> = subset.iter().copied().filter(|i| !train_pos.contains_key(i)).collect();
        let mut z_out = Array2::zeros((self.code_len(), 0));
        if !outside.is_empty() {
            let f = features.select(&outside)?;
            let a = aux.select(&outside)?;
            z_out = self.encode_query_real(f.to_f64().view(), a.to_f64().view())?;
        }
        let mut b = Array2::zeros((self.code_len(), subset.len()));
        let mut next = 0;
        for (col, &i) in subset.iter().enumerate() {
            let src = match train_pos.get(&i) {
                Some(&pos) => self.z.column(pos),
                None => {
                    next += 1;
                    z_out.column(next - 1)
                }
            };
            b.column_mut(col).assign(&src.mapv(crate::retrieval::sign));
        }
        let ids = subset.iter().map(|&i| features.item_ids()[i].clone()).collect();
        pack(b.view(), ids)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            version: crate::VERSION.to_string(),
            model_config: self.model_config,
            train_config: self.train_config,
            sigma: self.sigma,
            item_ids: self.item_ids.clone(),
            features_digest: self.features_digest.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&meta).expect("meta serializes"));
        let p = &self.params;
        ck.insert("proj_x", p.attention.proj_x.clone());
        ck.insert("proj_y", p.attention.proj_y.clone());
        ck.insert("w1", p.gcn.w1.clone());
        ck.insert("w2", p.gcn.w2.clone());
        ck.insert("wc", p.cls.wc.clone());
        ck.insert("a1", p.disc.a1.clone());
        ck.insert_vector("b1", &p.disc.b1);
        ck.insert("a2", p.disc.a2.clone());
        ck.insert_vector("b2", &p.disc.b2);
        ck.insert("a3", p.disc.a3.clone());
        ck.insert("b3", Array2::from_elem((1, 1), p.disc.b3));
        if let Some(dec) = &p.decoder {
            ck.insert("wd", dec.wd.clone());
        }
        ck.insert("xatt", self.xatt.clone());
        ck.insert("z1", self.z1.clone());
        ck.insert("z", self.z.clone());
        ck.insert_vector("degrees", &self.degrees);
        ck.insert("y_train", self.y_train.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        meta.model_config.validate()?;
        let attention = AttentionParams {
            proj_x: ck.require("proj_x")?,
            proj_y: ck.require("proj_y")?,
        };
        let b3 = ck.require("b3")?;
        if b3.dim() != (1, 1) {
            return Err(Error::Format("checkpoint entry b3 must be 1x1".into()));
        }
        let params = ModelParams {
            attention,
            gcn: crate::network::GcnParams {
                w1: ck.require("w1")?,
                w2: ck.require("w2")?,
            },
            disc: DiscParams {
                a1: ck.require("a1")?,
                b1: ck.require_vector("b1")?,
                a2: ck.require("a2")?,
                b2: ck.require_vector("b2")?,
                a3: ck.require("a3")?,
                b3: b3[[0, 0]],
            },
            cls: crate::network::ClsHead { wc: ck.require("wc")? },
            decoder: ck.get("wd").map(|wd| crate::network::Decoder { wd: wd.clone() }),
        };
        let y_train = ck.require("y_train")?;
        let ybar = params.attention.project_aux(y_train.view())?;
        let model = TrainedModel {
            model_config: meta.model_config,
            train_config: meta.train_config,
            sigma: meta.sigma,
            xatt: ck.require("xatt")?,
            ybar,
            z1: ck.require("z1")?,
            z: ck.require("z")?,
            degrees: ck.require_vector("degrees")?,
            y_train,
            item_ids: meta.item_ids,
            features_digest: meta.features_digest,
            params,
        };
        model.check_consistent()?;
        Ok(model)
    }

    fn check_consistent(&self) -> Result<()> {
        let n = self.item_ids.len();
        let p = &self.params;
        let dp = self.model_config.d_prime;
        let ok = p.attention.d_prime() == dp
            && p.gcn.input_dim() == dp
            && p.gcn.hidden() == self.model_config.hidden
            && p.gcn.code_len() == self.model_config.code_len
            && p.disc.input_dim() == self.model_config.code_len
            && p.cls.wc.dim() == (self.categories(), self.code_len())
            && self.xatt.dim() == (dp, n)
            && self.z1.dim() == (p.gcn.hidden(), n)
            && self.z.dim() == (p.gcn.code_len(), n)
            && self.degrees.len() == n
            && self.y_train.dim() == (self.categories(), n);
        if ok {
            Ok(())
        } else {
            Err(Error::Format("checkpoint tensors have inconsistent shapes".into()))
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> AdamConfig {
        AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Array1::from(vec![1.5, -2.0]);
        let mut st = AdamState::like(&p);
        adam_step(&mut p, &Array1::zeros(2), &mut st, &cfg()).unwrap();
        assert_eq!(p, Array1::from(vec![1.5, -2.0]));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn scalar_trace() {
        let mut p = arr0(0.0);
        let mut st = AdamState::zeros(Ix0());
        adam_step(&mut p, &arr0(1.0), &mut st, &cfg()).unwrap();
        assert_abs_diff_eq!(p.into_scalar(), -0.1, epsilon = 1e-8);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let c = cfg();
        let (mut rp, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        let grads = [0.7, -0.2];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            rp -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        let mut p = arr0(0.3);
        let mut st = AdamState::zeros(Ix0());
        for g in grads {
            adam_step(&mut p, &arr0(g), &mut st, &c).unwrap();
        }
        assert_abs_diff_eq!(p.into_scalar(), rp, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Array1::zeros(2);
        let mut st = AdamState::like(&p);
        assert!(matches!(
            adam_step(&mut p, &Array1::zeros(3), &mut st, &cfg()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn log_format() {
        let l = LossBreakdown {
            l_quan: 1.0,
            l_recons: 2.0,
            l_cl: 3.0,
            l_gen_adv: 4.0,
            l_disc: 5.0,
            total_gen: 6.0,
        };
        assert_eq!(training_log_csv(&[l]), format!("{LOG_HEADER}\n1,1,2,3,4,5,6\n"));
    }
}
