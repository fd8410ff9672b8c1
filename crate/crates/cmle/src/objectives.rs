//! The trainable objectives and their diagnostic estimators.
//!
//! Three losses share one outcome model:
//!
//! * plain MLE: the batch mean of `L(x, t, y) = ‖y − μ(x,t)‖²`;
//! * implicit counterfactual MLE: class-reweighted factual loss plus an
//!   optimal-transport penalty pulling each treatment group's representation
//!   toward the rest;
//! * explicit counterfactual MLE: factual loss plus a classifier penalty on
//!   a sampled counterfactual outcome, with gradients reaching the model
//!   only through that sample.
//!
//! Randomness discipline: everything an objective draws per step (the
//! counterfactual arms and outcome noise) is sampled up front into
//! [`CfDraws`] from a dedicated stream, at a fixed per-example rate. Setting
//! `alpha = 0` therefore reproduces plain MLE training bit for bit: the
//! draws are still consumed, they just multiply into the loss with weight
//! zero.
//!
//! The module also houses the discrete-path estimators (Gumbel-Softmax and
//! REINFORCE), the treatment-overlap bound constants, and the factual /
//! counterfactual error decomposition used by the check suites.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::models::{
    one_hot, MlpNodes, ModelError, OutcomeModel, OutcomeNodes, TreatmentClassifier,
};
use crate::rng::Prng;
use crate::scm::{
    self, CounterfactualDataset, FactualDataset, N_TREATMENTS, X_DIM, Y_DIM,
};
use crate::sinkhorn::{
    sinkhorn_plan, wass_loss_term, Marginals, SinkhornError, TransportPlan, DEFAULT_ITERATIONS,
};
use rand::Rng;

/// Probabilities below this are floored before a log inside the
/// Gumbel-Softmax; each flooring bumps a diagnostic counter.
pub const GUMBEL_FLOOR: f64 = 1e-12;

static GUMBEL_FLOOR_COUNT: AtomicU64 = AtomicU64::new(0);

/// How many times the Gumbel-Softmax probability floor has engaged.
pub fn gumbel_floor_count() -> u64 {
    GUMBEL_FLOOR_COUNT.load(Ordering::Relaxed)
}

pub fn reset_gumbel_floor_count() {
    GUMBEL_FLOOR_COUNT.store(0, Ordering::Relaxed);
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch tensors disagree: {0}")]
    BatchShape(String),
    #[error("alpha must be finite and >= 0, got {alpha}")]
    BadAlpha { alpha: f64 },
    #[error("mle takes no regularizer, got alpha {alpha}")]
    MleWithAlpha { alpha: f64 },
    #[error("gumbel_tau must be finite and > 0, got {tau}")]
    BadTau { tau: f64 },
    #[error("treatment {t} outside 1..={m}")]
    KtDomain { t: u8, m: usize },
    #[error("need at least two treatments, got {m}")]
    TooFewTreatments { m: usize },
    #[error("probability vector invalid: {0}")]
    BadProbability(String),
    #[error("deltas must satisfy 0 < delta1 <= delta2 < 1, got {delta1} and {delta2}")]
    BadDeltas { delta1: f64, delta2: f64 },
    #[error("counterfactual draws disagree with the batch: {0}")]
    DrawMismatch(String),
    #[error("estimator {0:?} applies to the discrete pipeline only")]
    UnsupportedEstimator(Estimator),
    #[error("marginals give class {class} a zero count")]
    DegenerateMarginals { class: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
}

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Mle,
    Implicit,
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Reparam,
    Gumbel,
    Reinforce,
}

/// Which dataset the treatment classifier is pretrained on. The starred
/// explicit variant uses interventional data; everything else observational.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiSource {
    Observational,
    Interventional,
}

/// Where the implicit objective reads `n` and `u_j` from: the current batch
/// or the whole training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WassMarginals {
    Batch,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub alpha: f64,
    pub gumbel_tau: f64,
    pub estimator: Estimator,
    pub phi_source: PhiSource,
    pub wass_marginals: WassMarginals,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Mle,
            alpha: 0.0,
            gumbel_tau: 1.0,
            estimator: Estimator::Reparam,
            phi_source: PhiSource::Observational,
            wass_marginals: WassMarginals::Batch,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(ObjectiveError::BadAlpha { alpha: self.alpha });
        }
        if self.kind == ObjectiveKind::Mle && self.alpha != 0.0 {
            return Err(ObjectiveError::MleWithAlpha { alpha: self.alpha });
        }
        if !self.gumbel_tau.is_finite() || self.gumbel_tau <= 0.0 {
            return Err(ObjectiveError::BadTau {
                tau: self.gumbel_tau,
            });
        }
        Ok(())
    }
}

// ── Batches and class marginals ──────────────────────────────────────────

/// One training mini-batch: covariates `[n, 100]`, 1-based treatments, and
/// outcomes `[n, 2]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub ts: Vec<u8>,
    pub y: Tensor,
}

impl Batch {
    pub fn new(x: Tensor, ts: Vec<u8>, y: Tensor) -> Result<Self, ObjectiveError> {
        let (nx, dx) = x.dims2("batch")?;
        let (ny, dy) = y.dims2("batch")?;
        if nx == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        if nx != ts.len() || nx != ny || dx != X_DIM || dy != Y_DIM {
            return Err(ObjectiveError::BatchShape(format!(
                "x {nx}x{dx}, ts {}, y {ny}x{dy}",
                ts.len()
            )));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t as usize > N_TREATMENTS) {
            return Err(ObjectiveError::KtDomain {
                t,
                m: N_TREATMENTS,
            });
        }
        Ok(Self { x, ts, y })
    }

    /// Gathers the given records of a factual dataset.
    pub fn from_factual(ds: &FactualDataset, indices: &[usize]) -> Result<Self, ObjectiveError> {
        let mut xs = Vec::with_capacity(indices.len());
        let mut ts = Vec::with_capacity(indices.len());
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = &ds.records[i];
            xs.push(r.x.clone());
            ts.push(r.t);
            ys.push(r.y.to_vec());
        }
        Self::new(
            Tensor::from_rows(&xs).map_err(AutodiffError::from)?,
            ts,
            Tensor::from_rows(&ys).map_err(AutodiffError::from)?,
        )
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Per-class counts `u_j` within this batch.
    pub fn counts(&self) -> [usize; N_TREATMENTS] {
        let mut u = [0usize; N_TREATMENTS];
        for &t in &self.ts {
            u[t as usize - 1] += 1;
        }
        u
    }
}

/// Treatment counts of some reference population (a batch or a whole
/// training set), the `n` and `u_j` of the implicit objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassMarginals {
    pub n: usize,
    pub u: [usize; N_TREATMENTS],
}

impl ClassMarginals {
    pub fn from_batch(batch: &Batch) -> Self {
        Self {
            n: batch.len(),
            u: batch.counts(),
        }
    }

    pub fn from_dataset(ds: &FactualDataset) -> Self {
        let mut u = [0usize; N_TREATMENTS];
        for r in &ds.records {
            if (1..=N_TREATMENTS as u8).contains(&r.t) {
                u[r.t as usize - 1] += 1;
            }
        }
        Self {
            n: ds.records.len(),
            u,
        }
    }

    /// Empirical class probability `u_j / n`.
    pub fn p(&self, class: usize) -> f64 {
        self.u[class] as f64 / self.n as f64
    }
}

// ── Factual losses ───────────────────────────────────────────────────────

/// Shared factual forward pass: returns `(phi, sum of squared residuals)`
/// plus the constant input nodes, so every objective builds the identical
/// factual subgraph.
struct FactualGraph {
    x: NodeId,
    phi: NodeId,
    sq: NodeId,
}

fn factual_graph(
    tape: &mut Tape,
    model: &OutcomeModel,
    nodes: &OutcomeNodes,
    batch: &Batch,
) -> Result<FactualGraph, ObjectiveError> {
    let x = tape.constant(batch.x.clone());
    let t = tape.constant(one_hot(&batch.ts, N_TREATMENTS)?);
    let y = tape.constant(batch.y.clone());
    let (phi, mu) = model.tape_forward(tape, nodes, x, t)?;
    let diff = tape.sub(y, mu)?;
    let sq = tape.square(diff)?;
    Ok(FactualGraph { x, phi, sq })
}

/// Batch mean of `‖y − μ(x,t)‖²`.
pub fn mle_batch_loss(
    tape: &mut Tape,
    model: &OutcomeModel,
    nodes: &OutcomeNodes,
    batch: &Batch,
) -> Result<NodeId, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let g = factual_graph(tape, model, nodes, batch)?;
    let total = tape.sum(g.sq)?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64)?)
}

/// The transport plans the implicit loss froze, one slot per class. Classes
/// whose batch side is empty (or whose complement is) are skipped.
#[derive(Clone, Debug)]
pub struct WassPlans {
    pub per_class: Vec<Option<TransportPlan>>,
}

/// Class-reweighted factual loss plus the transport penalty.
///
/// `global` supplies `n` and `u_j` when `config.wass_marginals` is `Global`;
/// with `Batch` the current batch's own counts are used. Pass `frozen` to
/// reuse previously computed plans (finite-difference checks do); otherwise
/// plans are recomputed from the current encoder outputs and returned.
pub fn implicit_cmle_batch_loss(
    tape: &mut Tape,
    model: &OutcomeModel,
    nodes: &OutcomeNodes,
    batch: &Batch,
    global: &ClassMarginals,
    config: &ObjectiveConfig,
    frozen: Option<&WassPlans>,
) -> Result<(NodeId, WassPlans), ObjectiveError> {
    config.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let marginals = match config.wass_marginals {
        WassMarginals::Batch => ClassMarginals::from_batch(batch),
        WassMarginals::Global => *global,
    };
    for (class, &u) in marginals.u.iter().enumerate() {
        if u == 0 && batch.counts()[class] > 0 {
            return Err(ObjectiveError::DegenerateMarginals { class });
        }
    }

    let g = factual_graph(tape, model, nodes, batch)?;

    // Factual term: residuals weighted by n / u_t, then averaged.
    let n_m = marginals.n as f64;
    let mut weights = Tensor::zeros(&[batch.len(), Y_DIM]);
    for (i, &t) in batch.ts.iter().enumerate() {
        let w = n_m / marginals.u[t as usize - 1] as f64;
        for d in 0..Y_DIM {
            weights.data_mut()[i * Y_DIM + d] = w;
        }
    }
    let w_node = tape.constant(weights);
    let weighted = tape.mul(g.sq, w_node)?;
    let wsum = tape.sum(weighted)?;
    let mut loss = tape.scale(wsum, 1.0 / batch.len() as f64)?;

    // Transport penalty per class, against the rest of the batch. With
    // alpha = 0 every coefficient vanishes, so the plans are not computed
    // at all and the loss graph is exactly the weighted factual term.
    let batch_counts = batch.counts();
    let mut per_class: Vec<Option<TransportPlan>> = vec![None; N_TREATMENTS];
    for class in 0..N_TREATMENTS {
        if config.alpha == 0.0 {
            break;
        }
        let u_here = batch_counts[class];
        if u_here == 0 || u_here == batch.len() {
            continue;
        }
        let group_idx: Vec<usize> = (0..batch.len())
            .filter(|&i| batch.ts[i] as usize - 1 == class)
            .collect();
        let rest_idx: Vec<usize> = (0..batch.len())
            .filter(|&i| batch.ts[i] as usize - 1 != class)
            .collect();

        let p = marginals.p(class);
        if p <= 0.0 || p >= 1.0 {
            continue;
        }
        let plan = match frozen {
            Some(plans) => match &plans.per_class[class] {
                Some(p) => p.clone(),
                None => continue,
            },
            None => {
                let phi_val = tape.value(g.phi);
                let group = phi_val.select_rows(&group_idx).map_err(AutodiffError::from)?;
                let rest = phi_val.select_rows(&rest_idx).map_err(AutodiffError::from)?;
                let m = group.pairwise_l2(&rest).map_err(AutodiffError::from)?;
                let marg = Marginals::new(vec![p; group_idx.len()], vec![1.0 - p; rest_idx.len()])?;
                sinkhorn_plan(&m, &marg, DEFAULT_ITERATIONS)?
            }
        };

        let group_node = tape.row_select(g.phi, group_idx)?;
        let rest_node = tape.row_select(g.phi, rest_idx)?;
        let term = wass_loss_term(tape, &plan, group_node, rest_node)?;
        let coef = config.alpha * (1.0 - marginals.u[class] as f64 / n_m);
        let contrib = tape.scale(term, coef)?;
        loss = tape.add(loss, contrib)?;
        per_class[class] = Some(plan);
    }

    Ok((loss, WassPlans { per_class }))
}

// ── Counterfactual sampling and the explicit loss ────────────────────────

/// Uniform draw over `{1..m} \ {t}`.
pub fn sample_kt(t: u8, m: usize, rng: &mut Prng) -> Result<u8, ObjectiveError> {
    if m < 2 {
        return Err(ObjectiveError::TooFewTreatments { m });
    }
    if t == 0 || t as usize > m {
        return Err(ObjectiveError::KtDomain { t, m });
    }
    let r = rng.random_range(1..m as u8);
    Ok(if r < t { r } else { r + 1 })
}

/// Gaussian reparameterized outcome sample `y = μ + ε`.
pub fn reparam_sample(mu: &Tensor, rng: &mut Prng) -> Result<Tensor, ObjectiveError> {
    let eps = draw_eps(mu.shape(), rng);
    Ok(mu.add(&eps).map_err(AutodiffError::from)?)
}

/// Standard-normal noise of the given shape, drawn row-major.
pub fn draw_eps(shape: &[usize], rng: &mut Prng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized to shape")
}

/// Everything the explicit objective draws for one step: a counterfactual
/// arm per example, then the outcome noise, in that order.
#[derive(Clone, Debug)]
pub struct CfDraws {
    pub k: Vec<u8>,
    pub eps: Tensor,
}

impl CfDraws {
    /// Consumes exactly `n` arm draws followed by `n * 2` noise draws, so
    /// every step advances the stream by the same amount regardless of
    /// where the loss ends up using them.
    pub fn sample(ts: &[u8], rng: &mut Prng) -> Result<Self, ObjectiveError> {
        let k = ts
            .iter()
            .map(|&t| sample_kt(t, N_TREATMENTS, rng))
            .collect::<Result<Vec<u8>, _>>()?;
        let eps = draw_eps(&[ts.len(), Y_DIM], rng);
        Ok(Self { k, eps })
    }
}

/// Factual loss plus `α · J_φ(k, x, y_θ(x, k))` with a frozen classifier.
///
/// The counterfactual outcome is `μ(x, k) + ε` with `(k, ε)` supplied in
/// `draws`; gradients reach the outcome model only through that sample. The
/// classifier must be registered frozen (`cnodes` from `register_frozen`).
pub fn explicit_cmle_batch_loss(
    tape: &mut Tape,
    model: &OutcomeModel,
    nodes: &OutcomeNodes,
    classifier: &TreatmentClassifier,
    cnodes: &MlpNodes,
    batch: &Batch,
    config: &ObjectiveConfig,
    draws: &CfDraws,
) -> Result<NodeId, ObjectiveError> {
    config.validate()?;
    if config.estimator != Estimator::Reparam {
        return Err(ObjectiveError::UnsupportedEstimator(config.estimator));
    }
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let n = batch.len();
    let (en, ed) = draws.eps.dims2("explicit")?;
    if draws.k.len() != n || en != n || ed != Y_DIM {
        return Err(ObjectiveError::DrawMismatch(format!(
            "batch {n}, k {}, eps {en}x{ed}",
            draws.k.len()
        )));
    }
    for (i, (&k, &t)) in draws.k.iter().zip(&batch.ts).enumerate() {
        if k == 0 || k as usize > N_TREATMENTS || k == t {
            return Err(ObjectiveError::DrawMismatch(format!(
                "draw {i}: k = {k} against t = {t}"
            )));
        }
    }

    let g = factual_graph(tape, model, nodes, batch)?;
    let fact_sum = tape.sum(g.sq)?;

    // Counterfactual branch reusing the shared representation.
    let k_onehot = tape.constant(one_hot(&draws.k, N_TREATMENTS)?);
    let joined = tape.concat(g.phi, k_onehot)?;
    let mu_cf = model.head.tape_forward(tape, &nodes.head, joined)?;
    let eps = tape.constant(draws.eps.clone());
    let y_cf = tape.add(mu_cf, eps)?;

    let logits = classifier.tape_logits(tape, cnodes, g.x, y_cf)?;
    let logp = tape.log_softmax(logits)?;
    // The one-hot mask picks log p(k_i) per row; J is the negated sum.
    let picked = tape.mul(logp, k_onehot)?;
    let logp_sum = tape.sum(picked)?;
    let penalty = tape.scale(logp_sum, -config.alpha)?;

    let total = tape.add(fact_sum, penalty)?;
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

/// Cross-entropy `−(1/n) Σ_i log softmax(logits)_i[t_i]`, the classifier
/// pretraining loss. `logits` must be `[n, N_TREATMENTS]`.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: NodeId,
    ts: &[u8],
) -> Result<NodeId, ObjectiveError> {
    if ts.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let (n, _) = tape.value(logits).dims2("cross_entropy")?;
    if n != ts.len() {
        return Err(ObjectiveError::BatchShape(format!(
            "logits have {n} rows for {} labels",
            ts.len()
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let mask = tape.constant(one_hot(ts, N_TREATMENTS)?);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / ts.len() as f64)?)
}

// ── Gumbel-Softmax (discrete path) ───────────────────────────────────────

/// One relaxed categorical draw.
///
/// Classes with probability below [`GUMBEL_FLOOR`] are floored before the
/// log (the diagnostic counter records every flooring). Output sums to 1.
pub fn gumbel_softmax(pi: &[f64], tau: f64, rng: &mut Prng) -> Result<Vec<f64>, ObjectiveError> {
    if pi.is_empty() || pi.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(ObjectiveError::BadProbability(format!("{pi:?}")));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(ObjectiveError::BadTau { tau });
    }
    let scores: Vec<f64> = pi
        .iter()
        .map(|&p| {
            let p = if p < GUMBEL_FLOOR {
                GUMBEL_FLOOR_COUNT.fetch_add(1, Ordering::Relaxed);
                GUMBEL_FLOOR
            } else {
                p
            };
            let u: f64 = rng.random();
            let g = -(-u.ln()).ln();
            (p.ln() + g) / tau
        })
        .collect();
    Ok(scm::softmax(&scores))
}

/// Taped Gumbel-Softmax over a strictly positive probability node `[1, V]`,
/// with the Gumbel noise supplied as a constant. Differentiable in `pi`.
pub fn gumbel_softmax_node(
    tape: &mut Tape,
    pi: NodeId,
    gumbels: &Tensor,
    tau: f64,
) -> Result<NodeId, ObjectiveError> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(ObjectiveError::BadTau { tau });
    }
    let logpi = tape.log(pi)?;
    let g = tape.constant(gumbels.clone());
    let shifted = tape.add(logpi, g)?;
    let scaled = tape.scale(shifted, 1.0 / tau)?;
    Ok(tape.softmax(scaled)?)
}

/// Draws `[1, v]` standard Gumbel noise.
pub fn draw_gumbels(v: usize, rng: &mut Prng) -> Tensor {
    let data = (0..v)
        .map(|_| {
            let u: f64 = rng.random();
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(1, v, data).expect("sized to v")
}

// ── REINFORCE (discrete path) ────────────────────────────────────────────

/// One score-function gradient sample.
#[derive(Clone, Debug)]
pub struct ReinforceDraw {
    /// The sampled category.
    pub y: usize,
    /// `J(y) · ∇_logits log p(y)`, length matching `logits`.
    pub grad_logits: Vec<f64>,
}

/// Score-function estimate of `∇_logits E_y[J(y)]` for a categorical
/// distribution given by `logits`. `j_phi` maps a category to its penalty.
pub fn reinforce_grad(
    logits: &[f64],
    j_phi: &dyn Fn(usize) -> f64,
    rng: &mut Prng,
) -> Result<ReinforceDraw, ObjectiveError> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(ObjectiveError::BadProbability(format!("{logits:?}")));
    }
    let p = scm::softmax(logits);
    let y = scm::categorical_from_uniform(&p, rng.random()) as usize;
    let j = j_phi(y);
    let grad_logits = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| j * ((i == y) as u8 as f64 - pi))
        .collect();
    Ok(ReinforceDraw { y, grad_logits })
}

/// The exact gradient `Σ_y p(y) J(y) ∇ log p(y)` by enumeration; the
/// Monte-Carlo oracle for [`reinforce_grad`].
pub fn reinforce_grad_exact(logits: &[f64], j_phi: &dyn Fn(usize) -> f64) -> Vec<f64> {
    let p = scm::softmax(logits);
    let mut grad = vec![0.0; logits.len()];
    for (y, &py) in p.iter().enumerate() {
        let j = j_phi(y);
        for (i, g) in grad.iter_mut().enumerate() {
            *g += py * j * ((i == y) as u8 as f64 - p[i]);
        }
    }
    grad
}

// ── Overlap bound constants ──────────────────────────────────────────────

/// The constants of the counterfactual risk bound for a given treatment
/// marginal and overlap window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// `η_t = 1 + (1/p(t)) (1 − 1/m)` per treatment.
    pub eta: Vec<f64>,
    /// `μ = (m δ₂ − m δ₁ − m + 1) · log m`.
    pub mu: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub m: usize,
}

impl BoundConstants {
    /// The per-treatment penalty weight `(m − 1) / η_t`.
    pub fn alpha_t(&self) -> Vec<f64> {
        self.eta
            .iter()
            .map(|&e| (self.m - 1) as f64 / e)
            .collect()
    }
}

/// Evaluates the bound constants from an empirical treatment marginal.
/// `delta1 = delta2` is allowed and gives the degenerate-window value
/// `(1 − m) log m`.
pub fn bound_constants(
    p_t: &[f64],
    delta1: f64,
    delta2: f64,
    m: usize,
) -> Result<BoundConstants, ObjectiveError> {
    if m < 2 {
        return Err(ObjectiveError::TooFewTreatments { m });
    }
    if p_t.len() != m || p_t.iter().any(|&p| !p.is_finite() || p <= 0.0 || p >= 1.0) {
        return Err(ObjectiveError::BadProbability(format!("{p_t:?}")));
    }
    if !(delta1 > 0.0 && delta1 <= delta2 && delta2 < 1.0) {
        return Err(ObjectiveError::BadDeltas { delta1, delta2 });
    }
    let mf = m as f64;
    let eta = p_t
        .iter()
        .map(|&p| 1.0 + (1.0 / p) * (1.0 - 1.0 / mf))
        .collect();
    let mu = (mf * delta2 - mf * delta1 - mf + 1.0) * mf.ln();
    Ok(BoundConstants {
        eta,
        mu,
        delta1,
        delta2,
        m,
    })
}

// ── Factual / counterfactual error estimators ────────────────────────────

/// Per-treatment factual and counterfactual error estimates. `None` marks a
/// cell with no records (reported missing, never as zero).
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonEstimates {
    pub eps_f: [Option<f64>; N_TREATMENTS],
    pub eps_cf: [Option<f64>; N_TREATMENTS],
    pub n_f: [usize; N_TREATMENTS],
    pub n_cf: [usize; N_TREATMENTS],
}

/// Per-record loss matrix `L[i][t-1] = ‖y_t − predict(x, t)‖²` for a
/// counterfactual dataset under an arbitrary predictor.
fn loss_matrix(
    predict: &dyn Fn(&Tensor, u8) -> Result<Tensor, ObjectiveError>,
    ds: &CounterfactualDataset,
) -> Result<Vec<[f64; N_TREATMENTS]>, ObjectiveError> {
    if ds.records.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let xs: Vec<Vec<f64>> = ds.records.iter().map(|r| r.x.clone()).collect();
    let x = Tensor::from_rows(&xs).map_err(AutodiffError::from)?;
    let mut losses = vec![[0.0; N_TREATMENTS]; ds.records.len()];
    for t in 1..=N_TREATMENTS as u8 {
        let mu = predict(&x, t)?;
        let (n, d) = mu.dims2("loss_matrix")?;
        if n != ds.records.len() || d != Y_DIM {
            return Err(ObjectiveError::BatchShape(format!(
                "predictor returned {n}x{d}"
            )));
        }
        for (i, r) in ds.records.iter().enumerate() {
            let row = mu.row(i);
            let yt = r.y[t as usize - 1];
            losses[i][t as usize - 1] = (0..Y_DIM)
                .map(|dd| (yt[dd] - row[dd]) * (yt[dd] - row[dd]))
                .sum();
        }
    }
    Ok(losses)
}

/// Factual / counterfactual error estimates under an arbitrary predictor
/// `(x batch, t) -> μ`. See [`epsilon_estimates`] for the model version.
pub fn epsilon_estimates_with(
    predict: &dyn Fn(&Tensor, u8) -> Result<Tensor, ObjectiveError>,
    ds: &CounterfactualDataset,
) -> Result<EpsilonEstimates, ObjectiveError> {
    let losses = loss_matrix(predict, ds)?;
    let mut sum_f = [0.0; N_TREATMENTS];
    let mut sum_cf = [0.0; N_TREATMENTS];
    let mut n_f = [0usize; N_TREATMENTS];
    let mut n_cf = [0usize; N_TREATMENTS];
    for (i, r) in ds.records.iter().enumerate() {
        for t in 0..N_TREATMENTS {
            if r.factual_t as usize - 1 == t {
                sum_f[t] += losses[i][t];
                n_f[t] += 1;
            } else {
                sum_cf[t] += losses[i][t];
                n_cf[t] += 1;
            }
        }
    }
    let ratio = |s: f64, n: usize| if n == 0 { None } else { Some(s / n as f64) };
    Ok(EpsilonEstimates {
        eps_f: std::array::from_fn(|t| ratio(sum_f[t], n_f[t])),
        eps_cf: std::array::from_fn(|t| ratio(sum_cf[t], n_cf[t])),
        n_f,
        n_cf,
    })
}

/// Factual / counterfactual errors of an outcome model.
pub fn epsilon_estimates(
    model: &OutcomeModel,
    ds: &CounterfactualDataset,
) -> Result<EpsilonEstimates, ObjectiveError> {
    epsilon_estimates_with(
        &|x, t| {
            let n = x.shape()[0];
            Ok(model.outcome_forward(x, &vec![t; n])?)
        },
        ds,
    )
}

/// Both sides of the factual/counterfactual risk decomposition, estimated
/// on shared samples, with the discrepancy z-score.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionCheck {
    /// Direct side: mean over records of `Σ_t L(x, t, y_t)`.
    pub lhs: f64,
    /// Decomposed side: `Σ_t [p(t) ε_F^t + (1 − p(t)) ε_CF^t]`.
    pub rhs: f64,
    /// `(lhs − rhs) / se`; with shared samples this is numerical noise.
    pub z: f64,
    pub se: f64,
}

/// Checks that the per-treatment decomposition reassembles the total risk.
///
/// Both sides are computed from the same records, so they agree to floating
/// point regardless of the model; a visible gap means the partition
/// bookkeeping is wrong, not the model.
pub fn decomposition_check(
    model: &OutcomeModel,
    ds: &CounterfactualDataset,
) -> Result<DecompositionCheck, ObjectiveError> {
    let predict = |x: &Tensor, t: u8| -> Result<Tensor, ObjectiveError> {
        let n = x.shape()[0];
        Ok(model.outcome_forward(x, &vec![t; n])?)
    };
    let losses = loss_matrix(&predict, ds)?;
    let n = losses.len();
    if n < 2 {
        return Err(ObjectiveError::EmptyDataset);
    }

    let totals: Vec<f64> = losses.iter().map(|l| l.iter().sum()).collect();
    let lhs = totals.iter().sum::<f64>() / n as f64;
    let var = totals.iter().map(|v| (v - lhs) * (v - lhs)).sum::<f64>() / (n - 1) as f64;
    let se_side = (var / n as f64).sqrt();

    let eps = epsilon_estimates_with(&predict, ds)?;
    let mut rhs = 0.0;
    for t in 0..N_TREATMENTS {
        let p = eps.n_f[t] as f64 / n as f64;
        if let Some(e) = eps.eps_f[t] {
            rhs += p * e;
        }
        if let Some(e) = eps.eps_cf[t] {
            rhs += (1.0 - p) * e;
        }
    }

    let se = (2.0 * se_side * se_side).sqrt();
    let diff = lhs - rhs;
    let z = if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(DecompositionCheck { lhs, rhs, z, se })
}
