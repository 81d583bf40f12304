//! Conditional flow matching over the hybrid path, with an Adam optimizer.

use std::collections::VecDeque;
use std::time::Instant;

use crate::alignment::{solve_eot, EotOptions};
use crate::data::{Dataset, MoleculeGeometry};
use crate::error::{Error, Result};
use crate::geometry::{apply, random_rotation, Permutation, PointCloud};
use crate::paths::{
    draw_noise, eot_training_pair, hybrid_training_pair, ConditionalPath, HybridPath, NoiseSchedule, TrainingSample,
    DEFAULT_SIGMA_MIN, VP_T_MIN,
};
use crate::rng::{self, Rng};
use crate::vectorfield::{FieldOutput, ModelConfig, VectorFieldModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub path_x: ConditionalPath,
    pub path_h: ConditionalPath,
    pub eot_restarts: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Capacity of the in-memory loss ring buffer.
    pub loss_history: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 5_000,
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            path_x: ConditionalPath::Eot { sigma_min: DEFAULT_SIGMA_MIN },
            path_h: ConditionalPath::Vp { schedule: NoiseSchedule::LINEAR },
            eot_restarts: 1,
            seed: 0,
            model: ModelConfig::default(),
            loss_history: 1_000,
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic toy dataset: a faster learning rate, and
    /// the polynomial feature schedule, whose target stays bounded as t → 0.
    /// The linear schedule's feature target grows like 1/√t there and its
    /// variance swamps the coordinate term at this model size.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            path_h: ConditionalPath::Vp { schedule: NoiseSchedule::POLYNOMIAL },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.loss_history == 0 {
            return Err(Error::InvalidArgument("loss_history must be at least 1".into()));
        }
        self.model.validate()?;
        self.hybrid_path().map(|_| ())
    }

    pub fn hybrid_path(&self) -> Result<HybridPath> {
        Ok(HybridPath::new(self.path_x, self.path_h)?.with_eot_options(EotOptions::with_restarts(self.eot_restarts)))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self { lr, beta1: betas.0, beta2: betas.1, eps, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// Fixed-capacity ring buffer of recent losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    capacity: usize,
    values: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), values: VecDeque::with_capacity(capacity.max(1)) }
    }

    pub fn push(&mut self, loss: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(loss);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.values.iter()
    }

    /// Mean of the last `window` entries.
    pub fn recent_mean(&self, window: usize) -> Option<f64> {
        let k = window.min(self.values.len());
        (k > 0).then(|| self.values.iter().rev().take(k).sum::<f64>() / k as f64)
    }
}

/// Trailing moving averages `ma[i] = mean(losses[i+1−w ..= i])` for `i ≥ w−1`.
pub fn moving_average(losses: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || losses.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(losses.len() + 1 - window);
    let mut acc: f64 = losses[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..losses.len() {
        acc += losses[i] - losses[i - window];
        out.push(acc / window as f64);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: VectorFieldModel,
    pub adam: Adam,
    pub step: u64,
    pub history: LossHistory,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = VectorFieldModel::new(cfg.model, cfg.seed)?;
        Ok(Self::from_model(model, cfg))
    }

    /// Resume from an existing model with fresh optimizer moments.
    pub fn from_model(model: VectorFieldModel, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(model.n_params(), cfg.learning_rate, cfg.adam_betas, cfg.adam_eps);
        let rng = rng::seeded(cfg.seed.wrapping_add(0x5eed_0000_0001));
        Self { model, adam, step: 0, history: LossHistory::new(cfg.loss_history), rng }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Mean EOT iterations over the batch (0 when coordinates use no alignment).
    pub mean_eot_iterations: f64,
}

/// Draw `t ~ U[1e-5, 1]`, noise and (when needed) the EOT plan per item.
///
/// All draws from `rng` happen serially in item order; each item's EOT
/// restarts use a forked stream, so results do not depend on scheduling.
pub fn prepare_samples(batch: &[MoleculeGeometry], hp: &HybridPath, rng: &mut Rng) -> Result<Vec<TrainingSample>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let draws: Vec<_> = batch
        .iter()
        .map(|g| {
            let t = rng::uniform(rng, VP_T_MIN, 1.0);
            let noise = draw_noise(g.n_nodes(), g.d, rng);
            (t, noise, rng::fork(rng))
        })
        .collect();
    let build = |(g, (t, noise, mut r)): (&MoleculeGeometry, (f64, crate::paths::PathNoise, Rng))| {
        hybrid_training_pair(g, t, hp, &noise, &mut r)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().zip(draws.into_par_iter()).map(build).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().zip(draws).map(build).collect()
    }
}

fn item_loss(model: &VectorFieldModel, s: &TrainingSample, scale: f64) -> Result<(f64, Vec<f64>)> {
    let (out, cache) = model.forward_cached(&s.g_t, s.t)?;
    let rx: Vec<f64> = out.vx.iter().zip(&s.u_x).map(|(v, u)| v - u).collect();
    let rh: Vec<f64> = out.vh.iter().zip(&s.u_h).map(|(v, u)| v - u).collect();
    let loss = rx.iter().chain(&rh).map(|r| r * r).sum::<f64>();
    let up = FieldOutput {
        vx: rx.iter().map(|r| 2.0 * scale * r).collect(),
        vh: rh.iter().map(|r| 2.0 * scale * r).collect(),
        isolated: out.isolated,
    };
    Ok((loss, model.backward(&cache, &up)?))
}

/// Mean over items of `|v_x − u_x|² + |v_h − u_h|²` (squared errors summed
/// over nodes) and its parameter gradient.
pub fn loss_on_samples(model: &VectorFieldModel, samples: &[TrainingSample]) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / samples.len() as f64;
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, Vec<f64>)>> = {
        use rayon::prelude::*;
        samples.par_iter().map(|s| item_loss(model, s, scale)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, Vec<f64>)>> = samples.iter().map(|s| item_loss(model, s, scale)).collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss * scale, grad))
}

/// Loss value only (no gradient), used by finite-difference checks.
pub fn loss_value(model: &VectorFieldModel, samples: &[TrainingSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = model.forward(&s.g_t, s.t)?;
        total += out.vx.iter().zip(&s.u_x).chain(out.vh.iter().zip(&s.u_h)).map(|(v, u)| (v - u).powi(2)).sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

pub fn cfm_loss(
    model: &VectorFieldModel,
    batch: &[MoleculeGeometry],
    hp: &HybridPath,
    rng: &mut Rng,
) -> Result<LossOutput> {
    let samples = prepare_samples(batch, hp, rng)?;
    let iters: Vec<f64> = samples.iter().filter_map(|s| s.plan.as_ref().map(|p| p.iterations as f64)).collect();
    let mean_eot_iterations = if iters.is_empty() { 0.0 } else { iters.iter().sum::<f64>() / iters.len() as f64 };
    let (loss, grad) = loss_on_samples(model, &samples)?;
    Ok(LossOutput { loss, grad, mean_eot_iterations })
}

/// One Adam update on `batch`. Returns the batch loss.
pub fn train_step(state: &mut TrainState, batch: &[MoleculeGeometry], hp: &HybridPath) -> Result<LossOutput> {
    let out = cfm_loss(&state.model, batch, hp, &mut state.rng)?;
    if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { step: state.step, loss: out.loss });
    }
    state.adam.step(state.model.params_mut(), &out.grad);
    if state.model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("parameters after update"));
    }
    state.step += 1;
    state.history.push(out.loss);
    Ok(out)
}

/// Draw a minibatch (with replacement) from the dataset.
pub fn draw_batch(dataset: &Dataset, batch_size: usize, rng: &mut Rng) -> Vec<MoleculeGeometry> {
    (0..batch_size)
        .map(|_| {
            let k = ((rng::uniform(rng, 0.0, 1.0) * dataset.len() as f64) as usize).min(dataset.len() - 1);
            dataset.molecules[k].clone()
        })
        .collect()
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub wall_seconds: f64,
    pub mean_eot_iterations: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,wall_seconds,mean_eot_iterations";

impl TrainLogRow {
    pub fn csv(&self) -> String {
        format!("{},{:.8e},{:.4},{:.3}", self.step, self.loss, self.wall_seconds, self.mean_eot_iterations)
    }
}

/// Run `cfg.steps` steps from `state`, calling `on_step` after each one.
pub fn train<F>(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<TrainLogRow>>
where
    F: FnMut(&TrainState, &TrainLogRow) -> Result<()>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if dataset.feature_dim() != cfg.model.feature_dim {
        return Err(Error::LengthMismatch { expected: cfg.model.feature_dim, got: dataset.feature_dim() });
    }
    let hp = cfg.hybrid_path()?;
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batch = draw_batch(dataset, cfg.batch_size, &mut state.rng);
        let out = train_step(state, &batch, &hp)?;
        let row = TrainLogRow {
            step: state.step,
            loss: out.loss,
            wall_seconds: start.elapsed().as_secs_f64(),
            mean_eot_iterations: out.mean_eot_iterations,
        };
        on_step(state, &row)?;
        log.push(row);
    }
    Ok(log)
}

/// How the prior draw is matched to the data before building `u_x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentKind {
    Eot,
    /// A uniformly random rotation and permutation.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub mean_norm: f64,
    pub variance_norm: f64,
    pub n_pairs: usize,
}

/// Mean and variance of `|u_x|` over `n_pairs` draws `(x1 ~ N(0, I), x0)`,
/// with `x0` cycling through `data` in a shuffled order.
pub fn alignment_variance_probe(
    data: &[PointCloud],
    kind: AlignmentKind,
    n_pairs: usize,
    opts: &EotOptions,
    rng: &mut Rng,
) -> Result<ProbeResult> {
    if n_pairs < 30 {
        return Err(Error::InvalidArgument(format!("n_pairs must be at least 30, got {n_pairs}")));
    }
    if data.is_empty() {
        return Err(Error::Empty("probe data"));
    }
    let order = rng::shuffled_indices(rng, data.len());
    let mut norms = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let x0 = crate::geometry::project_zero_com(&data[order[k % data.len()]]);
        let x1 = PointCloud::standard_normal(x0.len(), rng);
        let plan = match kind {
            AlignmentKind::Eot => solve_eot(&x1, &x0, opts, rng)?,
            AlignmentKind::Random => {
                let r = random_rotation(rng);
                let p = Permutation::random(x0.len(), rng);
                crate::alignment::EotPlan {
                    cost: crate::geometry::squared_cost(&apply(&x1, &r, &p)?, &x0)?,
                    permutation: p,
                    rotation: r,
                    iterations: 1,
                }
            }
        };
        let (_, u) = eot_training_pair(&x1, &x0, 0.5, DEFAULT_SIGMA_MIN, &plan)?;
        norms.push(u.squared_norm().sqrt());
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let variance_norm = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(ProbeResult { mean_norm: mean, variance_norm, n_pairs })
}
