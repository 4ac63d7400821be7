//! ODE-Net training: one integrator step per data pair, Adam with decoupled
//! weight decay, best-epoch snapshot.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffengine::{self, GradientRecord, MlpParams};
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::integrators::{gap_stats, SchemeKind, Trajectory};

/// Pairs per parallel work unit. Fixed so the reduction order, and hence the
/// result, does not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelKind {
    /// `N(x) = W x`, no bias.
    Linear,
    /// `N(x) = W2 tanh(W1 x + b1) + b2`.
    Shallow { hidden_dim: usize },
}

impl ModelKind {
    pub fn layer_dims(self, state_dim: usize) -> Vec<usize> {
        match self {
            ModelKind::Linear => vec![state_dim, state_dim],
            ModelKind::Shallow { hidden_dim } => vec![state_dim, hidden_dim, state_dim],
        }
    }

    pub fn with_bias(self) -> bool {
        matches!(self, ModelKind::Shallow { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scheme: SchemeKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Pairs per optimizer step; `0` or anything at least the dataset size
    /// means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub model_kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeKind::Rk4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 5000,
            batch_size: 0,
            seed: 0,
            model_kind: ModelKind::Shallow { hidden_dim: 50 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if let ModelKind::Shallow { hidden_dim: 0 } = self.model_kind {
            return Err(Error::invalid("hidden_dim must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::invalid(
                "learning rate and eps must be positive, weight decay non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One training example: integrate from `x` over `dt` and land on `next`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub x: Vec<f64>,
    pub next: Vec<f64>,
    pub dt: f64,
}

/// Adjacent samples of every trajectory, each carrying its own recorded gap.
pub fn make_pairs(trajs: &[Trajectory]) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for t in trajs {
        if t.len() < 2 {
            return Err(Error::DegenerateTrajectory(
                "training trajectories need at least two samples".into(),
            ));
        }
        for k in 0..t.len() - 1 {
            pairs.push(Pair {
                x: t.states[k].clone(),
                next: t.states[k + 1].clone(),
                dt: t.gaps[k],
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MlpParams,
    pub model_kind: ModelKind,
    pub scheme_used: SchemeKind,
    pub train_dt_stats: GapStats,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    pub seed: u64,
    /// Training stopped on a non-finite loss; `params` is the best finite
    /// snapshot seen before that.
    pub diverged: bool,
}

impl TrainedModel {
    /// The trained network as a vector field.
    pub fn field(&self) -> &MlpParams {
        &self.params
    }
}

/// The trained network as a vector field.
pub fn as_field(model: &TrainedModel) -> &MlpParams {
    model.field()
}

/// Hand-rolled AdamW over a flat parameter vector.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: &TrainConfig, n: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], mask: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -=
                self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Mean one-step loss and gradient over `pairs`.
pub fn batch_loss_grad(
    params: &MlpParams,
    scheme: SchemeKind,
    pairs: &[&Pair],
) -> Result<GradientRecord> {
    let partials: Vec<Result<GradientRecord>> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = GradientRecord::zeros_like(params);
            for p in chunk {
                g.loss +=
                    diffengine::accumulate_one_step(params, scheme, p.dt, &p.x, &p.next, &mut g)?;
            }
            Ok(g)
        })
        .collect();
    let mut total = GradientRecord::zeros_like(params);
    for part in partials {
        let part = part?;
        total.loss += part.loss;
        for (t, p) in total
            .weights
            .iter_mut()
            .chain(total.biases.iter_mut())
            .zip(part.weights.iter().chain(part.biases.iter()))
        {
            t.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
    }
    total.scale(1.0 / pairs.len() as f64);
    Ok(total)
}

/// Mean one-step loss over `pairs` (forward only).
pub fn dataset_loss(params: &MlpParams, scheme: SchemeKind, pairs: &[Pair]) -> Result<f64> {
    let sums: Vec<Result<f64>> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|p| diffengine::one_step_loss(params, scheme, p.dt, &p.x, &p.next))
                .sum()
        })
        .collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / pairs.len() as f64)
}

fn check_pairs(pairs: &[Pair]) -> Result<usize> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::invalid("no training pairs"))?;
    let dim = first.x.len();
    for p in pairs {
        if p.x.len() != dim || p.next.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.x.len().max(p.next.len()),
            });
        }
        if !(p.dt > 0.0 && p.dt.is_finite()) || p.x.iter().chain(&p.next).any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "training pairs must be finite with positive gaps".into(),
            ));
        }
    }
    Ok(dim)
}

/// Trains from a freshly initialized network.
pub fn train(pairs: &[Pair], config: &TrainConfig) -> Result<TrainedModel> {
    let dim = check_pairs(pairs)?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = MlpParams::glorot(
        &config.model_kind.layer_dims(dim),
        config.model_kind.with_bias(),
        &mut rng,
    )?;
    train_from(pairs, config, params, &mut rng)
}

/// Trains starting from `init`. `rng` drives minibatch shuffling.
pub fn train_from(
    pairs: &[Pair],
    config: &TrainConfig,
    init: MlpParams,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedModel> {
    let dim = check_pairs(pairs)?;
    config.validate()?;
    init.validate()?;
    if init.input_dim() != dim || init.output_dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: init.input_dim(),
        });
    }
    let stats = gap_stats(pairs.iter().map(|p| p.dt)).expect("non-empty pairs");
    let scheme = config.scheme;

    let mut params = init;
    let mut flat = params.to_flat();
    let n_weights: usize = params.weights.iter().map(Vec::len).sum();
    let mask: Vec<bool> = (0..flat.len())
        .map(|i| i < n_weights || params.with_bias)
        .collect();
    let mut adam = Adam::new(config, flat.len());

    let full_batch = config.batch_size == 0 || config.batch_size >= pairs.len();
    let all: Vec<&Pair> = pairs.iter().collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, params.clone());
    let mut diverged = false;

    for _ in 0..config.epochs {
        let step_result: Result<()> = (|| {
            if full_batch {
                let g = batch_loss_grad(&params, scheme, &all)?;
                record(&mut history, &mut best, g.loss, &params)?;
                adam.step(&mut flat, &g.to_flat(), &mask);
            } else {
                let loss = dataset_loss(&params, scheme, pairs)?;
                record(&mut history, &mut best, loss, &params)?;
                order.shuffle(rng);
                for chunk in order.chunks(config.batch_size) {
                    let batch: Vec<&Pair> = chunk.iter().map(|&i| &pairs[i]).collect();
                    let g = batch_loss_grad(&params, scheme, &batch)?;
                    if !g.is_finite() {
                        return Err(Error::Divergence { step: 0, stage: 0 });
                    }
                    adam.step(&mut flat, &g.to_flat(), &mask);
                    params.set_flat(&flat)?;
                }
            }
            params.set_flat(&flat)?;
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: 0, stage: 0 });
            }
            Ok(())
        })();
        match step_result {
            Ok(()) => {}
            Err(Error::Divergence { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    if !diverged {
        match dataset_loss(&params, scheme, pairs) {
            Ok(l) if l.is_finite() && l < best.0 => best = (l, params.clone()),
            Ok(l) if !l.is_finite() => diverged = true,
            Ok(_) => {}
            Err(Error::Divergence { .. }) => diverged = true,
            Err(e) => return Err(e),
        }
    }
    if !best.0.is_finite() {
        // diverged on the very first evaluation
        diverged = true;
    }

    Ok(TrainedModel {
        params: best.1,
        model_kind: config.model_kind,
        scheme_used: scheme,
        train_dt_stats: GapStats {
            mean: stats.0,
            min: stats.1,
            max: stats.2,
        },
        final_loss: best.0,
        loss_history: history,
        seed: config.seed,
        diverged,
    })
}

fn record(
    history: &mut Vec<f64>,
    best: &mut (f64, MlpParams),
    loss: f64,
    params: &MlpParams,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, stage: 0 });
    }
    history.push(loss);
    if loss < best.0 {
        *best = (loss, params.clone());
    }
    Ok(())
}

/// Checkpoint file layout: weights as row-major flat arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_kind: ModelKind,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub scheme: SchemeKind,
    pub train_dt_stats: GapStats,
    pub seed: u64,
    pub final_loss: f64,
    #[serde(default)]
    pub loss_history: Vec<f64>,
    #[serde(default)]
    pub diverged: bool,
}

impl From<&TrainedModel> for Checkpoint {
    fn from(m: &TrainedModel) -> Self {
        Self {
            model_kind: m.model_kind,
            layer_dims: m.params.layer_dims.clone(),
            weights: m.params.weights.clone(),
            biases: m.params.biases.clone(),
            scheme: m.scheme_used,
            train_dt_stats: m.train_dt_stats,
            seed: m.seed,
            final_loss: m.final_loss,
            loss_history: m.loss_history.clone(),
            diverged: m.diverged,
        }
    }
}

impl TryFrom<Checkpoint> for TrainedModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let params = MlpParams {
            layer_dims: c.layer_dims,
            weights: c.weights,
            biases: c.biases,
            with_bias: c.model_kind.with_bias(),
        };
        params.validate()?;
        Ok(Self {
            params,
            model_kind: c.model_kind,
            scheme_used: c.scheme,
            train_dt_stats: c.train_dt_stats,
            final_loss: c.final_loss,
            loss_history: c.loss_history,
            seed: c.seed,
            diverged: c.diverged,
        })
    }
}

impl VectorField for TrainedModel {
    fn dim(&self) -> usize {
        self.params.dim()
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.params.eval_into(x, out)
    }
}
