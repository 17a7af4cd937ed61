//! Training loops: EP for the energy model, backprop and PGD adversarial
//! training for the feedforward baseline.
//!
//! All three share one SGD-with-momentum loop. Per-example estimates are
//! computed in parallel and summed in dataset order, so a run is
//! bit-reproducible for a given seed regardless of thread count.

pub mod bp;
pub mod ep;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackConfig, Norm};
use crate::bench::dataset::{augment, evaluate, Augment, Dataset};
use crate::energy::{cross_entropy, ModelSpec, Params};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, Normalizer};
use crate::tensor::{argmax, Tensor};

pub use ep::UpdateRule;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_4721;
const ATTACK_STREAM: u64 = 0x4144_5631;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvTraining {
    pub norm: Norm,
    pub epsilon: f64,
    /// PGD steps per minibatch; the step size is `2.5 * epsilon / steps`.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// One rate per layer (weight and bias share it), readout last.
    pub lrs: Vec<f64>,
    pub beta: f64,
    pub momentum: f64,
    pub update_rule: UpdateRule,
    pub seed: u64,
    pub init_gain: f64,
    /// Normalise inputs with per-channel statistics of the training split.
    pub normalize: bool,
    pub augment: Augment,
    pub adversarial: Option<AdvTraining>,
}

impl TrainConfig {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lrs: vec![0.05; spec.num_layers() + 1],
            beta: 0.5,
            momentum: 0.9,
            update_rule: UpdateRule::Symmetric,
            seed: 0,
            init_gain: 1.0,
            normalize: true,
            augment: Augment::default(),
            adversarial: None,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let groups = spec.num_layers() + 1;
        if self.lrs.len() != groups {
            return Err(Error::shape("TrainConfig", "learning rates", groups, self.lrs.len()));
        }
        if self.lrs.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(Error::invalid("TrainConfig", "learning rates must be finite and >= 0"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("TrainConfig", "beta must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("TrainConfig", "momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("TrainConfig", "batch_size must be >= 1"));
        }
        if let Some(a) = &self.adversarial {
            if !(a.epsilon >= 0.0) || a.steps == 0 {
                return Err(Error::invalid("TrainConfig", "adversarial block needs epsilon >= 0 and steps >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the pre-update predictions made during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

pub fn train_ep(train: &Dataset, val: Option<&Dataset>, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(Model, History)> {
    run(ModelKind::Ep, train, val, spec, cfg)
}

pub fn train_bp(train: &Dataset, val: Option<&Dataset>, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(Model, History)> {
    run(ModelKind::Bp, train, val, spec, cfg)
}

/// Backprop on PGD adversarial examples crafted against the current
/// parameters. Requires `cfg.adversarial`.
pub fn train_adv(train: &Dataset, val: Option<&Dataset>, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(Model, History)> {
    if cfg.adversarial.is_none() {
        return Err(Error::invalid("train_adv", "adversarial block missing from the config"));
    }
    run(ModelKind::Adv, train, val, spec, cfg)
}

pub fn train(kind: ModelKind, train: &Dataset, val: Option<&Dataset>, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(Model, History)> {
    match kind {
        ModelKind::Ep => train_ep(train, val, spec, cfg),
        ModelKind::Bp => train_bp(train, val, spec, cfg),
        ModelKind::Adv => train_adv(train, val, spec, cfg),
    }
}

/// One example's contribution: a descent direction (`-grad` for backprop,
/// the EP estimate otherwise), its loss and whether it was classified right.
struct Sample {
    direction: Params,
    loss: f64,
    correct: bool,
}

fn sample(kind: ModelKind, spec: &ModelSpec, params: &Params, cfg: &TrainConfig, x: &Tensor, y: usize) -> Result<Sample> {
    match kind {
        ModelKind::Ep => {
            let step = ep::ep_update(spec, params, x, y, cfg.update_rule, cfg.beta)?;
            Ok(Sample {
                direction: step.estimate,
                loss: step.loss,
                correct: step.prediction == y,
            })
        }
        ModelKind::Bp | ModelKind::Adv => {
            let trace = bp::forward(spec, params, x)?;
            let (loss, dz) = cross_entropy(trace.logits.data(), y);
            let (g, _) = bp::backward(spec, params, &trace, &dz)?;
            Ok(Sample {
                direction: g.scale(-1.0),
                loss,
                correct: argmax(trace.logits.data()) == y,
            })
        }
    }
}

fn run(kind: ModelKind, train: &Dataset, val: Option<&Dataset>, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(Model, History)> {
    spec.validate()?;
    cfg.validate(spec)?;
    if train.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params::init(spec, &mut init_rng, cfg.init_gain)?;
    let norm = if cfg.normalize {
        train.normalizer()
    } else {
        Normalizer::identity(spec.input_shape[0])
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_STREAM);
    let mut velocity = Params::zeros(spec)?;
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs: Vec<Tensor> = idx.iter().map(|&i| train.images[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            if !cfg.augment.is_identity() {
                xs = augment(&xs, cfg.augment, &mut aug_rng);
            }
            if kind == ModelKind::Adv {
                xs = adversarial_batch(spec, &params, &norm, cfg, &xs, &ys, epoch, batch)?;
            }
            let samples = xs
                .par_iter()
                .zip(ys.par_iter())
                .map(|(x, &y)| sample(kind, spec, &params, cfg, &norm.apply(x), y))
                .collect::<Result<Vec<_>>>()?;
            let mut direction = Params::zeros(spec)?;
            for s in &samples {
                direction.axpy(1.0, &s.direction);
                loss_sum += s.loss;
                hits += s.correct as usize;
            }
            direction = direction.scale(1.0 / samples.len() as f64);
            velocity = velocity.scale(cfg.momentum).add(&direction);
            for ((p, v), &lr) in params.groups_mut().zip(velocity.groups()).zip(&cfg.lrs) {
                if lr != 0.0 {
                    p.weight.axpy(lr, &v.weight);
                    p.bias.axpy(lr, &v.bias);
                }
            }
            if let Some(tensor) = params.first_non_finite() {
                return Err(Error::Divergence { epoch, batch, tensor });
            }
        }
        let val_accuracy = match val {
            Some(v) => Some(evaluate(&Model::new(kind, spec.clone(), params.clone(), norm.clone())?, v, 256)?),
            None => None,
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            val_accuracy,
        });
    }
    Ok((Model::new(kind, spec.clone(), params, norm)?, history))
}

#[allow(clippy::too_many_arguments)]
fn adversarial_batch(
    spec: &ModelSpec,
    params: &Params,
    norm: &Normalizer,
    cfg: &TrainConfig,
    xs: &[Tensor],
    ys: &[usize],
    epoch: usize,
    batch: usize,
) -> Result<Vec<Tensor>> {
    let adv = cfg.adversarial.as_ref().expect("checked by train_adv");
    if adv.epsilon == 0.0 {
        return Ok(xs.to_vec());
    }
    let model = Model::new(ModelKind::Bp, spec.clone(), params.clone(), norm.clone())?;
    let mut attack = AttackConfig::pgd(adv.norm, adv.epsilon);
    attack.steps = adv.steps;
    attack.step_size = Some(2.5 * adv.epsilon / adv.steps as f64);
    attack.seed = cfg.seed ^ ATTACK_STREAM ^ ((epoch as u64) << 32 | batch as u64);
    Ok(pgd_attack(&model, xs, ys, &attack)?.adversarial)
}
