use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_batch, example_seed, margin, AttackConfig, AttackResult, ExampleOutcome};
use crate::energy::cross_entropy;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

/// Patch fraction at iteration `it` of a run with `budget` iterations.
pub fn square_p_schedule(p_init: f64, it: usize, budget: usize) -> f64 {
    let it = if budget == 0 { 0 } else { (it as f64 / budget as f64 * 10000.0) as usize };
    let div = match it {
        0..=10 => 1.0,
        11..=50 => 2.0,
        51..=200 => 4.0,
        201..=500 => 8.0,
        501..=1000 => 16.0,
        1001..=2000 => 32.0,
        2001..=4000 => 64.0,
        4001..=6000 => 128.0,
        6001..=8000 => 256.0,
        _ => 512.0,
    };
    p_init / div
}

/// Counts the forward queries of one example's search.
struct Oracle<'a, C: ?Sized> {
    model: &'a C,
    y: usize,
    queries: usize,
}

impl<C: Classifier + ?Sized> Oracle<'_, C> {
    fn margin(&mut self, x: &Tensor) -> Result<(f64, Tensor)> {
        self.queries += 1;
        let z = self.model.logits(x)?;
        Ok((margin(z.data(), self.y).0, z))
    }
}

/// Score-based l-infinity Square attack: random square patches set to
/// `x0 +- epsilon` per channel, accepted on a strict margin decrease.
///
/// Stops at the first misclassification or after `query_budget` queries,
/// counting the initial clean query.
pub fn square_attack<C: Classifier + ?Sized>(
    model: &C,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_batch(xs, ys)?;
    if cfg.query_budget == 0 {
        return Err(Error::invalid("square_attack", "query budget must be >= 1"));
    }
    let runs: Vec<(Tensor, ExampleOutcome)> = xs
        .par_iter()
        .zip(ys.par_iter())
        .enumerate()
        .map(|(i, (x0, &y))| square_one(model, x0, y, cfg, example_seed(cfg.seed, i)))
        .collect::<Result<_>>()?;
    let (adversarial, outcomes) = runs.into_iter().unzip();
    Ok(AttackResult { adversarial, outcomes })
}

fn finish(x0: &Tensor, x: Tensor, m: f64, z: &Tensor, y: usize, queries: usize) -> (Tensor, ExampleOutcome) {
    let outcome = ExampleOutcome {
        success: m < 0.0,
        loss: cross_entropy(z.data(), y).0,
        queries,
        norm: x.sub(x0).norm_linf(),
    };
    (x, outcome)
}

fn square_one<C: Classifier + ?Sized>(
    model: &C,
    x0: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Tensor, ExampleOutcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut oracle = Oracle { model, y, queries: 0 };
    let eps = cfg.epsilon;
    let budget = cfg.query_budget;
    let (m0, z0) = oracle.margin(x0)?;
    if m0 < 0.0 || eps == 0.0 || budget == 1 {
        return Ok(finish(x0, x0.clone(), m0, &z0, y, oracle.queries));
    }
    let &[c, h, w] = x0.shape() else {
        return Err(Error::shape("square_attack", "input rank", 3, x0.shape().len()));
    };
    let lo = x0.map(|v| (v - eps).max(0.0));
    let hi = x0.map(|v| (v + eps).min(1.0));

    // vertical stripes of +-eps
    let mut best = x0.clone();
    for ch in 0..c {
        for col in 0..w {
            let s = if rng.random::<bool>() { eps } else { -eps };
            for row in 0..h {
                let k = (ch * h + row) * w + col;
                best.data_mut()[k] = (x0.data()[k] + s).clamp(lo.data()[k], hi.data()[k]);
            }
        }
    }
    let (mut best_m, mut best_z) = oracle.margin(&best)?;
    let mut it = 0;
    while best_m >= 0.0 && oracle.queries < budget && it < 16 * budget {
        let p = square_p_schedule(cfg.p_init, it, budget);
        it += 1;
        let side = ((p * (h * w) as f64).sqrt().round() as usize).clamp(1, h.saturating_sub(1).max(1));
        let r0 = rng.random_range(0..=h.saturating_sub(side));
        let c0 = rng.random_range(0..=w.saturating_sub(side));
        let mut cand = best.clone();
        let mut changed = false;
        for _ in 0..16 {
            for ch in 0..c {
                let s = if rng.random::<bool>() { eps } else { -eps };
                for row in r0..r0 + side {
                    for col in c0..(c0 + side).min(w) {
                        let k = (ch * h + row) * w + col;
                        cand.data_mut()[k] = (x0.data()[k] + s).clamp(lo.data()[k], hi.data()[k]);
                    }
                }
            }
            if cand.max_abs_diff(&best) > 1e-12 {
                changed = true;
                break;
            }
        }
        if !changed {
            continue;
        }
        let (m, z) = oracle.margin(&cand)?;
        if m < best_m {
            best = cand;
            best_m = m;
            best_z = z;
        }
    }
    Ok(finish(x0, best, best_m, &best_z, y, oracle.queries))
}

/// Baseline: up to `query_budget` random corners `x0 +- epsilon` of the
/// l-infinity ball; succeeds if any is misclassified.
pub fn random_noise_attack<C: Classifier + ?Sized>(
    model: &C,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_batch(xs, ys)?;
    let runs: Vec<(Tensor, ExampleOutcome)> = xs
        .par_iter()
        .zip(ys.par_iter())
        .enumerate()
        .map(|(i, (x0, &y))| {
            let mut rng = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, i));
            let mut oracle = Oracle { model, y, queries: 0 };
            let (m0, z0) = oracle.margin(x0)?;
            let mut best = (x0.clone(), m0, z0);
            while best.1 >= 0.0 && oracle.queries < cfg.query_budget.max(1) {
                let mut cand = x0.clone();
                for v in cand.data_mut() {
                    let s = if rng.random::<bool>() { cfg.epsilon } else { -cfg.epsilon };
                    *v = (*v + s).clamp(0.0, 1.0);
                }
                let (m, z) = oracle.margin(&cand)?;
                if m < best.1 {
                    best = (cand, m, z);
                }
            }
            let (x, m, z) = best;
            Ok(finish(x0, x, m, &z, y, oracle.queries))
        })
        .collect::<Result<_>>()?;
    let (adversarial, outcomes) = runs.into_iter().unzip();
    Ok(AttackResult { adversarial, outcomes })
}
