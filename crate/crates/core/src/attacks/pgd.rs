use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_batch, example_seed, project, sample_ball, steepest_ascent, AttackConfig, AttackResult, ExampleOutcome};
use crate::energy::cross_entropy;
use crate::error::Result;
use crate::model::Differentiable;
use crate::tensor::{argmax, Tensor};

/// Projected gradient ascent on the cross-entropy:
/// `x <- Proj(x + alpha * steepest_ascent(grad))`, optionally from a uniform
/// random start inside the ball.
pub fn pgd_attack<M: Differentiable + ?Sized>(
    model: &M,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_batch(xs, ys)?;
    let alpha = cfg.alpha();
    let runs: Vec<(Tensor, ExampleOutcome)> = xs
        .par_iter()
        .zip(ys.par_iter())
        .enumerate()
        .map(|(i, (x0, &y))| {
            let mut rng = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, i));
            let mut x = x0.clone();
            if cfg.random_start {
                let start = x0.add(&sample_ball(&mut rng, x0.shape(), cfg.norm, cfg.epsilon));
                x = project(x0, &start, cfg.norm, cfg.epsilon);
            }
            for _ in 0..cfg.steps {
                let (_, g) = model.loss_and_grad(&x, y)?;
                let mut moved = x.clone();
                moved.axpy(alpha, &steepest_ascent(&g, cfg.norm));
                x = project(x0, &moved, cfg.norm, cfg.epsilon);
            }
            let logits = model.logits(&x)?;
            let outcome = ExampleOutcome {
                success: argmax(logits.data()) != y,
                loss: cross_entropy(logits.data(), y).0,
                queries: cfg.steps + 1,
                norm: cfg.norm.measure(&x.sub(x0)),
            };
            Ok((x, outcome))
        })
        .collect::<Result<_>>()?;
    let (adversarial, outcomes) = runs.into_iter().unzip();
    Ok(AttackResult { adversarial, outcomes })
}
