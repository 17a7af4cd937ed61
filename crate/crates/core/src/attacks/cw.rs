use rayon::prelude::*;

use super::{check_batch, margin, project, AttackConfig, AttackResult, ExampleOutcome, Norm};
use crate::energy::cross_entropy;
use crate::error::Result;
use crate::model::Differentiable;
use crate::tensor::{argmax, Tensor};

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Carlini-Wagner l2 attack with a fixed constant `c`.
///
/// Minimises `||x' - x||^2 + c * max(z_y - max_{j != y} z_j, -kappa)` over
/// `x' = (tanh(w) + 1) / 2` with Adam, keeping the smallest successful
/// iterate. With a finite `epsilon` the returned point is projected onto the
/// l2 ball and success is re-evaluated there.
pub fn cw_attack<M: Differentiable + ?Sized>(
    model: &M,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_batch(xs, ys)?;
    let runs: Vec<(Tensor, ExampleOutcome)> = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x0, &y)| run_one(model, x0, y, cfg))
        .collect::<Result<_>>()?;
    let (adversarial, outcomes) = runs.into_iter().unzip();
    Ok(AttackResult { adversarial, outcomes })
}

fn run_one<M: Differentiable + ?Sized>(model: &M, x0: &Tensor, y: usize, cfg: &AttackConfig) -> Result<(Tensor, ExampleOutcome)> {
    let c = cfg.cw_constant;
    let kappa = cfg.cw_kappa;
    let mut w = x0.map(|v| (2.0 * v - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6).atanh());
    let mut m = Tensor::zeros(x0.shape());
    let mut v = Tensor::zeros(x0.shape());
    let mut best: Option<(f64, Tensor)> = None;
    let mut queries = 0;
    let objective = |z: &[f64]| {
        let (mg, other) = margin(z, y);
        if mg > -kappa {
            let mut dz = vec![0.0; z.len()];
            dz[y] = c;
            dz[other] = -c;
            (c * mg, dz)
        } else {
            (-c * kappa, vec![0.0; z.len()])
        }
    };
    let mut x = w.map(|t| (t.tanh() + 1.0) / 2.0);
    for step in 1..=cfg.steps {
        let (_, gz, logits) = model.value_and_grad(&x, &objective)?;
        queries += 1;
        let delta = x.sub(x0);
        if argmax(logits.data()) != y {
            let n = delta.norm_l2();
            if best.as_ref().is_none_or(|(b, _)| n < *b) {
                best = Some((n, x.clone()));
            }
        }
        // d/dx' of the total objective, chained through x' = (tanh(w) + 1) / 2
        let gx = delta.scale(2.0).add(&gz);
        let gw = gx.zip_map(&w, |g, t| g * 0.5 * (1.0 - t.tanh().powi(2)));
        m = m.zip_map(&gw, |a, g| ADAM_B1 * a + (1.0 - ADAM_B1) * g);
        v = v.zip_map(&gw, |a, g| ADAM_B2 * a + (1.0 - ADAM_B2) * g * g);
        let bc1 = 1.0 - ADAM_B1.powi(step as i32);
        let bc2 = 1.0 - ADAM_B2.powi(step as i32);
        let upd = m.zip_map(&v, |a, b| (a / bc1) / ((b / bc2).sqrt() + ADAM_EPS));
        w.axpy(-cfg.cw_lr, &upd);
        x = w.map(|t| (t.tanh() + 1.0) / 2.0);
    }
    let logits = model.logits(&x)?;
    queries += 1;
    if argmax(logits.data()) != y {
        let n = x.sub(x0).norm_l2();
        if best.as_ref().is_none_or(|(b, _)| n < *b) {
            best = Some((n, x.clone()));
        }
    }
    let mut out = best.map(|(_, b)| b).unwrap_or(x);
    let mut out_logits = model.logits(&out)?;
    if cfg.epsilon.is_finite() {
        out = project(x0, &out, Norm::L2, cfg.epsilon);
        out_logits = model.logits(&out)?;
    }
    let outcome = ExampleOutcome {
        success: argmax(out_logits.data()) != y,
        loss: cross_entropy(out_logits.data(), y).0,
        queries,
        norm: out.sub(x0).norm_l2(),
    };
    Ok((out, outcome))
}
