//! Monte-Carlo estimate of the uncertainty exponent: the slope `alpha` of
//! `log D(eps)` against `log eps`, where `D(eps)` is the probability that a
//! uniform point of the eps-ball around `x` changes the predicted class.
//!
//! Ball samples are not clipped to the pixel box, so the estimate describes
//! the classifier's geometry around `x` rather than the image domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{sample_ball, Norm};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementCurve {
    pub norm: Norm,
    pub eps: Vec<f64>,
    pub samples_per_example: usize,
    /// `counts[e][i]`: disagreeing samples of example `i` at `eps[e]`.
    pub counts: Vec<Vec<usize>>,
}

impl DisagreementCurve {
    pub fn rates(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|c| c.iter().sum::<usize>() as f64 / (c.len() * self.samples_per_example).max(1) as f64)
            .collect()
    }

    pub fn trials(&self) -> usize {
        self.counts.first().map_or(0, |c| c.len() * self.samples_per_example)
    }

    /// 95% Wilson score interval per cell.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        let n = self.trials() as f64;
        self.rates().into_iter().map(|p| wilson(p, n, 1.96)).collect()
    }
}

fn wilson(p: f64, n: f64, z: f64) -> (f64, f64) {
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let d = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / d;
    let half = z * ((p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt()) / d;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Disagreement counts on an increasing grid of positive radii. The model's
/// own timestep setting decides which free-phase step is read out.
pub fn disagreement_curve<C: Classifier + ?Sized>(
    model: &C,
    xs: &[Tensor],
    norm: Norm,
    eps_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<DisagreementCurve> {
    if eps_grid.is_empty() || eps_grid.iter().any(|&e| !(e > 0.0)) || eps_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("disagreement_curve", "eps grid must be positive and strictly increasing"));
    }
    if samples == 0 || xs.is_empty() {
        return Err(Error::invalid("disagreement_curve", "need at least one example and one sample"));
    }
    let base = xs.par_iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
    let counts = eps_grid
        .iter()
        .enumerate()
        .map(|(e, &eps)| {
            xs.par_iter()
                .zip(&base)
                .enumerate()
                .map(|(i, (x, &y0))| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((e as u64) << 40) ^ (i as u64).wrapping_mul(0x9E37_79B9));
                    let mut flips = 0;
                    for _ in 0..samples {
                        let xp = x.add(&sample_ball(&mut rng, x.shape(), norm, eps));
                        flips += (model.predict(&xp)? != y0) as usize;
                    }
                    Ok(flips)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DisagreementCurve {
        norm,
        eps: eps_grid.to_vec(),
        samples_per_example: samples,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub alpha: f64,
    /// Fitted `log D` at `eps = 1`.
    pub intercept: f64,
    /// Smallest and largest radius used.
    pub fit_range: (f64, f64),
    pub cells: usize,
    /// Residual sum of squares in log space.
    pub residual: f64,
}

/// Least squares of `log rate` on `log eps` over cells with `0 < rate < 1`.
pub fn fit_power_law(eps: &[f64], rates: &[f64]) -> Result<ExponentFit> {
    if eps.len() != rates.len() {
        return Err(Error::shape("fit_exponent", "rates", eps.len(), rates.len()));
    }
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(rates)
        .filter(|(_, &r)| r > 0.0 && r < 1.0)
        .map(|(&e, &r)| (e.ln(), r.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::TooFewInteriorCells { found: pts.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let residual = pts.iter().map(|p| (p.1 - intercept - alpha * p.0).powi(2)).sum();
    let used: Vec<f64> = eps.iter().zip(rates).filter(|(_, &r)| r > 0.0 && r < 1.0).map(|(&e, _)| e).collect();
    Ok(ExponentFit {
        alpha,
        intercept,
        fit_range: (used[0], *used.last().expect("3 cells")),
        cells: pts.len(),
        residual,
    })
}

pub fn fit_exponent(curve: &DisagreementCurve) -> Result<ExponentFit> {
    fit_power_law(&curve.eps, &curve.rates())
}

/// Percentile interval of `alpha` over bootstrap resamples of the examples.
/// Resamples whose fit fails are skipped; `None` if fewer than half succeed.
pub fn bootstrap_exponent(curve: &DisagreementCurve, resamples: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    let n = curve.counts.first()?.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alphas = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let rates: Vec<f64> = curve
            .counts
            .iter()
            .map(|c| pick.iter().map(|&i| c[i]).sum::<usize>() as f64 / (n * curve.samples_per_example) as f64)
            .collect();
        if let Ok(f) = fit_power_law(&curve.eps, &rates) {
            alphas.push(f.alpha);
        }
    }
    if alphas.len() * 2 < resamples.max(1) {
        return None;
    }
    alphas.sort_by(f64::total_cmp);
    let q = |p: f64| alphas[((p * (alphas.len() - 1) as f64).round() as usize).min(alphas.len() - 1)];
    Some((q((1.0 - level) / 2.0), q((1.0 + level) / 2.0)))
}
