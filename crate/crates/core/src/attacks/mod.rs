//! Adversarial attacks on images in `[0, 1]`.
//!
//! White-box attacks ([`pgd_attack`], [`cw_attack`]) need a
//! [`Differentiable`](crate::model::Differentiable) model. The Square attack
//! only takes a [`Classifier`](crate::model::Classifier), so it has no path to
//! gradients.

mod cw;
mod pgd;
mod square;
mod suite;

pub use cw::cw_attack;
pub use pgd::pgd_attack;
pub use square::{random_noise_attack, square_attack, square_p_schedule};
pub use suite::{attack_suite, SuiteResult};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Norm::L2),
            "linf" => Ok(Norm::Linf),
            _ => Err(Error::invalid("Norm", format!("unknown norm {s:?}; use l2 or linf"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    pub fn measure(&self, t: &Tensor) -> f64 {
        match self {
            Norm::L2 => t.norm_l2(),
            Norm::Linf => t.norm_linf(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Pgd,
    Cw,
    Square,
}

impl AttackFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(Self::Pgd),
            "cw" => Ok(Self::Cw),
            "square" => Ok(Self::Square),
            _ => Err(Error::invalid("AttackFamily", format!("unknown attack {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pgd => "pgd",
            Self::Cw => "cw",
            Self::Square => "square",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub norm: Norm,
    /// Perturbation budget in input units. For C&W an infinite budget means
    /// unconstrained; a finite one projects the result onto the ball.
    pub epsilon: f64,
    pub steps: usize,
    /// PGD step size; `None` means `epsilon / 8`.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub cw_constant: f64,
    pub cw_lr: f64,
    pub cw_kappa: f64,
    pub query_budget: usize,
    /// Initial patch fraction of the Square attack.
    pub p_init: f64,
    /// Free-phase step whose prediction is attacked; `None` uses the model's own setting.
    pub timestep: Option<usize>,
    pub seed: u64,
}

impl AttackConfig {
    pub fn pgd(norm: Norm, epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Pgd,
            norm,
            epsilon,
            steps: 20,
            step_size: None,
            random_start: true,
            cw_constant: 0.1,
            cw_lr: 0.01,
            cw_kappa: 0.0,
            query_budget: 5000,
            p_init: 0.8,
            timestep: None,
            seed: 0,
        }
    }

    pub fn cw(constant: f64) -> Self {
        Self {
            family: AttackFamily::Cw,
            norm: Norm::L2,
            epsilon: f64::INFINITY,
            steps: 100,
            cw_constant: constant,
            ..Self::pgd(Norm::L2, f64::INFINITY)
        }
    }

    pub fn square(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Square,
            norm: Norm::Linf,
            ..Self::pgd(Norm::Linf, epsilon)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The step size PGD actually uses.
    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 8.0)
    }

    /// Attack strength reported in results: `c` for C&W, epsilon otherwise.
    pub fn strength(&self) -> f64 {
        match self.family {
            AttackFamily::Cw => self.cw_constant,
            _ => self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("AttackConfig", "epsilon must be >= 0"));
        }
        if self.steps == 0 && self.family != AttackFamily::Square {
            return Err(Error::invalid("AttackConfig", "steps must be >= 1"));
        }
        if self.family == AttackFamily::Pgd && !(self.alpha() > 0.0) && self.epsilon > 0.0 {
            return Err(Error::invalid("AttackConfig", "PGD step size must be > 0"));
        }
        if self.family == AttackFamily::Square && self.norm != Norm::Linf {
            return Err(Error::invalid("AttackConfig", "the Square attack is implemented for linf only"));
        }
        if self.family == AttackFamily::Cw && self.norm != Norm::L2 {
            return Err(Error::invalid("AttackConfig", "C&W is an l2 attack"));
        }
        Ok(())
    }
}

/// Per-example attack outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    /// The adversarial input is misclassified.
    pub success: bool,
    pub loss: f64,
    pub queries: usize,
    /// Perturbation size under the configured norm.
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Vec<Tensor>,
    pub outcomes: Vec<ExampleOutcome>,
}

impl AttackResult {
    /// Fraction of examples still classified correctly.
    pub fn robust_accuracy(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| !o.success).count() as f64 / self.outcomes.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        1.0 - self.robust_accuracy()
    }

    pub fn robust_mask(&self) -> Vec<bool> {
        self.outcomes.iter().map(|o| !o.success).collect()
    }
}

/// Projects `x` onto the `norm` ball of radius `epsilon` around `x0`, then
/// onto the `[0, 1]` box.
pub fn project(x0: &Tensor, x: &Tensor, norm: Norm, epsilon: f64) -> Tensor {
    let out = match norm {
        Norm::Linf => x0.zip_map(x, |a, b| b.clamp(a - epsilon, a + epsilon)),
        Norm::L2 => {
            let delta = x.sub(x0);
            let n = delta.norm_l2();
            if n > epsilon {
                let k = if n > 0.0 { epsilon / n } else { 0.0 };
                x0.add(&delta.scale(k))
            } else {
                x.clone()
            }
        }
    };
    out.map(|v| v.clamp(0.0, 1.0))
}

/// `argmax_{||v|| <= 1} v . g` for the given norm.
pub fn steepest_ascent(g: &Tensor, norm: Norm) -> Tensor {
    match norm {
        Norm::Linf => g.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Norm::L2 => {
            let n = g.norm_l2();
            if n == 0.0 {
                Tensor::zeros(g.shape())
            } else {
                g.scale(1.0 / n)
            }
        }
    }
}

/// Uniform sample from the `norm` ball of radius `epsilon`: per-coordinate
/// uniform for linf, Gaussian direction times `epsilon * u^(1/d)` for l2.
pub fn sample_ball(rng: &mut impl Rng, shape: &[usize], norm: Norm, epsilon: f64) -> Tensor {
    match norm {
        Norm::Linf => Tensor::from_fn(shape, |_| {
            if epsilon > 0.0 {
                rng.random_range(-epsilon..=epsilon)
            } else {
                0.0
            }
        }),
        Norm::L2 => {
            let dir = Tensor::from_fn(shape, |_| StandardNormal.sample(rng));
            let d = dir.len() as f64;
            let u: f64 = rng.random();
            let r = epsilon * u.powf(1.0 / d);
            let n = dir.norm_l2();
            if n == 0.0 {
                Tensor::zeros(shape)
            } else {
                dir.scale(r / n)
            }
        }
    }
}

/// `z_y - max_{j != y} z_j`; negative means misclassified.
pub fn margin(logits: &[f64], label: usize) -> (f64, usize) {
    let mut other = usize::MAX;
    for (j, &z) in logits.iter().enumerate() {
        if j != label && (other == usize::MAX || z > logits[other]) {
            other = j;
        }
    }
    if other == usize::MAX {
        return (f64::INFINITY, label);
    }
    (logits[label] - logits[other], other)
}

fn check_batch(xs: &[Tensor], ys: &[usize]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::shape("attack", "labels", xs.len(), ys.len()));
    }
    Ok(())
}

/// Per-example seed derived from the attack seed and the example index.
pub(crate) fn example_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_is_idempotent_inside() {
        let x0 = Tensor::from_vec(vec![0.5, 0.5, 0.5]);
        let x = Tensor::from_vec(vec![0.55, 0.48, 0.5]);
        assert_eq!(project(&x0, &x, Norm::Linf, 0.1), x);
        assert_eq!(project(&x0, &x, Norm::L2, 0.1), x);
    }

    #[test]
    fn zero_budget_returns_origin() {
        let x0 = Tensor::from_vec(vec![0.2, 0.9]);
        let x = Tensor::from_vec(vec![1.3, -0.4]);
        assert_eq!(project(&x0, &x, Norm::Linf, 0.0), x0);
        assert_eq!(project(&x0, &x, Norm::L2, 0.0), x0);
    }

    #[test]
    fn projection_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x0 = Tensor::from_fn(&[6], |_| rng.random_range(0.3..0.7));
            let x = Tensor::from_fn(&[6], |_| rng.random_range(0.0..1.0));
            let eps = rng.random_range(0.01..0.3);
            // linf: per-coordinate nearest point of the interval
            let p = project(&x0, &x, Norm::Linf, eps);
            for i in 0..6 {
                let (a, b) = (x0.data()[i], x.data()[i]);
                let e = if b > a + eps { a + eps } else if b < a - eps { a - eps } else { b };
                assert!((p.data()[i] - e.clamp(0.0, 1.0)).abs() < 1e-15);
            }
            // l2: radial shrink along x - x0 (ball stays inside the box here)
            let p = project(&x0, &x, Norm::L2, eps);
            let d = x.sub(&x0);
            let expect = if d.norm_l2() <= eps { x.clone() } else { x0.add(&d.scale(eps / d.norm_l2())) };
            assert!(p.max_abs_diff(&expect) < 1e-12);
            assert!(p.sub(&x0).norm_l2() <= eps + 1e-12);
        }
    }

    #[test]
    fn steepest_ascent_cases() {
        assert_eq!(steepest_ascent(&Tensor::zeros(&[3]), Norm::L2), Tensor::zeros(&[3]));
        assert_eq!(steepest_ascent(&Tensor::zeros(&[3]), Norm::Linf), Tensor::zeros(&[3]));
        let g = Tensor::from_vec(vec![0.1, -2.0]);
        assert_eq!(steepest_ascent(&g, Norm::Linf).data(), &[1.0, -1.0]);
    }

    #[test]
    fn steepest_ascent_beats_random_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Tensor::from_fn(&[10], |_| rng.random_range(-1.0..1.0));
        for norm in [Norm::L2, Norm::Linf] {
            let best = steepest_ascent(&g, norm).dot(&g);
            for _ in 0..1000 {
                let v = Tensor::from_fn(&[10], |_| rng.random_range(-1.0..1.0));
                let v = v.scale(1.0 / norm.measure(&v));
                assert!(v.dot(&g) <= best + 1e-12);
            }
        }
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for norm in [Norm::L2, Norm::Linf] {
            for _ in 0..100 {
                let s = sample_ball(&mut rng, &[3, 4, 4], norm, 0.2);
                assert!(norm.measure(&s) <= 0.2 + 1e-12);
            }
            assert_eq!(sample_ball(&mut rng, &[4], norm, 0.0), Tensor::zeros(&[4]));
        }
    }

    #[test]
    fn l2_ball_radius_distribution() {
        // P(|u| <= r eps) = r^d for a uniform d-ball
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let n = 20000;
        let inside = (0..n)
            .filter(|_| sample_ball(&mut rng, &[d], Norm::L2, 1.0).norm_l2() <= 0.5)
            .count() as f64
            / n as f64;
        assert!((inside - 0.125).abs() < 0.01, "{inside}");
    }

    #[test]
    fn margin_and_runner_up() {
        assert_eq!(margin(&[1.0, 3.0, 2.0], 1), (1.0, 2));
        assert_eq!(margin(&[1.0, 3.0, 2.0], 0), (-2.0, 1));
    }
}
