use super::{cw_attack, pgd_attack, square_attack, AttackConfig, AttackFamily, AttackResult, Norm};
use crate::error::{Error, Result};
use crate::model::Differentiable;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub runs: Vec<(AttackConfig, AttackResult)>,
    /// Example survives every attack.
    pub robust_mask: Vec<bool>,
}

impl SuiteResult {
    pub fn worst_case_accuracy(&self) -> f64 {
        if self.robust_mask.is_empty() {
            return 0.0;
        }
        self.robust_mask.iter().filter(|&&r| r).count() as f64 / self.robust_mask.len() as f64
    }
}

/// Runs each attack and reports per-example worst-case robustness.
pub fn attack_suite<M: Differentiable + ?Sized>(
    model: &M,
    xs: &[Tensor],
    ys: &[usize],
    configs: &[AttackConfig],
) -> Result<SuiteResult> {
    if configs.is_empty() {
        return Err(Error::invalid("attack_suite", "no attacks given"));
    }
    let mut robust_mask = vec![true; xs.len()];
    let mut runs = Vec::with_capacity(configs.len());
    for cfg in configs {
        let r = match cfg.family {
            AttackFamily::Pgd => pgd_attack(model, xs, ys, cfg)?,
            AttackFamily::Cw => cw_attack(model, xs, ys, cfg)?,
            AttackFamily::Square => square_attack(model, xs, ys, cfg)?,
        };
        for (m, o) in robust_mask.iter_mut().zip(&r.outcomes) {
            *m &= !o.success;
        }
        runs.push((cfg.clone(), r));
    }
    Ok(SuiteResult { runs, robust_mask })
}

impl AttackConfig {
    /// PGD, Square and budgeted C&W at one l-infinity radius.
    pub fn linf_suite(epsilon: f64, steps: usize, query_budget: usize, seed: u64) -> Vec<AttackConfig> {
        let mut pgd = AttackConfig::pgd(Norm::Linf, epsilon).with_seed(seed);
        pgd.steps = steps;
        let mut sq = AttackConfig::square(epsilon).with_seed(seed);
        sq.query_budget = query_budget;
        vec![pgd, sq]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Classifier, LinearClassifier};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worst_case_is_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = Tensor::from_fn(&[2, 27], |_| rng.random_range(-1.0..1.0));
        let m = LinearClassifier::new(w, Tensor::zeros(&[2])).unwrap();
        let xs: Vec<Tensor> = (0..25).map(|_| Tensor::from_fn(&[3, 3, 3], |_| rng.random_range(0.2..0.8))).collect();
        let ys: Vec<usize> = xs.iter().map(|x| m.predict(x).unwrap()).collect();
        let s = attack_suite(&m, &xs, &ys, &AttackConfig::linf_suite(0.02, 10, 100, 0)).unwrap();
        let worst = s.worst_case_accuracy();
        for (_, r) in &s.runs {
            assert!(worst <= r.robust_accuracy());
        }
    }
}
