//! Equilibrium-propagation gradient estimators.
//!
//! All estimates point along `-dL/dtheta`: they are applied as
//! `theta += lr * estimate`.

use serde::{Deserialize, Serialize};

use crate::energy::{
    self, cross_entropy, free_phase, nudged_phase, readout, Layer, LayerKind, ModelSpec, NetworkState, Params,
};
use crate::error::{Error, Result};
use crate::tensor::{self, conv2d, conv2d_weight_grad, maxpool2, outer, unpool2, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    OneSided,
    Symmetric,
}

impl UpdateRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one_sided" => Ok(Self::OneSided),
            "symmetric" => Ok(Self::Symmetric),
            _ => Err(Error::invalid("UpdateRule", format!("unknown rule {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::OneSided => "one_sided",
            Self::Symmetric => "symmetric",
        }
    }
}

/// `dPhi/d(w_n, b_n)` for layer `n` (zero based). Reads only the layer's own
/// state and the state directly below it.
pub fn phi_grad_layer(spec: &ModelSpec, params: &Params, n: usize, lower: &Tensor, upper: &Tensor) -> Result<Layer> {
    let w = &params.layers[n].weight;
    match spec.layer(n) {
        LayerKind::Conv(c) => {
            let (_, route) = maxpool2(&conv2d(lower, w, &c)?)?;
            let routed = unpool2(upper, &route)?;
            let per = upper.len() / c.out_channels;
            Ok(Layer {
                weight: conv2d_weight_grad(lower, &routed, &c)?,
                bias: Tensor::from_vec(upper.data().chunks(per).map(|ch| ch.iter().sum()).collect()),
            })
        }
        LayerKind::Fc(_) => Ok(Layer {
            weight: outer(upper, &lower.flatten()),
            bias: upper.clone(),
        }),
    }
}

/// `dPhi/dtheta` at `state`; the readout entry is zero because the readout
/// is not part of the energy.
pub fn phi_grad_params(spec: &ModelSpec, params: &Params, x: &Tensor, state: &NetworkState) -> Result<Params> {
    if x.shape() != spec.input_shape {
        return Err(Error::shape("phi_grad_params", "input size", spec.input_dim(), x.len()));
    }
    let mut layers = Vec::with_capacity(spec.num_layers());
    for n in 0..spec.num_layers() {
        let lower = if n == 0 { x } else { &state.layers[n - 1] };
        layers.push(phi_grad_layer(spec, params, n, lower, &state.layers[n])?);
    }
    Ok(Params {
        layers,
        readout: Layer {
            weight: Tensor::zeros(params.readout.weight.shape()),
            bias: Tensor::zeros(params.readout.bias.shape()),
        },
    })
}

/// Outcome of one EP estimate on a single example.
#[derive(Debug, Clone)]
pub struct EpStep {
    /// Energy-layer estimate plus the readout's delta-rule update at the
    /// free fixed point.
    pub estimate: Params,
    /// Prediction and loss at the free fixed point.
    pub prediction: usize,
    pub loss: f64,
    pub free_steps: usize,
}

struct FreeFixedPoint {
    state: NetworkState,
    prediction: usize,
    loss: f64,
    steps: usize,
    readout_update: Layer,
}

fn settle(spec: &ModelSpec, params: &Params, x: &Tensor, y: usize) -> Result<FreeFixedPoint> {
    if y >= spec.classes {
        return Err(Error::invalid("ep_update", format!("label {y} out of range")));
    }
    let fp = free_phase(spec, params, x, spec.t_free, false)?;
    let logits = readout(params, &fp.state)?;
    let (loss, dz) = cross_entropy(logits.data(), y);
    let neg = Tensor::from_vec(dz).scale(-1.0);
    Ok(FreeFixedPoint {
        readout_update: Layer {
            weight: outer(&neg, &fp.state.top().flatten()),
            bias: neg,
        },
        prediction: tensor::argmax(logits.data()),
        loss,
        steps: fp.steps,
        state: fp.state,
    })
}

/// `(1/beta) (dPhi/dtheta(s^beta) - dPhi/dtheta(s*))`.
pub fn ep_update_one_sided(spec: &ModelSpec, params: &Params, x: &Tensor, y: usize, beta: f64) -> Result<EpStep> {
    if beta == 0.0 {
        return Err(Error::invalid("ep_update_one_sided", "beta must be nonzero"));
    }
    let free = settle(spec, params, x, y)?;
    let nudged = nudged_phase(spec, params, x, &free.state, y, beta)?;
    let g_free = phi_grad_params(spec, params, x, &free.state)?;
    let g_nudged = phi_grad_params(spec, params, x, &nudged)?;
    let mut estimate = g_nudged.sub(&g_free).scale(1.0 / beta);
    estimate.readout = free.readout_update;
    Ok(EpStep {
        estimate,
        prediction: free.prediction,
        loss: free.loss,
        free_steps: free.steps,
    })
}

/// `(1/(2|beta|)) (dPhi/dtheta(s^{beta}) - dPhi/dtheta(s^{-beta}))`.
///
/// Normalising by `|beta|` makes the estimate odd in `beta`: passing `-beta`
/// swaps the two nudged states and returns the exact negation.
pub fn ep_update_symmetric(spec: &ModelSpec, params: &Params, x: &Tensor, y: usize, beta: f64) -> Result<EpStep> {
    if beta == 0.0 {
        return Err(Error::invalid("ep_update_symmetric", "beta must be nonzero"));
    }
    let free = settle(spec, params, x, y)?;
    let plus = nudged_phase(spec, params, x, &free.state, y, beta)?;
    let minus = nudged_phase(spec, params, x, &free.state, y, -beta)?;
    let g_plus = phi_grad_params(spec, params, x, &plus)?;
    let g_minus = phi_grad_params(spec, params, x, &minus)?;
    let mut estimate = g_plus.sub(&g_minus).scale(1.0 / (2.0 * beta.abs()));
    estimate.readout = free.readout_update;
    Ok(EpStep {
        estimate,
        prediction: free.prediction,
        loss: free.loss,
        free_steps: free.steps,
    })
}

pub fn ep_update(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    y: usize,
    rule: UpdateRule,
    beta: f64,
) -> Result<EpStep> {
    match rule {
        UpdateRule::OneSided => ep_update_one_sided(spec, params, x, y, beta),
        UpdateRule::Symmetric => ep_update_symmetric(spec, params, x, y, beta),
    }
}

/// Cross-entropy of the readout at the free fixed point; the objective the EP
/// estimators approximate the gradient of.
pub fn fixed_point_loss(spec: &ModelSpec, params: &Params, x: &Tensor, y: usize) -> Result<f64> {
    let fp = energy::free_phase(spec, params, x, spec.t_free, false)?;
    Ok(cross_entropy(readout(params, &fp.state)?.data(), y).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::tests::{fc_spec, tiny_model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cosine(a: &Tensor, b: &Tensor) -> f64 {
        a.dot(b) / (a.norm_l2() * b.norm_l2())
    }

    /// Central finite differences of the fixed-point loss w.r.t. every energy
    /// parameter, negated to match the estimate's sign.
    fn fd_descent(spec: &ModelSpec, params: &Params, x: &Tensor, y: usize) -> Params {
        let h = 1e-6;
        let mut out = params.scale(0.0);
        let n = 2 * params.layers.len();
        for k in 0..n {
            for i in 0..params.tensors()[k].len() {
                let mut pp = params.clone();
                pp.tensors_mut()[k].data_mut()[i] += h;
                let mut pm = params.clone();
                pm.tensors_mut()[k].data_mut()[i] -= h;
                let d = (fixed_point_loss(spec, &pp, x, y).unwrap() - fixed_point_loss(spec, &pm, x, y).unwrap())
                    / (2.0 * h);
                out.tensors_mut()[k].data_mut()[i] = -d;
            }
        }
        out
    }

    #[test]
    fn zero_state_gives_zero_estimate() {
        let (spec, params, x) = tiny_model(0);
        let s = NetworkState::zeros(&spec).unwrap();
        let g = phi_grad_params(&spec, &params, &x, &s).unwrap();
        assert!(g.tensors().iter().all(|t| t.norm_linf() == 0.0));
    }

    #[test]
    fn fc_outer_product_by_hand() {
        let spec = fc_spec(&[1, 1], 1);
        let params = Params::zeros(&spec).unwrap();
        let x = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let s = NetworkState {
            layers: vec![Tensor::from_vec(vec![3.0])],
            pool_indices: vec![],
        };
        let g = phi_grad_params(&spec, &params, &x, &s).unwrap();
        assert_eq!(g.layers[0].weight.data(), &[6.0]);
        assert_eq!(g.layers[0].bias.data(), &[3.0]);
    }

    #[test]
    fn phi_grad_params_matches_finite_differences() {
        let (spec, params, x) = tiny_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let s = NetworkState {
            layers: spec
                .state_shapes()
                .unwrap()
                .iter()
                .map(|sh| Tensor::from_fn(sh, |_| rng.random_range(0.0..1.0)))
                .collect(),
            pool_indices: vec![],
        };
        let g = phi_grad_params(&spec, &params, &x, &s).unwrap();
        let h = 1e-6;
        for k in 0..2 * params.layers.len() {
            for i in 0..params.tensors()[k].len() {
                let mut pp = params.clone();
                pp.tensors_mut()[k].data_mut()[i] += h;
                let mut pm = params.clone();
                pm.tensors_mut()[k].data_mut()[i] -= h;
                let fd = (energy::phi(&spec, &pp, &x, &s).unwrap() - energy::phi(&spec, &pm, &x, &s).unwrap())
                    / (2.0 * h);
                let an = g.tensors()[k].data()[i];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "tensor {k}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn layer_gradient_is_local() {
        let (spec, params, x) = tiny_model(1);
        let fp = free_phase(&spec, &params, &x, 250, false).unwrap();
        let reference = phi_grad_params(&spec, &params, &x, &fp.state).unwrap();
        // Layer 1 reads s^1 and s^2 only; poison s^3.
        let mut poisoned = fp.state.clone();
        poisoned.layers[2] = poisoned.layers[2].map(|_| f64::NAN);
        let g = phi_grad_layer(&spec, &params, 1, &poisoned.layers[0], &poisoned.layers[1]).unwrap();
        assert_eq!(g, reference.layers[1]);
        let full = phi_grad_params(&spec, &params, &x, &poisoned).unwrap();
        assert_eq!(full.layers[0], reference.layers[0]);
        assert_eq!(full.layers[1], reference.layers[1]);
        assert!(!full.layers[2].weight.is_finite());
    }

    #[test]
    fn symmetric_estimate_is_odd_in_beta() {
        let (spec, params, x) = tiny_model(3);
        let a = ep_update_symmetric(&spec, &params, &x, 1, 0.05).unwrap().estimate;
        let b = ep_update_symmetric(&spec, &params, &x, 1, -0.05).unwrap().estimate;
        for (ta, tb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(ta.weight, tb.weight.scale(-1.0));
            assert_eq!(ta.bias, tb.bias.scale(-1.0));
        }
    }

    #[test]
    fn symmetric_estimate_aligns_with_true_gradient() {
        let (spec, params, x) = tiny_model(5);
        let y = 2;
        let truth = fd_descent(&spec, &params, &x, y);
        let est = ep_update_symmetric(&spec, &params, &x, y, 0.01).unwrap().estimate;
        for k in 0..2 * params.layers.len() {
            let c = cosine(est.tensors()[k], truth.tensors()[k]);
            assert!(c >= 0.99, "tensor {k}: cosine {c}");
        }
    }

    #[test]
    fn one_sided_estimate_converges_linearly_in_beta() {
        let (spec, params, x) = tiny_model(6);
        let a = ep_update_one_sided(&spec, &params, &x, 0, 1e-3).unwrap().estimate;
        let b = ep_update_one_sided(&spec, &params, &x, 0, 5e-4).unwrap().estimate;
        let c = ep_update_one_sided(&spec, &params, &x, 0, 2.5e-4).unwrap().estimate;
        let d1 = a.sub(&b).layers[0].weight.norm_l2();
        let d2 = b.sub(&c).layers[0].weight.norm_l2();
        let ratio = d1 / d2;
        assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn readout_update_is_negative_loss_gradient() {
        let (spec, params, x) = tiny_model(7);
        let step = ep_update_symmetric(&spec, &params, &x, 0, 0.1).unwrap();
        let fp = free_phase(&spec, &params, &x, spec.t_free, false).unwrap();
        let (_, dz) = cross_entropy(readout(&params, &fp.state).unwrap().data(), 0);
        assert_eq!(step.estimate.readout.bias.data(), Tensor::from_vec(dz).scale(-1.0).data());
    }

    #[test]
    fn confident_correct_prediction_gives_vanishing_estimate() {
        let (spec, mut params, x) = tiny_model(8);
        let typical = ep_update_symmetric(&spec, &params, &x, 1, 0.01).unwrap().estimate;
        params.readout.bias.data_mut()[1] = 60.0;
        let tiny = ep_update_symmetric(&spec, &params, &x, 1, 0.01).unwrap().estimate;
        for k in 0..2 * params.layers.len() {
            let t = typical.tensors()[k].norm_l2();
            assert!(tiny.tensors()[k].norm_l2() < 1e-3 * t, "tensor {k}");
        }
    }

    #[test]
    fn unclamped_linear_net_rules_agree_at_small_beta() {
        let mut spec = fc_spec(&[4, 3, 3], 2);
        spec.fp_tol = 1e-13;
        spec.t_nudge = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Params::init(&spec, &mut rng, 0.2).unwrap();
        for l in params.layers.iter_mut() {
            l.bias = Tensor::full(l.bias.shape(), 0.5);
        }
        let x = Tensor::new(vec![4, 1, 1], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let fp = free_phase(&spec, &params, &x, spec.t_free, false).unwrap();
        assert!(fp.state.layers.iter().all(|t| t.data().iter().all(|&v| v > 0.0 && v < 1.0)));
        let a = ep_update_one_sided(&spec, &params, &x, 0, 1e-4).unwrap().estimate;
        let b = ep_update_symmetric(&spec, &params, &x, 0, 1e-4).unwrap().estimate;
        for k in 0..2 * params.layers.len() {
            let (ta, tb) = (a.tensors()[k], b.tensors()[k]);
            assert!(ta.max_abs_diff(tb) <= 1e-3 * tb.norm_linf(), "tensor {k}: {ta:?} vs {tb:?}");
        }
    }
}
