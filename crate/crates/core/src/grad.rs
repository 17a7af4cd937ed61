//! Exact input gradients of the loss at free-phase step `t`, obtained by
//! reverse-mode differentiation through the recorded relaxation.
//!
//! Each update is `s_k = clamp(F(s_{k-1}, x))` where `F` is the energy field.
//! For fixed pooling routes `F` is affine in the state with a symmetric
//! Jacobian, so the backward sweep reuses the forward kernels. The clamp
//! derivative is taken as 1 on the closed interval `[0, 1]` and 0 outside.

use rayon::prelude::*;

use crate::energy::{self, cross_entropy, ModelSpec, NetworkState, Params};
use crate::error::{Error, Result};
use crate::tensor::{affine, affine_transpose, hard_clamp, PoolIndices, Tensor};

#[derive(Debug, Clone)]
struct TapeStep {
    pre: Vec<Tensor>,
    routes: Vec<PoolIndices>,
}

/// Pre-activations and pooling routes of every update of an unrolled free phase.
#[derive(Debug, Clone)]
pub struct UnrolledTape {
    steps: Vec<TapeStep>,
}

impl UnrolledTape {
    /// Runs exactly `t` free-phase updates from the zero state and records them.
    pub fn record(spec: &ModelSpec, params: &Params, x: &Tensor, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::invalid("UnrolledTape::record", "needs at least one step"));
        }
        let mut layers = NetworkState::zeros(spec)?.layers;
        let mut steps = Vec::with_capacity(t);
        for _ in 0..t {
            let (pre, routes) = energy::energy_field(spec, params, x, &layers)?;
            layers = pre.iter().map(hard_clamp).collect();
            steps.push(TapeStep { pre, routes });
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State after step `k` (1-based), rebuilt from the stored pre-activations.
    pub fn state(&self, k: usize) -> NetworkState {
        let s = &self.steps[k - 1];
        NetworkState {
            layers: s.pre.iter().map(hard_clamp).collect(),
            pool_indices: s.routes.clone(),
        }
    }

    pub fn final_state(&self) -> NetworkState {
        self.state(self.steps.len())
    }

    /// Bytes held by the tape: one pre-activation per state entry and one
    /// route per pooled cell, per step.
    pub fn storage_bytes(&self) -> usize {
        self.steps
            .iter()
            .map(|s| {
                s.pre.iter().map(|t| t.len() * std::mem::size_of::<f64>()).sum::<usize>()
                    + s.routes
                        .iter()
                        .map(|r| std::mem::size_of_val(r.indices()))
                        .sum::<usize>()
            })
            .sum()
    }

    /// Backpropagates `dL/dlogits` to the input.
    pub fn backward(&self, spec: &ModelSpec, params: &Params, dlogits: &[f64]) -> Result<Tensor> {
        let last = self.final_state();
        let top_shape = last.top().shape().to_vec();
        let mut adj: Vec<Tensor> = last.layers.iter().map(|t| Tensor::zeros(t.shape())).collect();
        *adj.last_mut().expect("non-empty") =
            affine_transpose(&Tensor::from_vec(dlogits.to_vec()), &params.readout.weight)?.reshape(&top_shape)?;
        let mut gx = Tensor::zeros(&spec.input_shape);
        for (k, step) in self.steps.iter().enumerate().rev() {
            let mu: Vec<Tensor> = adj
                .iter()
                .zip(&step.pre)
                .map(|(a, z)| a.zip_map(z, |g, v| if (0.0..=1.0).contains(&v) { g } else { 0.0 }))
                .collect();
            gx.add_assign(&energy::field_input_vjp(spec, params, &step.routes, &mu[0])?);
            if k > 0 {
                adj = energy::field_jacobian(spec, params, &step.routes, &mu)?;
            }
        }
        Ok(gx)
    }
}

/// Loss, input gradient and logits for a caller-supplied loss on the logits at
/// free-phase step `t`. `loss` returns the value and `dL/dlogits`.
pub fn input_grad_with(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    t: usize,
    loss: impl FnOnce(&[f64]) -> (f64, Vec<f64>),
) -> Result<(f64, Tensor, Tensor)> {
    let tape = UnrolledTape::record(spec, params, x, t)?;
    let state = tape.final_state();
    let logits = affine(&state.top().flatten(), &params.readout.weight, &params.readout.bias)?;
    let (value, dlogits) = loss(logits.data());
    if dlogits.len() != logits.len() {
        return Err(Error::shape("input_grad_with", "loss gradient", logits.len(), dlogits.len()));
    }
    let g = tape.backward(spec, params, &dlogits)?;
    Ok((value, g, logits))
}

/// `grad_x CE(readout(s_t(x)), y)` through `t` unrolled updates.
pub fn input_grad(spec: &ModelSpec, params: &Params, x: &Tensor, y: usize, t: usize) -> Result<Tensor> {
    Ok(loss_and_input_grad(spec, params, x, y, t)?.1)
}

pub fn loss_and_input_grad(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    y: usize,
    t: usize,
) -> Result<(f64, Tensor)> {
    if y >= spec.classes {
        return Err(Error::invalid("input_grad", format!("label {y} out of range")));
    }
    let (l, g, _) = input_grad_with(spec, params, x, t, |z| cross_entropy(z, y))?;
    Ok((l, g))
}

/// Per-example losses and input gradients; each entry equals the matching
/// single-example call.
pub fn loss_and_grad_batch(
    spec: &ModelSpec,
    params: &Params,
    xs: &[Tensor],
    ys: &[usize],
    t: usize,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if xs.len() != ys.len() {
        return Err(Error::shape("loss_and_grad_batch", "labels", xs.len(), ys.len()));
    }
    let out: Vec<(f64, Tensor)> = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, &y)| loss_and_input_grad(spec, params, x, y, t))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::tests::tiny_model;
    use crate::energy::{predict_at, FcSpec, LayerKind};
    use crate::tensor::{conv2d, maxpool2, ConvSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_at(spec: &ModelSpec, params: &Params, x: &Tensor, y: usize, t: usize) -> f64 {
        let (_, logits) = predict_at(spec, params, x, t).unwrap();
        cross_entropy(logits.data(), y).0
    }

    // Pool routes and clamp activity pattern of every step, used to skip
    // finite-difference probes that straddle a kink.
    fn pattern(tape: &UnrolledTape) -> Vec<(Vec<usize>, Vec<bool>)> {
        tape.steps
            .iter()
            .map(|s| {
                (
                    s.routes.iter().flat_map(|r| r.indices().to_vec()).collect(),
                    s.pre
                        .iter()
                        .flat_map(|t| t.data().iter().map(|v| (0.0..=1.0).contains(v)).collect::<Vec<_>>())
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let (spec, mut params, x) = tiny_model(0);
        for l in params.layers.iter_mut() {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let g = input_grad(&spec, &params, &x, 1, 20).unwrap();
        assert_eq!(g.norm_linf(), 0.0);
    }

    #[test]
    fn single_step_single_conv_closed_form() {
        // 1x4x4 input, one 1->1 conv with a 3x3 kernel and padding 1, pool,
        // readout to 2 classes, t = 1: s = clamp(P(w*x) + b).
        let spec = ModelSpec {
            input_shape: [1, 4, 4],
            conv_layers: vec![ConvSpec::new(1, 1, 3, 1)],
            fc_layers: vec![],
            classes: 2,
            t_free: 5,
            t_nudge: 5,
            beta: 0.1,
            fp_tol: 1e-6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = Params::init(&spec, &mut rng, 1.0).unwrap();
        params.layers[0].bias = Tensor::from_vec(vec![0.2]);
        let x = Tensor::from_fn(&[1, 4, 4], |_| rng.random_range(0.0..1.0));
        let y = 1;

        let z = conv2d(&x, &params.layers[0].weight, &spec.conv_layers[0]).unwrap();
        let (p, idx) = maxpool2(&z).unwrap();
        let pre: Vec<f64> = p.data().iter().map(|v| v + 0.2).collect();
        let s: Vec<f64> = pre.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let r = params.readout.weight.data();
        let logits: Vec<f64> = (0..2)
            .map(|k| (0..4).map(|j| r[k * 4 + j] * s[j]).sum::<f64>() + params.readout.bias.data()[k])
            .collect();
        let (_, dz) = cross_entropy(&logits, y);
        let w = params.layers[0].weight.data();
        let mut expect = vec![0.0; 16];
        for cell in 0..4 {
            if !(0.0..=1.0).contains(&pre[cell]) {
                continue;
            }
            let ds: f64 = (0..2).map(|k| dz[k] * r[k * 4 + cell]).sum();
            let src = idx.indices()[cell];
            let (i, j) = (src / 4, src % 4);
            for a in 0..3 {
                for b in 0..3 {
                    let (r_, q) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                    if (0..4).contains(&r_) && (0..4).contains(&q) {
                        expect[(r_ * 4 + q) as usize] += ds * w[a * 3 + b];
                    }
                }
            }
        }
        let g = input_grad(&spec, &params, &x, y, 1).unwrap();
        for (a, b) in g.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_finite_differences_per_pixel() {
        let (spec, params, x) = tiny_model(3);
        let (y, t, h) = (2, 20, 1e-5);
        let g = input_grad(&spec, &params, &x, y, t).unwrap();
        let base = pattern(&UnrolledTape::record(&spec, &params, &x, t).unwrap());
        let mut checked = 0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let same = |z: &Tensor| pattern(&UnrolledTape::record(&spec, &params, z, t).unwrap()) == base;
            if !same(&xp) || !same(&xm) {
                continue;
            }
            let fd = (loss_at(&spec, &params, &xp, y, t) - loss_at(&spec, &params, &xm, y, t)) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3), "pixel {i}: fd {fd} analytic {an}");
            checked += 1;
        }
        assert!(checked > x.len() / 2, "only {checked} pixels away from kinks");
    }

    #[test]
    fn fc_only_network_gradient() {
        let spec = ModelSpec {
            input_shape: [3, 1, 1],
            conv_layers: vec![],
            fc_layers: vec![FcSpec { in_dim: 3, out_dim: 4 }, FcSpec { in_dim: 4, out_dim: 2 }],
            classes: 2,
            t_free: 30,
            t_nudge: 5,
            beta: 0.1,
            fp_tol: 1e-8,
        };
        assert!(matches!(spec.layer(0), LayerKind::Fc(_)));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = Params::init(&spec, &mut rng, 1.0).unwrap();
        for l in params.layers.iter_mut() {
            l.bias = l.bias.map(|_| 0.4);
        }
        let x = Tensor::new(vec![3, 1, 1], vec![0.2, 0.7, 0.4]).unwrap();
        let g = input_grad(&spec, &params, &x, 0, 10).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss_at(&spec, &params, &xp, 0, 10) - loss_at(&spec, &params, &xm, 0, 10)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_saturates_after_convergence() {
        for seed in 0..3 {
            let (mut spec, params, x) = tiny_model(seed);
            spec.fp_tol = 1e-6;
            let t = energy::free_phase(&spec, &params, &x, 250, false).unwrap().steps;
            let g0 = input_grad(&spec, &params, &x, 0, t).unwrap();
            for k in [10, 20] {
                let gk = input_grad(&spec, &params, &x, 0, t + k).unwrap();
                let rel = gk.sub(&g0).norm_l2() / g0.norm_l2();
                assert!(rel < 1e-3, "seed {seed} k {k}: {rel}");
            }
        }
    }

    #[test]
    fn tape_replays_and_grows_linearly() {
        let (spec, params, x) = tiny_model(1);
        let tape = UnrolledTape::record(&spec, &params, &x, 12).unwrap();
        assert_eq!(tape.len(), 12);
        let direct = energy::relax(&spec, &params, &x, &NetworkState::zeros(&spec).unwrap(), 12).unwrap();
        assert_eq!(tape.final_state().layers, direct.layers);
        let b6 = UnrolledTape::record(&spec, &params, &x, 6).unwrap().storage_bytes();
        assert_eq!(tape.storage_bytes(), 2 * b6);
        let per_step: usize = spec.state_shapes().unwrap().iter().map(|s| s.iter().product::<usize>()).sum();
        assert!(b6 >= 6 * per_step * 8);
    }

    #[test]
    fn batch_matches_single_calls() {
        let (spec, params, x) = tiny_model(2);
        let (_, _, x2) = tiny_model(5);
        let single = loss_and_input_grad(&spec, &params, &x, 1, 15).unwrap();
        let (l, g) = loss_and_grad_batch(&spec, &params, std::slice::from_ref(&x), &[1], 15).unwrap();
        assert_eq!((l[0], g[0].clone()), single);
        let (l, g) = loss_and_grad_batch(&spec, &params, &[x.clone(), x.clone(), x.clone()], &[1, 1, 1], 15).unwrap();
        assert!(l.iter().all(|v| *v == single.0));
        assert!(g.iter().all(|v| *v == single.1));
        let xs = vec![x.clone(), x2.clone(), x.clone()];
        let ys = vec![0, 2, 1];
        let (l, g) = loss_and_grad_batch(&spec, &params, &xs, &ys, 15).unwrap();
        for i in 0..3 {
            let (li, gi) = loss_and_input_grad(&spec, &params, &xs[i], ys[i], 15).unwrap();
            assert_eq!(l[i], li);
            assert_eq!(g[i], gi);
        }
    }
}
