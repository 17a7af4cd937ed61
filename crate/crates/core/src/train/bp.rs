//! Feedforward sweep of the same architecture (conv -> pool -> clamp per
//! layer, then the readout) and its reverse-mode backward pass.

use crate::energy::{feedback, feedforward, Layer, LayerKind, ModelSpec, Params};
use crate::error::{Error, Result};
use crate::tensor::{affine, affine_transpose, conv2d_weight_grad, hard_clamp, outer, unpool2, PoolIndices, Tensor};

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
    routes: Vec<Option<PoolIndices>>,
    pub logits: Tensor,
}

pub fn forward(spec: &ModelSpec, params: &Params, x: &Tensor) -> Result<ForwardTrace> {
    if x.shape() != spec.input_shape {
        return Err(Error::shape("bp::forward", "input size", spec.input_dim(), x.len()));
    }
    let n_layers = spec.num_layers();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Tensor> = Vec::with_capacity(n_layers);
    let mut routes = Vec::with_capacity(n_layers);
    for n in 0..n_layers {
        let input = if n == 0 { x } else { &post[n - 1] };
        let layer = &params.layers[n];
        let (mut z, route) = feedforward(spec.layer(n), &layer.weight, input, None)?;
        add_bias(spec.layer(n), &mut z, &layer.bias);
        post.push(hard_clamp(&z));
        pre.push(z);
        routes.push(route);
    }
    let logits = affine(
        &post.last().expect("non-empty").flatten(),
        &params.readout.weight,
        &params.readout.bias,
    )?;
    Ok(ForwardTrace {
        input: x.clone(),
        pre,
        post,
        routes,
        logits,
    })
}

fn add_bias(kind: LayerKind, z: &mut Tensor, bias: &Tensor) {
    match kind {
        LayerKind::Conv(_) => {
            let per = z.len() / bias.len();
            for (chunk, b) in z.data_mut().chunks_mut(per).zip(bias.data()) {
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
        LayerKind::Fc(_) => z.add_assign(bias),
    }
}

/// Gradients of a loss with `dL/dlogits = dlogits` with respect to the
/// parameters and the input.
pub fn backward(
    spec: &ModelSpec,
    params: &Params,
    trace: &ForwardTrace,
    dlogits: &[f64],
) -> Result<(Params, Tensor)> {
    let n_layers = spec.num_layers();
    let dz = Tensor::from_vec(dlogits.to_vec());
    let top = trace.post.last().expect("non-empty");
    let readout = Layer {
        weight: outer(&dz, &top.flatten()),
        bias: dz.clone(),
    };
    let mut delta = affine_transpose(&dz, &params.readout.weight)?.reshape(top.shape())?;
    let mut layers = Vec::with_capacity(n_layers);
    for n in (0..n_layers).rev() {
        let mu = delta.zip_map(&trace.pre[n], |g, z| if (0.0..=1.0).contains(&z) { g } else { 0.0 });
        let input = if n == 0 { &trace.input } else { &trace.post[n - 1] };
        let kind = spec.layer(n);
        let grad = match kind {
            LayerKind::Conv(c) => {
                let route = trace.routes[n].as_ref().expect("conv route");
                let per = mu.len() / c.out_channels;
                Layer {
                    weight: conv2d_weight_grad(input, &unpool2(&mu, route)?, &c)?,
                    bias: Tensor::from_vec(mu.data().chunks(per).map(|ch| ch.iter().sum()).collect()),
                }
            }
            LayerKind::Fc(_) => Layer {
                weight: outer(&mu, &input.flatten()),
                bias: mu.clone(),
            },
        };
        delta = feedback(kind, &params.layers[n].weight, &mu, trace.routes[n].as_ref(), input.shape())?;
        layers.push(grad);
    }
    layers.reverse();
    Ok((Params { layers, readout }, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::cross_entropy;
    use crate::energy::tests::tiny_model;

    fn loss(spec: &ModelSpec, p: &Params, x: &Tensor, y: usize) -> f64 {
        cross_entropy(forward(spec, p, x).unwrap().logits.data(), y).0
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let (spec, params, x) = tiny_model(4);
        let y = 1;
        let trace = forward(&spec, &params, &x).unwrap();
        let (_, dz) = cross_entropy(trace.logits.data(), y);
        let (g, gx) = backward(&spec, &params, &trace, &dz).unwrap();
        let h = 1e-6;
        for (k, (gt, pt)) in g.tensors().into_iter().zip(params.tensors()).enumerate() {
            for i in (0..pt.len()).step_by(7) {
                let mut pp = params.clone();
                pp.tensors_mut()[k].data_mut()[i] += h;
                let mut pm = params.clone();
                pm.tensors_mut()[k].data_mut()[i] -= h;
                let fd = (loss(&spec, &pp, &x, y) - loss(&spec, &pm, &x, y)) / (2.0 * h);
                let an = gt.data()[i];
                assert!((fd - an).abs() < 1e-6, "tensor {k} entry {i}: {fd} vs {an}");
            }
        }
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&spec, &params, &xp, y) - loss(&spec, &params, &xm, y)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6);
        }
    }
}
