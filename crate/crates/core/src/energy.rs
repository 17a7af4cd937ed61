//! Layered Hopfield-style energy, its state gradient, and the relaxation
//! dynamics used for inference (free phase) and learning (nudged phase).
//!
//! The energy couples consecutive layers,
//!
//! ```text
//! Phi = sum_conv <s^{n+1}, P(w_{n+1} * s^n) + b_{n+1}> + sum_fc (s^{n+1})^T w_{n+1} s^n + <b_{n+1}, s^{n+1}>
//! ```
//!
//! with `s^0 = x` and `P` a 2x2 max pool. One relaxation step is
//! `s <- clamp(dPhi/ds, 0, 1)` applied to every layer at once, starting from
//! the all-zero state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, affine, affine_transpose, conv2d, conv2d_transpose, hard_clamp, maxpool2, unpool2,
    ConvSpec, PoolIndices, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcSpec {
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvSpec),
    Fc(FcSpec),
}

/// Architecture and dynamics settings of an energy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `(channels, height, width)` of the clamped input.
    pub input_shape: [usize; 3],
    /// Convolutional energy layers; each is followed by a 2x2 max pool.
    pub conv_layers: Vec<ConvSpec>,
    /// Fully connected energy layers stacked after the convolutions.
    pub fc_layers: Vec<FcSpec>,
    /// Number of readout classes.
    pub classes: usize,
    pub t_free: usize,
    pub t_nudge: usize,
    pub beta: f64,
    pub fp_tol: f64,
}

impl ModelSpec {
    pub fn num_layers(&self) -> usize {
        self.conv_layers.len() + self.fc_layers.len()
    }

    /// Kind of the layer producing `s^{n+1}` (zero based).
    pub fn layer(&self, n: usize) -> LayerKind {
        if n < self.conv_layers.len() {
            LayerKind::Conv(self.conv_layers[n])
        } else {
            LayerKind::Fc(self.fc_layers[n - self.conv_layers.len()])
        }
    }

    /// Shapes of `s^1 .. s^N`.
    pub fn state_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let [c0, h0, w0] = self.input_shape;
        let mut shapes = Vec::with_capacity(self.num_layers());
        let (mut c, mut h, mut w) = (c0, h0, w0);
        for (i, conv) in self.conv_layers.iter().enumerate() {
            if conv.in_channels != c {
                return Err(Error::shape("ModelSpec", format!("conv{i} in_channels"), c, conv.in_channels));
            }
            let ho = conv.output_extent(h)?;
            let wo = conv.output_extent(w)?;
            if ho % 2 != 0 || wo % 2 != 0 || ho == 0 || wo == 0 {
                return Err(Error::invalid(
                    "ModelSpec",
                    format!("conv{i} output {ho}x{wo} cannot be 2x2 pooled; adjust padding"),
                ));
            }
            c = conv.out_channels;
            h = ho / 2;
            w = wo / 2;
            shapes.push(vec![c, h, w]);
        }
        let mut dim = c * h * w;
        for (i, fc) in self.fc_layers.iter().enumerate() {
            if fc.in_dim != dim {
                return Err(Error::shape("ModelSpec", format!("fc{i} in_dim"), dim, fc.in_dim));
            }
            dim = fc.out_dim;
            shapes.push(vec![dim]);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers() == 0 {
            return Err(Error::invalid("ModelSpec", "at least one energy layer is required"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::invalid("ModelSpec", "input extents must be positive"));
        }
        if self.classes == 0 {
            return Err(Error::invalid("ModelSpec", "classes must be positive"));
        }
        self.state_shapes()?;
        if self.t_free < self.num_layers() {
            return Err(Error::invalid(
                "ModelSpec",
                format!(
                    "t_free {} is shorter than the {} layers the input must cross",
                    self.t_free,
                    self.num_layers()
                ),
            ));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("ModelSpec", "beta must be > 0"));
        }
        if !(self.fp_tol > 0.0) {
            return Err(Error::invalid("ModelSpec", "fp_tol must be > 0"));
        }
        Ok(())
    }

    /// Flattened size of the top energy layer, i.e. the readout input.
    pub fn top_dim(&self) -> Result<usize> {
        Ok(self
            .state_shapes()?
            .last()
            .map(|s| s.iter().product())
            .unwrap_or(0))
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trainable parameters: one [`Layer`] per energy layer plus the readout,
/// which sits outside the energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
    pub readout: Layer,
}

/// Parameter-shaped container for gradients and EP estimates.
pub type GradEstimate = Params;

impl Params {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for n in 0..spec.num_layers() {
            layers.push(match spec.layer(n) {
                LayerKind::Conv(c) => Layer {
                    weight: Tensor::zeros(&c.weight_shape()),
                    bias: Tensor::zeros(&[c.out_channels]),
                },
                LayerKind::Fc(f) => Layer {
                    weight: Tensor::zeros(&[f.out_dim, f.in_dim]),
                    bias: Tensor::zeros(&[f.out_dim]),
                },
            });
        }
        let top = spec.top_dim()?;
        Ok(Self {
            layers,
            readout: Layer {
                weight: Tensor::zeros(&[spec.classes, top]),
                bias: Tensor::zeros(&[spec.classes]),
            },
        })
    }

    /// Uniform fan-in initialisation, `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`
    /// for weights and a tenth of that for biases.
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng, gain: f64) -> Result<Self> {
        spec.validate()?;
        let mut p = Self::zeros(spec)?;
        for layer in p.layers.iter_mut().chain(std::iter::once(&mut p.readout)) {
            let fan_in: usize = layer.weight.shape()[1..].iter().product();
            let bound = gain / (fan_in as f64).sqrt();
            for v in layer.weight.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            for v in layer.bias.data_mut() {
                *v = rng.random_range(-0.1 * bound..0.1 * bound);
            }
        }
        Ok(p)
    }

    /// Checks every tensor against the shapes `ModelSpec` implies.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let reference = Self::zeros(spec)?;
        if self.layers.len() != reference.layers.len() {
            return Err(Error::shape("Params", "layer count", reference.layers.len(), self.layers.len()));
        }
        for ((name, t), (_, r)) in self.named().into_iter().zip(reference.named()) {
            if t.shape() != r.shape() {
                return Err(Error::shape(
                    "Params",
                    name,
                    r.shape().iter().product(),
                    t.shape().iter().product(),
                ));
            }
        }
        Ok(())
    }

    /// `(name, tensor)` pairs in a stable order: each energy layer's weight
    /// then bias, then the readout.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        out.push(("readout.weight".to_string(), &self.readout.weight));
        out.push(("readout.bias".to_string(), &self.readout.bias));
        out
    }

    /// Tensors in the same order as [`Params::named`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.groups().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.groups_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Layers in update order; the readout is last.
    pub fn groups(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().chain(std::iter::once(&self.readout))
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.layers.iter_mut().chain(std::iter::once(&mut self.readout))
    }

    pub fn num_groups(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.groups().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// Name of the first non-finite tensor, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
    }

    pub fn scale(&self, k: f64) -> Params {
        self.zip_with(self, |a, _| a.scale(k))
    }

    pub fn add(&self, other: &Params) -> Params {
        self.zip_with(other, |a, b| a.add(b))
    }

    pub fn sub(&self, other: &Params) -> Params {
        self.zip_with(other, |a, b| a.sub(b))
    }

    pub fn axpy(&mut self, k: f64, other: &Params) {
        for (a, b) in self.groups_mut().zip(other.groups()) {
            a.weight.axpy(k, &b.weight);
            a.bias.axpy(k, &b.bias);
        }
    }

    fn zip_with(&self, other: &Params, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Params {
        let map = |a: &Layer, b: &Layer| Layer {
            weight: f(&a.weight, &b.weight),
            bias: f(&a.bias, &b.bias),
        };
        Params {
            layers: self.layers.iter().zip(&other.layers).map(|(a, b)| map(a, b)).collect(),
            readout: map(&self.readout, &other.readout),
        }
    }
}

/// States `s^1 .. s^N` plus the pooling routes from the latest update.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub layers: Vec<Tensor>,
    /// One entry per conv layer once a step has run; empty for a fresh state.
    pub pool_indices: Vec<PoolIndices>,
}

impl NetworkState {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        Ok(Self {
            layers: spec.state_shapes()?.iter().map(|s| Tensor::zeros(s)).collect(),
            pool_indices: Vec::new(),
        })
    }

    pub fn top(&self) -> &Tensor {
        self.layers.last().expect("state has at least one layer")
    }

    /// Largest absolute entrywise difference across all layers.
    pub fn max_abs_diff(&self, other: &NetworkState) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .fold(0.0, |m, (a, b)| m.max(a.max_abs_diff(b)))
    }

    pub fn in_unit_box(&self) -> bool {
        self.layers
            .iter()
            .all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v)))
    }
}

fn check_state(spec: &ModelSpec, x: &Tensor, layers: &[Tensor]) -> Result<Vec<Vec<usize>>> {
    if x.shape() != spec.input_shape {
        return Err(Error::shape("energy", "input size", spec.input_dim(), x.len()));
    }
    let shapes = spec.state_shapes()?;
    if layers.len() != shapes.len() {
        return Err(Error::shape("energy", "layer count", shapes.len(), layers.len()));
    }
    for (n, (t, s)) in layers.iter().zip(&shapes).enumerate() {
        if t.shape() != s.as_slice() {
            return Err(Error::shape(
                "energy",
                format!("s^{}", n + 1),
                s.iter().product(),
                t.len(),
            ));
        }
    }
    Ok(shapes)
}

fn add_channel_bias(t: &mut Tensor, bias: &Tensor) {
    let per = t.len() / bias.len().max(1);
    for (chunk, b) in t.data_mut().chunks_mut(per).zip(bias.data()) {
        for v in chunk {
            *v += b;
        }
    }
}

/// `P(w * input)` for conv layers or `w input` for fc layers, shaped like the
/// layer's state. With `route` given, pooling follows it instead of the max.
pub(crate) fn feedforward(
    kind: LayerKind,
    weight: &Tensor,
    input: &Tensor,
    route: Option<&PoolIndices>,
) -> Result<(Tensor, Option<PoolIndices>)> {
    match kind {
        LayerKind::Conv(c) => {
            let z = conv2d(input, weight, &c)?;
            match route {
                Some(idx) => Ok((idx.gather(&z)?, None)),
                None => {
                    let (p, idx) = maxpool2(&z)?;
                    Ok((p, Some(idx)))
                }
            }
        }
        LayerKind::Fc(f) => {
            let y = affine(&input.flatten(), weight, &Tensor::zeros(&[f.out_dim]))?;
            Ok((y, None))
        }
    }
}

/// Adjoint of [`feedforward`] for a fixed route: maps a signal on the layer
/// back to the shape of its input.
pub(crate) fn feedback(
    kind: LayerKind,
    weight: &Tensor,
    upper: &Tensor,
    route: Option<&PoolIndices>,
    lower_shape: &[usize],
) -> Result<Tensor> {
    match kind {
        LayerKind::Conv(c) => {
            let idx = route.ok_or_else(|| Error::invalid("feedback", "conv layer needs a pool route"))?;
            conv2d_transpose(&unpool2(upper, idx)?, weight, &c)
        }
        LayerKind::Fc(_) => affine_transpose(upper, weight)?.reshape(lower_shape),
    }
}

/// Bottom-up drive of every layer (including bias) plus the pooling routes.
fn bottom_up(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    layers: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<PoolIndices>)> {
    let n_layers = spec.num_layers();
    let mut drive = Vec::with_capacity(n_layers);
    let mut routes = Vec::with_capacity(spec.conv_layers.len());
    for n in 0..n_layers {
        let input = if n == 0 { x } else { &layers[n - 1] };
        let p = &params.layers[n];
        let (mut d, route) = feedforward(spec.layer(n), &p.weight, input, None)?;
        match spec.layer(n) {
            LayerKind::Conv(_) => add_channel_bias(&mut d, &p.bias),
            LayerKind::Fc(_) => d.add_assign(&p.bias),
        }
        if let Some(r) = route {
            routes.push(r);
        }
        drive.push(d);
    }
    Ok((drive, routes))
}

fn route_for<'a>(spec: &ModelSpec, routes: &'a [PoolIndices], n: usize) -> Option<&'a PoolIndices> {
    (n < spec.conv_layers.len()).then(|| &routes[n])
}

/// `dPhi/ds^n` for every layer together with the pooling routes used.
pub(crate) fn energy_field(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    layers: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<PoolIndices>)> {
    let (mut field, routes) = bottom_up(spec, params, x, layers)?;
    let n_layers = spec.num_layers();
    for n in 0..n_layers.saturating_sub(1) {
        let upper = n + 1;
        let fb = feedback(
            spec.layer(upper),
            &params.layers[upper].weight,
            &layers[upper],
            route_for(spec, &routes, upper),
            layers[n].shape(),
        )?;
        field[n].add_assign(&fb);
    }
    Ok((field, routes))
}

/// Jacobian of the energy field with respect to the state at fixed routes,
/// applied to `v`. The Jacobian is symmetric, so this is also its transpose.
pub(crate) fn field_jacobian(
    spec: &ModelSpec,
    params: &Params,
    routes: &[PoolIndices],
    v: &[Tensor],
) -> Result<Vec<Tensor>> {
    let n_layers = spec.num_layers();
    let mut out: Vec<Tensor> = v.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for n in 0..n_layers {
        if n > 0 {
            let (d, _) = feedforward(
                spec.layer(n),
                &params.layers[n].weight,
                &v[n - 1],
                route_for(spec, routes, n),
            )?;
            out[n].add_assign(&d);
        }
        if n + 1 < n_layers {
            let fb = feedback(
                spec.layer(n + 1),
                &params.layers[n + 1].weight,
                &v[n + 1],
                route_for(spec, routes, n + 1),
                v[n].shape(),
            )?;
            out[n].add_assign(&fb);
        }
    }
    Ok(out)
}

/// Transpose of the field's dependence on the input, applied to `v` (a signal
/// on the first layer).
pub(crate) fn field_input_vjp(
    spec: &ModelSpec,
    params: &Params,
    routes: &[PoolIndices],
    v_first: &Tensor,
) -> Result<Tensor> {
    let input_shape = spec.input_shape;
    feedback(
        spec.layer(0),
        &params.layers[0].weight,
        v_first,
        route_for(spec, routes, 0),
        &input_shape,
    )
}

/// The energy `Phi(x, s)`.
pub fn phi(spec: &ModelSpec, params: &Params, x: &Tensor, state: &NetworkState) -> Result<f64> {
    check_state(spec, x, &state.layers)?;
    let (drive, _) = bottom_up(spec, params, x, &state.layers)?;
    Ok(drive.iter().zip(&state.layers).map(|(d, s)| d.dot(s)).sum())
}

/// `dPhi/ds^n` for `n = 1..N`.
pub fn phi_grad_state(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    state: &NetworkState,
) -> Result<Vec<Tensor>> {
    check_state(spec, x, &state.layers)?;
    Ok(energy_field(spec, params, x, &state.layers)?.0)
}

/// Logits of the readout applied to the top energy layer.
pub fn readout(params: &Params, state: &NetworkState) -> Result<Tensor> {
    affine(&state.top().flatten(), &params.readout.weight, &params.readout.bias)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

/// `dL/ds^N` of the readout cross-entropy.
pub fn loss_grad_top(params: &Params, state: &NetworkState, label: usize) -> Result<Tensor> {
    let logits = readout(params, state)?;
    let (_, g) = cross_entropy(logits.data(), label);
    affine_transpose(&Tensor::from_vec(g), &params.readout.weight)?.reshape(state.top().shape())
}

/// Result of a free-phase relaxation.
#[derive(Debug, Clone)]
pub struct FreePhase {
    pub state: NetworkState,
    /// Number of updates executed.
    pub steps: usize,
    /// Infinity-norm change of the final update.
    pub residual: f64,
    pub converged: bool,
    /// States after each update, when requested.
    pub trajectory: Option<Vec<NetworkState>>,
}

fn step(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    state: &NetworkState,
    nudge: Option<(f64, usize)>,
) -> Result<NetworkState> {
    let (mut field, routes) = energy_field(spec, params, x, &state.layers)?;
    if let Some((beta, label)) = nudge {
        if beta != 0.0 {
            let g = loss_grad_top(params, state, label)?;
            field.last_mut().expect("non-empty").axpy(-beta, &g);
        }
    }
    Ok(NetworkState {
        layers: field.iter().map(hard_clamp).collect(),
        pool_indices: routes,
    })
}

/// Relaxes from the zero state for at most `t` steps, stopping once an update
/// moves no entry by more than `spec.fp_tol`.
///
/// The infinity-norm step size of the synchronous update is not monotone, so
/// a small step is confirmed by one look-ahead update that is not applied.
/// The returned state is settled: one more update moves it by less than
/// `fp_tol`. An unconfirmed look-ahead counts as an ordinary step.
pub fn free_phase(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    t: usize,
    record: bool,
) -> Result<FreePhase> {
    if t == 0 {
        return Err(Error::invalid("free_phase", "needs at least one step"));
    }
    let mut state = NetworkState::zeros(spec)?;
    check_state(spec, x, &state.layers)?;
    let mut trajectory = record.then(|| Vec::with_capacity(t));
    let mut residual = f64::INFINITY;
    let mut steps = 0;
    let mut converged = false;
    let mut next = step(spec, params, x, &state, None)?;
    while steps < t {
        residual = next.max_abs_diff(&state);
        state = next;
        steps += 1;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(state.clone());
        }
        next = step(spec, params, x, &state, None)?;
        if residual < spec.fp_tol && next.max_abs_diff(&state) < spec.fp_tol {
            converged = true;
            break;
        }
    }
    Ok(FreePhase {
        converged,
        state,
        steps,
        residual,
        trajectory,
    })
}

/// Runs exactly `steps` free updates from `state`.
pub fn relax(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    state: &NetworkState,
    steps: usize,
) -> Result<NetworkState> {
    check_state(spec, x, &state.layers)?;
    let mut s = state.clone();
    for _ in 0..steps {
        s = step(spec, params, x, &s, None)?;
    }
    Ok(s)
}

/// Nudged relaxation: starting at `s_star`, `spec.t_nudge` updates of
/// `s <- clamp(dPhi/ds - beta * dL/ds)`.
pub fn nudged_phase(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    s_star: &NetworkState,
    label: usize,
    beta: f64,
) -> Result<NetworkState> {
    check_state(spec, x, &s_star.layers)?;
    if label >= spec.classes {
        return Err(Error::invalid("nudged_phase", format!("label {label} out of range")));
    }
    let mut s = s_star.clone();
    for _ in 0..spec.t_nudge {
        s = step(spec, params, x, &s, Some((beta, label)))?;
    }
    Ok(s)
}

/// Prediction after exactly `t` free-phase updates (no early stop).
pub fn predict_at(spec: &ModelSpec, params: &Params, x: &Tensor, t: usize) -> Result<(usize, Tensor)> {
    if t == 0 {
        return Err(Error::invalid("predict_at", "needs at least one step"));
    }
    let s = relax(spec, params, x, &NetworkState::zeros(spec)?, t)?;
    let logits = readout(params, &s)?;
    Ok((tensor::argmax(logits.data()), logits))
}

/// Largest number of free-phase steps any input in `xs` needs to converge.
pub fn convergence_step(spec: &ModelSpec, params: &Params, xs: &[Tensor]) -> Result<usize> {
    let mut worst = 1;
    for x in xs {
        worst = worst.max(free_phase(spec, params, x, spec.t_free, false)?.steps);
    }
    Ok(worst)
}
