//! Classifier interfaces used by attacks, evaluation and training.
//!
//! [`Classifier`] is the black-box surface (logits only). [`Differentiable`]
//! adds input gradients of an arbitrary loss on the logits; white-box attacks
//! require it, the Square attack does not.

use serde::{Deserialize, Serialize};

use crate::energy::{self, ModelSpec, Params};
use crate::error::{Error, Result};
use crate::grad;
use crate::tensor::{self, affine, affine_transpose, Tensor};
use crate::train::bp;

/// Loss on the logits returning its value and `dL/dlogits`.
pub type LogitLoss<'a> = &'a dyn Fn(&[f64]) -> (f64, Vec<f64>);

pub trait Classifier: Sync {
    fn classes(&self) -> usize;

    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(tensor::argmax(self.logits(x)?.data()))
    }
}

pub trait Differentiable: Classifier {
    /// Loss value, its gradient with respect to `x`, and the logits.
    fn value_and_grad(&self, x: &Tensor, loss: LogitLoss<'_>) -> Result<(f64, Tensor, Tensor)>;

    fn loss_and_grad(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        let (l, g, _) = self.value_and_grad(x, &|z| energy::cross_entropy(z, label))?;
        Ok((l, g))
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn classes(&self) -> usize {
        (**self).classes()
    }
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        (**self).logits(x)
    }
}

impl<C: Differentiable + ?Sized> Differentiable for &C {
    fn value_and_grad(&self, x: &Tensor, loss: LogitLoss<'_>) -> Result<(f64, Tensor, Tensor)> {
        (**self).value_and_grad(x, loss)
    }
}

/// Per-channel affine input normalisation `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let c = self.mean.len().max(1);
        let per = out.len() / c;
        for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Chains a gradient taken in normalised space back to pixel space.
    pub fn backprop(&self, g: &Tensor) -> Tensor {
        let mut out = g.clone();
        let c = self.std.len().max(1);
        let per = out.len() / c;
        for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let s = self.std[ch];
            for v in chunk {
                *v /= s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Energy model trained by equilibrium propagation; inference is the free phase.
    Ep,
    /// Feedforward sweep trained by backpropagation.
    Bp,
    /// Feedforward sweep trained on PGD adversarial examples.
    Adv,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Ep => "ep",
            ModelKind::Bp => "bp",
            ModelKind::Adv => "adv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ep" => Ok(ModelKind::Ep),
            "bp" => Ok(ModelKind::Bp),
            "adv" => Ok(ModelKind::Adv),
            _ => Err(Error::invalid("ModelKind", format!("unknown model kind {s:?}"))),
        }
    }
}

/// A trained network together with its input normalisation.
///
/// Inputs are images in `[0, 1]`; normalisation happens inside. For energy
/// models, `timestep` selects the free-phase step whose readout is reported
/// (default `spec.t_free`).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub spec: ModelSpec,
    pub params: Params,
    pub norm: Normalizer,
    pub timestep: Option<usize>,
}

impl Model {
    pub fn new(kind: ModelKind, spec: ModelSpec, params: Params, norm: Normalizer) -> Result<Self> {
        spec.validate()?;
        params.check(&spec)?;
        if norm.mean.len() != spec.input_shape[0] || norm.std.len() != spec.input_shape[0] {
            return Err(Error::shape("Model", "normalizer channels", spec.input_shape[0], norm.mean.len()));
        }
        Ok(Self {
            kind,
            spec,
            params,
            norm,
            timestep: None,
        })
    }

    pub fn with_timestep(mut self, t: usize) -> Self {
        self.timestep = Some(t);
        self
    }

    pub fn timestep(&self) -> usize {
        self.timestep.unwrap_or(self.spec.t_free)
    }

    /// Free-phase convergence step over `xs` (max across inputs); 1 for
    /// feedforward models.
    pub fn convergence_step(&self, xs: &[Tensor]) -> Result<usize> {
        match self.kind {
            ModelKind::Ep => {
                let normed: Vec<Tensor> = xs.iter().map(|x| self.norm.apply(x)).collect();
                energy::convergence_step(&self.spec, &self.params, &normed)
            }
            _ => Ok(1),
        }
    }
}

impl Classifier for Model {
    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let xn = self.norm.apply(x);
        match self.kind {
            ModelKind::Ep => Ok(energy::predict_at(&self.spec, &self.params, &xn, self.timestep())?.1),
            ModelKind::Bp | ModelKind::Adv => Ok(bp::forward(&self.spec, &self.params, &xn)?.logits),
        }
    }
}

impl Differentiable for Model {
    fn value_and_grad(&self, x: &Tensor, loss: LogitLoss<'_>) -> Result<(f64, Tensor, Tensor)> {
        let xn = self.norm.apply(x);
        let (v, g, logits) = match self.kind {
            ModelKind::Ep => grad::input_grad_with(&self.spec, &self.params, &xn, self.timestep(), loss)?,
            ModelKind::Bp | ModelKind::Adv => {
                let trace = bp::forward(&self.spec, &self.params, &xn)?;
                let (v, dz) = loss(trace.logits.data());
                let (_, gx) = bp::backward(&self.spec, &self.params, &trace, &dz)?;
                (v, gx, trace.logits)
            }
        };
        Ok((v, self.norm.backprop(&g), logits))
    }
}

/// Linear classifier `logits = W flatten(x) + b`; the closed-form oracle model
/// for attacks and the uncertainty estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match weight.shape() {
            [k, _] if *k == bias.len() => Ok(Self { weight, bias }),
            [k, _] => Err(Error::shape("LinearClassifier", "bias", *k, bias.len())),
            s => Err(Error::shape("LinearClassifier", "weight rank", 2, s.len())),
        }
    }
}

impl Classifier for LinearClassifier {
    fn classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        affine(&x.flatten(), &self.weight, &self.bias)
    }
}

impl Differentiable for LinearClassifier {
    fn value_and_grad(&self, x: &Tensor, loss: LogitLoss<'_>) -> Result<(f64, Tensor, Tensor)> {
        let logits = self.logits(x)?;
        let (v, dz) = loss(logits.data());
        let g = affine_transpose(&Tensor::from_vec(dz), &self.weight)?.reshape(x.shape())?;
        Ok((v, g, logits))
    }
}

/// Fraction of inputs whose prediction matches the label.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, xs: &[Tensor], ys: &[usize]) -> Result<f64> {
    use rayon::prelude::*;
    if xs.is_empty() {
        return Ok(0.0);
    }
    let hits = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, &y)| model.predict(x).map(|p| (p == y) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_roundtrip_and_chain_rule() {
        let n = Normalizer {
            mean: vec![0.5, 0.25],
            std: vec![2.0, 0.5],
        };
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        assert_eq!(n.apply(&x).data(), &[0.25, -0.25, 0.0, 1.0]);
        assert_eq!(n.backprop(&Tensor::full(&[2, 1, 2], 1.0)).data(), &[0.5, 0.5, 2.0, 2.0]);
    }

    #[test]
    fn linear_gradient() {
        let m = LinearClassifier::new(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap();
        let (_, g, z) = m.value_and_grad(&x, &|z| (z[0], vec![1.0, 0.0])).unwrap();
        assert_eq!(z.data(), &[1.5, -0.25]);
        assert_eq!(g.data(), &[1.0, 2.0]);
        assert_eq!(g.shape(), x.shape());
        assert_eq!(m.predict(&x).unwrap(), 0);
    }
}
