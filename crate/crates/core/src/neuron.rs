//! Discrete-time leaky integrate-and-fire neurons.
//!
//! Charging: `v = u + (I − (u − u_rest)) / τ`; firing: `s = H(v − u_th)`;
//! reset: `u' = s·u_rest + (1 − s)·v`. `H(0) = 1`.

use crate::error::{Error, Result};
use crate::tensor::{SpikeTensor, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Membrane time constant (dimensionless, ≥ 1).
    pub tau: f64,
    pub u_th: f64,
    pub u_rest: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau: 2.0,
            u_th: 1.0,
            u_rest: 0.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0) {
            return Err(Error::Config(format!("LIF tau {} must be >= 1", self.tau)));
        }
        if !(self.u_th > self.u_rest) {
            return Err(Error::Config(format!(
                "LIF threshold {} must exceed resting potential {}",
                self.u_th, self.u_rest
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn charge(&self, u: f64, current: f64) -> f64 {
        u + (current - (u - self.u_rest)) / self.tau
    }

    #[inline]
    pub fn fires(&self, v: f64) -> bool {
        v >= self.u_th
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    Triangular,
    SigmoidDerivative,
}

/// Pseudo-derivative substituted for `H'` during backpropagation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec {
            kind: SurrogateKind::Triangular,
            width: 1.0,
        }
    }
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::Config(format!("surrogate width {width} must be > 0")));
        }
        Ok(SurrogateSpec { kind, width })
    }

    /// Sigmoid slope chosen so both kinds peak at `1/width` and integrate to 1.
    fn slope(&self) -> f64 {
        4.0 / self.width
    }

    /// Pseudo-derivative at `x = v − u_th`.
    #[inline]
    pub fn grad(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::Triangular => (1.0 - x.abs() / self.width).max(0.0) / self.width,
            SurrogateKind::SigmoidDerivative => {
                let k = self.slope();
                let s = sigmoid(k * x);
                k * s * (1.0 - s)
            }
        }
    }

    /// Antiderivative of [`SurrogateSpec::grad`]: a smooth step used in place
    /// of `H` when checking gradients numerically.
    #[inline]
    pub fn smooth_step(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::Triangular => {
                let w = self.width;
                if x <= -w {
                    0.0
                } else if x <= 0.0 {
                    (x + w) * (x + w) / (2.0 * w * w)
                } else if x < w {
                    1.0 - (w - x) * (w - x) / (2.0 * w * w)
                } else {
                    1.0
                }
            }
            SurrogateKind::SigmoidDerivative => sigmoid(self.slope() * x),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// How a spiking layer turns membrane potential into output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeFn {
    /// Binary Heaviside firing; backward uses the surrogate and detaches the
    /// reset path.
    Heaviside(SurrogateSpec),
    /// Smooth step (the surrogate's antiderivative); backward is the exact
    /// derivative of this forward, reset path included. Gradient checks only.
    Smooth(SurrogateSpec),
}

impl SpikeFn {
    pub fn surrogate(&self) -> SurrogateSpec {
        match *self {
            SpikeFn::Heaviside(s) | SpikeFn::Smooth(s) => s,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, SpikeFn::Heaviside(_))
    }
}

impl Default for SpikeFn {
    fn default() -> Self {
        SpikeFn::Heaviside(SurrogateSpec::default())
    }
}

/// Membrane potentials of a layer, one per neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub u: Tensor,
}

impl NeuronState {
    pub fn resting(shape: &[usize], params: &LifParams) -> Self {
        NeuronState {
            u: Tensor::full(shape, params.u_rest),
        }
    }
}

/// One charge/fire/reset step.
pub fn lif_step(
    state: &NeuronState,
    current: &Tensor,
    params: &LifParams,
) -> Result<(Tensor, SpikeTensor, NeuronState)> {
    if state.u.shape() != current.shape() {
        return Err(Error::shape("lif_step", state.u.shape(), current.shape()));
    }
    let v = state.u.zip_map(current, |u, i| params.charge(u, i))?;
    let s = v.map(|v| if params.fires(v) { 1.0 } else { 0.0 });
    let u = v.zip_map(&s, |v, s| s * params.u_rest + (1.0 - s) * v)?;
    Ok((v, SpikeTensor::from_binary_unchecked(s), NeuronState { u }))
}

/// Runs a fresh layer (membranes at rest) over `current[T, ...]`.
pub fn sn_forward(current: &Tensor, params: &LifParams) -> Result<SpikeTensor> {
    let t_steps = *current.shape().first().unwrap_or(&0);
    if t_steps == 0 || current.is_empty() {
        return Err(Error::EmptyInput("sn_forward needs at least one time step"));
    }
    let n = current.len() / t_steps;
    let mut u = vec![params.u_rest; n];
    let mut out = vec![0.0; current.len()];
    for t in 0..t_steps {
        let i_t = &current.data()[t * n..(t + 1) * n];
        let s_t = &mut out[t * n..(t + 1) * n];
        for ((u, &i), s) in u.iter_mut().zip(i_t).zip(s_t.iter_mut()) {
            let v = params.charge(*u, i);
            if params.fires(v) {
                *s = 1.0;
                *u = params.u_rest;
            } else {
                *u = v;
            }
        }
    }
    Ok(SpikeTensor::from_binary_unchecked(Tensor::new(
        current.shape(),
        out,
    )?))
}

pub fn surrogate_grad(v: &Tensor, params: &LifParams, spec: &SurrogateSpec) -> Tensor {
    v.map(|v| spec.grad(v - params.u_th))
}
