//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when
//! any input requires a gradient, the inputs and backward rule needed to
//! propagate one. Nodes that need no gradient keep no parents, so inference
//! graphs free intermediates as soon as they go out of scope.

use crate::error::{Error, Result};
use crate::neuron::{LifParams, SpikeFn};
use crate::params::ParamId;
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, bmm, conv2d, conv2d_backward, maxpool2d,
    maxpool2d_backward, BatchNormState, BnMode, BnStats, ConvSpec, Tensor, Transpose,
};
use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

trait Backward {
    /// Gradient for each parent, in parent order; `None` where not required.
    fn backward(&self, grad: &Tensor, out: &Tensor, parents: &[Var]) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl Var {
    fn from_node(value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            param,
            parents: Vec::new(),
            op: None,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Var::from_node(value, false, None)
    }

    /// A free leaf whose gradient is reported by [`Gradients::get`].
    pub fn leaf(value: Tensor) -> Var {
        Var::from_node(value, true, None)
    }

    /// A leaf bound to a model parameter.
    pub fn param(value: Tensor, id: ParamId, requires_grad: bool) -> Var {
        Var::from_node(value, requires_grad, Some(id))
    }

    fn derived(value: Tensor, parents: Vec<Var>, op: impl Backward + 'static) -> Var {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, op): (Vec<Var>, Option<Box<dyn Backward>>) = if requires_grad {
            (parents, Some(Box::new(op)))
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            param: None,
            parents,
            op,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.value().clone())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().add(other.value())?;
        Ok(Var::derived(v, vec![self.clone(), other.clone()], AddOp))
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::derived(self.value().scale(c), vec![self.clone()], ScaleOp(c))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().clone().reshape(shape)?;
        Ok(Var::derived(
            v,
            vec![self.clone()],
            ReshapeOp(self.shape().to_vec()),
        ))
    }

    pub fn bmm(&self, ta: Transpose, other: &Var, tb: Transpose) -> Result<Var> {
        let v = bmm(self.value(), ta, other.value(), tb)?;
        Ok(Var::derived(v, vec![self.clone(), other.clone()], BmmOp { ta, tb }))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.bmm(Transpose::No, other, Transpose::No)
    }

    pub fn conv2d(&self, weight: &Var, spec: ConvSpec) -> Result<Var> {
        let v = conv2d(self.value(), weight.value(), spec)?;
        Ok(Var::derived(v, vec![self.clone(), weight.clone()], ConvOp(spec)))
    }

    /// Batch normalization with learnable per-channel `gamma`/`beta`. Returns
    /// the statistics used so the caller can update running estimates.
    pub fn batchnorm(
        &self,
        gamma: &Var,
        beta: &Var,
        state: &BatchNormState,
        mode: BnMode,
    ) -> Result<(Var, BnStats)> {
        let (v, stats) = batchnorm_forward(
            self.value(),
            gamma.value().data(),
            beta.value().data(),
            state,
            mode,
        )?;
        let op = BnOp {
            stats: stats.clone(),
            mode,
        };
        Ok((
            Var::derived(v, vec![self.clone(), gamma.clone(), beta.clone()], op),
            stats,
        ))
    }

    /// `[B, ...] -> [t·B, ...]`: `t` copies stacked along the leading axis.
    pub fn repeat_leading(&self, t: usize) -> Result<Var> {
        if t == 0 || self.shape().is_empty() {
            return Err(Error::shape("repeat_leading", self.shape(), &[t]));
        }
        let mut shape = self.shape().to_vec();
        shape[0] *= t;
        let mut data = Vec::with_capacity(self.value().len() * t);
        for _ in 0..t {
            data.extend_from_slice(self.value().data());
        }
        Ok(Var::derived(
            Tensor::new(&shape, data)?,
            vec![self.clone()],
            RepeatOp(t),
        ))
    }

    /// Multi-step LIF layer over `[T·B, ...]` (time-major leading axis) with
    /// the input current pre-multiplied by the constant `scale`.
    pub fn lif(
        &self,
        time_steps: usize,
        scale: f64,
        params: &LifParams,
        spike_fn: SpikeFn,
    ) -> Result<Var> {
        let x = self.value();
        if time_steps == 0 || x.is_empty() {
            return Err(Error::EmptyInput("spiking layer needs at least one time step"));
        }
        if x.shape()[0] % time_steps != 0 {
            return Err(Error::shape("lif", x.shape(), &[time_steps]));
        }
        let n = x.len() / time_steps;
        let mut u = vec![params.u_rest; n];
        let mut out = vec![0.0; x.len()];
        let keep = self.requires_grad();
        let mut vs = if keep { vec![0.0; x.len()] } else { Vec::new() };
        for t in 0..time_steps {
            let i_t = &x.data()[t * n..(t + 1) * n];
            let s_t = &mut out[t * n..(t + 1) * n];
            for k in 0..n {
                let v = params.charge(u[k], scale * i_t[k]);
                if keep {
                    vs[t * n + k] = v;
                }
                let s = match spike_fn {
                    SpikeFn::Heaviside(_) => f64::from(u8::from(params.fires(v))),
                    SpikeFn::Smooth(sg) => sg.smooth_step(v - params.u_th),
                };
                s_t[k] = s;
                u[k] = s * params.u_rest + (1.0 - s) * v;
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(Var::derived(
            out,
            vec![self.clone()],
            LifOp {
                v: vs,
                time_steps,
                scale,
                params: *params,
                spike_fn,
            },
        ))
    }

    pub fn maxpool2d(&self, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let (v, argmax) = maxpool2d(self.value(), window, stride, pad)?;
        Ok(Var::derived(
            v,
            vec![self.clone()],
            MaxPoolOp {
                argmax,
                input_shape: self.shape().to_vec(),
            },
        ))
    }

    /// `[N, C, H, W] -> [N, C]` mean over the spatial axes.
    pub fn global_avg_pool(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", s, &[4]));
        }
        let (nc, hw) = (s[0] * s[1], s[2] * s[3]);
        let d = self.value().data();
        let out = (0..nc)
            .map(|i| d[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(Var::derived(
            Tensor::new(&[s[0], s[1]], out)?,
            vec![self.clone()],
            AvgPoolOp(s.to_vec()),
        ))
    }

    /// Adds `bias[K]` to every row of `[N, K]`.
    pub fn add_bias(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::shape("add_bias", s, bias.shape()));
        }
        let k = s[1];
        let b = bias.value().data();
        let mut v = self.value().clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += b[i % k];
        }
        Ok(Var::derived(v, vec![self.clone(), bias.clone()], AddBiasOp))
    }

    /// `[T·B, ...] -> [B, ...]` mean over the leading time axis.
    pub fn mean_over_time(&self, time_steps: usize) -> Result<Var> {
        let s = self.shape();
        if s.is_empty() || time_steps == 0 || s[0] % time_steps != 0 {
            return Err(Error::shape("mean_over_time", s, &[time_steps]));
        }
        let n = self.value().len() / time_steps;
        let mut out = vec![0.0; n];
        for t in 0..time_steps {
            for (o, x) in out.iter_mut().zip(&self.value().data()[t * n..(t + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= time_steps as f64;
        }
        let mut shape = s.to_vec();
        shape[0] /= time_steps;
        Ok(Var::derived(
            Tensor::new(&shape, out)?,
            vec![self.clone()],
            MeanTimeOp(time_steps),
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value().data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        Ok(Var::derived(
            Tensor::scalar(loss / b as f64),
            vec![self.clone()],
            CrossEntropyOp {
                probs,
                labels: labels.to_vec(),
                k,
            },
        ))
    }

    pub fn sum(&self) -> Var {
        Var::derived(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            SumOp(self.shape().to_vec()),
        )
    }

    /// `Σ self ⊙ weights` against a constant tensor.
    pub fn dot_const(&self, weights: &Tensor) -> Result<Var> {
        let v = self.value().zip_map(weights, |a, b| a * b)?.sum();
        Ok(Var::derived(
            Tensor::scalar(v),
            vec![self.clone()],
            DotConstOp(weights.clone()),
        ))
    }
}

/// Gradients produced by [`backward`].
#[derive(Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient of a [`Var::leaf`].
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.leaves.get(&var.0.id)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }
}

/// Reverse sweep from a scalar `loss`.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if loss.value().len() != 1 {
        return Err(Error::shape("backward", loss.shape(), &[]));
    }
    let mut grads = Gradients::default();
    if !loss.requires_grad() {
        log::warn!("backward called on a value not connected to any parameter");
        return Ok(grads);
    }
    // Ids grow with creation order, so descending id is a reverse topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        stack.extend(v.0.parents.iter().cloned());
        order.push(v);
    }
    order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    let mut pending: HashMap<u64, Tensor> = HashMap::new();
    pending.insert(loss.0.id, Tensor::full(loss.shape(), 1.0));
    for var in order {
        let Some(g) = pending.remove(&var.0.id) else {
            continue;
        };
        let node = &var.0;
        if let Some(op) = &node.op {
            let parent_grads = op.backward(&g, &node.value, &node.parents)?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                match pending.get_mut(&p.0.id) {
                    Some(acc) => acc.add_assign(&pg)?,
                    None => {
                        pending.insert(p.0.id, pg);
                    }
                }
            }
        } else if let Some(id) = node.param {
            match grads.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    grads.params.insert(id, g);
                }
            }
        } else {
            grads.leaves.insert(node.id, g);
        }
    }
    Ok(grads)
}

fn needs(parents: &[Var], i: usize) -> bool {
    parents[i].requires_grad()
}

struct AddOp;
impl Backward for AddOp {
    fn backward(&self, g: &Tensor, _: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn backward(&self, g: &Tensor, _: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

struct ReshapeOp(Vec<usize>);
impl Backward for ReshapeOp {
    fn backward(&self, g: &Tensor, _: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone().reshape(&self.0)?)])
    }
}

struct RepeatOp(usize);
impl Backward for RepeatOp {
    fn backward(&self, g: &Tensor, _: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let n = g.len() / self.0;
        let mut d = vec![0.0; n];
        for chunk in g.data().chunks(n) {
            for (a, b) in d.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        Ok(vec![Some(Tensor::new(p[0].shape(), d)?)])
    }
}

struct BmmOp {
    ta: Transpose,
    tb: Transpose,
}

fn flip(t: Transpose) -> Transpose {
    match t {
        Transpose::No => Transpose::Yes,
        Transpose::Yes => Transpose::No,
    }
}

impl Backward for BmmOp {
    fn backward(&self, g: &Tensor, _: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (p[0].value(), p[1].value());
        let da = if needs(p, 0) {
            Some(match self.ta {
                Transpose::No => bmm(g, Transpose::No, b, flip(self.tb))?,
                Transpose::Yes => bmm(b, self.tb, g, Transpose::Yes)?,
            })
        } else {
            None
        };
        let db = if needs(p, 1) {
            Some(match self.tb {
                Transpose::No => bmm(a, flip(self.ta), g, Transpose::No)?,
                Transpose::Yes => bmm(g, Transpose::Yes, a, self.ta)?,
            })
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

struct ConvOp(ConvSpec);
impl Backward for ConvOp {
    fn backward(&self, g: &Tensor, _: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let (dx, dw) = conv2d_backward(p[0].value(), p[1].value(), g, self.0, needs(p, 0))?;
        Ok(vec![dx, needs(p, 1).then_some(dw)])
    }
}

struct BnOp {
    stats: BnStats,
    mode: BnMode,
}
impl Backward for BnOp {
    fn backward(&self, g: &Tensor, _: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let (dx, dgamma, dbeta) =
            batchnorm_backward(p[0].value(), p[1].value().data(), &self.stats, self.mode, g)?;
        let c = dgamma.len();
        Ok(vec![
            needs(p, 0).then_some(dx),
            Some(Tensor::new(&[c], dgamma)?),
            Some(Tensor::new(&[c], dbeta)?),
        ])
    }
}

struct LifOp {
    v: Vec<f64>,
    time_steps: usize,
    scale: f64,
    params: LifParams,
    spike_fn: SpikeFn,
}

impl Backward for LifOp {
    fn backward(&self, g: &Tensor, out: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let n = g.len() / self.time_steps;
        let p = &self.params;
        let sg = self.spike_fn.surrogate();
        let decay = 1.0 - 1.0 / p.tau;
        let mut du = vec![0.0; n];
        let mut dx = vec![0.0; g.len()];
        for t in (0..self.time_steps).rev() {
            for k in 0..n {
                let idx = t * n + k;
                let (v, s) = (self.v[idx], out.data()[idx]);
                let dsdv = sg.grad(v - p.u_th);
                let dreset = match self.spike_fn {
                    // reset path detached from the spike
                    SpikeFn::Heaviside(_) => 1.0 - s,
                    SpikeFn::Smooth(_) => (1.0 - s) + (p.u_rest - v) * dsdv,
                };
                let dv = g.data()[idx] * dsdv + du[k] * dreset;
                dx[idx] = dv * self.scale / p.tau;
                du[k] = dv * decay;
            }
        }
        Ok(vec![Some(Tensor::new(g.shape(), dx)?)])
    }
}

struct MaxPoolOp {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}
impl Backward for MaxPoolOp {
    fn backward(&self, g: &Tensor, _: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(maxpool2d_backward(&self.input_shape, &self.argmax, g))])
    }
}

struct AvgPoolOp(Vec<usize>);
impl Backward for AvgPoolOp {
    fn backward(&self, g: &Tensor, _: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let hw = self.0[2] * self.0[3];
        let inv = 1.0 / hw as f64;
        let gd = g.data();
        Ok(vec![Some(Tensor::from_fn(&self.0, |i| gd[i / hw] * inv))])
    }
}

struct AddBiasOp;
impl Backward for AddBiasOp {
    fn backward(&self, g: &Tensor, _: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let k = p[1].value().len();
        let mut db = vec![0.0; k];
        for (i, v) in g.data().iter().enumerate() {
            db[i % k] += v;
        }
        Ok(vec![Some(g.clone()), Some(Tensor::new(&[k], db)?)])
    }
}

struct MeanTimeOp(usize);
impl Backward for MeanTimeOp {
    fn backward(&self, g: &Tensor, _: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let n = g.len();
        let inv = 1.0 / self.0 as f64;
        let gd = g.data();
        Ok(vec![Some(Tensor::from_fn(p[0].shape(), |i| gd[i % n] * inv))])
    }
}

struct CrossEntropyOp {
    probs: Vec<f64>,
    labels: Vec<usize>,
    k: usize,
}
impl Backward for CrossEntropyOp {
    fn backward(&self, g: &Tensor, _: &Tensor, p: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let b = self.labels.len();
        let scale = g.item() / b as f64;
        let mut d = self.probs.clone();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * self.k + l] -= 1.0;
        }
        for v in &mut d {
            *v *= scale;
        }
        Ok(vec![Some(Tensor::new(p[0].shape(), d)?)])
    }
}

struct SumOp(Vec<usize>);
impl Backward for SumOp {
    fn backward(&self, g: &Tensor, _: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(&self.0, g.item()))])
    }
}

struct DotConstOp(Tensor);
impl Backward for DotConstOp {
    fn backward(&self, g: &Tensor, _: &Tensor, _: &[Var]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(self.0.scale(g.item()))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::{SurrogateKind, SurrogateSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < tol || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    fn check(x: Tensor, f: impl Fn(&Var) -> Var) {
        let leaf = Var::leaf(x.clone());
        let loss = f(&leaf);
        let grads = backward(&loss).unwrap();
        let analytic = grads.get(&leaf).unwrap().clone();
        let numeric = numeric_grad(&x, |t| f(&Var::constant(t.clone())).value().item());
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        // loss = Σ (W·x) => dW[i][j] = x[j]
        let w = Var::leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
        let x = Var::constant(Tensor::new(&[2, 1], vec![0.5, -2.0]).unwrap());
        let loss = w.matmul(&x).unwrap().sum();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let c = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let r = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 4], 1.0, &mut rng);
        check(a, |a| {
            let ab = a.matmul(&Var::constant(b.clone())).unwrap();
            let abc = ab.matmul(&Var::constant(c.clone())).unwrap();
            abc.dot_const(&r).unwrap()
        });
    }

    #[test]
    fn transposed_bmm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let other = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        for (ta, tb) in [
            (Transpose::No, Transpose::No),
            (Transpose::Yes, Transpose::No),
            (Transpose::No, Transpose::Yes),
            (Transpose::Yes, Transpose::Yes),
        ] {
            let a_shape: [usize; 3] = match (ta, tb) {
                (Transpose::No, Transpose::No) => [2, 5, 3],
                (Transpose::Yes, Transpose::No) => [2, 3, 5],
                (Transpose::No, Transpose::Yes) => [2, 5, 4],
                (Transpose::Yes, Transpose::Yes) => [2, 4, 5],
            };
            let a = Tensor::randn(&a_shape, 1.0, &mut rng);
            let o = other.clone();
            let out_shape = bmm(&a, ta, &o, tb).unwrap().shape().to_vec();
            let r = Tensor::randn(&out_shape, 1.0, &mut rng);
            check(a.clone(), |v| {
                v.bmm(ta, &Var::constant(o.clone()), tb).unwrap().dot_const(&r).unwrap()
            });
            check(o.clone(), |v| {
                Var::constant(a.clone()).bmm(ta, v, tb).unwrap().dot_const(&r).unwrap()
            });
        }
    }

    #[test]
    fn conv_bn_pool_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[4, 2, 3, 3], 0.5, &mut rng);
        let gamma = Tensor::randn(&[4], 1.0, &mut rng);
        let beta = Tensor::randn(&[4], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 4, 6, 6], 1.0, &mut rng);
        let st = BatchNormState::new(4);
        let r = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut rng);
        check(x, |x| {
            let y = x.conv2d(&Var::constant(w.clone()), ConvSpec::new(1, 1, 2)).unwrap();
            let (y, _) = y
                .batchnorm(
                    &Var::constant(gamma.clone()),
                    &Var::constant(beta.clone()),
                    &st,
                    BnMode::Train,
                )
                .unwrap();
            y.maxpool2d(3, 2, 1).unwrap().dot_const(&r).unwrap()
        });
    }

    #[test]
    fn bn_affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let r = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let st = BatchNormState::new(3);
        for mode in [BnMode::Train, BnMode::Eval] {
            check(Tensor::randn(&[3], 1.0, &mut rng), |g| {
                let (y, _) = Var::constant(x.clone())
                    .batchnorm(g, &Var::constant(Tensor::zeros(&[3])), &st, mode)
                    .unwrap();
                y.dot_const(&r).unwrap()
            });
        }
    }

    #[test]
    fn smooth_lif_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = SurrogateSpec::new(SurrogateKind::SigmoidDerivative, 1.0).unwrap();
        let x = Tensor::randn(&[4 * 2, 3], 1.5, &mut rng);
        let r = Tensor::randn(&[8, 3], 1.0, &mut rng);
        check(x, |x| {
            x.lif(4, 0.8, &LifParams::default(), SpikeFn::Smooth(spec))
                .unwrap()
                .dot_const(&r)
                .unwrap()
        });
    }

    #[test]
    fn heaviside_lif_uses_surrogate() {
        // Single step: ds/dI = σ'(I/τ − u_th)/τ.
        let p = LifParams::default();
        let spec = SurrogateSpec::default();
        let x = Var::leaf(Tensor::new(&[1, 3], vec![1.0, 2.0, 2.5]).unwrap());
        let s = x.lif(1, 1.0, &p, SpikeFn::Heaviside(spec)).unwrap();
        assert_eq!(s.value().data(), &[0.0, 1.0, 1.0]);
        let g = backward(&s.sum()).unwrap();
        let expect: Vec<f64> = [1.0, 2.0, 2.5].iter().map(|i| spec.grad(i / 2.0 - 1.0) / 2.0).collect();
        assert_eq!(g.get(&x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn head_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        check(Tensor::randn(&[2 * 2, 3, 2, 2], 1.0, &mut rng), |x| {
            let pooled = x.global_avg_pool().unwrap();
            let logits = pooled
                .bmm(Transpose::No, &Var::constant(w.clone()), Transpose::Yes)
                .unwrap()
                .add_bias(&Var::constant(b.clone()))
                .unwrap()
                .mean_over_time(2)
                .unwrap();
            logits.cross_entropy(&[1, 4]).unwrap()
        });
    }

    #[test]
    fn repeat_then_mean_is_identity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = Tensor::randn(&[6, 2], 1.0, &mut rng);
        check(Tensor::randn(&[2, 2], 1.0, &mut rng), |x| {
            x.repeat_leading(3).unwrap().dot_const(&r).unwrap()
        });
    }

    #[test]
    fn accumulation_doubles() {
        let w = Var::param(Tensor::full(&[2], 1.5), ParamId(0), true);
        let loss = w.scale(3.0).add(&w).unwrap().sum();
        let g1 = backward(&loss).unwrap();
        assert_eq!(g1.param(ParamId(0)).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn disconnected_loss_is_empty() {
        let c = Var::constant(Tensor::full(&[3], 1.0)).sum();
        assert!(backward(&c).unwrap().is_empty());
    }

    #[test]
    fn no_grad_graph_keeps_no_parents() {
        let a = Var::constant(Tensor::full(&[2], 1.0));
        let b = a.scale(2.0);
        assert!(b.0.parents.is_empty());
    }
}
