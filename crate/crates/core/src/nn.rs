//! Forward-pass context and the conv + BN units every block is built from.

use crate::attention::FiringRateEma;
use crate::audit::{conv_sops, Capture, LayerKind, LayerRecord, Probe};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::neuron::{LifParams, SpikeFn};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{conv_output_size, fold_bn, is_binary, BatchNormState, BnMode, ConvSpec, Tensor, Transpose};
use rand_chacha::ChaCha8Rng;

/// How a forward pass treats normalization, firing-rate tracking and spikes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub bn_mode: BnMode,
    /// Produce BN running-stat and firing-rate EMA updates.
    pub update_state: bool,
    pub spike_fn: SpikeFn,
    pub lif: LifParams,
}

impl RunOptions {
    pub fn train(spike_fn: SpikeFn) -> Self {
        RunOptions {
            bn_mode: BnMode::Train,
            update_state: true,
            spike_fn,
            lif: LifParams::default(),
        }
    }

    pub fn eval() -> Self {
        RunOptions {
            bn_mode: BnMode::Eval,
            update_state: false,
            spike_fn: SpikeFn::default(),
            lif: LifParams::default(),
        }
    }
}

/// State changes a training forward pass wants applied afterwards.
#[derive(Clone, Debug, Default)]
pub struct StateUpdates {
    /// `(bn index, batch mean, unbiased batch variance)`.
    pub bn: Vec<(usize, Vec<f64>, Vec<f64>)>,
    /// `(ema index, batch firing rate)`.
    pub ema: Vec<(usize, f64)>,
}

pub struct Ctx<'a> {
    pub params: &'a ParamStore,
    pub bn: &'a [BatchNormState],
    pub ema: &'a [FiringRateEma],
    pub opts: RunOptions,
    pub time_steps: usize,
    pub updates: StateUpdates,
    pub probe: Option<&'a mut Probe>,
    /// Non-binary elements seen in spike outputs of a binary spike function.
    pub non_binary: u64,
}

impl<'a> Ctx<'a> {
    pub fn new(
        params: &'a ParamStore,
        bn: &'a [BatchNormState],
        ema: &'a [FiringRateEma],
        opts: RunOptions,
        time_steps: usize,
        probe: Option<&'a mut Probe>,
    ) -> Self {
        Ctx {
            params,
            bn,
            ema,
            opts,
            time_steps,
            updates: StateUpdates::default(),
            probe,
            non_binary: 0,
        }
    }

    /// Spiking neuron layer on `scale · x`.
    pub fn sn(&mut self, name: &str, x: &Var, scale: f64) -> Result<Var> {
        let s = x.lif(self.time_steps, scale, &self.opts.lif, self.opts.spike_fn)?;
        if self.opts.spike_fn.is_binary() && !is_binary(s.value()) {
            self.non_binary += s.value().data().iter().filter(|&&v| v != 0.0 && v != 1.0).count() as u64;
        }
        if let Some(probe) = self.probe.as_deref_mut() {
            probe.observe_spikes(name, s.value());
        }
        Ok(s)
    }

    /// Firing rate to use for scaling: the EMA after folding in `batch_rate`
    /// when updating, otherwise the stored EMA (or the batch rate if the EMA
    /// has never been observed).
    pub fn rate(&mut self, ema: usize, batch_rate: f64) -> Result<f64> {
        let current = self.ema[ema];
        if self.opts.update_state {
            let next = current.updated(batch_rate)?;
            self.updates.ema.push((ema, batch_rate));
            Ok(next.value().unwrap_or(batch_rate))
        } else {
            Ok(current.value().unwrap_or(batch_rate))
        }
    }

    pub fn probing(&self) -> bool {
        self.probe.is_some()
    }
}

/// How a layer reports itself to an attached probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Audit {
    /// Spike-driven synapse: count SOPs and capture for verification.
    Spikes,
    /// Real-valued input: count MACs.
    Macs,
    /// Accounted for by an enclosing layer.
    Skip,
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub name: String,
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub bn: usize,
    pub spec: ConvSpec,
}

impl ConvBn {
    pub fn forward(&self, x: &Var, ctx: &mut Ctx, audit: Audit) -> Result<Var> {
        if ctx.probing() && audit != Audit::Skip {
            self.audit(x.value(), ctx, audit)?;
        }
        let y = x.conv2d(&ctx.params.var(self.weight), self.spec)?;
        self.normalize(&y, ctx)
    }

    pub fn normalize(&self, y: &Var, ctx: &mut Ctx) -> Result<Var> {
        let (out, stats) = y.batchnorm(
            &ctx.params.var(self.gamma),
            &ctx.params.var(self.beta),
            &ctx.bn[self.bn],
            ctx.opts.bn_mode,
        )?;
        if ctx.opts.update_state {
            if let Some(var) = stats.batch_var {
                ctx.updates.bn.push((self.bn, stats.mean, var));
            }
        }
        Ok(out)
    }

    /// Kernel with the eval-mode BN scale absorbed, plus the left-over bias.
    pub fn fold(&self, params: &ParamStore, bn: &[BatchNormState], mode: BnMode) -> Result<(Tensor, Vec<f64>)> {
        fold_bn(
            params.value(self.weight),
            params.value(self.gamma).data(),
            params.value(self.beta).data(),
            &bn[self.bn],
            mode,
        )
    }

    fn audit(&self, input: &Tensor, ctx: &mut Ctx, audit: Audit) -> Result<()> {
        let w_shape = ctx.params.value(self.weight).shape().to_vec();
        let (kind, sops, macs) = match audit {
            Audit::Spikes => (LayerKind::Conv, conv_sops(input, &w_shape, self.spec)?, 0.0),
            _ => {
                let s = input.shape();
                let size = |n: usize, k: usize| {
                    conv_output_size(n, k, self.spec.stride, self.spec.pad)
                        .ok_or_else(|| Error::shape("stem", s, &w_shape))
                };
                let outputs = s[0] * w_shape[0] * size(s[2], w_shape[2])? * size(s[3], w_shape[3])?;
                let per_out = (w_shape[1] * w_shape[2] * w_shape[3]) as f64;
                (LayerKind::Stem, 0.0, outputs as f64 * per_out)
            }
        };
        let record = LayerRecord::from_input(kind, input, sops, macs);
        let capture = if audit == Audit::Spikes && ctx.probe.as_ref().is_some_and(|p| p.captures_enabled()) {
            let (weight, bias) = self.fold(ctx.params, ctx.bn, ctx.opts.bn_mode)?;
            Some(Capture::Conv {
                input: input.clone(),
                weight,
                bias,
                spec: self.spec,
            })
        } else {
            None
        };
        let probe = ctx.probe.as_deref_mut().expect("probing");
        probe.record(&self.name, record);
        if let Some(c) = capture {
            probe.capture(&self.name, c);
        }
        Ok(())
    }
}

/// Fully connected classifier applied to globally averaged spikes.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Classifier {
    /// `[N, C, H, W]` spikes to `[N, K]` logits.
    pub fn forward(&self, spikes: &Var, ctx: &mut Ctx) -> Result<Var> {
        let w = ctx.params.var(self.weight);
        if let Some(probe) = ctx.probe.as_deref_mut() {
            let x = spikes.value();
            let k = w.shape()[0];
            let nnz = x.data().iter().filter(|&&v| v != 0.0).count();
            probe.record(
                &self.name,
                LayerRecord::from_input(LayerKind::Linear, x, (nnz * k) as f64, 0.0),
            );
            if probe.captures_enabled() {
                let hw = (x.shape()[2] * x.shape()[3]) as f64;
                probe.capture(
                    &self.name,
                    Capture::Linear {
                        input: x.clone(),
                        weight: w.value().scale(1.0 / hw),
                    },
                );
            }
        }
        spikes
            .global_avg_pool()?
            .bmm(Transpose::No, &w, Transpose::Yes)?
            .add_bias(&ctx.params.var(self.bias))
    }
}

/// Allocates parameters, BN states and firing-rate trackers in build order.
pub struct Builder {
    pub params: ParamStore,
    pub bn: Vec<BatchNormState>,
    pub bn_names: Vec<String>,
    pub ema_names: Vec<String>,
    pub rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Builder {
            params: ParamStore::new(),
            bn: Vec::new(),
            bn_names: Vec::new(),
            ema_names: Vec::new(),
            rng,
        }
    }

    /// Bias-free `k×k` convolution followed by batch normalization.
    pub fn conv_bn(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Result<ConvBn> {
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::Config(format!(
                "{name}: channels {c_in}->{c_out} not divisible by {} groups",
                spec.groups
            )));
        }
        let fan_in = c_in / spec.groups * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(&[c_out, c_in / spec.groups, k, k], bound, &mut self.rng);
        let weight = self.params.add(format!("{name}.conv.weight"), w, ParamKind::Weight)?;
        let gamma = self.params.add(format!("{name}.bn.weight"), Tensor::full(&[c_out], 1.0), ParamKind::Norm)?;
        let beta = self.params.add(format!("{name}.bn.bias"), Tensor::zeros(&[c_out]), ParamKind::Norm)?;
        self.bn.push(BatchNormState::new(c_out));
        self.bn_names.push(format!("{name}.bn"));
        Ok(ConvBn {
            name: name.to_string(),
            weight,
            gamma,
            beta,
            bn: self.bn.len() - 1,
            spec,
        })
    }

    pub fn classifier(&mut self, name: &str, c_in: usize, classes: usize) -> Result<Classifier> {
        let bound = 1.0 / (c_in as f64).sqrt();
        let w = Tensor::uniform(&[classes, c_in], bound, &mut self.rng);
        let b = Tensor::uniform(&[classes], bound, &mut self.rng);
        Ok(Classifier {
            name: name.to_string(),
            weight: self.params.add(format!("{name}.weight"), w, ParamKind::Weight)?,
            bias: self.params.add(format!("{name}.bias"), b, ParamKind::Bias)?,
        })
    }

    pub fn ema(&mut self, name: &str) -> usize {
        self.ema_names.push(name.to_string());
        self.ema_names.len() - 1
    }
}
