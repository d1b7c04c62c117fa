//! The SpikingResformer family: stem, stages of Resformer blocks with
//! downsampling in between, and a rate-decoded classifier.

mod checkpoint;
mod config;

pub use checkpoint::{from_bytes as checkpoint_from_bytes, load, save, to_bytes as checkpoint_bytes, FORMAT_VERSION, MAGIC};
pub use config::{parse_kv, reference_params_m, ModelConfig, StageSpec, StemSpec, REGISTRY};
pub(crate) use config::parse_usize;

use crate::attention::{FiringRateEma, Mhdssa};
use crate::audit::Probe;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ffn::Gwsffn;
use crate::nn::{Audit, Builder, Classifier, ConvBn, Ctx, RunOptions, StateUpdates};
use crate::params::ParamStore;
use crate::tensor::{BatchNormState, ConvSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// `Y = MHDSSA(X) + X`, `X' = GWSFFN(Y) + Y`.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn: Mhdssa,
    pub ffn: Gwsffn,
}

impl Block {
    pub fn forward(&self, x: &Var, ctx: &mut Ctx) -> Result<Var> {
        let y = self.attn.forward(x, ctx)?.add(x)?;
        self.ffn.forward(&y, ctx)?.add(&y)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// SN → 3×3 stride-2 conv → BN; absent for the first stage.
    pub downsample: Option<ConvBn>,
    pub blocks: Vec<Block>,
}

pub struct Forward {
    /// `[B, num_classes]`, averaged over time steps.
    pub logits: Var,
    pub updates: StateUpdates,
    /// Non-binary spike elements observed (always 0 for a correct forward).
    pub non_binary: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bn: Vec<BatchNormState>,
    pub bn_names: Vec<String>,
    pub ema: Vec<FiringRateEma>,
    pub ema_names: Vec<String>,
    pub stem: ConvBn,
    pub stages: Vec<Stage>,
    pub head: Classifier,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let st = &config.stem;
        let stem = b.conv_bn(
            "stem",
            config.in_channels,
            config.stages[0].dim,
            st.kernel,
            ConvSpec::new(st.stride, st.pad, 1),
        )?;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, spec) in config.stages.iter().enumerate() {
            let downsample = if i == 0 {
                None
            } else {
                Some(b.conv_bn(
                    &format!("downsample{}", i + 1),
                    config.stages[i - 1].dim,
                    spec.dim,
                    3,
                    ConvSpec::new(2, 1, 1),
                )?)
            };
            let dssa = config.dssa(i)?;
            let ffn = config.gwsffn(i);
            let blocks = (0..spec.blocks)
                .map(|j| {
                    let name = format!("stage{}.block{j}", i + 1);
                    Ok(Block {
                        attn: Mhdssa::build(&mut b, &format!("{name}.attn"), dssa)?,
                        ffn: Gwsffn::build(&mut b, &format!("{name}.ffn"), ffn)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        let last = config.stages.last().expect("validated").dim;
        let head = b.classifier("classifier", last, config.num_classes)?;
        Ok(Model {
            config: config.clone(),
            ema: vec![FiringRateEma::new(); b.ema_names.len()],
            ema_names: b.ema_names,
            params: b.params,
            bn: b.bn,
            bn_names: b.bn_names,
            stem,
            stages,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn ctx<'a>(&'a self, opts: RunOptions, probe: Option<&'a mut Probe>) -> Ctx<'a> {
        Ctx::new(&self.params, &self.bn, &self.ema, opts, self.config.time_steps, probe)
    }

    /// Images `[B, C, H, W]`, presented unchanged at every time step.
    pub fn forward(&self, images: &Tensor, opts: RunOptions, probe: Option<&mut Probe>) -> Result<Forward> {
        let c = &self.config;
        let expect = [c.in_channels, c.input_height, c.input_width];
        match images.shape() {
            [b, rest @ ..] if rest == expect && *b > 0 => {}
            other => return Err(Error::shape("model input", other, &expect)),
        }
        let batch = images.shape()[0];
        let mut ctx = self.ctx(opts, probe);
        if let Some(p) = ctx.probe.as_deref_mut() {
            p.add_images(batch);
        }
        let x = self.stem_forward(&Var::constant(images.clone()), &mut ctx)?;
        let mut x = x.repeat_leading(c.time_steps)?;
        for (i, stage) in self.stages.iter().enumerate() {
            x = self.stage_forward(i, stage, &x, &mut ctx)?;
        }
        let s = ctx.sn("classifier.sn", &x, 1.0)?;
        let logits = self.head.forward(&s, &mut ctx)?.mean_over_time(c.time_steps)?;
        Ok(Forward {
            logits,
            updates: ctx.updates,
            non_binary: ctx.non_binary,
        })
    }

    fn stem_forward(&self, images: &Var, ctx: &mut Ctx) -> Result<Var> {
        let x = self.stem.forward(images, ctx, Audit::Macs)?;
        if self.config.stem.pool {
            x.maxpool2d(3, 2, 1)
        } else {
            Ok(x)
        }
    }

    fn stage_forward(&self, i: usize, stage: &Stage, x: &Var, ctx: &mut Ctx) -> Result<Var> {
        let mut x = match &stage.downsample {
            Some(ds) => {
                let s = ctx.sn(&format!("downsample{}.sn", i + 1), x, 1.0)?;
                ds.forward(&s, ctx, Audit::Spikes)?
            }
            None => x.clone(),
        };
        for block in &stage.blocks {
            x = block.forward(&x, ctx)?;
        }
        Ok(x)
    }

    /// Runs one block on a `[T·B, D, H, W]` current.
    pub fn block_forward(&self, stage: usize, block: usize, x: &Var, opts: RunOptions) -> Result<(Var, StateUpdates)> {
        let b = self
            .stages
            .get(stage)
            .and_then(|s| s.blocks.get(block))
            .ok_or_else(|| Error::Config(format!("no block {block} in stage {}", stage + 1)))?;
        let mut ctx = self.ctx(opts, None);
        let y = b.forward(x, &mut ctx)?;
        Ok((y, ctx.updates))
    }

    /// Eval-mode logits.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images, RunOptions::eval(), None)?.logits.value().clone())
    }

    pub fn apply(&mut self, updates: &StateUpdates) -> Result<()> {
        for (i, mean, var) in &updates.bn {
            self.bn[*i].update(mean, var);
        }
        for &(i, rate) in &updates.ema {
            self.ema[i] = self.ema[i].updated(rate)?;
        }
        Ok(())
    }

    /// Parameter count grouped by layer type, for comparison with reported totals.
    pub fn param_breakdown(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for (_, p) in self.params.iter() {
            let n = &p.name;
            let group = if n.ends_with(".bn.weight") || n.ends_with(".bn.bias") {
                "batchnorm affine"
            } else if n.starts_with("stem") {
                "stem conv"
            } else if n.starts_with("downsample") {
                "downsample conv"
            } else if n.starts_with("classifier") {
                "classifier"
            } else if n.contains(".map_proj.") {
                "dssa attention-map patch conv"
            } else if n.contains(".feat_proj.") {
                "dssa feature patch conv"
            } else if n.contains(".out_proj.") {
                "mhdssa output projection"
            } else if n.contains(".gwl.") {
                "gwsffn group conv"
            } else {
                "gwsffn point-wise convs"
            };
            *out.entry(group).or_insert(0) += p.value.len();
        }
        out
    }

    /// Architecture summary lines, one per stage plus stem and classifier.
    pub fn stage_summary(&self) -> Result<Vec<String>> {
        let c = &self.config;
        let sizes = c.stage_sizes()?;
        let mut out = vec![format!(
            "stem: conv {k}x{k} stride {s}{pool} -> {h}x{w}",
            k = c.stem.kernel,
            s = c.stem.stride,
            pool = if c.stem.pool { ", maxpool 3x3 stride 2" } else { "" },
            h = sizes[0].0,
            w = sizes[0].1
        )];
        for (i, (s, (h, w))) in c.stages.iter().zip(&sizes).enumerate() {
            let ds = if i > 0 {
                format!("downsample conv 3x3 {} stride 2; ", s.dim)
            } else {
                String::new()
            };
            out.push(format!(
                "stage {}: {h}x{w}; {ds}[D={}, H={}, p={}, R={}, G={}] x{}",
                i + 1,
                s.dim,
                s.heads,
                s.p,
                s.ratio,
                s.group,
                s.blocks
            ));
        }
        out.push(format!("classifier: {}-FC", c.num_classes));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::SpikeFn;
    use crate::tensor::BnMode;
    use rand::SeedableRng;

    fn nano() -> Model {
        Model::build(&ModelConfig::registry("Nano").unwrap(), 3).unwrap()
    }

    fn images(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[b, 3, 32, 32], 1.0, &mut rng)
    }

    #[test]
    fn logits_shape_and_determinism() {
        let m = nano();
        let x = images(2, 1);
        let a = m.predict(&x).unwrap();
        assert_eq!(a.shape(), &[2, 10]);
        let b = Model::build(&m.config, 3).unwrap().predict(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let m = nano();
        let x = images(3, 2);
        let parts = x.unstack();
        let swapped = Tensor::stack(&[parts[2].clone(), parts[0].clone(), parts[1].clone()]).unwrap();
        let a = m.predict(&x).unwrap().unstack();
        let b = m.predict(&swapped).unwrap().unstack();
        assert_eq!(a[2], b[0]);
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[2]);
    }

    #[test]
    fn wrong_channel_count() {
        let m = nano();
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 1, 32, 32])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn training_forward_updates_state() {
        let mut m = nano();
        let f = m.forward(&images(2, 3), RunOptions::train(SpikeFn::default()), None).unwrap();
        assert_eq!(f.updates.ema.len(), m.ema.len());
        assert_eq!(f.updates.bn.len(), m.bn.len());
        m.apply(&f.updates).unwrap();
        assert!(m.ema.iter().all(|e| e.value().is_some_and(|v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn residuals_matter() {
        // Zeroing a block's two branch outputs leaves exact identity.
        let mut m = nano();
        let blk = m.stages[1].blocks[0].clone();
        for id in [blk.attn.out_proj.gamma, blk.attn.out_proj.beta, blk.ffn.ffl2.gamma, blk.ffn.ffl2.beta] {
            let len = m.params.value(id).len();
            m.params.get_mut(id).value = Tensor::zeros(&[len]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Var::constant(Tensor::randn(&[4, 64, 16, 16], 2.0, &mut rng));
        let opts = RunOptions {
            bn_mode: BnMode::Train,
            ..RunOptions::eval()
        };
        let (y, _) = m.block_forward(1, 0, &x, opts).unwrap();
        assert_eq!(y.value(), x.value());
        // With live branches the output differs from the input.
        let m = nano();
        let (y, _) = m.block_forward(1, 0, &x, opts).unwrap();
        assert_ne!(y.value(), x.value());
    }

    #[test]
    fn summary_lines() {
        let m = Model::build(&ModelConfig::registry("Ti").unwrap(), 0).unwrap();
        let s = m.stage_summary().unwrap();
        assert!(s[0].contains("56x56"));
        assert!(s[2].contains("28x28") && s[2].contains("downsample conv 3x3 192 stride 2"));
        assert!(s[3].contains("14x14") && s[3].contains("x3"));
    }
}
