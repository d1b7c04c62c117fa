//! Group-wise spiking feed-forward network.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Audit, Builder, ConvBn, Ctx};
use crate::tensor::ConvSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GwsffnConfig {
    pub dim: usize,
    pub ratio: usize,
    /// Channels per group in the 3×3 convolution.
    pub group: usize,
}

impl GwsffnConfig {
    pub fn hidden(&self) -> usize {
        self.dim * self.ratio
    }

    pub fn groups(&self) -> usize {
        self.hidden() / self.group
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 1 {
            return Err(Error::Config(format!("expansion ratio {} must be >= 1", self.ratio)));
        }
        if self.group == 0 || self.hidden() % self.group != 0 {
            return Err(Error::Config(format!(
                "hidden dimension {} not divisible by group size {}",
                self.hidden(),
                self.group
            )));
        }
        Ok(())
    }

    /// Learnable scalars: two point-wise kernels, the grouped kernel and three BN affines.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dim, self.hidden());
        2 * d * h + self.groups() * self.group * self.group * 9 + 2 * (h + h + d)
    }
}

/// `FFL₂(GWL(FFL₁(X)))` with `FFL(X) = BN(Conv₁(SN(X)))` and
/// `GWL(X) = BN(GWConv(SN(X))) + X`.
#[derive(Clone, Debug)]
pub struct Gwsffn {
    pub name: String,
    pub cfg: GwsffnConfig,
    pub ffl1: ConvBn,
    pub gwl: ConvBn,
    pub ffl2: ConvBn,
}

impl Gwsffn {
    pub fn build(b: &mut Builder, name: &str, cfg: GwsffnConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.dim, cfg.hidden());
        Ok(Gwsffn {
            name: name.to_string(),
            cfg,
            ffl1: b.conv_bn(&format!("{name}.ffl1"), d, h, 1, ConvSpec::POINTWISE)?,
            gwl: b.conv_bn(&format!("{name}.gwl"), h, h, 3, ConvSpec::new(1, 1, cfg.groups()))?,
            ffl2: b.conv_bn(&format!("{name}.ffl2"), h, d, 1, ConvSpec::POINTWISE)?,
        })
    }

    pub fn forward(&self, x: &Var, ctx: &mut Ctx) -> Result<Var> {
        if x.shape().get(1) != Some(&self.cfg.dim) {
            return Err(Error::shape("gwsffn", x.shape(), &[self.cfg.dim]));
        }
        let name = &self.name;
        let s = ctx.sn(&format!("{name}.ffl1.sn"), x, 1.0)?;
        let h = self.ffl1.forward(&s, ctx, Audit::Spikes)?;
        let s = ctx.sn(&format!("{name}.gwl.sn"), &h, 1.0)?;
        let g = self.gwl.forward(&s, ctx, Audit::Spikes)?.add(&h)?;
        let s = ctx.sn(&format!("{name}.ffl2.sn"), &g, 1.0)?;
        self.ffl2.forward(&s, ctx, Audit::Spikes)
    }
}
