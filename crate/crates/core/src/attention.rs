//! Dual spike transformation, dual spike self-attention and its scaling.

use crate::audit::{Capture, LayerKind, LayerRecord};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Audit, Builder, ConvBn, Ctx};
use crate::tensor::{bmm, ConvSpec, SpikeTensor, Tensor, Transpose};
use serde::{Deserialize, Serialize};

pub const EMA_MOMENTUM: f64 = 0.999;
/// Lower bound on firing rates inside the scaling factors.
pub const RATE_FLOOR: f64 = 1e-4;

/// Exponential moving average of a firing rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FiringRateEma {
    value: f64,
    initialized: bool,
}

impl FiringRateEma {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(value: f64, initialized: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Format(format!("firing-rate EMA {value} outside [0, 1]")));
        }
        Ok(FiringRateEma { value, initialized })
    }

    pub fn value(&self) -> Option<f64> {
        self.initialized.then_some(self.value)
    }

    pub fn raw(&self) -> (f64, bool) {
        (self.value, self.initialized)
    }

    pub fn updated(self, batch_rate: f64) -> Result<Self> {
        update_rate(self, batch_rate)
    }
}

pub fn update_rate(ema: FiringRateEma, batch_rate: f64) -> Result<FiringRateEma> {
    if !(0.0..=1.0).contains(&batch_rate) {
        return Err(Error::Contract(format!(
            "batch firing rate {batch_rate} outside [0, 1]"
        )));
    }
    let value = if ema.initialized {
        (EMA_MOMENTUM * ema.value + (1.0 - EMA_MOMENTUM) * batch_rate).clamp(0.0, 1.0)
    } else {
        batch_rate
    };
    Ok(FiringRateEma {
        value,
        initialized: true,
    })
}

/// `1/√(f_X·d)`.
pub fn scale_c1(f_x: f64, d: usize) -> f64 {
    1.0 / (f_x.max(RATE_FLOOR) * d as f64).sqrt()
}

/// `1/√(f_Attn·HW/p²)`.
pub fn scale_c2(f_attn: f64, hw: usize, p: usize) -> f64 {
    1.0 / (f_attn.max(RATE_FLOOR) * (hw / (p * p)) as f64).sqrt()
}

/// `1/√(HW·f_Q·f_K·(1 − f_Q·f_K))`, the scaling a spike-driven attention
/// built on Hadamard products of Q and K would need.
pub fn sdsa_scale(f_q: f64, f_k: f64, hw: usize) -> f64 {
    let r = (f_q * f_k).max(RATE_FLOOR);
    1.0 / (hw as f64 * r * (1.0 - r).max(RATE_FLOOR)).sqrt()
}

fn rank3(t: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::shape(op, t.shape(), &[3]))
}

fn right_mul(x: &Tensor, w: &Tensor, tw: Transpose) -> Result<Tensor> {
    let [t, p, m] = rank3(x, "dst")?;
    let flat = x.clone().reshape(&[t * p, m])?;
    let out = bmm(&flat, Transpose::No, w, tw)?;
    let q = out.shape()[1];
    out.reshape(&[t, p, q])
}

/// `X·Y·W` per time step, with X `[T,p,m]`, Y `[T,m,q]` and `W` `[q,q]`.
pub fn dst(x: &SpikeTensor, y: &SpikeTensor, w: &Tensor) -> Result<Tensor> {
    let xy = bmm(x.as_tensor(), Transpose::No, y.as_tensor(), Transpose::No)?;
    right_mul(&xy, w, Transpose::No)
}

/// `X·Wᵀ·Yᵀ` per time step, with X `[T,p,m]`, Y `[T,q,m]` and `W` `[m,m]`.
pub fn dst_t(x: &SpikeTensor, y: &SpikeTensor, w: &Tensor) -> Result<Tensor> {
    let xw = right_mul(x.as_tensor(), w, Transpose::Yes)?;
    bmm(&xw, Transpose::No, y.as_tensor(), Transpose::Yes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DssaConfig {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub p: usize,
    pub heads: usize,
}

impl DssaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.p == 0 || self.height % self.p != 0 || self.width % self.p != 0 {
            return Err(Error::Config(format!(
                "feature map {}x{} not divisible into {}x{} patches",
                self.height, self.width, self.p, self.p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    /// Spatial positions after the stride-p patch transform.
    pub fn reduced_hw(&self) -> usize {
        self.hw() / (self.p * self.p)
    }
}

/// Multi-head DSSA: `BN(Conv₁([DSSAᵢ(SN(X))]ᵢ))`.
#[derive(Clone, Debug)]
pub struct Mhdssa {
    pub name: String,
    pub cfg: DssaConfig,
    /// Patch transform feeding the attention-map product.
    pub map_proj: ConvBn,
    /// Patch transform feeding the output product.
    pub feat_proj: ConvBn,
    pub out_proj: ConvBn,
    pub rate_x: usize,
    pub rate_attn: usize,
}

impl Mhdssa {
    pub fn build(b: &mut Builder, name: &str, cfg: DssaConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, p) = (cfg.dim, cfg.p);
        let patch = ConvSpec::new(p, 0, 1);
        Ok(Mhdssa {
            name: name.to_string(),
            cfg,
            map_proj: b.conv_bn(&format!("{name}.map_proj"), d, d, p, patch)?,
            feat_proj: b.conv_bn(&format!("{name}.feat_proj"), d, d, p, patch)?,
            out_proj: b.conv_bn(&format!("{name}.out_proj"), d, d, 1, ConvSpec::POINTWISE)?,
            rate_x: b.ema(&format!("{name}.f_x")),
            rate_attn: b.ema(&format!("{name}.f_attn")),
        })
    }

    /// Current `[N, d, H, W]` to current of the same shape.
    pub fn forward(&self, x: &Var, ctx: &mut Ctx) -> Result<Var> {
        let spikes = self.forward_heads(x, ctx)?;
        self.out_proj.forward(&spikes, ctx, Audit::Spikes)
    }

    /// Concatenated per-head DSSA spikes, before the output projection.
    pub fn forward_heads(&self, x: &Var, ctx: &mut Ctx) -> Result<Var> {
        let c = &self.cfg;
        let n = match x.shape() {
            [n, d, h, w] if *d == c.dim && *h == c.height && *w == c.width => *n,
            other => {
                return Err(Error::shape(
                    "mhdssa",
                    other,
                    &[c.dim, c.height, c.width],
                ))
            }
        };
        let (heads, dh, hw, hw2) = (c.heads, c.head_dim(), c.hw(), c.reduced_hw());
        let name = &self.name;

        let s = ctx.sn(&format!("{name}.sn_in"), x, 1.0)?;
        let f_x = ctx.rate(self.rate_x, s.value().mean())?;
        let c1 = scale_c1(f_x, dh);
        let ymap = self.map_proj.forward(&s, ctx, Audit::Skip)?;
        let yfeat = self.feat_proj.forward(&s, ctx, Audit::Skip)?;

        let xs = s.reshape(&[n * heads, dh, hw])?;
        let ym = ymap.reshape(&[n * heads, dh, hw2])?;
        // [N·h, HW, HW/p²]: rows are query positions, columns patches.
        let cur_map = xs.bmm(Transpose::Yes, &ym, Transpose::No)?;
        let attn = ctx.sn(&format!("{name}.attn_map"), &cur_map, c1)?;
        let f_attn = ctx.rate(self.rate_attn, attn.value().mean())?;
        let c2 = scale_c2(f_attn, hw, c.p);

        let yf = yfeat.reshape(&[n * heads, dh, hw2])?;
        let cur_out = yf.bmm(Transpose::No, &attn, Transpose::Yes)?;
        let out = ctx.sn(&format!("{name}.dssa_out"), &cur_out, c2)?;

        if ctx.probing() {
            self.audit(s.value(), attn.value(), ctx)?;
        }
        out.reshape(&[n, c.dim, c.height, c.width])
    }

    fn audit(&self, src: &Tensor, attn: &Tensor, ctx: &mut Ctx) -> Result<()> {
        let c = &self.cfg;
        let (heads, dh, hw, hw2, p) = (c.heads, c.head_dim(), c.hw(), c.reduced_hw(), c.p);
        let n = src.shape()[0];
        let plane = c.dim * hw;
        let (mut pairs_t, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            let sample = &src.data()[i * plane..(i + 1) * plane];
            // Spikes per patch window across all channels: the nonzeros of g_Y(src) row j.
            let mut window = vec![0usize; hw2];
            let wo = c.width / p;
            for ch in 0..c.dim {
                for y in 0..c.height {
                    for x in 0..c.width {
                        if sample[ch * hw + y * c.width + x] != 0.0 {
                            window[(y / p) * wo + x / p] += 1;
                        }
                    }
                }
            }
            let total: usize = window.iter().sum();
            for h in 0..heads {
                let head = &sample[h * dh * hw..(h + 1) * dh * hw];
                let nnz = head.iter().filter(|&&v| v != 0.0).count();
                pairs_t += (nnz * total) as f64;
                let a = &attn.data()[(i * heads + h) * hw * hw2..][..hw * hw2];
                for (j, &wj) in window.iter().enumerate() {
                    let col = (0..hw).filter(|&r| a[r * hw2 + j] != 0.0).count();
                    pairs += (col * wj) as f64;
                }
            }
        }
        let capture = ctx.probe.as_ref().is_some_and(|pr| pr.captures_enabled());
        let folded = if capture {
            let (wm, bm) = self.map_proj.fold(ctx.params, ctx.bn, ctx.opts.bn_mode)?;
            let (wf, bf) = self.feat_proj.fold(ctx.params, ctx.bn, ctx.opts.bn_mode)?;
            Some(((wm, bm), (wf, bf)))
        } else {
            None
        };
        let probe = ctx.probe.as_deref_mut().expect("probing");
        let name_t = format!("{}.dst_t", self.name);
        let name_d = format!("{}.dst", self.name);
        probe.record(&name_t, LayerRecord::from_input(LayerKind::DstT, src, pairs_t, 0.0));
        probe.record(
            &name_d,
            LayerRecord::from_input(LayerKind::Dst, attn, pairs * dh as f64, 0.0),
        );
        if let Some(((wm, bm), (wf, bf))) = folded {
            probe.capture(
                &name_t,
                Capture::DstT {
                    src: src.clone(),
                    weight: wm,
                    bias: bm,
                    p,
                    heads,
                },
            );
            probe.capture(
                &name_d,
                Capture::Dst {
                    attn: attn.clone(),
                    src: src.clone(),
                    weight: wf,
                    bias: bf,
                    p,
                    heads,
                },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RunOptions;
    use crate::tensor::BN_EPS;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spikes(shape: &[usize], bits: &[u8]) -> SpikeTensor {
        SpikeTensor::new(shape, bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn ema_first_observation_and_plug_in() {
        let e = update_rate(FiringRateEma::new(), 0.3).unwrap();
        assert_eq!(e.value(), Some(0.3));
        let e = update_rate(FiringRateEma::from_parts(0.5, true).unwrap(), 0.3).unwrap();
        assert!((e.value().unwrap() - 0.4998).abs() < 1e-12);
    }

    #[test]
    fn ema_converges_to_constant_rate() {
        let mut e = update_rate(FiringRateEma::new(), 0.9).unwrap();
        for _ in 0..20_000 {
            e = update_rate(e, 0.2).unwrap();
        }
        assert!((e.value().unwrap() - 0.2).abs() < 1e-6);
    }

    #[test]
    fn ema_rejects_out_of_range() {
        assert!(matches!(
            update_rate(FiringRateEma::new(), 1.5),
            Err(Error::Contract(_))
        ));
        assert!(update_rate(FiringRateEma::new(), -0.1).is_err());
    }

    #[test]
    fn scaling_factor_examples() {
        assert_eq!(scale_c1(1.0, 1), 1.0);
        assert_eq!(scale_c1(0.25, 64), 0.25);
        assert!(scale_c1(0.0, 64).is_finite());
        assert_eq!(scale_c1(0.0, 64), 1.0 / (RATE_FLOOR * 64.0).sqrt());
        assert_eq!(scale_c2(1.0, 16, 4), 1.0);
        assert!((scale_c2(0.5, 196, 1) - 1.0 / 98f64.sqrt()).abs() < 1e-15);
        assert!((scale_c2(0.5, 196, 1) - 0.10102).abs() < 1e-5);
        assert!(scale_c2(0.0, 196, 2).is_finite());
        assert!((sdsa_scale(0.5, 0.5, 64) - 1.0 / 12f64.sqrt()).abs() < 1e-15);
        assert!((sdsa_scale(0.5, 0.5, 64) - 0.28868).abs() < 1e-5);
        assert!((sdsa_scale(0.5, 1.0, 1) - 2.0).abs() < 1e-15);
        assert!(sdsa_scale(0.0, 0.3, 64).is_finite());
    }

    #[test]
    fn dst_worked_example() {
        let x = spikes(&[1, 2, 3], &[1, 1, 0, 0, 1, 1]);
        let y = spikes(&[1, 3, 2], &[1, 0, 0, 1, 1, 1]);
        let w = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(dst(&x, &y, &w).unwrap().data(), &[4., 6., 7., 10.]);
    }

    #[test]
    fn dst_trivial_cases() {
        let x0 = SpikeTensor::zeros(&[2, 2, 3]);
        let y = spikes(&[2, 3, 2], &[1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 0, 0]);
        let w = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert!(dst(&x0, &y, &w).unwrap().data().iter().all(|&v| v == 0.0));
        // Identity spike pattern with identity weights returns Y.
        let eye = SpikeTensor::try_from_tensor(Tensor::stack(&[Tensor::eye(3), Tensor::eye(3)]).unwrap()).unwrap();
        let out = dst(&eye, &y, &Tensor::eye(2)).unwrap();
        assert_eq!(&out, y.as_tensor());
    }

    #[test]
    fn dst_inner_mismatch() {
        let x = SpikeTensor::zeros(&[1, 2, 3]);
        let y = SpikeTensor::zeros(&[1, 4, 2]);
        assert!(matches!(dst(&x, &y, &Tensor::eye(2)), Err(Error::Shape { .. })));
        assert!(dst_t(&x, &SpikeTensor::zeros(&[1, 2, 4]), &Tensor::eye(3)).is_err());
    }

    #[test]
    fn dst_t_trivial_cases() {
        let x = spikes(&[1, 2, 3], &[1, 1, 0, 0, 1, 1]);
        let y0 = SpikeTensor::zeros(&[1, 4, 3]);
        let w = Tensor::from_fn(&[3, 3], |i| i as f64 - 4.0);
        assert!(dst_t(&x, &y0, &w).unwrap().data().iter().all(|&v| v == 0.0));
        // Identity weights give co-occurrence counts X·Yᵀ.
        let y = spikes(&[1, 2, 3], &[1, 1, 1, 0, 0, 1]);
        assert_eq!(dst_t(&x, &y, &Tensor::eye(3)).unwrap().data(), &[2., 0., 2., 1.]);
    }

    fn brute_triple(a: &Tensor, b: &Tensor, c: &Tensor) -> Vec<f64> {
        let (p, m, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1], c.shape()[1]);
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..m {
                    for l in 0..q {
                        out[i * r + j] += a.data()[i * m + k] * b.data()[k * q + l] * c.data()[l * r + j];
                    }
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn dst_t_matches_brute_force(seed in 0u64..1000, p in 1usize..5, q in 1usize..5, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = SpikeTensor::bernoulli(&[1, p, m], 0.5, &mut rng);
            let y = SpikeTensor::bernoulli(&[1, q, m], 0.5, &mut rng);
            let w = Tensor::randn(&[m, m], 1.0, &mut rng);
            let out = dst_t(&x, &y, &w).unwrap();
            let x2 = x.as_tensor().clone().reshape(&[p, m]).unwrap();
            let yt = y.as_tensor().clone().reshape(&[q, m]).unwrap().transpose().unwrap();
            let expect = brute_triple(&x2, &w.transpose().unwrap(), &yt);
            for (a, b) in out.data().iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn dst_is_linear_in_weights(seed in 0u64..1000, alpha in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = SpikeTensor::bernoulli(&[2, 3, 4], 0.4, &mut rng);
            let y = SpikeTensor::bernoulli(&[2, 4, 5], 0.4, &mut rng);
            let w = Tensor::randn(&[5, 5], 1.0, &mut rng);
            let a = dst(&x, &y, &w.scale(alpha)).unwrap();
            let b = dst(&x, &y, &w).unwrap().scale(alpha);
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
            let y2 = SpikeTensor::bernoulli(&[2, 6, 4], 0.4, &mut rng);
            let w4 = Tensor::randn(&[4, 4], 1.0, &mut rng);
            let a = dst_t(&x, &y2, &w4.scale(alpha)).unwrap();
            let b = dst_t(&x, &y2, &w4).unwrap().scale(alpha);
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }

        #[test]
        fn ema_stays_in_unit_interval(rates in proptest::collection::vec(0.0f64..=1.0, 1..50)) {
            let mut e = FiringRateEma::new();
            for r in rates {
                e = update_rate(e, r).unwrap();
                let v = e.value().unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn positive_scaling_preserves_zero_current(c in 1e-3f64..10.0) {
            // Silent inputs produce zero current, which stays zero under any c1.
            let x = SpikeTensor::zeros(&[1, 3, 4]);
            let y = SpikeTensor::bernoulli(&[1, 5, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(3));
            let cur = dst_t(&x, &y, &Tensor::full(&[4, 4], 1.0)).unwrap().scale(c);
            prop_assert!(cur.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn config_validation() {
        let ok = DssaConfig { dim: 64, height: 56, width: 56, p: 4, heads: 1 };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.reduced_hw(), 196);
        assert!(DssaConfig { heads: 3, ..ok }.validate().is_err());
        assert!(DssaConfig { p: 3, ..ok }.validate().is_err());
        let s = DssaConfig { dim: 64, height: 14, width: 14, p: 2, heads: 1 };
        assert_eq!(s.reduced_hw(), 49);
    }

    struct Fixture {
        b: Builder,
        layer: Mhdssa,
        ema: Vec<FiringRateEma>,
    }

    fn fixture(cfg: DssaConfig, seed: u64) -> Fixture {
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let layer = Mhdssa::build(&mut b, "attn", cfg).unwrap();
        for st in &mut b.bn {
            st.running_var = vec![1.0 - BN_EPS; st.channels()];
        }
        let ema = vec![FiringRateEma::new(); b.ema_names.len()];
        Fixture { b, layer, ema }
    }

    fn run(f: &Fixture, x: &Tensor, t: usize, heads_only: bool) -> Tensor {
        let mut ctx = Ctx::new(&f.b.params, &f.b.bn, &f.ema, RunOptions::eval(), t, None);
        let x = Var::constant(x.clone());
        let out = if heads_only {
            f.layer.forward_heads(&x, &mut ctx)
        } else {
            f.layer.forward(&x, &mut ctx)
        };
        out.unwrap().value().clone()
    }

    #[test]
    fn small_instance_matches_brute_force_composition() {
        // T=1, 2x2 map (HW=4), d=2, p=2, single head, hand-set weights.
        let cfg = DssaConfig { dim: 2, height: 2, width: 2, p: 2, heads: 1 };
        let mut f = fixture(cfg, 0);
        let wm = [1.0, -1.0, 2.0, 0.5, 0.5, 1.0, -1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 0.0, 2.0, 1.0, -1.0];
        let wf = [0.5, 0.5, 1.0, 1.0, -1.0, 2.0, 1.0, 0.0, 1.0, 3.0, -2.0, 1.0, 0.5, 1.0, 1.0, 1.0];
        f.b.params.get_mut(f.layer.map_proj.weight).value = Tensor::new(&[2, 2, 2, 2], wm.to_vec()).unwrap();
        f.b.params.get_mut(f.layer.feat_proj.weight).value = Tensor::new(&[2, 2, 2, 2], wf.to_vec()).unwrap();
        // Current >= 2 fires at the first step (v = I/τ).
        let x = Tensor::new(&[1, 2, 2, 2], vec![3.0, 0.0, 2.5, 2.0, 0.0, 4.0, 1.0, 2.2]).unwrap();
        let got = run(&f, &x, 1, true);

        let s: Vec<f64> = x.data().iter().map(|&v| if v / 2.0 >= 1.0 { 1.0 } else { 0.0 }).collect();
        // Rows: positions (4), columns: channels (2).
        let xs = |pos: usize, ch: usize| s[ch * 4 + pos];
        // A 2x2 stride-2 patch over a 2x2 map leaves one patch: f(X)[0, o] = Σ w[o, c, k] x[c, k].
        let patch = |w: &[f64], o: usize| (0..2).map(|c| (0..4).map(|k| w[o * 8 + c * 4 + k] * xs(k, c)).sum::<f64>()).sum::<f64>();
        let fm = [patch(&wm, 0), patch(&wm, 1)];
        let ff = [patch(&wf, 0), patch(&wf, 1)];
        let f_x = s.iter().sum::<f64>() / 8.0;
        let c1 = 1.0 / (f_x * 2.0).sqrt();
        let attn: Vec<f64> = (0..4)
            .map(|i| {
                let cur = c1 * (xs(i, 0) * fm[0] + xs(i, 1) * fm[1]);
                if cur / 2.0 >= 1.0 { 1.0 } else { 0.0 }
            })
            .collect();
        let f_attn = attn.iter().sum::<f64>() / 4.0;
        let c2 = 1.0 / (f_attn.max(RATE_FLOOR) * 1.0).sqrt();
        for ch in 0..2 {
            for i in 0..4 {
                let cur = c2 * attn[i] * ff[ch];
                let expect = if cur / 2.0 >= 1.0 { 1.0 } else { 0.0 };
                assert_eq!(got.data()[ch * 4 + i], expect, "channel {ch} position {i}");
            }
        }
    }

    #[test]
    fn zero_current_yields_bn_shift_only() {
        let cfg = DssaConfig { dim: 4, height: 4, width: 4, p: 2, heads: 2 };
        let mut f = fixture(cfg, 1);
        f.b.params.get_mut(f.layer.out_proj.beta).value = Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let out = run(&f, &Tensor::zeros(&[2, 4, 4, 4]), 2, false);
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, [0.1, -0.2, 0.3, 0.0][(i / 16) % 4]);
        }
    }

    #[test]
    fn outputs_are_binary_and_shape_preserving() {
        let cfg = DssaConfig { dim: 8, height: 4, width: 4, p: 2, heads: 2 };
        let f = fixture(cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3 * 2, 8, 4, 4], 3.0, &mut rng);
        let s = run(&f, &x, 3, true);
        assert_eq!(s.shape(), &[6, 8, 4, 4]);
        assert!(crate::tensor::is_binary(&s));
        assert_eq!(run(&f, &x, 3, false).shape(), x.shape());
    }

    #[test]
    fn head_count_mismatch_is_config_error() {
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(0));
        let cfg = DssaConfig { dim: 6, height: 4, width: 4, p: 2, heads: 4 };
        assert!(matches!(Mhdssa::build(&mut b, "a", cfg), Err(Error::Config(_))));
    }
}
