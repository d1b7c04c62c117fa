//! Statistical and algebraic checks of the scaling theory, the
//! convolution-as-linear-map construction and reverse-mode gradients.

use crate::attention::{dst, dst_t, scale_c1, scale_c2, sdsa_scale};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, REGISTRY};
use crate::neuron::{SpikeFn, SurrogateKind, SurrogateSpec};
use crate::nn::{RunOptions, StateUpdates};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{conv2d, conv_output_size, matmul, BnMode, ConvSpec, SpikeTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

pub const MIN_SAMPLES: usize = 100_000;
/// Relative tolerance on the predicted variance.
pub const VARIANCE_TOLERANCE: f64 = 0.05;
/// Accepted band for the variance of scaled currents.
pub const SCALED_BAND: (f64, f64) = (0.9, 1.1);
pub const EQUIV_TOLERANCE: f64 = 1e-6;
pub const GRAD_STEP: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Sigmoid width of the smoothed forward used by gradient checks. Narrower
/// sigmoids leave O(h²) truncation error above the tolerance end to end.
pub const GRADCHECK_WIDTH: f64 = 2.0;
/// Independent random streams per Monte Carlo run.
const STREAMS: usize = 16;
/// Rows and columns of each sampled current block.
const BLOCK: usize = 4;

/// Running count, mean and sum of squared deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * self.n as f64 * o.n as f64 / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n.max(1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McReport {
    pub check: String,
    pub samples: u64,
    pub mean: f64,
    pub stderr: f64,
    pub variance: f64,
    /// Variance the theory predicts (1 for scaled currents).
    pub predicted_variance: f64,
    /// `|mean| ≤ 3·stderr`.
    pub mean_pass: bool,
    pub variance_pass: bool,
    pub pass: bool,
    pub criterion: String,
}

impl McReport {
    fn relative(check: String, m: &Moments, predicted: f64) -> Self {
        let variance = m.variance();
        let mean_pass = m.mean().abs() <= 3.0 * m.stderr();
        let variance_pass = ((variance - predicted) / predicted).abs() <= VARIANCE_TOLERANCE;
        McReport {
            check,
            samples: m.count(),
            mean: m.mean(),
            stderr: m.stderr(),
            variance,
            predicted_variance: predicted,
            mean_pass,
            variance_pass,
            pass: mean_pass && variance_pass,
            criterion: format!("|mean| <= 3 stderr, variance within {VARIANCE_TOLERANCE} of prediction"),
        }
    }

    fn banded(check: String, m: &Moments) -> Self {
        let variance = m.variance();
        let mean_pass = m.mean().abs() <= 3.0 * m.stderr();
        let variance_pass = (SCALED_BAND.0..=SCALED_BAND.1).contains(&variance);
        McReport {
            check,
            samples: m.count(),
            mean: m.mean(),
            stderr: m.stderr(),
            variance,
            predicted_variance: 1.0,
            mean_pass,
            variance_pass,
            pass: mean_pass && variance_pass,
            criterion: format!(
                "|mean| <= 3 stderr, variance in [{}, {}]",
                SCALED_BAND.0, SCALED_BAND.1
            ),
        }
    }
}

/// Splits `samples` over fixed seeded streams, runs them on up to `jobs`
/// threads and merges the moments in stream order, so the result does not
/// depend on `jobs`.
fn run_streams<F>(samples: usize, seed: u64, jobs: usize, draw: F) -> Result<Moments>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Vec<f64>> + Sync,
{
    let per = samples.div_ceil(STREAMS);
    let stream = |s: usize| -> Result<Moments> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let quota = per.min(samples.saturating_sub(s * per));
        let mut m = Moments::default();
        while (m.count() as usize) < quota {
            for v in draw(&mut rng)? {
                if (m.count() as usize) < quota {
                    m.push(v);
                }
            }
        }
        Ok(m)
    };
    let jobs = jobs.clamp(1, STREAMS);
    let mut parts: Vec<Option<Result<Moments>>> = (0..STREAMS).map(|_| None).collect();
    if jobs == 1 {
        for (s, slot) in parts.iter_mut().enumerate() {
            *slot = Some(stream(s));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    let stream = &stream;
                    scope.spawn(move || {
                        (j..STREAMS)
                            .step_by(jobs)
                            .map(|s| (s, stream(s)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (s, r) in h.join().expect("Monte Carlo worker panicked") {
                    parts[s] = Some(r);
                }
            }
        });
    }
    let mut total = Moments::default();
    for p in parts {
        total.merge(&p.expect("every stream ran")?);
    }
    Ok(total)
}

fn check_rate(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{name} = {f} violates the Bernoulli assumption 0 < {name} < 1"
        )))
    }
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_SAMPLES {
        return Err(Error::Contract(format!(
            "{samples} samples requested, at least {MIN_SAMPLES} required"
        )));
    }
    Ok(())
}

fn identity_spikes(n: usize) -> SpikeTensor {
    SpikeTensor::try_from_tensor(Tensor::eye(n).reshape(&[1, n, n]).expect("square")).expect("binary")
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Dst,
    DstT,
}

/// Diagonal of a `[1, B, B]` block. Off-diagonal entries share a row of `X`
/// or a column of `f(Y)` with the diagonal ones, so only the diagonal is an
/// independent sample.
fn diagonal(t: &Tensor) -> Vec<f64> {
    let b = t.shape()[1];
    (0..b).map(|i| t.data()[i * b + i]).collect()
}

/// Independent currents `X·f(Y)` (or `X·f(Y)ᵀ`) with Bernoulli(f_x) spikes
/// `X` over `m` inputs and a standard-normal `f(Y)`, realized through the
/// library transforms with `Y` an identity spike matrix and `W` the normal draw.
fn sample_currents(form: Transform, f_x: f64, m: usize, eye: &SpikeTensor, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = SpikeTensor::bernoulli(&[1, BLOCK, m], f_x, rng);
    let out = match form {
        Transform::Dst => dst(&x, eye, &normal(&[m, BLOCK], rng))?,
        Transform::DstT => dst_t(&x, eye, &normal(&[BLOCK, m], rng))?,
    };
    Ok(diagonal(&out))
}

fn eye_for(form: Transform, m: usize) -> SpikeTensor {
    identity_spikes(match form {
        Transform::Dst => m,
        Transform::DstT => BLOCK,
    })
}

/// Empirical moments of unscaled DST / DST_T currents against `E = 0`, `Var = f_x·m`.
pub fn theorem1_mc(form: Transform, f_x: f64, m: usize, samples: usize, seed: u64, jobs: usize) -> Result<McReport> {
    check_rate("f_x", f_x)?;
    check_samples(samples)?;
    if m == 0 {
        return Err(Error::Contract("m must be positive".into()));
    }
    let eye = eye_for(form, m);
    let mom = run_streams(samples, seed, jobs, |rng| sample_currents(form, f_x, m, &eye, rng))?;
    let name = match form {
        Transform::Dst => "theorem1.dst",
        Transform::DstT => "theorem1.dst_t",
    };
    Ok(McReport::relative(format!("{name} f_x={f_x} m={m}"), &mom, f_x * m as f64))
}

/// DST_T currents multiplied by `c1 = 1/√(f_x·m)`.
pub fn post_scale_variance(f_x: f64, m: usize, samples: usize, seed: u64, jobs: usize) -> Result<McReport> {
    check_rate("f_x", f_x)?;
    check_samples(samples)?;
    let c1 = scale_c1(f_x, m);
    let eye = eye_for(Transform::DstT, m);
    let mom = run_streams(samples, seed, jobs, |rng| {
        Ok(sample_currents(Transform::DstT, f_x, m, &eye, rng)?.into_iter().map(|v| v * c1).collect())
    })?;
    Ok(McReport::banded(format!("scaling.c1 f_x={f_x} m={m}"), &mom))
}

/// Output currents `A·f(X)` of a Bernoulli(f_attn) attention map over
/// `HW/p²` patches, multiplied by `c2`.
pub fn dssa_c2_variance(f_attn: f64, hw: usize, p: usize, samples: usize, seed: u64, jobs: usize) -> Result<McReport> {
    check_rate("f_attn", f_attn)?;
    check_samples(samples)?;
    if p == 0 || hw % (p * p) != 0 {
        return Err(Error::Config(format!("HW={hw} not divisible by p^2 for p={p}")));
    }
    let cols = hw / (p * p);
    let c2 = scale_c2(f_attn, hw, p);
    let eye = identity_spikes(cols);
    let mom = run_streams(samples, seed, jobs, |rng| {
        let a = SpikeTensor::bernoulli(&[1, BLOCK, cols], f_attn, rng);
        let out = dst(&a, &eye, &normal(&[cols, BLOCK], rng))?;
        Ok(diagonal(&out).into_iter().map(|v| v * c2).collect())
    })?;
    Ok(McReport::banded(format!("scaling.c2 f_attn={f_attn} hw={hw} p={p}"), &mom))
}

/// Column sums of `Q ⊙ K` for Bernoulli Q and K over `HW` rows: raw variance
/// against `HW·f_Q·f_K·(1 − f_Q·f_K)` and variance after [`sdsa_scale`].
pub fn sdsa_scale_mc(f_q: f64, f_k: f64, hw: usize, samples: usize, seed: u64, jobs: usize) -> Result<(McReport, McReport)> {
    check_rate("f_q", f_q)?;
    check_rate("f_k", f_k)?;
    check_samples(samples)?;
    let draw = |rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        Ok((0..BLOCK * BLOCK)
            .map(|_| {
                (0..hw)
                    .filter(|_| rng.random::<f64>() < f_q && rng.random::<f64>() < f_k)
                    .count() as f64
            })
            .collect())
    };
    let raw = run_streams(samples, seed, jobs, draw)?;
    let r = f_q * f_k;
    let predicted = hw as f64 * r * (1.0 - r);
    let mut centered = Moments::default();
    let c = sdsa_scale(f_q, f_k, hw);
    // Scaling is linear: the centered, scaled moments follow from the raw ones.
    centered.n = raw.n;
    centered.mean = (raw.mean - hw as f64 * r) * c;
    centered.m2 = raw.m2 * c * c;
    let mut raw_report = McReport::relative(format!("sdsa.variance f_q={f_q} f_k={f_k} hw={hw}"), &raw, predicted);
    // The raw sums have mean HW·f_Q·f_K, not 0.
    let expected_mean = hw as f64 * r;
    raw_report.mean_pass = (raw.mean - expected_mean).abs() <= 3.0 * raw.stderr();
    raw_report.pass = raw_report.mean_pass && raw_report.variance_pass;
    raw_report.criterion = format!(
        "|mean - HW f_Q f_K| <= 3 stderr, variance within {VARIANCE_TOLERANCE} of prediction"
    );
    Ok((raw_report, McReport::banded(format!("sdsa.scaled f_q={f_q} f_k={f_k} hw={hw}"), &centered)))
}

/// `[C, H, W] -> [H_out·W_out, C·kh·kw]`:
/// `y'[i·W_out + j, c·kh·kw + k·kw + l] = y[c, i·s + k, j·s + l]`.
pub fn g_y(input: &Tensor, kh: usize, kw: usize, stride: usize) -> Result<Tensor> {
    let [c, h, w]: [usize; 3] = input
        .shape()
        .try_into()
        .map_err(|_| Error::shape("g_y", input.shape(), &[3]))?;
    let (Some(ho), Some(wo)) = (conv_output_size(h, kh, stride, 0), conv_output_size(w, kw, stride, 0)) else {
        return Err(Error::shape("g_y", input.shape(), &[kh, kw]));
    };
    let cols = c * kh * kw;
    let d = input.data();
    let mut out = vec![0.0; ho * wo * cols];
    for i in 0..ho {
        for j in 0..wo {
            let row = &mut out[(i * wo + j) * cols..][..cols];
            for ch in 0..c {
                for k in 0..kh {
                    for l in 0..kw {
                        row[ch * kh * kw + k * kw + l] = d[(ch * h + i * stride + k) * w + j * stride + l];
                    }
                }
            }
        }
    }
    Tensor::new(&[ho * wo, cols], out)
}

/// `[C_out, C_in, kh, kw] -> [C_in·kh·kw, C_out]`:
/// `w'[c·kh·kw + k·kw + l, o] = w[o, c, k, l]`.
pub fn g_w(kernel: &Tensor) -> Result<Tensor> {
    let [co, ci, kh, kw]: [usize; 4] = kernel
        .shape()
        .try_into()
        .map_err(|_| Error::shape("g_w", kernel.shape(), &[4]))?;
    let rows = ci * kh * kw;
    let d = kernel.data();
    Ok(Tensor::from_fn(&[rows, co], |idx| {
        let (r, o) = (idx / co, idx % co);
        d[o * rows + r]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivReport {
    pub case: String,
    pub max_deviation: f64,
    pub pass: bool,
}

/// Compares the engine convolution with `g_Y(Y)·g_W(W)`.
pub fn conv_equiv(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<EquivReport> {
    if pad != 0 {
        return Err(Error::Unsupported(
            "convolution/linear equivalence is constructed for padding 0 only".into(),
        ));
    }
    let s = input.shape();
    if s.len() != 3 || kernel.shape().len() != 4 || kernel.shape()[1] != s[0] {
        return Err(Error::shape("conv_equiv", s, kernel.shape()));
    }
    let (kh, kw) = (kernel.shape()[2], kernel.shape()[3]);
    let batched = input.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let conv = conv2d(&batched, kernel, ConvSpec::new(stride, 0, 1))?;
    let (co, ho, wo) = (conv.shape()[1], conv.shape()[2], conv.shape()[3]);
    let conv = conv.reshape(&[co, ho * wo])?.transpose()?;
    let linear = matmul(&g_y(input, kh, kw, stride)?, &g_w(kernel)?)?;
    let dev = conv.max_abs_diff(&linear)?;
    Ok(EquivReport {
        case: format!("{}x{}x{} k{kh}x{kw} s{stride} -> {co}", s[0], s[1], s[2]),
        max_deviation: dev,
        pass: dev <= EQUIV_TOLERANCE,
    })
}

/// The 4×4 / 2×2 / stride-2 reference case plus every stride-p patch
/// transform used by the registry architectures, on random data.
pub fn conv_equiv_suite(seed: u64) -> Result<Vec<EquivReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = Tensor::from_fn(&[1, 4, 4], |i| (i + 1) as f64);
    let k = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.])?;
    let mut r = conv_equiv(&x, &k, 2, 0)?;
    r.case = format!("reference {}", r.case);
    out.push(r);
    out.push(conv_equiv(&normal(&[3, 8, 8], &mut rng), &normal(&[5, 3, 2, 2], &mut rng), 2, 0)?);
    out.push(conv_equiv(&normal(&[4, 5, 5], &mut rng), &normal(&[6, 4, 1, 1], &mut rng), 1, 0)?);
    let mut seen = std::collections::BTreeSet::new();
    for name in REGISTRY {
        let cfg = ModelConfig::registry(name)?;
        for (i, &(h, w)) in cfg.stage_sizes()?.iter().enumerate() {
            let (d, p) = (cfg.stages[i].dim, cfg.stages[i].p);
            if !seen.insert((d, h, w, p)) {
                continue;
            }
            let input = normal(&[d, h, w], &mut rng);
            let kernel = normal(&[d, d, p, p], &mut rng).scale(1.0 / ((d * p * p) as f64).sqrt());
            let mut r = conv_equiv(&input, &kernel, p, 0)?;
            r.case = format!("{name} stage {} {}", i + 1, r.case);
            out.push(r);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub scope: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCoordinate>,
    pub pass: bool,
}

/// Relative error with the larger magnitude as denominator; two values that
/// are both below `1e-12` in magnitude count as agreeing.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences against reverse-mode gradients of `loss` at `coords`
/// coordinates drawn uniformly from the parameter scalars selected by
/// `filter`. `store` projects the parameters out of `state`.
pub fn gradcheck<S, A, L, P>(
    state: &mut S,
    store: A,
    loss: L,
    filter: P,
    coords: usize,
    seed: u64,
    scope: &str,
) -> Result<GradcheckReport>
where
    A: Fn(&mut S) -> &mut ParamStore,
    L: Fn(&S) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    let pool: Vec<(ParamId, usize)> = store(state)
        .iter()
        .filter(|(_, p)| filter(&p.name))
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let total: usize = pool.iter().map(|p| p.1).sum();
    if total == 0 {
        return Err(Error::Config(format!("no parameters selected for gradcheck in {scope}")));
    }
    let want = coords.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = std::collections::BTreeSet::new();
    while picks.len() < want {
        picks.insert(rng.random_range(0..total));
    }

    store(state).zero_grad();
    let l = loss(state)?;
    store(state).backward(&l)?;
    drop(l);

    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    for flat in picks.iter().copied() {
        let (mut rem, mut which) = (flat, 0);
        while rem >= pool[which].1 {
            rem -= pool[which].1;
            which += 1;
        }
        let id = pool[which].0;
        let (name, analytic, orig) = {
            let p = store(state).get(id);
            (p.name.clone(), p.grad.as_ref().map_or(0.0, |g| g.data()[rem]), p.value.data()[rem])
        };
        store(state).get_mut(id).value.data_mut()[rem] = orig + GRAD_STEP;
        let up = loss(state)?.value().item();
        store(state).get_mut(id).value.data_mut()[rem] = orig - GRAD_STEP;
        let down = loss(state)?.value().item();
        store(state).get_mut(id).value.data_mut()[rem] = orig;
        let numeric = (up - down) / (2.0 * GRAD_STEP);
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::Contract(format!(
                "nonfinite gradient at {name}[{rem}]: analytic {analytic}, numeric {numeric}"
            )));
        }
        let rel = rel_error(analytic, numeric);
        max_rel = max_rel.max(rel);
        if rel > GRAD_TOLERANCE {
            failures.push(GradCoordinate {
                param: name,
                index: rem,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    store(state).zero_grad();
    Ok(GradcheckReport {
        scope: scope.to_string(),
        coordinates: picks.len(),
        max_rel_error: max_rel,
        pass: failures.is_empty(),
        failures,
    })
}

/// Forward used for gradient checks: sigmoid-smoothed spikes, batch-statistic
/// BN, no state updates (so the firing-rate scales stay fixed).
pub fn smooth_options() -> RunOptions {
    let spec = SurrogateSpec {
        kind: SurrogateKind::SigmoidDerivative,
        width: GRADCHECK_WIDTH,
    };
    RunOptions {
        bn_mode: BnMode::Train,
        update_state: false,
        spike_fn: SpikeFn::Smooth(spec),
        ..RunOptions::eval()
    }
}

/// Gradient check of one Resformer block of `model` (`stage`, `block`
/// zero-based) under the smoothed forward, with loss `Σ r ⊙ block(x)` for a
/// random current `x` and random weights `r`.
pub fn gradcheck_block(model: &mut Model, stage: usize, block: usize, batch: usize, coords: usize, seed: u64) -> Result<GradcheckReport> {
    let cfg = model.config.dssa(stage)?;
    let n = model.config.time_steps * batch;
    let shape = [n, cfg.dim, cfg.height, cfg.width];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Var::constant(normal(&shape, &mut rng).scale(2.0));
    let r = normal(&shape, &mut rng);
    let opts = smooth_options();
    // Pin the firing-rate scales at this input's rates.
    let (_, updates) = model.block_forward(stage, block, &x, RunOptions { update_state: true, ..opts })?;
    model.apply(&StateUpdates { bn: Vec::new(), ema: updates.ema })?;
    let prefix = format!("stage{}.block{block}.", stage + 1);
    gradcheck(
        model,
        |m| &mut m.params,
        |m| m.block_forward(stage, block, &x, opts)?.0.dot_const(&r),
        |name| name.starts_with(&prefix),
        coords,
        seed.wrapping_add(1),
        prefix.trim_end_matches('.'),
    )
}

/// Gradient check of the whole network's cross-entropy under the smoothed forward.
pub fn gradcheck_model(model: &mut Model, batch: usize, coords: usize, seed: u64) -> Result<GradcheckReport> {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = normal(&[batch, c.in_channels, c.input_height, c.input_width], &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..c.num_classes)).collect();
    let opts = smooth_options();
    let warm = model.forward(&images, RunOptions { update_state: true, ..opts }, None)?;
    model.apply(&StateUpdates { bn: Vec::new(), ema: warm.updates.ema })?;
    let scope = format!("{} model", model.config.name);
    gradcheck(
        model,
        |m| &mut m.params,
        |m| m.forward(&images, opts, None)?.logits.cross_entropy(&labels),
        |_| true,
        coords,
        seed.wrapping_add(1),
        &scope,
    )
}
