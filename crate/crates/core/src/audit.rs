//! Synaptic-operation accounting, the energy model and event-driven
//! re-computation of every synaptic layer.

use crate::error::{Error, Result};
use crate::tensor::{bmm, conv2d, conv_output_size, is_binary, ConvSpec, Tensor, Transpose};
use crate::verification::{g_w, g_y};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Energy per synaptic operation, in picojoules.
pub const PJ_PER_SOP: f64 = 0.9;
/// Pass bound on event vs. dense deviation (relative above magnitude 1).
pub const EVENT_TOLERANCE: f64 = 1e-6;

/// Energy in mJ of `sops_g` billion synaptic operations.
pub fn estimate_energy(sops_g: f64) -> Result<f64> {
    if !(sops_g >= 0.0) {
        return Err(Error::Contract(format!("SOP count {sops_g} must be non-negative")));
    }
    Ok(sops_g * PJ_PER_SOP)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Real-valued input; MAC-driven.
    Stem,
    Conv,
    Linear,
    DstT,
    Dst,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRecord {
    pub kind: LayerKind,
    /// Input spikes (dual-spike layers: spikes of the gating operand).
    pub spikes: u64,
    pub inputs: u64,
    pub sops: f64,
    pub macs: f64,
}

impl LayerRecord {
    pub fn from_input(kind: LayerKind, input: &Tensor, sops: f64, macs: f64) -> Self {
        let spikes = if kind == LayerKind::Stem {
            0
        } else {
            input.data().iter().filter(|&&v| v != 0.0).count() as u64
        };
        LayerRecord {
            kind,
            spikes,
            inputs: input.len() as u64,
            sops,
            macs,
        }
    }

    fn merge(&mut self, other: &LayerRecord) {
        self.spikes += other.spikes;
        self.inputs += other.inputs;
        self.sops += other.sops;
        self.macs += other.macs;
    }

    pub fn firing_rate(&self) -> f64 {
        if self.inputs == 0 {
            0.0
        } else {
            self.spikes as f64 / self.inputs as f64
        }
    }
}

/// Inputs needed to recompute a synaptic layer event by event.
#[derive(Clone, Debug)]
pub enum Capture {
    Conv {
        input: Tensor,
        weight: Tensor,
        bias: Vec<f64>,
        spec: ConvSpec,
    },
    /// Global average pool followed by a linear map; `weight` is `[K, C]`
    /// already divided by the pooled area.
    Linear { input: Tensor, weight: Tensor },
    /// `X·f(X)ᵀ` per head, `f` a stride-p patch convolution.
    DstT {
        src: Tensor,
        weight: Tensor,
        bias: Vec<f64>,
        p: usize,
        heads: usize,
    },
    /// `A·f(X)` per head.
    Dst {
        attn: Tensor,
        src: Tensor,
        weight: Tensor,
        bias: Vec<f64>,
        p: usize,
        heads: usize,
    },
}

impl Capture {
    pub fn kind(&self) -> LayerKind {
        match self {
            Capture::Conv { .. } => LayerKind::Conv,
            Capture::Linear { .. } => LayerKind::Linear,
            Capture::DstT { .. } => LayerKind::DstT,
            Capture::Dst { .. } => LayerKind::Dst,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NeuronRecord {
    pub spikes: u64,
    pub elements: u64,
}

/// Collects per-layer statistics (and optionally layer inputs) during a
/// forward pass.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    capture: bool,
    layers: BTreeMap<String, LayerRecord>,
    neurons: BTreeMap<String, NeuronRecord>,
    captures: BTreeMap<String, Capture>,
    non_binary: u64,
    images: u64,
}

impl Probe {
    pub fn new(capture: bool) -> Self {
        Probe {
            capture,
            ..Default::default()
        }
    }

    pub fn captures_enabled(&self) -> bool {
        self.capture
    }

    pub fn observe_spikes(&mut self, name: &str, s: &Tensor) {
        let mut spikes = 0u64;
        for &v in s.data() {
            if v == 1.0 {
                spikes += 1;
            } else if v != 0.0 {
                self.non_binary += 1;
            }
        }
        let rec = self.neurons.entry(name.to_string()).or_insert(NeuronRecord {
            spikes: 0,
            elements: 0,
        });
        rec.spikes += spikes;
        rec.elements += s.len() as u64;
    }

    pub fn record(&mut self, name: &str, rec: LayerRecord) {
        match self.layers.get_mut(name) {
            Some(r) => r.merge(&rec),
            None => {
                self.layers.insert(name.to_string(), rec);
            }
        }
    }

    pub fn capture(&mut self, name: &str, c: Capture) {
        if self.capture {
            self.captures.insert(name.to_string(), c);
        }
    }

    pub fn add_images(&mut self, n: usize) {
        self.images += n as u64;
    }

    pub fn layers(&self) -> &BTreeMap<String, LayerRecord> {
        &self.layers
    }

    pub fn neurons(&self) -> &BTreeMap<String, NeuronRecord> {
        &self.neurons
    }

    pub fn captures(&self) -> &BTreeMap<String, Capture> {
        &self.captures
    }

    pub fn non_binary(&self) -> u64 {
        self.non_binary
    }

    pub fn report(&self) -> Result<AuditReport> {
        let per = 1.0 / self.images.max(1) as f64;
        let layers: Vec<LayerSummary> = self
            .layers
            .iter()
            .map(|(name, r)| LayerSummary {
                name: name.clone(),
                kind: r.kind,
                spikes_per_image: r.spikes as f64 * per,
                firing_rate: r.firing_rate(),
                sops_per_image: r.sops * per,
                macs_per_image: r.macs * per,
            })
            .collect();
        let sops: f64 = layers.iter().map(|l| l.sops_per_image).sum();
        let macs: f64 = layers.iter().map(|l| l.macs_per_image).sum();
        let sops_g = sops / 1e9;
        Ok(AuditReport {
            images: self.images,
            layers,
            neurons: self
                .neurons
                .iter()
                .map(|(n, r)| (n.clone(), r.spikes as f64 / r.elements.max(1) as f64))
                .collect(),
            total_sops_g: sops_g,
            energy_mj: estimate_energy(sops_g)?,
            stem_macs_g: macs / 1e9,
            non_binary: self.non_binary,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: LayerKind,
    pub spikes_per_image: f64,
    pub firing_rate: f64,
    pub sops_per_image: f64,
    pub macs_per_image: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub images: u64,
    pub layers: Vec<LayerSummary>,
    /// Firing rate of each spiking-neuron layer, by name.
    pub neurons: Vec<(String, f64)>,
    pub total_sops_g: f64,
    pub energy_mj: f64,
    /// Real-valued stem MACs, excluded from the energy figure.
    pub stem_macs_g: f64,
    pub non_binary: u64,
}

impl AuditReport {
    /// One JSON object per layer, then one per neuron layer, then totals.
    pub fn json_lines(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for l in &self.layers {
            let mut v = serde_json::to_value(l)?;
            v["record"] = "layer".into();
            out.push(serde_json::to_string(&v)?);
        }
        for (name, rate) in &self.neurons {
            out.push(serde_json::to_string(&serde_json::json!({
                "record": "neurons",
                "name": name,
                "firing_rate": rate,
            }))?);
        }
        out.push(serde_json::to_string(&serde_json::json!({
            "record": "totals",
            "images": self.images,
            "sops_g": self.total_sops_g,
            "energy_mj": self.energy_mj,
            "stem_macs_g": self.stem_macs_g,
            "non_binary_spikes": self.non_binary,
        }))?);
        Ok(out)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>6} {:>8} {:>14} {:>14}", "layer", "kind", "rate", "SOPs/img", "MACs/img");
        for l in &self.layers {
            let kind = serde_json::to_value(l.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<40} {:>6} {:>8.4} {:>14.0} {:>14.0}",
                l.name, kind, l.firing_rate, l.sops_per_image, l.macs_per_image
            );
        }
        let _ = writeln!(
            s,
            "total {:.6} G SOPs  {:.6} mJ  (stem {:.6} G MACs, excluded)",
            self.total_sops_g, self.energy_mj, self.stem_macs_g
        );
        s
    }
}

/// Synaptic operations of a convolution over binary `input`: each spike costs
/// its fan-out, i.e. the output channels of its group times the number of
/// output positions whose window covers it.
pub fn conv_sops(input: &Tensor, weight_shape: &[usize], spec: ConvSpec) -> Result<f64> {
    let [n, c, h, w]: [usize; 4] = input
        .shape()
        .try_into()
        .map_err(|_| Error::shape("conv_sops", input.shape(), &[4]))?;
    let (c_out, kh, kw) = (weight_shape[0], weight_shape[2], weight_shape[3]);
    let (Some(ho), Some(wo)) = (
        conv_output_size(h, kh, spec.stride, spec.pad),
        conv_output_size(w, kw, spec.stride, spec.pad),
    ) else {
        return Err(Error::shape("conv_sops", input.shape(), weight_shape));
    };
    let cover_y = cover(h, kh, ho, spec);
    let cover_x = cover(w, kw, wo, spec);
    let fan = (c_out / spec.groups) as f64;
    let mut total = 0.0;
    let d = input.data();
    for plane in 0..n * c {
        for y in 0..h {
            let row = &d[(plane * h + y) * w..][..w];
            for (x, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    total += (cover_y[y] * cover_x[x]) as f64 * fan;
                }
            }
        }
    }
    Ok(total)
}

/// Number of (output position, tap) pairs reaching each input coordinate.
fn cover(size: usize, k: usize, out: usize, spec: ConvSpec) -> Vec<usize> {
    let mut c = vec![0; size];
    for o in 0..out {
        for i in 0..k {
            let pos = (o * spec.stride + i) as isize - spec.pad as isize;
            if (0..size as isize).contains(&pos) {
                c[pos as usize] += 1;
            }
        }
    }
    c
}

/// `I[i,j] = Σ_{k,l : x_ik ∧ y_kl} w_lj` (`X·Y·W` by accumulation).
pub fn dst_events(x: &Tensor, y: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (p, m) = mat(x)?;
    let (m2, q) = mat(y)?;
    let (q2, r) = mat(w)?;
    if m != m2 || q != q2 {
        return Err(Error::shape("dst_events", x.shape(), y.shape()));
    }
    let mut out = vec![0.0; p * r];
    let (xd, yd, wd) = (x.data(), y.data(), w.data());
    for i in 0..p {
        for k in (0..m).filter(|&k| xd[i * m + k] != 0.0) {
            for l in (0..q).filter(|&l| yd[k * q + l] != 0.0) {
                for (o, wv) in out[i * r..(i + 1) * r].iter_mut().zip(&wd[l * r..(l + 1) * r]) {
                    *o += wv;
                }
            }
        }
    }
    Tensor::new(&[p, r], out)
}

/// `I[i,j] = Σ_{k,l : x_ik ∧ y_jl} w_lk` (`X·Wᵀ·Yᵀ` by accumulation).
pub fn dst_t_events(x: &Tensor, y: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (p, m) = mat(x)?;
    let (q, l_dim) = mat(y)?;
    let (l2, m2) = mat(w)?;
    if m != m2 || l_dim != l2 {
        return Err(Error::shape("dst_t_events", x.shape(), y.shape()));
    }
    let (xd, yd, wd) = (x.data(), y.data(), w.data());
    let y_events: Vec<Vec<usize>> = (0..q)
        .map(|j| (0..l_dim).filter(|&l| yd[j * l_dim + l] != 0.0).collect())
        .collect();
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        for k in (0..m).filter(|&k| xd[i * m + k] != 0.0) {
            for (j, ev) in y_events.iter().enumerate() {
                let mut acc = 0.0;
                for &l in ev {
                    acc += wd[l * m + k];
                }
                out[i * q + j] += acc;
            }
        }
    }
    Tensor::new(&[p, q], out)
}

fn mat(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape("event matrix", s, &[2])),
    }
}

/// Outcome of recomputing one layer event by event.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventCheck {
    pub kind: LayerKind,
    pub max_deviation: f64,
    pub pass: bool,
    /// Largest contribution of the folded BN bias, which both paths omit.
    pub bias_max: f64,
}

fn deviation(dense: &Tensor, event: &Tensor) -> Result<f64> {
    if dense.shape() != event.shape() {
        return Err(Error::shape("deviation", dense.shape(), event.shape()));
    }
    Ok(dense
        .data()
        .iter()
        .zip(event.data())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max))
}

fn require_spikes(t: &Tensor, what: &str) -> Result<()> {
    if is_binary(t) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} is not a spike tensor")))
    }
}

/// Head `h` of a `[C, H, W]` sample as a positions × channels matrix.
fn head_positions(sample: &Tensor, h: usize, dh: usize) -> Result<Tensor> {
    let hw = sample.shape()[1] * sample.shape()[2];
    let rows = Tensor::new(&[dh, hw], sample.data()[h * dh * hw..(h + 1) * dh * hw].to_vec())?;
    rows.transpose()
}

fn columns(m: &Tensor, from: usize, count: usize) -> Result<Tensor> {
    let (r, c) = mat(m)?;
    let d = m.data();
    let mut out = Vec::with_capacity(r * count);
    for i in 0..r {
        out.extend_from_slice(&d[i * c + from..i * c + from + count]);
    }
    Tensor::new(&[r, count], out)
}

/// Recomputes a captured layer densely (engine kernels, folded weights, bias
/// dropped) and by spike-gated weight accumulation, and compares.
pub fn verify_spike_driven(capture: &Capture) -> Result<EventCheck> {
    let kind = capture.kind();
    let (dev, bias_max) = match capture {
        Capture::Conv { input, weight, bias, spec } => {
            require_spikes(input, "convolution input")?;
            let dense = conv2d(input, weight, *spec)?;
            let event = conv_events(input, weight, *spec, dense.shape())?;
            let bias_max = bias.iter().fold(0.0f64, |m, b| m.max(b.abs()));
            (deviation(&dense, &event)?, bias_max)
        }
        Capture::Linear { input, weight } => {
            require_spikes(input, "classifier input")?;
            let s = input.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let summed = Tensor::from_fn(&[n, c], |i| input.data()[i * hw..(i + 1) * hw].iter().sum());
            let dense = bmm(&summed, Transpose::No, weight, Transpose::Yes)?;
            let k = weight.shape()[0];
            let mut event = vec![0.0; n * k];
            for (idx, &v) in input.data().iter().enumerate() {
                if v != 0.0 {
                    let (b, ch) = (idx / (c * hw), (idx / hw) % c);
                    for o in 0..k {
                        event[b * k + o] += weight.data()[o * c + ch];
                    }
                }
            }
            (deviation(&dense, &Tensor::new(&[n, k], event)?)?, 0.0)
        }
        Capture::DstT { src, weight, bias, p, heads } => {
            require_spikes(src, "attention input")?;
            dual_check(src, None, weight, bias, *p, *heads)?
        }
        Capture::Dst { attn, src, weight, bias, p, heads } => {
            require_spikes(src, "attention input")?;
            require_spikes(attn, "attention map")?;
            dual_check(src, Some(attn), weight, bias, *p, *heads)?
        }
    };
    Ok(EventCheck {
        kind,
        max_deviation: dev,
        pass: dev <= EVENT_TOLERANCE,
        bias_max,
    })
}

fn dual_check(
    src: &Tensor,
    attn: Option<&Tensor>,
    weight: &Tensor,
    bias: &[f64],
    p: usize,
    heads: usize,
) -> Result<(f64, f64)> {
    let [_, d, h, w]: [usize; 4] = src
        .shape()
        .try_into()
        .map_err(|_| Error::shape("dual spike check", src.shape(), &[4]))?;
    let dh = d / heads;
    let hw = h * w;
    let f = conv2d(src, weight, ConvSpec::new(p, 0, 1))?;
    let hw2 = f.shape()[2] * f.shape()[3];
    let wmat = g_w(weight)?;
    let (mut dev, mut bias_max) = (0.0f64, 0.0f64);
    for (i, sample) in src.unstack().into_iter().enumerate() {
        let yp = g_y(&sample, p, p, p)?;
        let f_i = &f.data()[i * d * hw2..(i + 1) * d * hw2];
        for head in 0..heads {
            let f_h = Tensor::new(&[dh, hw2], f_i[head * dh * hw2..(head + 1) * dh * hw2].to_vec())?;
            let w_h = columns(&wmat, head * dh, dh)?;
            let b_h = &bias[head * dh..(head + 1) * dh];
            match attn {
                None => {
                    let x = head_positions(&sample, head, dh)?;
                    let dense = bmm(&x, Transpose::No, &f_h, Transpose::No)?;
                    let event = dst_t_events(&x, &yp, &w_h)?;
                    dev = dev.max(deviation(&dense, &event)?);
                    for row in x.data().chunks(dh) {
                        let b: f64 = row.iter().zip(b_h).map(|(s, b)| s * b).sum();
                        bias_max = bias_max.max(b.abs());
                    }
                }
                Some(a) => {
                    let a_h = Tensor::new(
                        &[hw, hw2],
                        a.data()[(i * heads + head) * hw * hw2..][..hw * hw2].to_vec(),
                    )?;
                    // Dense in the layer's channel-major layout, event in position-major.
                    let dense = bmm(&f_h, Transpose::No, &a_h, Transpose::Yes)?.transpose()?;
                    let event = dst_events(&a_h, &yp, &w_h)?;
                    dev = dev.max(deviation(&dense, &event)?);
                    for row in a_h.data().chunks(hw2) {
                        let cnt: f64 = row.iter().sum();
                        for b in b_h {
                            bias_max = bias_max.max((cnt * b).abs());
                        }
                    }
                }
            }
        }
    }
    Ok((dev, bias_max))
}

fn conv_events(input: &Tensor, weight: &Tensor, spec: ConvSpec, out_shape: &[usize]) -> Result<Tensor> {
    let s = input.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let ws = weight.shape();
    let (c_out, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let cout_g = c_out / spec.groups;
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    let wd = weight.data();
    for (idx, &v) in input.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let (b, ch, y, x) = (idx / (c * h * w), (idx / (h * w)) % c, (idx / w) % h, idx % w);
        let g = ch / cin_g;
        let cl = ch % cin_g;
        for i in 0..kh {
            let ny = y as isize + spec.pad as isize - i as isize;
            if ny < 0 || ny as usize % spec.stride != 0 || ny as usize / spec.stride >= ho {
                continue;
            }
            let oy = ny as usize / spec.stride;
            for j in 0..kw {
                let nx = x as isize + spec.pad as isize - j as isize;
                if nx < 0 || nx as usize % spec.stride != 0 || nx as usize / spec.stride >= wo {
                    continue;
                }
                let ox = nx as usize / spec.stride;
                for o in g * cout_g..(g + 1) * cout_g {
                    od[((b * c_out + o) * ho + oy) * wo + ox] += wd[((o * cin_g + cl) * kh + i) * kw + j];
                }
            }
        }
    }
    Ok(out)
}
