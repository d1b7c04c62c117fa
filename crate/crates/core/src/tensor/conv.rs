use super::linalg::{gemm, Transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        pad: 0,
        groups: 1,
    };

    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            pad,
            groups,
        }
    }
}

/// `floor((size + 2·pad − kernel) / stride) + 1`, or `None` when the kernel
/// does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cg_in: usize,
    cg_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], spec: ConvSpec) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape("conv2d", input, weight));
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, cg_in, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        let g = spec.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 {
            return Err(Error::Config(format!(
                "conv2d: channels in {c_in} / out {c_out} not divisible by groups {g}"
            )));
        }
        if cg_in != c_in / g {
            return Err(Error::shape("conv2d", input, weight));
        }
        let (Some(ho), Some(wo)) = (
            conv_output_size(h, kh, spec.stride, spec.pad),
            conv_output_size(w, kw, spec.stride, spec.pad),
        ) else {
            return Err(Error::shape("conv2d", input, weight));
        };
        Ok(Geometry {
            n,
            c_in,
            h,
            w,
            c_out,
            cg_in,
            cg_out: c_out / g,
            kh,
            kw,
            ho,
            wo,
            spec,
        })
    }

    fn k(&self) -> usize {
        self.cg_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded kernel reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    /// Output columns `[lo, hi)` whose tap `j` lands inside the input row.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let (s, pad) = (self.spec.stride, self.spec.pad);
        let lo = if pad > j { (pad - j).div_ceil(s) } else { 0 };
        let hi = if self.w + pad > j {
            (self.w + pad - j).div_ceil(s).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Input row read by output row `oy` at tap `i`, if inside the plane.
    fn src_row(&self, oy: usize, i: usize) -> Option<usize> {
        let y = (oy * self.spec.stride + i).checked_sub(self.spec.pad)?;
        (y < self.h).then_some(y)
    }

    /// Unfolds one sample/group slice `[cg_in, h, w]` into `[k, p]`.
    fn im2col(&self, src: &[f64], col: &mut [f64]) {
        let (s, pad) = (self.spec.stride, self.spec.pad);
        let p = self.p();
        for c in 0..self.cg_in {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.ho {
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let Some(y) = self.src_row(oy, i) else {
                            dst.fill(0.0);
                            continue;
                        };
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let line = &plane[y * self.w..(y + 1) * self.w];
                        let first = lo * s + j - pad;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                        } else {
                            for (d, v) in dst[lo..hi].iter_mut().zip(line[first..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters `[k, p]` back onto the slice.
    fn col2im(&self, col: &[f64], dst: &mut [f64]) {
        let (s, pad) = (self.spec.stride, self.spec.pad);
        let p = self.p();
        for c in 0..self.cg_in {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.ho {
                        let Some(y) = self.src_row(oy, i) else { continue };
                        let src = &col[row + oy * self.wo + lo..row + oy * self.wo + hi];
                        let line = &mut plane[y * self.w..(y + 1) * self.w];
                        let first = lo * s + j - pad;
                        for (d, v) in line[first..].iter_mut().step_by(s).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Grouped, strided, zero-padded 2-D convolution (cross-correlation).
///
/// `input` is `[N, C_in, H, W]`, `weight` is `[C_out, C_in / groups, kh, kw]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), weight.shape(), spec)?;
    let (k, p) = (g.k(), g.p());
    let in_sample = g.c_in * g.h * g.w;
    let in_group = g.cg_in * g.h * g.w;
    let out_sample = g.c_out * p;
    let mut out = vec![0.0; g.n * out_sample];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    let w = weight.data();
    for n in 0..g.n {
        for grp in 0..spec.groups {
            let src = &input.data()[n * in_sample + grp * in_group..][..in_group];
            let cols: &[f64] = if g.is_pointwise() {
                src
            } else {
                g.im2col(src, &mut col);
                &col
            };
            let wg = &w[grp * g.cg_out * k..(grp + 1) * g.cg_out * k];
            let dst = &mut out[n * out_sample + grp * g.cg_out * p..][..g.cg_out * p];
            gemm(
                g.cg_out,
                k,
                p,
                1.0,
                wg,
                Transpose::No,
                cols,
                Transpose::No,
                0.0,
                dst,
            );
        }
    }
    Tensor::new(&[g.n, g.c_out, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to the input (when requested) and the
/// weight, given the gradient of its output.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: ConvSpec,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = Geometry::new(input.shape(), weight.shape(), spec)?;
    let expect = [g.n, g.c_out, g.ho, g.wo];
    if grad_out.shape() != expect {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &expect));
    }
    let (k, p) = (g.k(), g.p());
    let in_sample = g.c_in * g.h * g.w;
    let in_group = g.cg_in * g.h * g.w;
    let out_sample = g.c_out * p;
    let mut dw = vec![0.0; weight.len()];
    let mut dx = need_input_grad.then(|| vec![0.0; input.len()]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    let mut dcol = vec![0.0; if need_input_grad { k * p } else { 0 }];
    let w = weight.data();
    for n in 0..g.n {
        for grp in 0..spec.groups {
            let src = &input.data()[n * in_sample + grp * in_group..][..in_group];
            let cols: &[f64] = if g.is_pointwise() {
                src
            } else {
                g.im2col(src, &mut col);
                &col
            };
            let go = &grad_out.data()[n * out_sample + grp * g.cg_out * p..][..g.cg_out * p];
            // dW_g += dOut · colᵀ
            gemm(
                g.cg_out,
                p,
                k,
                1.0,
                go,
                Transpose::No,
                cols,
                Transpose::Yes,
                1.0,
                &mut dw[grp * g.cg_out * k..(grp + 1) * g.cg_out * k],
            );
            if let Some(dx) = dx.as_mut() {
                let wg = &w[grp * g.cg_out * k..(grp + 1) * g.cg_out * k];
                let dst = &mut dx[n * in_sample + grp * in_group..][..in_group];
                if g.is_pointwise() {
                    gemm(
                        k,
                        g.cg_out,
                        p,
                        1.0,
                        wg,
                        Transpose::Yes,
                        go,
                        Transpose::No,
                        1.0,
                        dst,
                    );
                } else {
                    gemm(
                        k,
                        g.cg_out,
                        p,
                        1.0,
                        wg,
                        Transpose::Yes,
                        go,
                        Transpose::No,
                        0.0,
                        &mut dcol,
                    );
                    g.col2im(&dcol, dst);
                }
            }
        }
    }
    let dx = dx.map(|d| Tensor::new(input.shape(), d)).transpose()?;
    Ok((dx, Tensor::new(weight.shape(), dw)?))
}
