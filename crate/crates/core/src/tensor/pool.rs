use super::conv::conv_output_size;
use super::Tensor;
use crate::error::{Error, Result};

/// Max pooling over `[N, C, H, W]` with implicit `-inf` padding. Returns the
/// pooled tensor and, per output element, the flat input index it came from.
pub fn maxpool2d(
    input: &Tensor,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w]: [usize; 4] = input
        .shape()
        .try_into()
        .map_err(|_| Error::shape("maxpool2d", input.shape(), &[4]))?;
    if window == 0 || pad >= window {
        return Err(Error::Config(format!(
            "maxpool2d: window {window} with padding {pad}"
        )));
    }
    let (Some(ho), Some(wo)) = (
        conv_output_size(h, window, stride, pad),
        conv_output_size(w, window, stride, pad),
    ) else {
        return Err(Error::shape("maxpool2d", input.shape(), &[window, window]));
    };
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for i in 0..window {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..window {
                        let xx = (ox * stride + j) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let idx = base + y as usize * w + xx as usize;
                        if x[idx] > best || at == usize::MAX {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(at);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, argmax))
}

/// Routes each output gradient back to the input element that won its window.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        d[at] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input() {
        let x = Tensor::full(&[1, 2, 6, 6], 3.5);
        let (y, _) = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn ramp_takes_window_maxima() {
        // Row-major ramp: the maximum of each window is its bottom-right element.
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let (y, _) = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5., 7., 13., 15.]);
        let (y, _) = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.data(), &[5., 7., 13., 15.]);
    }

    #[test]
    fn stem_pool_halves_112() {
        let x = Tensor::zeros(&[1, 1, 112, 112]);
        let (y, _) = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 56, 56]);
    }

    #[test]
    fn window_larger_than_input() {
        assert!(maxpool2d(&Tensor::zeros(&[1, 1, 2, 2]), 5, 1, 0).is_err());
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let (y, arg) = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let dx = maxpool2d_backward(x.shape(), &arg, &Tensor::full(&[1, 1, 1, 1], 2.0));
        assert_eq!(dx.data(), &[0., 0., 0., 2.]);
    }
}
