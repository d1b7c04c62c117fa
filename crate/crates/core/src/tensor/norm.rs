use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Blends batch statistics in with momentum [`BN_MOMENTUM`]; `var` is the
    /// unbiased batch variance.
    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Per-channel statistics used to normalize one forward pass.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Unbiased batch variance (train mode only), for the running update.
    pub batch_var: Option<Vec<f64>>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("batchnorm", shape, &[2]));
    }
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    Ok((n, c, inner))
}

/// Batch normalization over every axis except axis 1 (channels).
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    mode: BnMode,
) -> Result<(Tensor, BnStats)> {
    let (n, c, inner) = channel_layout(x.shape())?;
    if state.channels() != c || gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batchnorm", x.shape(), &[state.channels()]));
    }
    let data = x.data();
    let stats = match mode {
        BnMode::Eval => BnStats {
            mean: state.running_mean.clone(),
            inv_std: state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect(),
            batch_var: None,
        },
        BnMode::Train => {
            let m = (n * inner) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += data[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += data[(b * c + ch) * inner..][..inner]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / m;
            }
            let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let unbiased = if m > 1.0 {
                var.iter().map(|v| v * m / (m - 1.0)).collect()
            } else {
                var.clone()
            };
            BnStats {
                mean,
                inv_std,
                batch_var: Some(unbiased),
            }
        }
    };
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (mu, is) = (stats.mean[ch], stats.inv_std[ch]);
            let (g, bt) = (gamma[ch], beta[ch]);
            let off = (b * c + ch) * inner;
            for (o, v) in out[off..off + inner].iter_mut().zip(&data[off..off + inner]) {
                *o = (v - mu) * is * g + bt;
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    x: &Tensor,
    gamma: &[f64],
    stats: &BnStats,
    mode: BnMode,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, inner) = channel_layout(x.shape())?;
    let (xd, gd) = (x.data(), grad_out.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mu, is) = (stats.mean[ch], stats.inv_std[ch]);
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for (v, g) in xd[off..off + inner].iter().zip(&gd[off..off + inner]) {
                dbeta[ch] += g;
                dgamma[ch] += g * (v - mu) * is;
            }
        }
    }
    let mut dx = vec![0.0; x.len()];
    let m = (n * inner) as f64;
    for ch in 0..c {
        let (mu, is, g) = (stats.mean[ch], stats.inv_std[ch], gamma[ch]);
        for b in 0..n {
            let off = (b * c + ch) * inner;
            let dst = &mut dx[off..off + inner];
            match mode {
                BnMode::Eval => {
                    for (d, go) in dst.iter_mut().zip(&gd[off..off + inner]) {
                        *d = go * g * is;
                    }
                }
                BnMode::Train => {
                    let k = g * is / m;
                    for ((d, go), v) in dst
                        .iter_mut()
                        .zip(&gd[off..off + inner])
                        .zip(&xd[off..off + inner])
                    {
                        let xhat = (v - mu) * is;
                        *d = k * (m * go - dbeta[ch] - xhat * dgamma[ch]);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, dgamma, dbeta))
}

/// Absorbs an eval-mode batch normalization into the preceding convolution.
///
/// Returns the rescaled kernel `w·γ/√(var+ε)` (per output channel) and the
/// residual bias `β − γ·mean/√(var+ε)` that the fold leaves behind.
pub fn fold_bn(
    weight: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    mode: BnMode,
) -> Result<(Tensor, Vec<f64>)> {
    if mode != BnMode::Eval {
        return Err(Error::Contract(
            "fold_bn requires eval-mode batch normalization".into(),
        ));
    }
    let c_out = *weight
        .shape()
        .first()
        .ok_or_else(|| Error::shape("fold_bn", weight.shape(), &[1]))?;
    if state.channels() != c_out || gamma.len() != c_out || beta.len() != c_out {
        return Err(Error::shape("fold_bn", weight.shape(), &[state.channels()]));
    }
    let per = weight.len() / c_out.max(1);
    let mut w = weight.clone();
    let mut bias = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let s = gamma[o] / (state.running_var[o] + BN_EPS).sqrt();
        for v in &mut w.data_mut()[o * per..(o + 1) * per] {
            *v *= s;
        }
        bias.push(beta[o] - s * state.running_mean[o]);
    }
    Ok((w, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, ConvSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_identity_stats() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 * 0.1 - 1.0);
        let st = BatchNormState::new(3);
        let (y, _) = batchnorm_forward(&x, &[1.0; 3], &[0.0; 3], &st, BnMode::Eval).unwrap();
        // Only the epsilon separates this from exact identity.
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!(y.max_abs_diff(&x.scale(scale)).unwrap() < 1e-15);
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn train_on_constant_batch_yields_shift() {
        let x = Tensor::full(&[4, 2, 3, 3], 7.25);
        let st = BatchNormState::new(2);
        let (y, stats) =
            batchnorm_forward(&x, &[3.0, 0.5], &[0.25, -1.0], &st, BnMode::Train).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 9) % 2;
            assert_eq!(*v, [0.25, -1.0][ch]);
        }
        assert_eq!(stats.mean, vec![7.25, 7.25]);
    }

    #[test]
    fn running_stats_momentum() {
        let mut st = BatchNormState::new(1);
        st.update(&[2.0], &[3.0]);
        assert!((st.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch() {
        let st = BatchNormState::new(3);
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(batchnorm_forward(&x, &[1.0; 2], &[0.0; 2], &st, BnMode::Eval).is_err());
    }

    #[test]
    fn fold_identity_and_doubling() {
        let w = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let mut st = BatchNormState::new(2);
        st.running_var = vec![1.0 - BN_EPS; 2];
        let (f, b) = fold_bn(&w, &[1.0; 2], &[0.0; 2], &st, BnMode::Eval).unwrap();
        assert!(f.max_abs_diff(&w).unwrap() < 1e-15);
        assert_eq!(b, vec![0.0, 0.0]);
        let (f, _) = fold_bn(&w, &[2.0; 2], &[0.0; 2], &st, BnMode::Eval).unwrap();
        assert!(f.max_abs_diff(&w.scale(2.0)).unwrap() < 1e-15);
    }

    #[test]
    fn fold_rejects_train_mode() {
        let w = Tensor::zeros(&[1, 1, 1, 1]);
        let st = BatchNormState::new(1);
        let err = fold_bn(&w, &[1.0], &[0.0], &st, BnMode::Train).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn fold_equivalence_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let (ci, co) = (3 + trial % 3, 2 + trial % 4);
            let w = Tensor::randn(&[co, ci, 3, 3], 0.5, &mut rng);
            let x = Tensor::randn(&[2, ci, 6, 6], 1.0, &mut rng);
            let st = BatchNormState {
                running_mean: (0..co).map(|_| rng.random_range(-1.0..1.0)).collect(),
                running_var: (0..co).map(|_| rng.random_range(0.1..3.0)).collect(),
            };
            let gamma: Vec<f64> = (0..co).map(|_| rng.random_range(-2.0..2.0)).collect();
            let beta: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spec = ConvSpec::new(1, 1, 1);
            let (reference, _) = batchnorm_forward(
                &conv2d(&x, &w, spec).unwrap(),
                &gamma,
                &beta,
                &st,
                BnMode::Eval,
            )
            .unwrap();
            let (fw, bias) = fold_bn(&w, &gamma, &beta, &st, BnMode::Eval).unwrap();
            let mut folded = conv2d(&x, &fw, spec).unwrap();
            let inner = 36;
            for (i, v) in folded.data_mut().iter_mut().enumerate() {
                *v += bias[(i / inner) % co];
            }
            assert!(reference.max_abs_diff(&folded).unwrap() <= 1e-5);
        }
    }
}
