//! Batch normalization over NCHW feature maps.

use crate::error::{Error, Result};

use super::{dims4, lit, Element, Tensor};

/// Running statistics carried between training iterations. Updated in
/// place by `batchnorm` in training mode; this is one of the two
/// documented mutations in the op set.
#[derive(Debug, Clone)]
pub struct BatchNormState<T: Element> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Fraction of the batch statistic blended into the running value
    /// each training step.
    pub momentum: T,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: lit(0.1),
        }
    }
}

/// Normalize per channel. Training mode uses batch statistics (biased
/// variance) and updates the running state; eval mode uses the running
/// state. Differentiable w.r.t. input, gamma, and beta.
pub fn batchnorm<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    train: bool,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(input, "batchnorm input")?;
    if gamma.shape() != vec![c] || beta.shape() != vec![c] {
        return Err(Error::Shape(format!(
            "batchnorm: gamma/beta must have shape [{c}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if state.running_mean.len() != c || state.running_var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm: running state has {} channels, input has {c}",
            state.running_mean.len()
        )));
    }

    let x = input.values();
    let gv = gamma.values();
    let bv = beta.values();
    let area = h * w;
    let per_channel = n * area;
    let inv_m = T::one() / lit::<T>(per_channel as f64);

    let (mean, var) = if train {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for img in 0..n {
                let plane = ((img * c) + ch) * area;
                for &v in &x[plane..plane + area] {
                    s = s + v;
                }
            }
            let m = s * inv_m;
            let mut sq = T::zero();
            for img in 0..n {
                let plane = ((img * c) + ch) * area;
                for &v in &x[plane..plane + area] {
                    let d = v - m;
                    sq = sq + d * d;
                }
            }
            mean[ch] = m;
            var[ch] = sq * inv_m;
        }
        let mom = state.momentum;
        let keep = T::one() - mom;
        for ch in 0..c {
            state.running_mean[ch] = keep * state.running_mean[ch] + mom * mean[ch];
            state.running_var[ch] = keep * state.running_var[ch] + mom * var[ch];
        }
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for img in 0..n {
        for ch in 0..c {
            let plane = ((img * c) + ch) * area;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            for i in plane..plane + area {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }

    let (pi, pg, pb) = (input.clone(), gamma.clone(), beta.clone());
    let (need_i, need_g, need_b) = (
        input.requires_grad(),
        gamma.requires_grad(),
        beta.requires_grad(),
    );
    Ok(Tensor::from_op(
        out,
        vec![n, c, h, w],
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gout| {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for img in 0..n {
                for ch in 0..c {
                    let plane = ((img * c) + ch) * area;
                    let mut sg = T::zero();
                    let mut sb = T::zero();
                    for i in plane..plane + area {
                        sg = sg + gout[i] * xhat[i];
                        sb = sb + gout[i];
                    }
                    dgamma[ch] = dgamma[ch] + sg;
                    dbeta[ch] = dbeta[ch] + sb;
                }
            }
            if need_i {
                let mut dx = vec![T::zero(); xhat.len()];
                if train {
                    // dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat))
                    for ch in 0..c {
                        let mg = dbeta[ch] * inv_m;
                        let mgx = dgamma[ch] * inv_m;
                        let k = gv[ch] * inv_std[ch];
                        for img in 0..n {
                            let plane = ((img * c) + ch) * area;
                            for i in plane..plane + area {
                                dx[i] = k * (gout[i] - mg - xhat[i] * mgx);
                            }
                        }
                    }
                } else {
                    for ch in 0..c {
                        let k = gv[ch] * inv_std[ch];
                        for img in 0..n {
                            let plane = ((img * c) + ch) * area;
                            for i in plane..plane + area {
                                dx[i] = k * gout[i];
                            }
                        }
                    }
                }
                pi.accumulate_grad(&dx);
            }
            if need_g {
                pg.accumulate_grad(&dgamma);
            }
            if need_b {
                pb.accumulate_grad(&dbeta);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_input(seed: u64, shape: [usize; 4]) -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::leaf(v, shape.to_vec(), false).unwrap()
    }

    #[test]
    fn train_mode_normalizes() {
        let x = random_input(3, [4, 3, 5, 5]);
        let gamma = Tensor::leaf(vec![1.0f32; 3], vec![3], false).unwrap();
        let beta = Tensor::leaf(vec![0.0f32; 3], vec![3], false).unwrap();
        let mut state = BatchNormState::new(3);
        let y = batchnorm(&x, &gamma, &beta, &mut state, true, 1e-5).unwrap();
        let v = y.values();
        let area = 25;
        for ch in 0..3 {
            let mut vals = Vec::new();
            for img in 0..4 {
                let plane = (img * 3 + ch) * area;
                vals.extend_from_slice(&v[plane..plane + area]);
            }
            let m: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            let var: f32 = vals.iter().map(|&v| (v - m) * (v - m)).sum::<f32>() / vals.len() as f32;
            assert!(m.abs() < 1e-4, "channel {ch} mean {m}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn eval_mode_is_affine() {
        let x = random_input(4, [2, 2, 3, 3]);
        let gamma = Tensor::leaf(vec![2.0f32; 2], vec![2], false).unwrap();
        let beta = Tensor::leaf(vec![3.0f32; 2], vec![2], false).unwrap();
        let mut state = BatchNormState::new(2);
        let y = batchnorm(&x, &gamma, &beta, &mut state, false, 1e-5).unwrap();
        for (yi, xi) in y.values().iter().zip(x.values()) {
            assert!((yi - (2.0 * xi + 3.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_variance_channel_survives() {
        // Constant channel in train mode: eps keeps the division finite.
        let x = Tensor::leaf(vec![0.5f32; 1 * 1 * 2 * 2], vec![1, 1, 2, 2], false).unwrap();
        let gamma = Tensor::leaf(vec![1.0f32], vec![1], false).unwrap();
        let beta = Tensor::leaf(vec![0.0f32], vec![1], false).unwrap();
        let mut state = BatchNormState::new(1);
        let y = batchnorm(&x, &gamma, &beta, &mut state, true, 1e-5).unwrap();
        assert!(y.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn running_state_updates_only_in_train() {
        let x = random_input(5, [2, 1, 2, 2]);
        let gamma = Tensor::leaf(vec![1.0f32], vec![1], false).unwrap();
        let beta = Tensor::leaf(vec![0.0f32], vec![1], false).unwrap();
        let mut state = BatchNormState::new(1);
        let before = state.running_mean.clone();
        let _ = batchnorm(&x, &gamma, &beta, &mut state, false, 1e-5).unwrap();
        assert_eq!(state.running_mean, before);
        let _ = batchnorm(&x, &gamma, &beta, &mut state, true, 1e-5).unwrap();
        assert_ne!(state.running_mean, before);
    }
}
