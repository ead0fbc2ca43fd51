//! Elementwise, pooling, dense, and loss ops.

use crate::error::{Error, Result};

use super::{dims2, dims4, lit, Element, Tensor};

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!("add: shapes {sa:?} vs {sb:?}")));
    }
    let out = a.with_values(|av| b.with_values(|bv| av.iter().zip(bv).map(|(x, y)| *x + *y).collect()));
    let (pa, pb) = (a.clone(), b.clone());
    let (ga, gb) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        out,
        sa,
        vec![a.clone(), b.clone()],
        Box::new(move |gout| {
            if ga {
                pa.accumulate_grad(gout);
            }
            if gb {
                pb.accumulate_grad(gout);
            }
        }),
    ))
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!("mul: shapes {sa:?} vs {sb:?}")));
    }
    let av = a.values();
    let bv = b.values();
    let out = av.iter().zip(&bv).map(|(x, y)| *x * *y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    let (ga, gb) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        out,
        sa,
        vec![a.clone(), b.clone()],
        Box::new(move |gout| {
            if ga {
                let d: Vec<T> = gout.iter().zip(&bv).map(|(g, y)| *g * *y).collect();
                pa.accumulate_grad(&d);
            }
            if gb {
                let d: Vec<T> = gout.iter().zip(&av).map(|(g, x)| *g * *x).collect();
                pb.accumulate_grad(&d);
            }
        }),
    ))
}

/// Multiply by a constant scalar.
pub fn scale<T: Element>(t: &Tensor<T>, c: T) -> Tensor<T> {
    let out = t.with_values(|v| v.iter().map(|x| *x * c).collect());
    let p = t.clone();
    Tensor::from_op(
        out,
        t.shape(),
        vec![t.clone()],
        Box::new(move |gout| {
            let d: Vec<T> = gout.iter().map(|g| *g * c).collect();
            p.accumulate_grad(&d);
        }),
    )
}

/// Sum of all elements into a scalar.
pub fn sum<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s: T = t.with_values(|v| v.iter().copied().sum());
    let p = t.clone();
    let n = t.numel();
    Tensor::from_op(
        vec![s],
        vec![1],
        vec![t.clone()],
        Box::new(move |gout| {
            p.accumulate_grad(&vec![gout[0]; n]);
        }),
    )
}

/// Leaky ReLU: `x` if `x >= 0`, else `slope * x`. `slope = 0` is plain ReLU.
pub fn leaky_relu<T: Element>(t: &Tensor<T>, slope: T) -> Tensor<T> {
    let input = t.values();
    let out = input
        .iter()
        .map(|&x| if x >= T::zero() { x } else { slope * x })
        .collect();
    let p = t.clone();
    Tensor::from_op(
        out,
        t.shape(),
        vec![t.clone()],
        Box::new(move |gout| {
            let d: Vec<T> = gout
                .iter()
                .zip(&input)
                .map(|(g, &x)| if x >= T::zero() { *g } else { *g * slope })
                .collect();
            p.accumulate_grad(&d);
        }),
    )
}

pub fn relu<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    leaky_relu(t, T::zero())
}

/// 2-D max pooling over NCHW input. Padding (with -inf) must leave every
/// window at least partially inside the input: `pad <= kernel / 2`.
pub fn maxpool2d<T: Element>(
    t: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(t, "maxpool input")?;
    if kernel == 0 || stride == 0 {
        return Err(Error::Config("maxpool: kernel and stride must be >= 1".into()));
    }
    if pad > kernel / 2 {
        return Err(Error::Config(format!(
            "maxpool: pad {pad} exceeds kernel/2 ({})",
            kernel / 2
        )));
    }
    if h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(Error::Config(format!(
            "maxpool: window {kernel}x{kernel} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;

    let input = t.values();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = plane + iy as usize * w + ix as usize;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((img * c + ch) * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }

    let p = t.clone();
    let in_numel = input.len();
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        vec![t.clone()],
        Box::new(move |gout| {
            let mut d = vec![T::zero(); in_numel];
            for (g, &src) in gout.iter().zip(&argmax) {
                d[src] = d[src] + *g;
            }
            p.accumulate_grad(&d);
        }),
    ))
}

/// Global average pooling: NCHW -> N x C.
pub fn global_avgpool<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(t, "global_avgpool input")?;
    let area = h * w;
    let inv = T::one() / lit::<T>(area as f64);
    let input = t.values();
    let mut out = vec![T::zero(); n * c];
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * area;
            let s: T = input[plane..plane + area].iter().copied().sum();
            out[img * c + ch] = s * inv;
        }
    }
    let p = t.clone();
    Ok(Tensor::from_op(
        out,
        vec![n, c],
        vec![t.clone()],
        Box::new(move |gout| {
            let mut d = vec![T::zero(); n * c * area];
            for img in 0..n {
                for ch in 0..c {
                    let g = gout[img * c + ch] * inv;
                    let plane = (img * c + ch) * area;
                    for x in &mut d[plane..plane + area] {
                        *x = g;
                    }
                }
            }
            p.accumulate_grad(&d);
        }),
    ))
}

/// Collapse all non-batch axes: N x ... -> N x D.
pub fn flatten<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.is_empty() {
        return Err(Error::Shape("flatten: scalar input".into()));
    }
    let n = s[0];
    let d: usize = s[1..].iter().product();
    let p = t.clone();
    Ok(Tensor::from_op(
        t.values(),
        vec![n, d],
        vec![t.clone()],
        Box::new(move |gout| {
            p.accumulate_grad(gout);
        }),
    ))
}

/// Fully connected layer: `[n, d] x [d, k] + [k] -> [n, k]`.
pub fn dense<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = dims2(input, "dense input")?;
    let (dw, k) = dims2(weight, "dense weight")?;
    if d != dw {
        return Err(Error::Shape(format!(
            "dense: input features {d} vs weight rows {dw}"
        )));
    }
    let bs = bias.shape();
    if bs != vec![k] {
        return Err(Error::Shape(format!("dense: bias shape {bs:?}, expected [{k}]")));
    }

    let x = input.values();
    let wv = weight.values();
    let bv = bias.values();
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let orow = &mut out[i * k..(i + 1) * k];
        orow.copy_from_slice(&bv);
        for (j, &xj) in row.iter().enumerate() {
            let wrow = &wv[j * k..(j + 1) * k];
            for (o, &wj) in orow.iter_mut().zip(wrow) {
                *o = *o + xj * wj;
            }
        }
    }

    let (pi, pw, pb) = (input.clone(), weight.clone(), bias.clone());
    let (gi, gw, gb) = (input.requires_grad(), weight.requires_grad(), bias.requires_grad());
    Ok(Tensor::from_op(
        out,
        vec![n, k],
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |gout| {
            if gi {
                // dx[i,j] = sum_k gout[i,k] * w[j,k]
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    let grow = &gout[i * k..(i + 1) * k];
                    let drow = &mut dx[i * d..(i + 1) * d];
                    for (j, dj) in drow.iter_mut().enumerate() {
                        let wrow = &wv[j * k..(j + 1) * k];
                        let mut s = T::zero();
                        for (g, w) in grow.iter().zip(wrow) {
                            s = s + *g * *w;
                        }
                        *dj = s;
                    }
                }
                pi.accumulate_grad(&dx);
            }
            if gw {
                // dw[j,k] = sum_i x[i,j] * gout[i,k]
                let mut dw_acc = vec![T::zero(); d * k];
                for i in 0..n {
                    let row = &x[i * d..(i + 1) * d];
                    let grow = &gout[i * k..(i + 1) * k];
                    for (j, &xj) in row.iter().enumerate() {
                        let wrow = &mut dw_acc[j * k..(j + 1) * k];
                        for (wgt, &g) in wrow.iter_mut().zip(grow) {
                            *wgt = *wgt + xj * g;
                        }
                    }
                }
                pw.accumulate_grad(&dw_acc);
            }
            if gb {
                let mut db = vec![T::zero(); k];
                for i in 0..n {
                    for (bj, &g) in db.iter_mut().zip(&gout[i * k..(i + 1) * k]) {
                        *bj = *bj + g;
                    }
                }
                pb.accumulate_grad(&db);
            }
        }),
    ))
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, k) = dims2(logits, "cross-entropy logits")?;
    if labels.len() != n {
        return Err(Error::Input(format!(
            "cross-entropy: {n} rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!(
            "cross-entropy: label {bad} out of range [0, {k})"
        )));
    }

    let x = logits.values();
    // Stable log-softmax via max subtraction; softmax saved for backward.
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z = z + (v - m).exp();
        }
        let log_z = z.ln() + m;
        loss = loss + log_z - row[labels[i]];
        let prow = &mut probs[i * k..(i + 1) * k];
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
    }
    let inv_n = T::one() / lit::<T>(n as f64);
    loss = loss * inv_n;

    let p = logits.clone();
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Box::new(move |gout| {
            let g = gout[0] * inv_n;
            let mut d = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                let idx = i * k + label;
                d[idx] = d[idx] - T::one();
            }
            for v in &mut d {
                *v = *v * g;
            }
            p.accumulate_grad(&d);
        }),
    ))
}

/// Mean over all elements of `mask * |a - b|`, with the mask held constant.
/// Subgradient of `|.|` at zero is taken as zero.
pub fn masked_abs_diff_mean<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mask: &[T],
) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!(
            "masked abs diff: shapes {sa:?} vs {sb:?}"
        )));
    }
    if mask.len() != a.numel() {
        return Err(Error::Shape(format!(
            "masked abs diff: mask length {} vs {} elements",
            mask.len(),
            a.numel()
        )));
    }
    let av = a.values();
    let bv = b.values();
    let n = av.len();
    let inv_n = T::one() / lit::<T>(n as f64);
    let mut total = T::zero();
    // Signed mask slope: mask * sign(a - b), reused by backward.
    let mut signed = vec![T::zero(); n];
    for i in 0..n {
        let diff = av[i] - bv[i];
        total = total + mask[i] * diff.abs();
        signed[i] = if diff > T::zero() {
            mask[i]
        } else if diff < T::zero() {
            -mask[i]
        } else {
            T::zero()
        };
    }
    total = total * inv_n;

    let (pa, pb) = (a.clone(), b.clone());
    let (ga, gb) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        vec![total],
        vec![1],
        vec![a.clone(), b.clone()],
        Box::new(move |gout| {
            let g = gout[0] * inv_n;
            if ga {
                let d: Vec<T> = signed.iter().map(|&s| s * g).collect();
                pa.accumulate_grad(&d);
            }
            if gb {
                let d: Vec<T> = signed.iter().map(|&s| -s * g).collect();
                pb.accumulate_grad(&d);
            }
        }),
    ))
}
