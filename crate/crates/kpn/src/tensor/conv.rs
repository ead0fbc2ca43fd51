//! 2-D convolution via im2col + GEMM, parallelized over the batch.
//!
//! Work is partitioned per sample with fixed boundaries, so outputs are
//! bit-identical for any number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{dims4, Element, Tensor};

/// `out[oc][l..] += a * b[l..]` over a contiguous row; the hot loop.
#[inline]
fn axpy<T: Element>(out: &mut [T], a: T, b: &[T]) {
    for (o, &x) in out.iter_mut().zip(b) {
        *o = *o + a * x;
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

#[derive(Clone)]
struct ConvGeom {
    c_in: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one sample (CHW) into a `[c_in*kh*kw][oh*ow]` matrix.
fn im2col<T: Element>(input: &[T], g: &ConvGeom, col: &mut [T]) {
    let l = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * l..][..l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a `[c_in*kh*kw][oh*ow]` gradient matrix back onto a CHW image.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, out: &mut [T]) {
    let l = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * l..][..l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution of an NCHW input with an `[c_out, c_in, kh, kw]` weight.
/// No bias; convolutions in this crate are always followed by batch norm
/// or used as pure linear maps.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(input, "conv input")?;
    let (c_out, c_in, kh, kw) = dims4(weight, "conv weight")?;
    if c != c_in {
        return Err(Error::Shape(format!(
            "conv: input has {c} channels, weight expects {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv: stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Config(format!(
            "conv: kernel {kh}x{kw} does not fit padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let geom = ConvGeom {
        c_in,
        kh,
        kw,
        h,
        w,
        oh,
        ow,
        stride,
        pad,
    };
    let d = geom.col_rows();
    let l = geom.col_cols();

    let x = input.values();
    let wv = weight.values();

    // Per-sample unfold kept for the backward pass.
    let cols: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col = vec![T::zero(); d * l];
            im2col(&x[i * c * h * w..(i + 1) * c * h * w], &geom, &mut col);
            col
        })
        .collect();

    let mut out = vec![T::zero(); n * c_out * l];
    out.par_chunks_mut(c_out * l).zip(cols.par_iter()).for_each(|(sample_out, col)| {
        // out[oc][l] = sum_d w[oc][d] * col[d][l]
        for oc in 0..c_out {
            let wrow = &wv[oc * d..(oc + 1) * d];
            let orow = &mut sample_out[oc * l..(oc + 1) * l];
            for (k, &a) in wrow.iter().enumerate() {
                if a != T::zero() {
                    axpy(orow, a, &col[k * l..(k + 1) * l]);
                }
            }
        }
    });

    let (pi, pw) = (input.clone(), weight.clone());
    let (gi, gw) = (input.requires_grad(), weight.requires_grad());
    let in_plane = c * h * w;
    let geom_b = geom.clone();
    Ok(Tensor::from_op(
        out,
        vec![n, c_out, oh, ow],
        vec![input.clone(), weight.clone()],
        Box::new(move |gout| {
            if gw {
                // dw[oc][d] = sum_n sum_l gout[n][oc][l] * col[n][d][l];
                // per-sample partials are reduced in sample order.
                let partials: Vec<Vec<T>> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let gslice = &gout[i * c_out * l..(i + 1) * c_out * l];
                        let col = &cols[i];
                        let mut dw = vec![T::zero(); c_out * d];
                        for oc in 0..c_out {
                            let grow = &gslice[oc * l..(oc + 1) * l];
                            let drow = &mut dw[oc * d..(oc + 1) * d];
                            for (k, dk) in drow.iter_mut().enumerate() {
                                *dk = dot(grow, &col[k * l..(k + 1) * l]);
                            }
                        }
                        dw
                    })
                    .collect();
                let mut dw = vec![T::zero(); c_out * d];
                for p in &partials {
                    for (a, &b) in dw.iter_mut().zip(p) {
                        *a = *a + b;
                    }
                }
                pw.accumulate_grad(&dw);
            }
            if gi {
                let dx: Vec<Vec<T>> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let gslice = &gout[i * c_out * l..(i + 1) * c_out * l];
                        // dcol[d][l] = sum_oc w[oc][d] * gout[oc][l]
                        let mut dcol = vec![T::zero(); d * l];
                        for oc in 0..c_out {
                            let wrow = &wv[oc * d..(oc + 1) * d];
                            let grow = &gslice[oc * l..(oc + 1) * l];
                            for (k, &a) in wrow.iter().enumerate() {
                                if a != T::zero() {
                                    axpy(&mut dcol[k * l..(k + 1) * l], a, grow);
                                }
                            }
                        }
                        let mut dxi = vec![T::zero(); in_plane];
                        col2im(&dcol, &geom_b, &mut dxi);
                        dxi
                    })
                    .collect();
                let mut flat = vec![T::zero(); n * in_plane];
                for (i, dxi) in dx.into_iter().enumerate() {
                    flat[i * in_plane..(i + 1) * in_plane].copy_from_slice(&dxi);
                }
                pi.accumulate_grad(&flat);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_shape() {
        let x = Tensor::<f32>::leaf(vec![0.5; 16], vec![1, 1, 4, 4], false).unwrap();
        let w = Tensor::<f32>::leaf(vec![1.0; 9], vec![1, 1, 3, 3], false).unwrap();
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let x = Tensor::<f32>::leaf(vec![0.0; 2 * 3 * 5 * 5], vec![2, 3, 5, 5], false).unwrap();
        let w = Tensor::<f32>::leaf(vec![0.7; 4 * 3 * 3 * 3], vec![4, 3, 3, 3], false).unwrap();
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::leaf(vec![0.0; 2 * 4 * 4], vec![1, 2, 4, 4], false).unwrap();
        let w = Tensor::<f32>::leaf(vec![0.0; 3 * 9], vec![1, 3, 3, 3], false).unwrap();
        assert!(matches!(conv2d(&x, &w, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_kernel_too_large_is_config_error() {
        let x = Tensor::<f32>::leaf(vec![0.0; 4], vec![1, 1, 2, 2], false).unwrap();
        let w = Tensor::<f32>::leaf(vec![0.0; 25], vec![1, 1, 5, 5], false).unwrap();
        assert!(matches!(conv2d(&x, &w, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn conv_known_values() {
        // 2x2 input, 2x2 kernel of ones, no pad: output = sum of input.
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2], false).unwrap();
        let w = Tensor::<f64>::leaf(vec![1.0; 4], vec![1, 1, 2, 2], false).unwrap();
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.values(), vec![10.0]);
    }

    #[test]
    fn conv_is_linear_in_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let w = Tensor::<f64>::leaf(mk(&mut rng, 2 * 3 * 3 * 3), vec![2, 3, 3, 3], false).unwrap();
        let a = mk(&mut rng, 3 * 5 * 5);
        let b = mk(&mut rng, 3 * 5 * 5);
        let lhs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x + 3.0 * y).collect();
        let ta = Tensor::leaf(a, vec![1, 3, 5, 5], false).unwrap();
        let tb = Tensor::leaf(b, vec![1, 3, 5, 5], false).unwrap();
        let tl = Tensor::leaf(lhs, vec![1, 3, 5, 5], false).unwrap();
        let ya = conv2d(&ta, &w, 1, 1).unwrap().values();
        let yb = conv2d(&tb, &w, 1, 1).unwrap().values();
        let yl = conv2d(&tl, &w, 1, 1).unwrap().values();
        for i in 0..yl.len() {
            let expect = 2.0 * ya[i] + 3.0 * yb[i];
            assert!(
                (yl[i] - expect).abs() <= 1e-6 * (1.0 + expect.abs()),
                "superposition violated at {i}"
            );
        }
    }
}
