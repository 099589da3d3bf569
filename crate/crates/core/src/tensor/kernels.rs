//! Forward compute kernels. Matrix products go through `matrixmultiply`;
//! naive loop references live here too and pin the semantics in tests.

use super::{Tensor, TensorError};

/// C := alpha*A*B + beta*C for row-major slices, with arbitrary strides so
/// transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m * n <= c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C := A[m×k]·B[k×n] + beta*C.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, beta: f64) {
    dgemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// C := Aᵀ·B + beta*C where A is stored row-major as [k×m].
pub(crate) fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, beta: f64) {
    dgemm(m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, beta, c);
}

/// C := A·Bᵀ + beta*C where B is stored row-major as [n×k].
pub(crate) fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, beta: f64) {
    dgemm(m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, beta, c);
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(vec![m, n]);
    gemm_nn(a.data(), b.data(), out.data_mut(), m, ka, n, 0.0);
    Ok(out)
}

/// Triple-loop reference product; the semantics `matmul` must match.
#[cfg(test)]
pub(crate) fn matmul_naive(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(vec![m, n]);
    let (ad, bd, od) = (a.data(), b.data(), out.data_mut());
    for i in 0..m {
        for p in 0..ka {
            let aip = ad[i * ka + p];
            for j in 0..n {
                od[i * n + j] += aip * bd[p * n + j];
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv_dims(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvDims, TensorError> {
    let (c_in, h, w) = input.dims3()?;
    let dims: [usize; 4] = match *kernels.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernels must be rank 4, got shape {:?}", kernels.shape()),
            })
        }
    };
    let [c_out, kc, kh, kw] = dims;
    if kc != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            msg: "stride must be positive".into(),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        h_out: (h + 2 * padding - kh) / stride + 1,
        w_out: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Unfold input patches into a [C_in·kh·kw × H_out·W_out] matrix so the
/// convolution becomes one matrix product. Out-of-bounds taps stay zero.
pub(crate) fn im2col(input: &[f64], d: &ConvDims, stride: usize, padding: usize) -> Vec<f64> {
    let n_pos = d.h_out * d.w_out;
    let mut patches = vec![0.0; d.c_in * d.kh * d.kw * n_pos];
    for ci in 0..d.c_in {
        for di in 0..d.kh {
            for dj in 0..d.kw {
                let r = (ci * d.kh + di) * d.kw + dj;
                let row = &mut patches[r * n_pos..(r + 1) * n_pos];
                for oh in 0..d.h_out {
                    let ih = (oh * stride + di) as isize - padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let in_row = &input[(ci * d.h + ih as usize) * d.w..][..d.w];
                    if stride == 1 {
                        let shift = dj as isize - padding as isize;
                        let ow_lo = (-shift).max(0) as usize;
                        let ow_hi = (d.w as isize - shift).clamp(0, d.w_out as isize) as usize;
                        if ow_lo < ow_hi {
                            let src = (ow_lo as isize + shift) as usize;
                            row[oh * d.w_out + ow_lo..oh * d.w_out + ow_hi]
                                .copy_from_slice(&in_row[src..src + (ow_hi - ow_lo)]);
                        }
                    } else {
                        for ow in 0..d.w_out {
                            let iw = (ow * stride + dj) as isize - padding as isize;
                            if iw >= 0 && iw < d.w as isize {
                                row[oh * d.w_out + ow] = in_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    patches
}

/// Scatter-add the patch-matrix gradient back onto the input layout;
/// exact adjoint of `im2col`.
pub(crate) fn col2im_acc(
    dpatches: &[f64],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    dinput: &mut [f64],
) {
    let n_pos = d.h_out * d.w_out;
    for ci in 0..d.c_in {
        for di in 0..d.kh {
            for dj in 0..d.kw {
                let r = (ci * d.kh + di) * d.kw + dj;
                let row = &dpatches[r * n_pos..(r + 1) * n_pos];
                for oh in 0..d.h_out {
                    let ih = (oh * stride + di) as isize - padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let out_row = &mut dinput[(ci * d.h + ih as usize) * d.w..][..d.w];
                    for ow in 0..d.w_out {
                        let iw = (ow * stride + dj) as isize - padding as isize;
                        if iw >= 0 && iw < d.w as isize {
                            out_row[iw as usize] += row[oh * d.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_with_patches(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor), TensorError> {
    let d = conv_dims(input, kernels, stride, padding)?;
    let n_pos = d.h_out * d.w_out;
    let k_elems = d.c_in * d.kh * d.kw;
    let patches = im2col(input.data(), &d, stride, padding);
    let mut out = Tensor::zeros(vec![d.c_out, d.h_out, d.w_out]);
    gemm_nn(kernels.data(), &patches, out.data_mut(), d.c_out, k_elems, n_pos, 0.0);
    let patches = Tensor::from_vec(vec![k_elems, n_pos], patches)?;
    Ok((out, patches))
}

/// Cross-correlation (no kernel flip) over a zero-padded input.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    conv2d_with_patches(input, kernels, stride, padding).map(|(out, _)| out)
}

/// Direct six-loop reference convolution; the semantics `conv2d` must match.
#[cfg(test)]
pub(crate) fn conv2d_naive(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let d = conv_dims(input, kernels, stride, padding)?;
    let mut out = Tensor::zeros(vec![d.c_out, d.h_out, d.w_out]);
    let (x, k, o) = (input.data(), kernels.data(), out.data_mut());
    for co in 0..d.c_out {
        for oh in 0..d.h_out {
            for ow in 0..d.w_out {
                let mut acc = 0.0;
                for ci in 0..d.c_in {
                    for di in 0..d.kh {
                        for dj in 0..d.kw {
                            let ih = (oh * stride + di) as isize - padding as isize;
                            let iw = (ow * stride + dj) as isize - padding as isize;
                            if ih >= 0 && ih < d.h as isize && iw >= 0 && iw < d.w as isize {
                                acc += x[(ci * d.h + ih as usize) * d.w + iw as usize]
                                    * k[((co * d.c_in + ci) * d.kh + di) * d.kw + dj];
                            }
                        }
                    }
                }
                o[(co * d.h_out + oh) * d.w_out + ow] = acc;
            }
        }
    }
    Ok(out)
}

pub(crate) fn max_pool2d_with_argmax(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>), TensorError> {
    let (c, h, w) = input.dims3()?;
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "max_pool2d",
            msg: "window and stride must be positive".into(),
        });
    }
    if window > h || window > w {
        return Err(TensorError::ShapeMismatch {
            op: "max_pool2d",
            lhs: input.shape().to_vec(),
            rhs: vec![window, window],
        });
    }
    let h_out = (h - window) / stride + 1;
    let w_out = (w - window) / stride + 1;
    let mut out = Tensor::zeros(vec![c, h_out, w_out]);
    let mut argmax = vec![0usize; c * h_out * w_out];
    let x = input.data();
    let o = out.data_mut();
    for ci in 0..c {
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                // Strict > keeps the first occurrence in row-major order on ties.
                for di in 0..window {
                    for dj in 0..window {
                        let idx = (ci * h + oh * stride + di) * w + ow * stride + dj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let oi = (ci * h_out + oh) * w_out + ow;
                o[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor, TensorError> {
    max_pool2d_with_argmax(input, window, stride).map(|(out, _)| out)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn tanh(t: &Tensor) -> Tensor {
    t.map(f64::tanh)
}

/// Row-wise log-softmax with max-subtraction, so each output row
/// log-normalizes to zero even for inputs with magnitude ~1e3.
pub fn log_softmax_rows(t: &Tensor) -> Result<Tensor, TensorError> {
    let (rows, cols) = t.dims2()?;
    let mut out = t.clone();
    let data = out.data_mut();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row {
            *v -= lse;
        }
    }
    Ok(out)
}
