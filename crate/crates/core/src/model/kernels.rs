// SPDX-License-Identifier: MIT OR Apache-2.0

//! f32 inner loops over packed `rows × width` activation buffers.
//!
//! Accumulation order is fixed so every result is bit-reproducible.

use crate::numerics::Matrix;

const LANES: usize = 8;

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[t] = W · x[t] (+ bias)` for every packed row `t`.
pub fn linear(x: &[f32], rows: usize, w: &Matrix<f32>, bias: Option<&[f32]>, out: &mut [f32]) {
    let (n_out, n_in) = w.shape();
    assert_eq!(x.len(), rows * n_in);
    assert_eq!(out.len(), rows * n_out);
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            n_in,
            n_out,
            1.0,
            x.as_ptr(),
            n_in as isize,
            1,
            w.data().as_ptr(),
            1,
            n_in as isize,
            0.0,
            out.as_mut_ptr(),
            n_out as isize,
            1,
        );
    }
    if let Some(b) = bias {
        for t in 0..rows {
            for (v, &bv) in out[t * n_out..(t + 1) * n_out].iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
}

/// `dx[t] += Wᵀ · dy[t]`.
pub fn linear_backward_input(dy: &[f32], rows: usize, w: &Matrix<f32>, dx: &mut [f32]) {
    let (n_out, n_in) = w.shape();
    assert_eq!(dy.len(), rows * n_out);
    assert_eq!(dx.len(), rows * n_in);
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            n_out,
            n_in,
            1.0,
            dy.as_ptr(),
            n_out as isize,
            1,
            w.data().as_ptr(),
            n_in as isize,
            1,
            1.0,
            dx.as_mut_ptr(),
            n_in as isize,
            1,
        );
    }
}

/// `dW += Σ_t dy[t] ⊗ x[t]`.
pub fn linear_backward_weight(dy: &[f32], x: &[f32], rows: usize, dw: &mut Matrix<f32>) {
    let (n_out, n_in) = dw.shape();
    assert_eq!(dy.len(), rows * n_out);
    assert_eq!(x.len(), rows * n_in);
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::sgemm(
            n_out,
            rows,
            n_in,
            1.0,
            dy.as_ptr(),
            1,
            n_out as isize,
            x.as_ptr(),
            n_in as isize,
            1,
            1.0,
            dw.data_mut().as_mut_ptr(),
            n_in as isize,
            1,
        );
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Layer norm per row; stores normalized inputs and inverse std for backward.
pub fn layer_norm(
    x: &[f32],
    rows: usize,
    gain: &[f32],
    bias: &[f32],
    out: &mut [f32],
    xhat: &mut [f32],
    rstd: &mut [f32],
) {
    let d = gain.len();
    for t in 0..rows {
        let xr = &x[t * d..(t + 1) * d];
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / libm::sqrtf(var + LN_EPS);
        rstd[t] = r;
        for i in 0..d {
            let n = (xr[i] - mean) * r;
            xhat[t * d + i] = n;
            out[t * d + i] = n * gain[i] + bias[i];
        }
    }
}

/// Accumulates layer-norm input gradients into `dx` and, optionally, gain/bias gradients.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    rows: usize,
    gain: &[f32],
    dx: &mut [f32],
    mut dparams: Option<(&mut [f32], &mut [f32])>,
) {
    let d = gain.len();
    for t in 0..rows {
        let dyr = &dy[t * d..(t + 1) * d];
        let xh = &xhat[t * d..(t + 1) * d];
        let mut mean_g = 0.0f32;
        let mut mean_gx = 0.0f32;
        for i in 0..d {
            let g = dyr[i] * gain[i];
            mean_g += g;
            mean_gx += g * xh[i];
        }
        mean_g /= d as f32;
        mean_gx /= d as f32;
        let r = rstd[t];
        let dxr = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            dxr[i] += r * (dyr[i] * gain[i] - mean_g - xh[i] * mean_gx);
        }
        if let Some((dg, db)) = dparams.as_mut() {
            for i in 0..d {
                dg[i] += dyr[i] * xh[i];
                db[i] += dyr[i];
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Rational minimax tanh, accurate to a few ulp and free of branches so that
/// loops over it vectorize.
#[inline]
#[allow(clippy::excessive_precision)]
fn tanh(x: f32) -> f32 {
    let x = x.clamp(-7.998_811_7, 7.998_811_7);
    let x2 = x * x;
    let mut p = -2.760_768_5e-16f32;
    p = p * x2 + 2.000_187_9e-13;
    p = p * x2 - 8.604_671_5e-11;
    p = p * x2 + 5.122_297e-8;
    p = p * x2 + 1.485_722_4e-5;
    p = p * x2 + 6.372_619_3e-4;
    p = p * x2 + 4.893_524_6e-3;
    let mut q = 1.198_258_4e-6f32;
    q = q * x2 + 1.185_347_1e-4;
    q = q * x2 + 2.268_434_6e-3;
    q = q * x2 + 4.893_525_2e-3;
    x * p / q
}

/// Tanh-approximated GELU; also returns the inner tanh for [`gelu_grad`].
#[inline]
pub fn gelu(x: f32) -> (f32, f32) {
    let t = tanh(GELU_C * (x + 0.044_715 * x * x * x));
    (0.5 * x * (1.0 + t), t)
}

/// Derivative of [`gelu`] given the tanh it returned.
#[inline]
pub fn gelu_grad(x: f32, t: f32) -> f32 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_close_to_libm() {
        let mut x = -10.0f32;
        while x < 10.0 {
            assert!((tanh(x) - libm::tanhf(x)).abs() < 2e-6, "{x}");
            x += 0.001;
        }
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0).0, 0.0);
        // tanh-form GELU(1) = 0.841192
        assert!((gelu(1.0).0 - 0.841_192).abs() < 1e-5);
        assert!((gelu(-3.0).0 + 0.003_637_4).abs() < 1e-5);
        assert!((gelu(40.0).0 - 40.0).abs() < 1e-4 && gelu(-40.0).0.abs() < 1e-5);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-2.5f32, -0.3, 0.0, 0.7, 2.0] {
            let h = 1e-2;
            let numeric = (gelu(x + h).0 - gelu(x - h).0) / (2.0 * h);
            let (_, t) = gelu(x);
            assert!((numeric - gelu_grad(x, t)).abs() < 1e-3);
        }
    }
}
