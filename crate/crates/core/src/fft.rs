//! 2-D discrete Fourier transform as a differentiable linear operator.
//!
//! Convention: `F(u,v) = sum_{h,w} x(h,w) * exp(-2*pi*i*(u*h/H + v*w/W))`,
//! unnormalized. Power-of-two extents take an iterative radix-2 path; other
//! extents fall back to a naive per-axis transform. Because the map is
//! linear, the backward pass is its adjoint: the real part of the
//! unnormalized inverse transform of the output gradient.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{make_node, Tensor};

/// Forward 2-D DFT of a real `[H,W]` field into a `[2,H,W]` tensor holding
/// the real and imaginary planes.
pub fn dft2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "dft2",
            detail: format!("expected non-empty [H,W], got {s:?}"),
        });
    }
    let (h, w) = (s[0], s[1]);
    let (re, im) = dft2_raw(x.data(), h, w);
    let mut data = re;
    data.extend_from_slice(&im);
    make_node(
        "dft2",
        &[x],
        vec![2, h, w],
        data,
        Box::new(move |g, _| {
            let (gre, gim) = g.split_at(h * w);
            let mut buf: Vec<Complex<f64>> = gre
                .iter()
                .zip(gim)
                .map(|(&r, &i)| Complex::new(r.to_f64_lossy(), i.to_f64_lossy()))
                .collect();
            transform2(&mut buf, h, w, 1.0);
            vec![Some(buf.iter().map(|c| T::of(c.re)).collect())]
        }),
    )
}

/// Eager forward transform used where no gradient is needed (loss
/// coefficients, targets).
pub fn dft2_raw<T: Scalar>(x: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    debug_assert_eq!(x.len(), h * w);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v.to_f64_lossy(), 0.0)).collect();
    transform2(&mut buf, h, w, -1.0);
    (
        buf.iter().map(|c| T::of(c.re)).collect(),
        buf.iter().map(|c| T::of(c.im)).collect(),
    )
}

/// Separable 2-D transform: rows then columns, exponent sign as given,
/// no normalization.
fn transform2(buf: &mut [Complex<f64>], h: usize, w: usize, sign: f64) {
    let mut row = vec![Complex::new(0.0, 0.0); w];
    for r in 0..h {
        row.copy_from_slice(&buf[r * w..(r + 1) * w]);
        transform1(&mut row, sign);
        buf[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        transform1(&mut col, sign);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
}

fn transform1(x: &mut [Complex<f64>], sign: f64) {
    let n = x.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_radix2(x, sign);
    } else {
        dft_naive_axis(x, sign);
    }
}

/// Iterative radix-2 FFT (bit-reversal + butterflies).
fn fft_radix2(x: &mut [Complex<f64>], sign: f64) {
    let n = x.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i as u32).reverse_bits() >> (32 - bits);
        let j = j as usize;
        if i < j {
            x.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let wlen = Complex::new(ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let mut w = Complex::new(1.0, 0.0);
            for i in 0..len / 2 {
                let a = x[start + i];
                let b = x[start + i + len / 2] * w;
                x[start + i] = a + b;
                x[start + i + len / 2] = a - b;
                w *= wlen;
            }
            start += len;
        }
        len <<= 1;
    }
}

fn dft_naive_axis(x: &mut [Complex<f64>], sign: f64) {
    let n = x.len();
    let src = x.to_vec();
    for (k, slot) in x.iter_mut().enumerate() {
        let mut acc = Complex::new(0.0, 0.0);
        for (j, &v) in src.iter().enumerate() {
            let ang = sign * std::f64::consts::TAU * (k * j) as f64 / n as f64;
            acc += v * Complex::new(ang.cos(), ang.sin());
        }
        *slot = acc;
    }
}
