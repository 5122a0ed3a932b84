//! 2-D convolution and its adjoint.
//!
//! `conv2d` uses the cross-correlation convention (no kernel flip), so golden
//! values in tests are unambiguous. `conv_transpose2d` is defined as the
//! exact adjoint map: for compatible shapes,
//! `<conv2d(x,k), y> == <x, conv_transpose2d(y,k)>`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{make_node, Tensor};

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("input {xs:?}, kernel {ks:?} (want [N,C,H,W] and [O,C,KH,KW])"),
        });
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::ShapeMismatch { op, detail: format!("stride {stride} not in {{1,2}}") });
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != cin {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("kernel expects {kc} input channels, input has {cin}"),
        });
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        });
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims { n, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
}

/// Cross-correlation of `x: [N,C,H,W]` with `k: [O,C,KH,KW]`.
/// Output extent per axis is `floor((H + 2*pad - KH)/stride) + 1`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let d = conv_dims("conv2d", x, k, stride, pad)?;
    let data = conv2d_raw(x.data(), k.data(), d);
    let xr = Rc::new(x.data().to_vec());
    let kr = Rc::new(k.data().to_vec());
    make_node(
        "conv2d",
        &[x, k],
        vec![d.n, d.cout, d.ho, d.wo],
        data,
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| conv2d_input_grad(g, &kr, d)),
                needs[1].then(|| conv2d_kernel_grad(g, &xr, d)),
            ]
        }),
    )
}

/// Adjoint of [`conv2d`]: maps from the convolution's output space back to an
/// input space of extent `(out_h, out_w)`.
///
/// The target extent must be given explicitly because strided convolution is
/// not injective on sizes (several input extents share one output extent).
/// It is validated against the forward stride arithmetic.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("input {xs:?}, kernel {ks:?}"),
        });
    }
    let (n, cout, ho, wo) = (xs[0], xs[1], xs[2], xs[3]);
    let (kcout, cin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kcout != cout {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("kernel has {kcout} output channels, input carries {cout}"),
        });
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("stride {stride} not in {{1,2}}"),
        });
    }
    if kh > out_h + 2 * pad
        || kw > out_w + 2 * pad
        || (out_h + 2 * pad - kh) / stride + 1 != ho
        || (out_w + 2 * pad - kw) / stride + 1 != wo
    {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!(
                "target {out_h}x{out_w} does not convolve to {ho}x{wo} with k={kh}x{kw}, stride {stride}, pad {pad}"
            ),
        });
    }
    let d = ConvDims { n, cin, h: out_h, w: out_w, cout, kh, kw, stride, pad, ho, wo };
    let data = conv2d_input_grad(x.data(), k.data(), d);
    let xr = Rc::new(x.data().to_vec());
    let kr = Rc::new(k.data().to_vec());
    make_node(
        "conv_transpose2d",
        &[x, k],
        vec![n, cin, out_h, out_w],
        data,
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| conv2d_raw(g, &kr, d)),
                needs[1].then(|| conv2d_kernel_grad(&xr, g, d)),
            ]
        }),
    )
}

fn conv2d_raw<T: Scalar>(x: &[T], k: &[T], d: ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.cout * d.ho * d.wo];
    for n in 0..d.n {
        for co in 0..d.cout {
            let obase = (n * d.cout + co) * d.ho * d.wo;
            for ci in 0..d.cin {
                let xbase = (n * d.cin + ci) * d.h * d.w;
                let kbase = (co * d.cin + ci) * d.kh * d.kw;
                for u in 0..d.kh {
                    for v in 0..d.kw {
                        let kv = k[kbase + u * d.kw + v];
                        if kv == T::zero() {
                            continue;
                        }
                        for i in 0..d.ho {
                            let y = (i * d.stride + u) as isize - d.pad as isize;
                            if y < 0 || y >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + y as usize * d.w;
                            let orow = obase + i * d.wo;
                            for j in 0..d.wo {
                                let xx = (j * d.stride + v) as isize - d.pad as isize;
                                if xx < 0 || xx >= d.w as isize {
                                    continue;
                                }
                                out[orow + j] += x[xrow + xx as usize] * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of conv2d w.r.t. its input; also the forward map of
/// `conv_transpose2d`.
fn conv2d_input_grad<T: Scalar>(g: &[T], k: &[T], d: ConvDims) -> Vec<T> {
    let mut dx = vec![T::zero(); d.n * d.cin * d.h * d.w];
    for n in 0..d.n {
        for co in 0..d.cout {
            let gbase = (n * d.cout + co) * d.ho * d.wo;
            for ci in 0..d.cin {
                let xbase = (n * d.cin + ci) * d.h * d.w;
                let kbase = (co * d.cin + ci) * d.kh * d.kw;
                for u in 0..d.kh {
                    for v in 0..d.kw {
                        let kv = k[kbase + u * d.kw + v];
                        if kv == T::zero() {
                            continue;
                        }
                        for i in 0..d.ho {
                            let y = (i * d.stride + u) as isize - d.pad as isize;
                            if y < 0 || y >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + y as usize * d.w;
                            let grow = gbase + i * d.wo;
                            for j in 0..d.wo {
                                let xx = (j * d.stride + v) as isize - d.pad as isize;
                                if xx < 0 || xx >= d.w as isize {
                                    continue;
                                }
                                dx[xrow + xx as usize] += g[grow + j] * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_kernel_grad<T: Scalar>(g: &[T], x: &[T], d: ConvDims) -> Vec<T> {
    let mut dk = vec![T::zero(); d.cout * d.cin * d.kh * d.kw];
    for n in 0..d.n {
        for co in 0..d.cout {
            let gbase = (n * d.cout + co) * d.ho * d.wo;
            for ci in 0..d.cin {
                let xbase = (n * d.cin + ci) * d.h * d.w;
                let kbase = (co * d.cin + ci) * d.kh * d.kw;
                for u in 0..d.kh {
                    for v in 0..d.kw {
                        let mut acc = T::zero();
                        for i in 0..d.ho {
                            let y = (i * d.stride + u) as isize - d.pad as isize;
                            if y < 0 || y >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + y as usize * d.w;
                            let grow = gbase + i * d.wo;
                            for j in 0..d.wo {
                                let xx = (j * d.stride + v) as isize - d.pad as isize;
                                if xx < 0 || xx >= d.w as isize {
                                    continue;
                                }
                                acc += g[grow + j] * x[xrow + xx as usize];
                            }
                        }
                        dk[kbase + u * d.kw + v] += acc;
                    }
                }
            }
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::param::Parameter;
    use crate::rng::Rng;

    fn delta_kernel(c: usize) -> Tensor<f64> {
        // per-channel identity: k[o,o,1,1] = 1
        let mut data = vec![0.0; c * c * 9];
        for o in 0..c {
            data[(o * c + o) * 9 + 4] = 1.0;
        }
        Tensor::from_vec(&[c, c, 3, 3], data).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..2 * 2 * 5 * 4).map(|_| rng.range(-1.0, 1.0)).collect();
        let x = Tensor::from_vec(&[2, 2, 5, 4], data).unwrap();
        let y = conv2d(&x, &delta_kernel(2), 1, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn all_ones_counts_nine() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for &v in y.data() {
            assert_eq!(v, 9.0);
        }
    }

    #[test]
    fn output_extent_follows_stride_arithmetic() {
        let x = Tensor::<f64>::zeros(&[1, 1, 32, 32]);
        let k = Tensor::zeros(&[4, 1, 3, 3]);
        assert_eq!(conv2d(&x, &k, 2, 1).unwrap().shape(), &[1, 4, 16, 16]);
        let x2 = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        let k2 = Tensor::zeros(&[1, 1, 3, 3]);
        assert_eq!(conv2d(&x2, &k2, 2, 0).unwrap().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
        assert!(conv2d(&x, &k, 1, 1).is_ok());
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(7000 + seed);
            let x = Parameter::<f64>::uniform("x", &[1, 2, 5, 5], 1.0, &mut rng);
            let k = Parameter::uniform("k", &[3, 2, 3, 3], 0.5, &mut rng);
            let stride = 1 + (seed % 2) as usize;
            check_gradients(
                &[x.clone(), k.clone()],
                move |tape| {
                    let y = conv2d(&x.tensor(Some(tape)), &k.tensor(Some(tape)), stride, 1).unwrap();
                    y.mul(&y).unwrap().sum_all()
                },
                1e-5,
                1e-5,
            )
            .unwrap();
        }
    }

    #[test]
    fn transpose_stride2_delta_upsamples_by_zero_insertion() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv_transpose2d(&x, &delta_kernel(1), 2, 1, 4, 4).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let d = y.data();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i % 2 == 0 && j % 2 == 0 {
                    [[1.0, 2.0], [3.0, 4.0]][i / 2][j / 2]
                } else {
                    0.0
                };
                assert_eq!(d[i * 4 + j], expected, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        for seed in 0..10u64 {
            let mut rng = Rng::new(31 + seed);
            let xd: Vec<f64> = (0..16).map(|_| rng.range(-1.0, 1.0)).collect();
            let kd: Vec<f64> = (0..9).map(|_| rng.range(-1.0, 1.0)).collect();
            let x = Tensor::from_vec(&[1, 1, 4, 4], xd).unwrap();
            let k = Tensor::from_vec(&[1, 1, 3, 3], kd).unwrap();
            for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
                let cx = conv2d(&x, &k, stride, pad).unwrap();
                let yd: Vec<f64> = (0..cx.len()).map(|_| rng.range(-1.0, 1.0)).collect();
                let y = Tensor::from_vec(cx.shape(), yd).unwrap();
                let ty = conv_transpose2d(&y, &k, stride, pad, 4, 4).unwrap();
                let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10, "stride {stride} pad {pad}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(9100 + seed);
            let x = Parameter::<f64>::uniform("x", &[1, 2, 3, 3], 1.0, &mut rng);
            let k = Parameter::uniform("k", &[2, 1, 3, 3], 0.5, &mut rng);
            check_gradients(
                &[x.clone(), k.clone()],
                |tape| {
                    let y = conv_transpose2d(&x.tensor(Some(tape)), &k.tensor(Some(tape)), 2, 1, 6, 6)
                        .unwrap();
                    y.mul(&y).unwrap().sum_all()
                },
                1e-5,
                1e-5,
            )
            .unwrap();
        }
    }

    #[test]
    fn transpose_rejects_inconsistent_target_extent() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        // 5x5 with stride 2, pad 1 convolves to 3x3, not 2x2
        assert!(conv_transpose2d(&x, &k, 2, 1, 5, 5).is_err());
        assert!(conv_transpose2d(&x, &k, 2, 1, 4, 4).is_ok());
    }
}
