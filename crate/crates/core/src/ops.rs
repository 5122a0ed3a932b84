//! Differentiable tensor operations.
//!
//! Forward values are computed by plain slice kernels; each op hands
//! [`make_node`] a closure implementing its adjoint. Ops on tensors without a
//! tape attachment skip recording entirely.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{make_node, Tensor};

fn shape_eq<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn rc_data<T: Scalar>(t: &Tensor<T>) -> Rc<Vec<T>> {
    // Cheap handle to the value buffer for capture in backward closures.
    Rc::new(t.data().to_vec())
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        shape_eq("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        make_node(
            "add",
            &[self, other],
            self.shape().to_vec(),
            data,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.to_vec()),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        shape_eq("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        make_node(
            "sub",
            &[self, other],
            self.shape().to_vec(),
            data,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|&x| -x).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        shape_eq("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let a = rc_data(self);
        let b = rc_data(other);
        make_node(
            "mul",
            &[self, other],
            self.shape().to_vec(),
            data,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
                ]
            }),
        )
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        make_node(
            "scale",
            &[self],
            self.shape().to_vec(),
            data,
            Box::new(move |g, _| vec![Some(g.iter().map(|&x| x * c).collect())]),
        )
        .expect("scale preserves shape")
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + c).collect();
        make_node(
            "add_scalar",
            &[self],
            self.shape().to_vec(),
            data,
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
        .expect("add_scalar preserves shape")
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn abs(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        let x = rc_data(self);
        make_node(
            "abs",
            &[self],
            self.shape().to_vec(),
            data,
            Box::new(move |g, _| {
                // subgradient 0 at the kink
                let d = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![Some(d)]
            }),
        )
        .expect("abs preserves shape")
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let x = rc_data(self);
        make_node(
            "relu",
            &[self],
            self.shape().to_vec(),
            data,
            Box::new(move |g, _| {
                let d = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(d)]
            }),
        )
        .expect("relu preserves shape")
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let y = Rc::new(data.clone());
        make_node(
            "sigmoid",
            &[self],
            self.shape().to_vec(),
            data,
            Box::new(move |g, _| {
                let d = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                vec![Some(d)]
            }),
        )
        .expect("sigmoid preserves shape")
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let a = T::of(0.044715);
        let half = T::of(0.5);
        let three = T::of(3.0);
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (T::one() + u.tanh())
            })
            .collect();
        let x = rc_data(self);
        make_node(
            "gelu",
            &[self],
            self.shape().to_vec(),
            data,
            Box::new(move |g, _| {
                let d = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        let u = c * (x + a * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::one() + three * a * x * x);
                        g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                    })
                    .collect();
                vec![Some(d)]
            }),
        )
        .expect("gelu preserves shape")
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let x = rc_data(self);
        make_node(
            "clamp",
            &[self],
            self.shape().to_vec(),
            data,
            Box::new(move |g, _| {
                let d = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| if x > lo && x < hi { g } else { T::zero() })
                    .collect();
                vec![Some(d)]
            }),
        )
        .expect("clamp preserves shape")
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total = self.data().iter().copied().fold(T::zero(), |acc, x| acc + x);
        let n = self.len();
        make_node(
            "sum_all",
            &[self],
            vec![1],
            vec![total],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
        .expect("sum is scalar")
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::of(self.len() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let a = rc_data(self);
        let b = rc_data(other);
        make_node(
            "matmul",
            &[self, other],
            vec![m, n],
            data,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| matmul_nt(g, &b, m, n, k)),
                    needs[1].then(|| matmul_tn(&a, g, m, k, n)),
                ]
            }),
        )
    }

    /// Mean over the last axis of a 2-D view: `[R,C] -> [R]`.
    pub fn row_mean(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "row_mean",
                detail: format!("expected non-degenerate [R,C], got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let inv = T::one() / T::of(c as f64);
        let x = self.data();
        let data = (0..r)
            .map(|i| x[i * c..(i + 1) * c].iter().copied().fold(T::zero(), |a, v| a + v) * inv)
            .collect();
        make_node(
            "row_mean",
            &[self],
            vec![r],
            data,
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let gi = g[i] * inv;
                    for v in &mut d[i * c..(i + 1) * c] {
                        *v = gi;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Scale each row of `[R,C]` by the matching entry of `[R]`.
    pub fn row_scale(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let sh = self.shape();
        if sh.len() != 2 || s.shape() != [sh[0]] {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                detail: format!("{:?} scaled by {:?}", sh, s.shape()),
            });
        }
        let (r, c) = (sh[0], sh[1]);
        let x = self.data();
        let sv = s.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let si = sv[i];
            for j in 0..c {
                data[i * c + j] = x[i * c + j] * si;
            }
        }
        let xr = rc_data(self);
        let sr = rc_data(s);
        make_node(
            "row_scale",
            &[self, s],
            vec![r, c],
            data,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); r * c];
                    for i in 0..r {
                        let si = sr[i];
                        for j in 0..c {
                            d[i * c + j] = g[i * c + j] * si;
                        }
                    }
                    d
                });
                let ds = needs[1].then(|| {
                    let mut d = vec![T::zero(); r];
                    for i in 0..r {
                        let mut acc = T::zero();
                        for j in 0..c {
                            acc += g[i * c + j] * xr[i * c + j];
                        }
                        d[i] = acc;
                    }
                    d
                });
                vec![dx, ds]
            }),
        )
    }

    /// `[N,C,M] * w[C]` broadcast over the first and last axes.
    pub fn mul_channel(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 3 || w.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "mul_channel",
                detail: format!("{:?} by {:?}", s, w.shape()),
            });
        }
        let (n, c, m) = (s[0], s[1], s[2]);
        let x = self.data();
        let wv = w.data();
        let mut data = vec![T::zero(); n * c * m];
        for i in 0..n {
            for ch in 0..c {
                let wc = wv[ch];
                let base = (i * c + ch) * m;
                for j in 0..m {
                    data[base + j] = x[base + j] * wc;
                }
            }
        }
        let xr = rc_data(self);
        let wr = rc_data(w);
        make_node(
            "mul_channel",
            &[self, w],
            s.to_vec(),
            data,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); n * c * m];
                    for i in 0..n {
                        for ch in 0..c {
                            let wc = wr[ch];
                            let base = (i * c + ch) * m;
                            for j in 0..m {
                                d[base + j] = g[base + j] * wc;
                            }
                        }
                    }
                    d
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * m;
                            let mut acc = T::zero();
                            for j in 0..m {
                                acc += g[base + j] * xr[base + j];
                            }
                            d[ch] += acc;
                        }
                    }
                    d
                });
                vec![dx, dw]
            }),
        )
    }

    /// `[N,C,M] + b[C]` broadcast over the first and last axes.
    pub fn add_channel(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 3 || b.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel",
                detail: format!("{:?} plus {:?}", s, b.shape()),
            });
        }
        let (n, c, m) = (s[0], s[1], s[2]);
        let x = self.data();
        let bv = b.data();
        let mut data = vec![T::zero(); n * c * m];
        for i in 0..n {
            for ch in 0..c {
                let bc = bv[ch];
                let base = (i * c + ch) * m;
                for j in 0..m {
                    data[base + j] = x[base + j] + bc;
                }
            }
        }
        make_node(
            "add_channel",
            &[self, b],
            s.to_vec(),
            data,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| g.to_vec());
                let db = needs[1].then(|| {
                    let mut d = vec![T::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * m;
                            let mut acc = T::zero();
                            for j in 0..m {
                                acc += g[base + j];
                            }
                            d[ch] += acc;
                        }
                    }
                    d
                });
                vec![dx, db]
            }),
        )
    }

    /// Column-wise softmax over axis 0 of `[S,C]`.
    pub fn softmax_axis0(&self) -> Result<Tensor<T>> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_axis0",
                detail: format!("expected [S,C], got {sh:?}"),
            });
        }
        let (s, c) = (sh[0], sh[1]);
        let x = self.data();
        let mut data = vec![T::zero(); s * c];
        for j in 0..c {
            let mut m = x[j];
            for i in 1..s {
                m = m.max(x[i * c + j]);
            }
            let mut z = T::zero();
            for i in 0..s {
                let e = (x[i * c + j] - m).exp();
                data[i * c + j] = e;
                z += e;
            }
            for i in 0..s {
                data[i * c + j] = data[i * c + j] / z;
            }
        }
        let y = Rc::new(data.clone());
        make_node(
            "softmax_axis0",
            &[self],
            sh.to_vec(),
            data,
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); s * c];
                for j in 0..c {
                    let mut dot = T::zero();
                    for i in 0..s {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for i in 0..s {
                        d[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Rows `[a, b)` of a 2-D tensor.
    pub fn slice_rows(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || a > b || b > s[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {a}..{b} of {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let data = self.data()[a * c..b * c].to_vec();
        make_node(
            "slice_rows",
            &[self],
            vec![b - a, c],
            data,
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); r * c];
                d[a * c..b * c].copy_from_slice(g);
                vec![Some(d)]
            }),
        )
    }

    /// Concatenate two 2-D tensors along axis 0.
    pub fn concat_rows(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{sa:?} with {sb:?}"),
            });
        }
        let (r1, r2, c) = (sa[0], sb[0], sa[1]);
        let mut data = Vec::with_capacity((r1 + r2) * c);
        data.extend_from_slice(self.data());
        data.extend_from_slice(other.data());
        make_node(
            "concat_rows",
            &[self, other],
            vec![r1 + r2, c],
            data,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g[..r1 * c].to_vec()),
                    needs[1].then(|| g[r1 * c..].to_vec()),
                ]
            }),
        )
    }

    /// Reorder axes; materializes a new buffer.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        let rank = s.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeMismatch {
                op: "permute",
                detail: format!("axes {axes:?} for rank {rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let data = permute_raw(self.data(), s, axes);
        let axes_owned = axes.to_vec();
        let out_shape_b = out_shape.clone();
        make_node(
            "permute",
            &[self],
            out_shape,
            data,
            Box::new(move |g, _| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![Some(permute_raw(g, &out_shape_b, &inverse))]
            }),
        )
    }

    /// Layer normalization over the last axis with learned affine.
    ///
    /// Normalized output has per-row mean 0 and variance 1 before the affine
    /// transform; `eps` stabilizes the zero-variance case.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let s = self.shape();
        let c = *s.last().ok_or(Error::ShapeMismatch {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if c == 0 {
            return Err(Error::ShapeMismatch { op: "layer_norm", detail: "zero-length normalization axis".into() });
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("affine {:?}/{:?} for axis {c}", gamma.shape(), beta.shape()),
            });
        }
        if eps <= T::zero() {
            return Err(Error::ShapeMismatch { op: "layer_norm", detail: "eps must be > 0".into() });
        }
        let rows = self.len() / c;
        let x = self.data();
        let gv = gamma.data();
        let bv = beta.data();
        let inv_c = T::one() / T::of(c as f64);
        let mut data = vec![T::zero(); rows * c];
        let mut xhat = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mu = row.iter().copied().fold(T::zero(), |a, v| a + v) * inv_c;
            let var = row
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .fold(T::zero(), |a, v| a + v)
                * inv_c;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..c {
                let xh = (row[j] - mu) * istd;
                xhat[r * c + j] = xh;
                data[r * c + j] = gv[j] * xh + bv[j];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gr = rc_data(gamma);
        make_node(
            "layer_norm",
            &[self, gamma, beta],
            s.to_vec(),
            data,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let base = r * c;
                        let mut mean_dy = T::zero();
                        let mut mean_dy_xhat = T::zero();
                        for j in 0..c {
                            let dyj = g[base + j] * gr[j];
                            mean_dy += dyj;
                            mean_dy_xhat += dyj * xhat[base + j];
                        }
                        mean_dy *= inv_c;
                        mean_dy_xhat *= inv_c;
                        for j in 0..c {
                            let dyj = g[base + j] * gr[j];
                            d[base + j] = (dyj - mean_dy - xhat[base + j] * mean_dy_xhat) * inv_std[r];
                        }
                    }
                    d
                });
                let dgamma = needs[1].then(|| {
                    let mut d = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            d[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    d
                });
                let dbeta = needs[2].then(|| {
                    let mut d = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            d[j] += g[r * c + j];
                        }
                    }
                    d
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Average over the spatial axes of `[B,T,C,H,W] -> [B,T,C]`.
    pub fn gap_spatial(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 5 {
            return Err(Error::ShapeMismatch {
                op: "gap_spatial",
                detail: format!("expected [B,T,C,H,W], got {s:?}"),
            });
        }
        let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        self.reshape(&[b * t * c, h * w])?.row_mean()?.reshape(&[b, t, c])
    }
}

/// Concatenate `[N,Ci,M]` tensors along the channel axis.
pub fn concat_channel<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::ShapeMismatch { op: "concat_channel", detail: "no inputs".into() });
    }
    let s0 = xs[0].shape();
    if s0.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "concat_channel",
            detail: format!("expected [N,C,M], got {s0:?}"),
        });
    }
    let (n, m) = (s0[0], s0[2]);
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        let s = x.shape();
        if s.len() != 3 || s[0] != n || s[2] != m {
            return Err(Error::ShapeMismatch {
                op: "concat_channel",
                detail: format!("{s0:?} with {s:?}"),
            });
        }
        channels.push(s[1]);
    }
    let c_total: usize = channels.iter().sum();
    let mut data = vec![T::zero(); n * c_total * m];
    let mut offset = 0;
    for (x, &ci) in xs.iter().zip(&channels) {
        let xd = x.data();
        for i in 0..n {
            let dst = (i * c_total + offset) * m;
            let src = i * ci * m;
            data[dst..dst + ci * m].copy_from_slice(&xd[src..src + ci * m]);
        }
        offset += ci;
    }
    let channels_b = channels.clone();
    make_node(
        "concat_channel",
        xs,
        vec![n, c_total, m],
        data,
        Box::new(move |g, needs| {
            let mut out = Vec::with_capacity(needs.len());
            let mut offset = 0;
            for (idx, &ci) in channels_b.iter().enumerate() {
                if needs[idx] {
                    let mut d = vec![T::zero(); n * ci * m];
                    for i in 0..n {
                        let src = (i * c_total + offset) * m;
                        let dst = i * ci * m;
                        d[dst..dst + ci * m].copy_from_slice(&g[src..src + ci * m]);
                    }
                    out.push(Some(d));
                } else {
                    out.push(None);
                }
                offset += ci;
            }
            out
        }),
    )
}

/// Stack 2-D tensors with a shared column count along axis 0.
pub fn stack_rows<T: Scalar>(xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::ShapeMismatch { op: "stack_rows", detail: "no inputs".into() });
    }
    let c = xs[0].shape().last().copied().unwrap_or(0);
    let mut rows = Vec::with_capacity(xs.len());
    let mut total = 0;
    for x in xs {
        let s = x.shape();
        if s.len() != 2 || s[1] != c {
            return Err(Error::ShapeMismatch {
                op: "stack_rows",
                detail: format!("expected [*,{c}], got {s:?}"),
            });
        }
        rows.push(s[0]);
        total += s[0];
    }
    let mut data = Vec::with_capacity(total * c);
    for x in xs {
        data.extend_from_slice(x.data());
    }
    let refs: Vec<&Tensor<T>> = xs.iter().collect();
    let rows_b = rows.clone();
    make_node(
        "stack_rows",
        &refs,
        vec![total, c],
        data,
        Box::new(move |g, needs| {
            let mut out = Vec::with_capacity(needs.len());
            let mut offset = 0;
            for (idx, &r) in rows_b.iter().enumerate() {
                if needs[idx] {
                    out.push(Some(g[offset * c..(offset + r) * c].to_vec()));
                } else {
                    out.push(None);
                }
                offset += r;
            }
            out
        }),
    )
}

// ---- raw kernels -----------------------------------------------------------

/// `C = A(m x k) * B(k x n)`.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += ail * brow[j];
            }
        }
    }
    c
}

/// `C = A(m x n) * B(k x n)^T -> (m x k)`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + l] = acc;
        }
    }
    c
}

/// `C = A(m x k)^T * B(m x n) -> (k x n)`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == T::zero() {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += ail * brow[j];
            }
        }
    }
    c
}

pub(crate) fn permute_raw<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the input for each output axis
    let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = vec![T::zero(); n];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // odometer increment over output coordinates
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            src += map_strides[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            src -= map_strides[axis] * out_shape[axis];
            coords[axis] = 0;
        }
    }
    out
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
