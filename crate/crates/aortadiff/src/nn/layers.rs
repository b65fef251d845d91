//! Layers with explicit forward and backward passes over (C, H, W) maps.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3};

use super::{GradBuf, ParamRef, ParamStore, Scalar};

/// Gather sliding windows into a (Cin*k*k, Ho*Wo) matrix.
pub fn im2col<T: Scalar>(x: &Array3<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (cin, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::<T>::zeros((cin * k * k, ho * wo));
    let x_slice = x.as_slice().expect("contiguous input");
    let col_slice = col.as_slice_mut().unwrap();
    for ci in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_base = row * ho * wo;
                for oi in 0..ho {
                    let ir = (oi * stride + ki) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    let x_base = ci * h * w + ir as usize * w;
                    let out_base = row_base + oi * wo;
                    if stride == 1 {
                        // contiguous run of valid output columns
                        let jc_off = kj as isize - pad as isize;
                        let lo = (-jc_off).max(0) as usize;
                        let hi = ((w as isize - jc_off).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let src_lo = (lo as isize + jc_off) as usize;
                            col_slice[out_base + lo..out_base + hi].copy_from_slice(
                                &x_slice[x_base + src_lo..x_base + src_lo + (hi - lo)],
                            );
                        }
                    } else {
                        for oj in 0..wo {
                            let jc = (oj * stride + kj) as isize - pad as isize;
                            if jc >= 0 && jc < w as isize {
                                col_slice[out_base + oj] = x_slice[x_base + jc as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the column matrix back onto an input-shaped map.
pub fn col2im<T: Scalar>(
    col: &Array2<T>,
    dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let (cin, h, w) = dim;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::<T>::zeros((cin, h, w));
    let col_slice = col.as_slice().unwrap();
    let x_slice = x.as_slice_mut().unwrap();
    for ci in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_base = row * ho * wo;
                for oi in 0..ho {
                    let ir = (oi * stride + ki) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    let x_base = ci * h * w + ir as usize * w;
                    let out_base = row_base + oi * wo;
                    for oj in 0..wo {
                        let jc = (oj * stride + kj) as isize - pad as isize;
                        if jc >= 0 && jc < w as isize {
                            x_slice[x_base + jc as usize] =
                                x_slice[x_base + jc as usize] + col_slice[out_base + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2D convolution; weights live in the parameter store as
/// `[cout, cin*k*k]` plus a `[cout]` bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamRef,
    pub b: ParamRef,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.alloc(&format!("{name}.w"), &[cout, cin * k * k]);
        let b = ps.alloc(&format!("{name}.b"), &[cout]);
        Conv2d {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Array3<T>) -> Array3<T> {
        let (cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let wmat = ps.view2(self.w);
        let bias = ps.view1(self.b);
        let mut y = Array2::<T>::zeros((self.cout, ho * wo));
        if self.k == 1 && self.stride == 1 && self.pad == 0 {
            let x2 = x.view().into_shape_with_order((cin, h * w)).unwrap();
            general_mat_mul(T::one(), &wmat, &x2, T::zero(), &mut y);
        } else {
            let col = im2col(x, self.k, self.stride, self.pad);
            general_mat_mul(T::one(), &wmat, &col, T::zero(), &mut y);
        }
        for (mut row, &b) in y.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        y.into_shape_with_order((self.cout, ho, wo)).unwrap()
    }

    /// Accumulates dW/db into `grad` and returns dX.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array3<T>,
        dy: &Array3<T>,
        grad: &mut GradBuf<T>,
    ) -> Array3<T> {
        let (cin, h, w) = x.dim();
        let (cout, ho, wo) = dy.dim();
        assert_eq!(cout, self.cout);
        let dy2 = dy.view().into_shape_with_order((cout, ho * wo)).unwrap();

        // db
        {
            let db = grad.slice_mut(ps.entry(self.b));
            for (c, row) in dy2.rows().into_iter().enumerate() {
                let mut s = T::zero();
                for &v in row.iter() {
                    s = s + v;
                }
                db[c] = db[c] + s;
            }
        }

        let wmat = ps.view2(self.w);
        if self.k == 1 && self.stride == 1 && self.pad == 0 {
            let x2 = x.view().into_shape_with_order((cin, h * w)).unwrap();
            {
                let mut dw = grad.view2_mut(ps.entry(self.w));
                general_mat_mul(T::one(), &dy2, &x2.t(), T::one(), &mut dw);
            }
            let mut dx = Array2::<T>::zeros((cin, h * w));
            general_mat_mul(T::one(), &wmat.t(), &dy2, T::zero(), &mut dx);
            dx.into_shape_with_order((cin, h, w)).unwrap()
        } else {
            let col = im2col(x, self.k, self.stride, self.pad);
            {
                let mut dw = grad.view2_mut(ps.entry(self.w));
                general_mat_mul(T::one(), &dy2, &col.t(), T::one(), &mut dw);
            }
            let mut dcol = Array2::<T>::zeros(col.dim());
            general_mat_mul(T::one(), &wmat.t(), &dy2, T::zero(), &mut dcol);
            col2im(&dcol, (cin, h, w), self.k, self.stride, self.pad)
        }
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

/// Per-group statistics captured in the forward pass.
#[derive(Debug, Clone)]
pub struct GnCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Largest group count <= 8 that divides the channel count.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.alloc(&format!("{name}.gamma"), &[channels]);
        let beta = ps.alloc(&format!("{name}.beta"), &[channels]);
        GroupNorm {
            gamma,
            beta,
            channels,
            groups: group_count(channels),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array3<T>,
    ) -> (Array3<T>, GnCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;
        let gamma = ps.view1(self.gamma);
        let beta = ps.view1(self.beta);
        let mut y = Array3::<T>::zeros((c, h, w));
        let mut cache = GnCache {
            mean: vec![T::zero(); self.groups],
            inv_std: vec![T::zero(); self.groups],
        };
        for g in 0..self.groups {
            let c0 = g * cg;
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for ci in c0..c0 + cg {
                for v in x.index_axis(ndarray::Axis(0), ci).iter() {
                    let f = v.as_f64();
                    sum += f;
                    sq += f * f;
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + self.eps).sqrt();
            cache.mean[g] = T::from_f64(mean);
            cache.inv_std[g] = T::from_f64(inv_std);
            let mean_t = T::from_f64(mean);
            let inv_t = T::from_f64(inv_std);
            for ci in c0..c0 + cg {
                let ga = gamma[ci];
                let be = beta[ci];
                let xs = x.index_axis(ndarray::Axis(0), ci);
                let mut ys = y.index_axis_mut(ndarray::Axis(0), ci);
                ndarray::Zip::from(&mut ys).and(&xs).for_each(|yo, &xi| {
                    *yo = ga * (xi - mean_t) * inv_t + be;
                });
            }
        }
        (y, cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array3<T>,
        cache: &GnCache<T>,
        dy: &Array3<T>,
        grad: &mut GradBuf<T>,
    ) -> Array3<T> {
        let (c, h, w) = x.dim();
        let cg = c / self.groups;
        let m = T::from_f64((cg * h * w) as f64);
        let gamma = ps.view1(self.gamma).to_owned();
        let mut dx = Array3::<T>::zeros((c, h, w));

        // per-channel affine grads
        {
            for ci in 0..c {
                let g = ci / cg;
                let mean = cache.mean[g];
                let inv = cache.inv_std[g];
                let xs = x.index_axis(ndarray::Axis(0), ci);
                let dys = dy.index_axis(ndarray::Axis(0), ci);
                let mut dga = T::zero();
                let mut dbe = T::zero();
                ndarray::Zip::from(&xs).and(&dys).for_each(|&xi, &d| {
                    dga = dga + d * (xi - mean) * inv;
                    dbe = dbe + d;
                });
                let dgamma = grad.slice_mut(ps.entry(self.gamma));
                dgamma[ci] = dgamma[ci] + dga;
                let dbeta = grad.slice_mut(ps.entry(self.beta));
                dbeta[ci] = dbeta[ci] + dbe;
            }
        }

        for g in 0..self.groups {
            let c0 = g * cg;
            let mean = cache.mean[g];
            let inv = cache.inv_std[g];
            // sums over the group of dxhat and dxhat*xhat
            let mut sum1 = T::zero();
            let mut sum2 = T::zero();
            for ci in c0..c0 + cg {
                let ga = gamma[ci];
                let xs = x.index_axis(ndarray::Axis(0), ci);
                let dys = dy.index_axis(ndarray::Axis(0), ci);
                ndarray::Zip::from(&xs).and(&dys).for_each(|&xi, &d| {
                    let dxhat = d * ga;
                    let xhat = (xi - mean) * inv;
                    sum1 = sum1 + dxhat;
                    sum2 = sum2 + dxhat * xhat;
                });
            }
            for ci in c0..c0 + cg {
                let ga = gamma[ci];
                let xs = x.index_axis(ndarray::Axis(0), ci);
                let dys = dy.index_axis(ndarray::Axis(0), ci);
                let mut dxs = dx.index_axis_mut(ndarray::Axis(0), ci);
                ndarray::Zip::from(&mut dxs)
                    .and(&xs)
                    .and(&dys)
                    .for_each(|o, &xi, &d| {
                        let dxhat = d * ga;
                        let xhat = (xi - mean) * inv;
                        *o = inv / m * (m * dxhat - sum1 - xhat * sum2);
                    });
            }
        }
        dx
    }
}

/// x * sigmoid(x)
pub fn silu_forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| {
        let s = T::one() / (T::one() + (-v).exp());
        v * s
    })
}

pub fn silu_backward<T: Scalar>(x: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = T::one() / (T::one() + (-v).exp());
        *d = *d * s * (T::one() + v * (T::one() - s));
    });
    dx
}

pub fn leaky_relu_forward<T: Scalar>(x: &Array3<T>, alpha: f64) -> Array3<T> {
    let a = T::from_f64(alpha);
    x.mapv(|v| if v >= T::zero() { v } else { v * a })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Array3<T>, dy: &Array3<T>, alpha: f64) -> Array3<T> {
    let a = T::from_f64(alpha);
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v < T::zero() {
            *d = *d * a;
        }
    });
    dx
}

pub fn tanh_forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| v.tanh())
}

/// Backward through tanh given the forward *output*.
pub fn tanh_backward<T: Scalar>(y: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &t| {
        *d = *d * (T::one() - t * t);
    });
    dx
}

/// 2x2 average pooling (input sides must be even).
pub fn avgpool2_forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even sides");
    let quarter = T::from_f64(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, i, j)| {
        (x[[ci, 2 * i, 2 * j]]
            + x[[ci, 2 * i, 2 * j + 1]]
            + x[[ci, 2 * i + 1, 2 * j]]
            + x[[ci, 2 * i + 1, 2 * j + 1]])
            * quarter
    })
}

pub fn avgpool2_backward<T: Scalar>(dy: &Array3<T>, in_hw: (usize, usize)) -> Array3<T> {
    let (c, ho, wo) = dy.dim();
    let quarter = T::from_f64(0.25);
    let mut dx = Array3::<T>::zeros((c, in_hw.0, in_hw.1));
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let v = dy[[ci, i, j]] * quarter;
                dx[[ci, 2 * i, 2 * j]] = v;
                dx[[ci, 2 * i, 2 * j + 1]] = v;
                dx[[ci, 2 * i + 1, 2 * j]] = v;
                dx[[ci, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[[ci, i / 2, j / 2]])
}

pub fn upsample2_backward<T: Scalar>(dy: &Array3<T>) -> Array3<T> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[[ci, i / 2, j / 2]] = dx[[ci, i / 2, j / 2]] + dy[[ci, i, j]];
            }
        }
    }
    dx
}

/// Channel-axis concatenation.
pub fn concat_channels<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> Array3<T> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
    let mut out = Array3::<T>::zeros((ca + cb, h, w));
    out.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
    out
}

pub fn split_channels<T: Scalar>(dy: &Array3<T>, ca: usize) -> (Array3<T>, Array3<T>) {
    let da = dy.slice(ndarray::s![..ca, .., ..]).to_owned();
    let db = dy.slice(ndarray::s![ca.., .., ..]).to_owned();
    (da, db)
}

/// Add a per-channel bias (timestep conditioning injection).
pub fn add_channel_bias<T: Scalar>(x: &mut Array3<T>, bias: &Array1<T>) {
    for (ci, &b) in bias.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), ci).mapv_inplace(|v| v + b);
    }
}

pub fn channel_bias_grad<T: Scalar>(dy: &Array3<T>) -> Array1<T> {
    let (c, _, _) = dy.dim();
    Array1::from_shape_fn(c, |ci| {
        let mut s = T::zero();
        for &v in dy.index_axis(ndarray::Axis(0), ci).iter() {
            s = s + v;
        }
        s
    })
}

/// Dense layer y = W x + b on 1-D vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamRef,
    pub b: ParamRef,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim_in: usize,
        dim_out: usize,
    ) -> Self {
        let w = ps.alloc(&format!("{name}.w"), &[dim_out, dim_in]);
        let b = ps.alloc(&format!("{name}.b"), &[dim_out]);
        Linear {
            w,
            b,
            dim_in,
            dim_out,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Array1<T>) -> Array1<T> {
        let w = ps.view2(self.w);
        let b = ps.view1(self.b);
        let mut y = Array1::<T>::zeros(self.dim_out);
        for (o, (row, &bo)) in y
            .iter_mut()
            .zip(w.rows().into_iter().zip(b.iter()))
        {
            let mut s = bo;
            for (&wi, &xi) in row.iter().zip(x.iter()) {
                s = s + wi * xi;
            }
            *o = s;
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array1<T>,
        dy: &Array1<T>,
        grad: &mut GradBuf<T>,
    ) -> Array1<T> {
        {
            let mut dw = grad.view2_mut(ps.entry(self.w));
            for (o, &d) in dy.iter().enumerate() {
                for (i, &xi) in x.iter().enumerate() {
                    dw[[o, i]] = dw[[o, i]] + d * xi;
                }
            }
        }
        {
            let db = grad.slice_mut(ps.entry(self.b));
            for (o, &d) in dy.iter().enumerate() {
                db[o] = db[o] + d;
            }
        }
        let w = ps.view2(self.w);
        let mut dx = Array1::<T>::zeros(self.dim_in);
        for (o, &d) in dy.iter().enumerate() {
            for (i, dxi) in dx.iter_mut().enumerate() {
                *dxi = *dxi + w[[o, i]] * d;
            }
        }
        dx
    }
}

/// SiLU on vectors (timestep MLP).
pub fn silu1_forward<T: Scalar>(x: &Array1<T>) -> Array1<T> {
    x.mapv(|v| v * (T::one() / (T::one() + (-v).exp())))
}

pub fn silu1_backward<T: Scalar>(x: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = T::one() / (T::one() + (-v).exp());
        *d = *d * s * (T::one() + v * (T::one() - s));
    });
    dx
}
