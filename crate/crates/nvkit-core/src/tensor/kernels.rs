//! Dense 3D layer kernels: plain array-in/array-out functions shared by the
//! autodiff tape and the tape-free inference path.
//!
//! Activation layout is `[C, D, H, W]`, convolution weights `[Co, Ci, kz, ky, kx]`,
//! transposed-convolution weights `[Ci, Co, k, k, k]`. All loops accumulate in
//! a fixed order, so results are bit-identical regardless of thread count
//! (parallelism only splits independent output channels).

use crate::scalar::Real;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, Array5, ArrayView1, ArrayView2, ArrayView4, ArrayView5, Axis};

/// Output spatial extent of a convolution along each axis, or `None` when the
/// (dilated) kernel does not fit.
pub fn conv3d_out_shape(
    input: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    d: [usize; 3],
    p: [usize; 3],
) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let eff = d[a] * (k[a] - 1) + 1;
        let padded = input[a] + 2 * p[a];
        if padded < eff {
            return None;
        }
        out[a] = (padded - eff) / s[a] + 1;
    }
    Some(out)
}

pub fn conv3d_forward<T: Real>(
    x: ArrayView4<T>,
    w: ArrayView5<T>,
    bias: Option<ArrayView1<T>>,
    s: [usize; 3],
    d: [usize; 3],
    p: [usize; 3],
) -> Array4<T> {
    let (ci_n, id, ih, iw) = x.dim();
    let (co_n, ci_w, kz_n, ky_n, kx_n) = w.dim();
    assert_eq!(ci_n, ci_w, "conv3d channel mismatch");
    let [od, oh, ow] = conv3d_out_shape([id, ih, iw], [kz_n, ky_n, kx_n], s, d, p)
        .expect("conv3d kernel larger than padded input");
    let xf = x.as_slice().expect("conv3d input must be standard layout");
    let wf = w.as_slice().expect("conv3d weight must be standard layout");
    let mut out = Array4::<T>::zeros((co_n, od, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(co, mut oc)| {
            let of = oc.as_slice_mut().expect("output channel contiguous");
            if let Some(b) = &bias {
                let bv = b[co];
                of.iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..ci_n {
                for kz in 0..kz_n {
                    for oz in 0..od {
                        let iz = (oz * s[0] + kz * d[0]) as i64 - p[0] as i64;
                        if iz < 0 || iz >= id as i64 {
                            continue;
                        }
                        let iz = iz as usize;
                        for ky in 0..ky_n {
                            for oy in 0..oh {
                                let iy = (oy * s[1] + ky * d[1]) as i64 - p[1] as i64;
                                if iy < 0 || iy >= ih as i64 {
                                    continue;
                                }
                                let iy = iy as usize;
                                let xrow = &xf[((ci * id + iz) * ih + iy) * iw..][..iw];
                                let orow = &mut of[(oz * oh + oy) * ow..][..ow];
                                let wrow =
                                    &wf[(((co * ci_n + ci) * kz_n + kz) * ky_n + ky) * kx_n..][..kx_n];
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    if wv == T::zero() {
                                        continue;
                                    }
                                    let shift = (kx * d[2]) as i64 - p[2] as i64;
                                    if s[2] == 1 {
                                        let lo = (-shift).max(0) as usize;
                                        let hi = (iw as i64 - shift).min(ow as i64).max(0) as usize;
                                        let src = &xrow[(lo as i64 + shift) as usize..];
                                        for (o, xv) in orow[lo..hi].iter_mut().zip(src) {
                                            *o = *o + wv * *xv;
                                        }
                                    } else {
                                        for ox in 0..ow {
                                            let ix = (ox * s[2]) as i64 + shift;
                                            if ix >= 0 && ix < iw as i64 {
                                                orow[ox] = orow[ox] + wv * xrow[ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn conv3d_backward_input<T: Real>(
    dy: ArrayView4<T>,
    w: ArrayView5<T>,
    x_shape: (usize, usize, usize, usize),
    s: [usize; 3],
    d: [usize; 3],
    p: [usize; 3],
) -> Array4<T> {
    let (ci_n, id, ih, iw) = x_shape;
    let (co_n, _, kz_n, ky_n, kx_n) = w.dim();
    let (_, od, oh, ow) = dy.dim();
    let df = dy.as_slice().expect("dy standard layout");
    let wf = w.as_slice().expect("w standard layout");
    let mut dx = Array4::<T>::zeros(x_shape);
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut xc)| {
            let xg = xc.as_slice_mut().expect("input grad channel contiguous");
            for co in 0..co_n {
                for kz in 0..kz_n {
                    for oz in 0..od {
                        let iz = (oz * s[0] + kz * d[0]) as i64 - p[0] as i64;
                        if iz < 0 || iz >= id as i64 {
                            continue;
                        }
                        let iz = iz as usize;
                        for ky in 0..ky_n {
                            for oy in 0..oh {
                                let iy = (oy * s[1] + ky * d[1]) as i64 - p[1] as i64;
                                if iy < 0 || iy >= ih as i64 {
                                    continue;
                                }
                                let iy = iy as usize;
                                let dyrow = &df[((co * od + oz) * oh + oy) * ow..][..ow];
                                let dxrow = &mut xg[(iz * ih + iy) * iw..][..iw];
                                let wrow =
                                    &wf[(((co * ci_n + ci) * kz_n + kz) * ky_n + ky) * kx_n..][..kx_n];
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    if wv == T::zero() {
                                        continue;
                                    }
                                    let shift = (kx * d[2]) as i64 - p[2] as i64;
                                    if s[2] == 1 {
                                        let lo = (-shift).max(0) as usize;
                                        let hi = (iw as i64 - shift).min(ow as i64).max(0) as usize;
                                        for ox in lo..hi {
                                            let ix = (ox as i64 + shift) as usize;
                                            dxrow[ix] = dxrow[ix] + wv * dyrow[ox];
                                        }
                                    } else {
                                        for ox in 0..ow {
                                            let ix = (ox * s[2]) as i64 + shift;
                                            if ix >= 0 && ix < iw as i64 {
                                                dxrow[ix as usize] =
                                                    dxrow[ix as usize] + wv * dyrow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

pub fn conv3d_backward_weight<T: Real>(
    dy: ArrayView4<T>,
    x: ArrayView4<T>,
    w_shape: (usize, usize, usize, usize, usize),
    s: [usize; 3],
    d: [usize; 3],
    p: [usize; 3],
) -> Array5<T> {
    let (ci_n, id, ih, iw) = x.dim();
    let (_, _, kz_n, ky_n, kx_n) = w_shape;
    let (_, od, oh, ow) = dy.dim();
    let xf = x.as_slice().expect("x standard layout");
    let df = dy.as_slice().expect("dy standard layout");
    let mut dw = Array5::<T>::zeros(w_shape);
    dw.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(co, mut wc)| {
            for ci in 0..ci_n {
                for kz in 0..kz_n {
                    for ky in 0..ky_n {
                        for kx in 0..kx_n {
                            let mut acc = T::zero();
                            let shift = (kx * d[2]) as i64 - p[2] as i64;
                            for oz in 0..od {
                                let iz = (oz * s[0] + kz * d[0]) as i64 - p[0] as i64;
                                if iz < 0 || iz >= id as i64 {
                                    continue;
                                }
                                let iz = iz as usize;
                                for oy in 0..oh {
                                    let iy = (oy * s[1] + ky * d[1]) as i64 - p[1] as i64;
                                    if iy < 0 || iy >= ih as i64 {
                                        continue;
                                    }
                                    let iy = iy as usize;
                                    let dyrow = &df[((co * od + oz) * oh + oy) * ow..][..ow];
                                    let xrow = &xf[((ci * id + iz) * ih + iy) * iw..][..iw];
                                    if s[2] == 1 {
                                        let lo = (-shift).max(0) as usize;
                                        let hi = (iw as i64 - shift).min(ow as i64).max(0) as usize;
                                        let src = &xrow[(lo as i64 + shift) as usize..];
                                        for (dyv, xv) in dyrow[lo..hi].iter().zip(src) {
                                            acc = acc + *dyv * *xv;
                                        }
                                    } else {
                                        for ox in 0..ow {
                                            let ix = (ox * s[2]) as i64 + shift;
                                            if ix >= 0 && ix < iw as i64 {
                                                acc = acc + dyrow[ox] * xrow[ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                            wc[[ci, kz, ky, kx]] = acc;
                        }
                    }
                }
            }
        });
    dw
}

/// Per-output-channel sum of the gradient, i.e. the bias gradient.
pub fn channel_sums<T: Real>(dy: ArrayView4<T>) -> Array1<T> {
    let co_n = dy.dim().0;
    let mut out = Array1::<T>::zeros(co_n);
    for (co, c) in dy.axis_iter(Axis(0)).enumerate() {
        out[co] = c.iter().fold(T::zero(), |a, &v| a + v);
    }
    out
}

/// Transposed convolution with kernel == stride (non-overlapping upsampling).
pub fn convt3d_forward<T: Real>(
    x: ArrayView4<T>,
    w: ArrayView5<T>,
    bias: Option<ArrayView1<T>>,
    size: usize,
) -> Array4<T> {
    let (ci_n, id, ih, iw) = x.dim();
    let (ci_w, co_n, kz_n, ky_n, kx_n) = w.dim();
    assert_eq!(ci_n, ci_w, "convt3d channel mismatch");
    assert!(kz_n == size && ky_n == size && kx_n == size);
    let (od, oh, ow) = (id * size, ih * size, iw * size);
    let mut out = Array4::<T>::zeros((co_n, od, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(co, mut oc)| {
            if let Some(b) = &bias {
                let bv = b[co];
                oc.iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..ci_n {
                for z in 0..id {
                    for a in 0..size {
                        for y in 0..ih {
                            for b2 in 0..size {
                                for x_ in 0..iw {
                                    for c in 0..size {
                                        oc[[z * size + a, y * size + b2, x_ * size + c]] = oc
                                            [[z * size + a, y * size + b2, x_ * size + c]]
                                            + w[[ci, co, a, b2, c]] * x[[ci, z, y, x_]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn convt3d_backward_input<T: Real>(
    dy: ArrayView4<T>,
    w: ArrayView5<T>,
    x_shape: (usize, usize, usize, usize),
    size: usize,
) -> Array4<T> {
    let (_, id, ih, iw) = x_shape;
    let co_n = w.dim().1;
    let mut dx = Array4::<T>::zeros(x_shape);
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut xc)| {
            for co in 0..co_n {
                for z in 0..id {
                    for y in 0..ih {
                        for x_ in 0..iw {
                            let mut acc = xc[[z, y, x_]];
                            for a in 0..size {
                                for b in 0..size {
                                    for c in 0..size {
                                        acc = acc
                                            + w[[ci, co, a, b, c]]
                                                * dy[[co, z * size + a, y * size + b, x_ * size + c]];
                                    }
                                }
                            }
                            xc[[z, y, x_]] = acc;
                        }
                    }
                }
            }
        });
    dx
}

pub fn convt3d_backward_weight<T: Real>(
    dy: ArrayView4<T>,
    x: ArrayView4<T>,
    size: usize,
) -> Array5<T> {
    let (ci_n, id, ih, iw) = x.dim();
    let co_n = dy.dim().0;
    let mut dw = Array5::<T>::zeros((ci_n, co_n, size, size, size));
    dw.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut wc)| {
            for co in 0..co_n {
                for a in 0..size {
                    for b in 0..size {
                        for c in 0..size {
                            let mut acc = T::zero();
                            for z in 0..id {
                                for y in 0..ih {
                                    for x_ in 0..iw {
                                        acc = acc
                                            + x[[ci, z, y, x_]]
                                                * dy[[co, z * size + a, y * size + b, x_ * size + c]];
                                    }
                                }
                            }
                            wc[[co, a, b, c]] = acc;
                        }
                    }
                }
            }
        });
    dw
}

/// Max pooling with kernel == stride; input dims must be divisible by `size`.
/// Returns the pooled grid and per-output flat argmax indices into the input.
pub fn maxpool3d_forward<T: Real>(x: ArrayView4<T>, size: usize) -> (Array4<T>, Vec<usize>) {
    let (c_n, id, ih, iw) = x.dim();
    assert!(
        id % size == 0 && ih % size == 0 && iw % size == 0,
        "maxpool3d requires dims divisible by {size}, got {:?}",
        x.dim()
    );
    let (od, oh, ow) = (id / size, ih / size, iw / size);
    let mut out = Array4::<T>::zeros((c_n, od, oh, ow));
    let mut argmax = vec![0usize; c_n * od * oh * ow];
    for c in 0..c_n {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for a in 0..size {
                        for b in 0..size {
                            for e in 0..size {
                                let (iz, iy, ix) = (oz * size + a, oy * size + b, ox * size + e);
                                let v = x[[c, iz, iy, ix]];
                                if v > best {
                                    best = v;
                                    best_idx = ((c * id + iz) * ih + iy) * iw + ix;
                                }
                            }
                        }
                    }
                    out[[c, oz, oy, ox]] = best;
                    argmax[((c * od + oz) * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool3d_backward<T: Real>(
    dy: ArrayView4<T>,
    argmax: &[usize],
    x_shape: (usize, usize, usize, usize),
) -> Array4<T> {
    let mut dx = Array4::<T>::zeros(x_shape);
    let dxf = dx.as_slice_mut().unwrap();
    for (dyv, &idx) in dy.iter().zip(argmax) {
        dxf[idx] = dxf[idx] + *dyv;
    }
    dx
}

/// Per-channel normalization over the spatial extent.
/// Returns (y, per-channel mean, per-channel 1/sqrt(var + eps)).
pub fn instance_norm_forward<T: Real>(
    x: ArrayView4<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
    eps: T,
) -> (Array4<T>, Vec<T>, Vec<T>) {
    let (c_n, id, ih, iw) = x.dim();
    let n = T::of((id * ih * iw) as f64);
    let mut y = Array4::<T>::zeros(x.dim());
    let mut means = vec![T::zero(); c_n];
    let mut inv_stds = vec![T::zero(); c_n];
    for c in 0..c_n {
        let xc = x.index_axis(Axis(0), c);
        let mean = xc.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = xc
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        let inv_std = T::one() / (var + eps).sqrt();
        means[c] = mean;
        inv_stds[c] = inv_std;
        let (g, b) = (gamma[c], beta[c]);
        let mut yc = y.index_axis_mut(Axis(0), c);
        ndarray::Zip::from(&mut yc).and(&xc).for_each(|yv, &xv| {
            *yv = g * (xv - mean) * inv_std + b;
        });
    }
    (y, means, inv_stds)
}

/// Gradients of instance norm w.r.t. input, gamma, beta.
pub fn instance_norm_backward<T: Real>(
    dy: ArrayView4<T>,
    x: ArrayView4<T>,
    gamma: ArrayView1<T>,
    means: &[T],
    inv_stds: &[T],
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (c_n, id, ih, iw) = x.dim();
    let n = T::of((id * ih * iw) as f64);
    let mut dx = Array4::<T>::zeros(x.dim());
    let mut dgamma = Array1::<T>::zeros(c_n);
    let mut dbeta = Array1::<T>::zeros(c_n);
    for c in 0..c_n {
        let xc = x.index_axis(Axis(0), c);
        let dyc = dy.index_axis(Axis(0), c);
        let (mean, inv_std) = (means[c], inv_stds[c]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        ndarray::Zip::from(&dyc).and(&xc).for_each(|&dyv, &xv| {
            sum_dy += dyv;
            sum_dy_xhat += dyv * (xv - mean) * inv_std;
        });
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let g = gamma[c];
        let mut dxc = dx.index_axis_mut(Axis(0), c);
        ndarray::Zip::from(&mut dxc)
            .and(&dyc)
            .and(&xc)
            .for_each(|dxv, &dyv, &xv| {
                let xhat = (xv - mean) * inv_std;
                *dxv = g * inv_std * (dyv - sum_dy / n - xhat * sum_dy_xhat / n);
            });
    }
    (dx, dgamma, dbeta)
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Channel descriptor: mean over the spatial extent, `[C,D,H,W] -> [C]`.
pub fn global_avg_pool<T: Real>(x: ArrayView4<T>) -> Array1<T> {
    let (c_n, id, ih, iw) = x.dim();
    let n = T::of((id * ih * iw) as f64);
    let mut out = Array1::<T>::zeros(c_n);
    for (c, xc) in x.axis_iter(Axis(0)).enumerate() {
        out[c] = xc.iter().fold(T::zero(), |a, &v| a + v) / n;
    }
    out
}

/// `y = W x + b` on channel vectors.
pub fn linear_forward<T: Real>(x: ArrayView1<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let (co_n, ci_n) = w.dim();
    let mut y = Array1::<T>::zeros(co_n);
    for co in 0..co_n {
        let mut acc = b[co];
        for ci in 0..ci_n {
            acc = acc + w[[co, ci]] * x[ci];
        }
        y[co] = acc;
    }
    y
}

pub fn linear_backward<T: Real>(
    dy: ArrayView1<T>,
    x: ArrayView1<T>,
    w: ArrayView2<T>,
) -> (Array1<T>, Array2<T>, Array1<T>) {
    let (co_n, ci_n) = w.dim();
    let mut dx = Array1::<T>::zeros(ci_n);
    let mut dw = Array2::<T>::zeros((co_n, ci_n));
    for co in 0..co_n {
        let d = dy[co];
        for ci in 0..ci_n {
            dx[ci] = dx[ci] + w[[co, ci]] * d;
            dw[[co, ci]] = d * x[ci];
        }
    }
    (dx, dw, dy.to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Array5};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Naive reference convolution, indexing every tap.
    fn conv_ref(
        x: &Array4<f64>,
        w: &Array5<f64>,
        s: [usize; 3],
        d: [usize; 3],
        p: [usize; 3],
    ) -> Array4<f64> {
        let (ci_n, id, ih, iw) = x.dim();
        let (co_n, _, kz, ky, kx) = w.dim();
        let [od, oh, ow] =
            conv3d_out_shape([id, ih, iw], [kz, ky, kx], s, d, p).expect("fits");
        let mut out = Array4::<f64>::zeros((co_n, od, oh, ow));
        for co in 0..co_n {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..ci_n {
                            for a in 0..kz {
                                for b in 0..ky {
                                    for c in 0..kx {
                                        let iz = (oz * s[0] + a * d[0]) as i64 - p[0] as i64;
                                        let iy = (oy * s[1] + b * d[1]) as i64 - p[1] as i64;
                                        let ix = (ox * s[2] + c * d[2]) as i64 - p[2] as i64;
                                        if iz >= 0
                                            && iy >= 0
                                            && ix >= 0
                                            && iz < id as i64
                                            && iy < ih as i64
                                            && ix < iw as i64
                                        {
                                            acc += w[[co, ci, a, b, c]]
                                                * x[[ci, iz as usize, iy as usize, ix as usize]];
                                        }
                                    }
                                }
                            }
                        }
                        out[[co, oz, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for &(s, d, p) in &[
            ([1, 1, 1], [1, 1, 1], [1, 1, 1]),
            ([2, 1, 2], [1, 2, 1], [0, 1, 2]),
            ([1, 2, 1], [3, 1, 2], [2, 0, 1]),
        ] {
            let x = Array4::from_shape_fn((2, 7, 8, 9), |_| rng.gen_range(-1.0..1.0));
            let w = Array5::from_shape_fn((3, 2, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
            let got = conv3d_forward(x.view(), w.view(), None, s, d, p);
            let want = conv_ref(&x, &w, s, d, p);
            assert!(got
                .iter()
                .zip(want.iter())
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_backward_input_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((2, 5, 5, 6), |_| rng.gen_range(-1.0..1.0));
        let w = Array5::from_shape_fn((2, 2, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let (s, d, p) = ([1, 1, 1], [1, 1, 1], [1, 1, 1]);
        let y = conv3d_forward(x.view(), w.view(), None, s, d, p);
        let dy = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        let dx = conv3d_backward_input(dy.view(), w.view(), x.dim(), s, d, p);
        let h = 1e-6;
        for probe in [[0usize, 0, 0, 0], [1, 2, 3, 4], [0, 4, 4, 5]] {
            let mut xp = x.clone();
            xp[probe] += h;
            let yp = conv3d_forward(xp.view(), w.view(), None, s, d, p);
            let mut xm = x.clone();
            xm[probe] -= h;
            let ym = conv3d_forward(xm.view(), w.view(), None, s, d, p);
            let fd: f64 = yp
                .iter()
                .zip(ym.iter())
                .zip(dy.iter())
                .map(|((a, b), g)| (a - b) / (2.0 * h) * g)
                .sum();
            assert!((fd - dx[probe]).abs() < 1e-6, "probe {probe:?}");
        }
    }

    #[test]
    fn conv_backward_weight_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((2, 5, 6, 5), |_| rng.gen_range(-1.0..1.0));
        let w = Array5::from_shape_fn((2, 2, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let (s, d, p) = ([2, 1, 1], [1, 1, 2], [1, 1, 2]);
        let y = conv3d_forward(x.view(), w.view(), None, s, d, p);
        let dy = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        let dw = conv3d_backward_weight(dy.view(), x.view(), w.dim(), s, d, p);
        let h = 1e-6;
        for probe in [[0usize, 0, 0, 0, 0], [1, 1, 2, 1, 2], [0, 1, 1, 1, 1]] {
            let mut wp = w.clone();
            wp[probe] += h;
            let yp = conv3d_forward(x.view(), wp.view(), None, s, d, p);
            let mut wm = w.clone();
            wm[probe] -= h;
            let ym = conv3d_forward(x.view(), wm.view(), None, s, d, p);
            let fd: f64 = yp
                .iter()
                .zip(ym.iter())
                .zip(dy.iter())
                .map(|((a, b), g)| (a - b) / (2.0 * h) * g)
                .sum();
            assert!((fd - dw[probe]).abs() < 1e-6, "probe {probe:?}");
        }
    }

    #[test]
    fn maxpool_roundtrip_scatter() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = Array4::from_shape_fn((2, 4, 4, 4), |_| rng.gen_range(-1.0..1.0f64));
        let (y, argmax) = maxpool3d_forward(x.view(), 2);
        assert_eq!(y.dim(), (2, 2, 2, 2));
        let dy = Array4::from_elem(y.dim(), 1.0);
        let dx = maxpool3d_backward(dy.view(), &argmax, x.dim());
        assert_eq!(dx.iter().filter(|&&v| v != 0.0).count(), 16);
        // Every window's max received the gradient.
        for c in 0..2 {
            for oz in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut found = false;
                        for a in 0..2 {
                            for b in 0..2 {
                                for e in 0..2 {
                                    let idx = [c, oz * 2 + a, oy * 2 + b, ox * 2 + e];
                                    if dx[idx] == 1.0 {
                                        assert_eq!(x[idx], y[[c, oz, oy, ox]]);
                                        found = true;
                                    }
                                }
                            }
                        }
                        assert!(found);
                    }
                }
            }
        }
    }

    #[test]
    fn instance_norm_normalizes_and_backward_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(-2.0..2.0));
        let gamma = ndarray::arr1(&[1.3, 0.7]);
        let beta = ndarray::arr1(&[0.1, -0.2]);
        let eps = 1e-5;
        let (y, means, inv_stds) = instance_norm_forward(x.view(), gamma.view(), beta.view(), eps);
        for c in 0..2 {
            let yc = y.index_axis(Axis(0), c);
            let m: f64 = yc.iter().sum::<f64>() / 48.0;
            assert!((m - beta[c]).abs() < 1e-10);
        }
        let dy = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        let (dx, dgamma, dbeta) =
            instance_norm_backward(dy.view(), x.view(), gamma.view(), &means, &inv_stds);
        let h = 1e-6;
        let loss = |xv: &Array4<f64>| -> f64 {
            let (y, _, _) = instance_norm_forward(xv.view(), gamma.view(), beta.view(), eps);
            y.iter().zip(dy.iter()).map(|(a, g)| a * g).sum()
        };
        for probe in [[0usize, 0, 0, 0], [1, 2, 3, 1], [0, 1, 2, 3]] {
            let mut xp = x.clone();
            xp[probe] += h;
            let mut xm = x.clone();
            xm[probe] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[probe]).abs() < 1e-5, "probe {probe:?}");
        }
        // gamma/beta grads against analytic sums.
        for c in 0..2 {
            let xc = x.index_axis(Axis(0), c);
            let dyc = dy.index_axis(Axis(0), c);
            let want_dbeta: f64 = dyc.iter().sum();
            let want_dgamma: f64 = dyc
                .iter()
                .zip(xc.iter())
                .map(|(g, &xv)| g * (xv - means[c]) * inv_stds[c])
                .sum();
            assert!((dbeta[c] - want_dbeta).abs() < 1e-10);
            assert!((dgamma[c] - want_dgamma).abs() < 1e-10);
        }
    }

    #[test]
    fn convt_doubles_spatial_dims() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = Array4::from_shape_fn((3, 2, 3, 2), |_| rng.gen_range(-1.0..1.0f64));
        let w = Array5::from_shape_fn((3, 2, 2, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let y = convt3d_forward(x.view(), w.view(), None, 2);
        assert_eq!(y.dim(), (2, 4, 6, 4));
        // Spot-check one output voxel.
        let want: f64 = (0..3).map(|ci| w[[ci, 1, 1, 0, 1]] * x[[ci, 0, 1, 0]]).sum();
        assert!((y[[1, 1, 2, 1]] - want).abs() < 1e-12);
    }
}
