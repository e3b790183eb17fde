//! Direct (spatial-domain) kernels with their backward passes. All loops run
//! in a fixed order, so results are bitwise reproducible.

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], g: &ConvGeom, h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let p = ho * wo;
    let k = g.k;
    for ci in 0..g.cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let p = ho * wo;
    let k = g.k;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Tensor<T> {
    let (n, c, h, w) = x.nchw();
    debug_assert_eq!(c, g.cin);
    let (ho, wo) = g.out_size(h, w);
    let p = ho * wo;
    let kk = g.cin * g.k * g.k;
    let mut out = Tensor::zeros(&[n, g.cout, ho, wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    for b in 0..n {
        let xi = x.item(b);
        let src: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, h, w, ho, wo, &mut cols);
            &cols
        };
        let yo = out.item_mut(b);
        T::gemm(g.cout, kk, p, weight, kk as isize, 1, src, p as isize, 1, T::zero(), yo, p as isize, 1);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut yo[co * p..(co + 1) * p] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    g: &ConvGeom,
    with_bias: bool,
    need_dx: bool,
) -> ConvGrads<T> {
    let (n, _, h, w) = x.nchw();
    let (_, _, ho, wo) = dy.nchw();
    let p = ho * wo;
    let kk = g.cin * g.k * g.k;
    let mut dw = vec![T::zero(); g.cout * kk];
    let mut dx = need_dx.then(|| Tensor::zeros(&x.shape));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { kk * p } else { 0 }];
    for b in 0..n {
        let xi = x.item(b);
        let dyi = dy.item(b);
        let src: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, h, w, ho, wo, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(g.cout, p, kk, dyi, p as isize, 1, src, 1, p as isize, T::one(), &mut dw, kk as isize, 1);
        if let Some(dx) = dx.as_mut() {
            let dxi = dx.item_mut(b);
            if g.is_pointwise() {
                T::gemm(kk, g.cout, p, weight, 1, kk as isize, dyi, p as isize, 1, T::zero(), dxi, p as isize, 1);
            } else {
                T::gemm(kk, g.cout, p, weight, 1, kk as isize, dyi, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im(&dcols, g, h, w, ho, wo, dxi);
            }
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..n {
            let dyi = dy.item(b);
            for (co, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dyi[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.03;

pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Training-mode batch normalization. Returns output, normalized input and
/// per-channel inverse standard deviation.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>, BnBatchStats<T>) {
    let (n, c, h, w) = x.nchw();
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let eps = T::of(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x.item(b)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            for &xv in &x.item(b)[ch * hw..(ch + 1) * hw] {
                let d = xv - mu;
                v = v + d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(&x.shape);
    let mut y = Tensor::zeros(&x.shape);
    for b in 0..n {
        let xi = x.item(b);
        for ch in 0..c {
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], scale[ch], shift[ch]);
            let range = ch * hw..(ch + 1) * hw;
            let xh = &mut xhat.item_mut(b)[range.clone()];
            for (o, &xv) in xh.iter_mut().zip(&xi[range.clone()]) {
                *o = (xv - mu) * is;
            }
            let xh = &xhat.item(b)[range.clone()];
            let yo = &mut y.item_mut(b)[range];
            for (o, &xv) in yo.iter_mut().zip(xh) {
                *o = g * xv + bt;
            }
        }
    }
    (y, xhat.data, inv_std, BnBatchStats { mean, var, count: n * hw })
}

pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let (n, c, h, w) = x.nchw();
    let hw = h * w;
    let eps = T::of(BN_EPS);
    let mut y = Tensor::zeros(&x.shape);
    for b in 0..n {
        let xi = x.item(b);
        let yi = y.item_mut(b);
        for ch in 0..c {
            let is = T::one() / (running_var[ch] + eps).sqrt();
            let a = scale[ch] * is;
            let off = shift[ch] - running_mean[ch] * a;
            for i in ch * hw..(ch + 1) * hw {
                yi[i] = xi[i] * a + off;
            }
        }
    }
    y
}

/// Gradients of training-mode batch norm given the cached normalized input.
pub fn batch_norm_train_backward<T: Real>(
    dy: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    scale: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dy.nchw();
    let hw = h * w;
    let per = c * hw;
    let m = T::of((n * hw) as f64);
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for b in 0..n {
            let base = b * per + ch * hw;
            for i in 0..hw {
                let g = dy.data[base + i];
                sb = sb + g;
                sg = sg + g * xhat[base + i];
            }
        }
        dscale[ch] = sg;
        dshift[ch] = sb;
    }
    let mut dx = Tensor::zeros(&dy.shape);
    for ch in 0..c {
        let k = scale[ch] * inv_std[ch] / m;
        for b in 0..n {
            let base = b * per + ch * hw;
            for i in 0..hw {
                dx.data[base + i] =
                    k * (m * dy.data[base + i] - dshift[ch] - xhat[base + i] * dscale[ch]);
            }
        }
    }
    (dx, dscale, dshift)
}

pub fn batch_norm_eval_backward<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    scale: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dy.nchw();
    let hw = h * w;
    let per = c * hw;
    let eps = T::of(BN_EPS);
    let mut dx = Tensor::zeros(&dy.shape);
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for ch in 0..c {
        let is = T::one() / (running_var[ch] + eps).sqrt();
        for b in 0..n {
            let base = b * per + ch * hw;
            for i in 0..hw {
                let g = dy.data[base + i];
                dx.data[base + i] = g * scale[ch] * is;
                dscale[ch] = dscale[ch] + g * (x.data[base + i] - running_mean[ch]) * is;
                dshift[ch] = dshift[ch] + g;
            }
        }
    }
    (dx, dscale, dshift)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

pub fn silu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Stride-1 max pooling with `k / 2` padding; returns flat argmax per output.
pub fn max_pool<T: Real>(x: &Tensor<T>, k: usize) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.nchw();
    let r = (k / 2) as isize;
    let mut y = Tensor::zeros(&x.shape);
    let mut arg = vec![0u32; x.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..h {
            for ox in 0..w {
                let mut best = T::neg_infinity();
                let mut bi = 0usize;
                for dy in -r..=r {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let ix = ox as isize + dx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            bi = idx;
                        }
                    }
                }
                let o = base + oy * w + ox;
                y.data[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward<T: Real>(shape: &[usize], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    for (o, &i) in arg.iter().enumerate() {
        dx.data[i as usize] = dx.data[i as usize] + dy.data[o];
    }
    dx
}

pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.nchw();
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                dst[oy * 2 * w + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.nchw();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let src = &dy.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for oy in 0..h2 {
            for ox in 0..w2 {
                let d = &mut dst[(oy / 2) * w + ox / 2];
                *d = *d + src[oy * w2 + ox];
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = xs[0].nchw();
    let c: usize = xs.iter().map(|t| t.shape[1]).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in xs {
            data.extend_from_slice(t.item(b));
        }
    }
    Tensor::from_vec(&[n, c, h, w], data)
}

pub fn split_channels<T: Real>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let (n, _, h, w) = dy.nchw();
    let hw = h * w;
    let mut outs: Vec<Tensor<T>> = channels
        .iter()
        .map(|&c| Tensor {
            shape: vec![n, c, h, w],
            data: Vec::with_capacity(n * c * hw),
        })
        .collect();
    for b in 0..n {
        let mut off = 0;
        let item = dy.item(b);
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.data.extend_from_slice(&item[off..off + c * hw]);
            off += c * hw;
        }
    }
    outs
}

/// Fast normalized fusion: `Σ relu(wᵢ)·xᵢ / (ε + Σ relu(wⱼ))`.
pub fn weighted_fusion<T: Real>(xs: &[&Tensor<T>], weights: &[T], eps: f64) -> Tensor<T> {
    let r: Vec<T> = weights.iter().map(|&w| w.max(T::zero())).collect();
    let denom = T::of(eps) + r.iter().copied().sum::<T>();
    let mut y = Tensor::zeros(&xs[0].shape);
    for (x, &ri) in xs.iter().zip(&r) {
        let c = ri / denom;
        for (o, &v) in y.data.iter_mut().zip(&x.data) {
            *o = *o + c * v;
        }
    }
    y
}

pub fn weighted_fusion_backward<T: Real>(
    xs: &[&Tensor<T>],
    weights: &[T],
    eps: f64,
    y: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Vec<Tensor<T>>, Vec<T>) {
    let r: Vec<T> = weights.iter().map(|&w| w.max(T::zero())).collect();
    let denom = T::of(eps) + r.iter().copied().sum::<T>();
    let mut dxs = Vec::with_capacity(xs.len());
    let mut dw = Vec::with_capacity(xs.len());
    for ((x, &ri), &wi) in xs.iter().zip(&r).zip(weights) {
        let c = ri / denom;
        dxs.push(Tensor {
            shape: x.shape.clone(),
            data: dy.data.iter().map(|&g| g * c).collect(),
        });
        // ∂y/∂rᵢ = (xᵢ - y) / denom
        let s: T = x
            .data
            .iter()
            .zip(&y.data)
            .zip(&dy.data)
            .map(|((&xv, &yv), &g)| g * (xv - yv))
            .sum();
        dw.push(if wi > T::zero() { s / denom } else { T::zero() });
    }
    (dxs, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &[f64], g: &ConvGeom) -> Tensor<f64> {
        let (n, c, h, w) = x.nchw();
        let (ho, wo) = g.out_size(h, w);
        let mut y = Tensor::zeros(&[n, g.cout, ho, wo]);
        for b in 0..n {
            for co in 0..g.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x.data[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt[((co * c + ci) * g.k + ki) * g.k + kj];
                                    }
                                }
                            }
                        }
                        y.data[((b * g.cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_naive_loops() {
        let g = ConvGeom { cin: 3, cout: 4, k: 3, stride: 2, pad: 1 };
        let x = Tensor::from_vec(&[2, 3, 7, 6], (0..252).map(|i| ((i * 37) % 11) as f64 - 5.0).collect());
        let wt: Vec<f64> = (0..108).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        let a = conv2d(&x, &wt, None, &g);
        let b = naive_conv(&x, &wt, &g);
        assert_eq!(a.shape, b.shape);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_then_backward_sums_blocks() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let y = upsample2x(&x);
        assert_eq!(y.data[..4], [1.0, 1.0, 2.0, 2.0]);
        let dx = upsample2x_backward(&Tensor::from_vec(&[1, 1, 4, 4], vec![1.0; 16]));
        assert_eq!(dx.data, vec![4.0; 4]);
    }
}
