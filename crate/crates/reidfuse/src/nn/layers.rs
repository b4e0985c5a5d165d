//! Layers with explicit forward/backward passes. Training forwards return a
//! cache consumed by the matching backward; inference forwards are pure.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis, Dimension, Ix1, Ix2};

use super::{Init, ParamId, ParamStore, VarBuilder};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearCache {
    x: Array2<f32>,
}

impl Linear {
    pub fn new(
        vb: &mut VarBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Linear {
        let mut vb = vb.scope(name);
        let w = vb.add("weight", init, &[out_dim, in_dim]);
        let b = if bias {
            Some(vb.add("bias", Init::Zeros, &[out_dim]))
        } else {
            None
        };
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    fn weight<'s>(&self, ps: &'s ParamStore) -> ArrayView2<'s, f32> {
        ps.value(self.w).into_dimensionality::<Ix2>().unwrap()
    }

    fn bias<'s>(&self, ps: &'s ParamStore) -> Option<ArrayView1<'s, f32>> {
        self.b
            .map(|b| ps.value(b).into_dimensionality::<Ix1>().unwrap())
    }

    /// x: (N, in) -> (N, out)
    pub fn forward(&self, ps: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let mut y = x.dot(&self.weight(ps).t());
        if let Some(b) = self.bias(ps) {
            y += &b;
        }
        y
    }

    pub fn forward_t(&self, ps: &ParamStore, x: &Array2<f32>) -> (Array2<f32>, LinearCache) {
        (self.forward(ps, x), LinearCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &LinearCache,
        dy: &Array2<f32>,
    ) -> Array2<f32> {
        let dx = dy.dot(&self.weight(ps));
        ps.add_grad(self.w, &dy.t().dot(&cache.x));
        if let Some(b) = self.b {
            ps.add_grad(b, &dy.sum_axis(Axis(0)));
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Conv2d (im2col + matmul)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache {
    cols: Array2<f32>,
    x_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vb: &mut VarBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        let mut vb = vb.scope(name);
        let w = vb.add(
            "weight",
            Init::HeNormal {
                fan_in: in_ch * k * k,
            },
            &[out_ch, in_ch, k, k],
        );
        let b = Some(vb.add("bias", Init::Zeros, &[out_ch]));
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
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

    fn wmat(&self, ps: &ParamStore) -> Array2<f32> {
        ps.value(self.w)
            .to_shape((self.out_ch, self.in_ch * self.k * self.k))
            .unwrap()
            .to_owned()
    }

    fn im2col(&self, x: &Array4<f32>) -> (Array2<f32>, (usize, usize)) {
        let (bsz, cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.in_ch);
        let (oh, ow) = self.out_hw(h, w);
        let (k, s, p) = (self.k, self.stride, self.pad);
        let n_cols = bsz * oh * ow;
        let mut cols = Array2::<f32>::zeros((cin * k * k, n_cols));
        let xs = x.as_slice().expect("conv input must be standard layout");
        let cs = cols.as_slice_mut().unwrap();

        for b in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    let col = (b * oh + oy) * ow + ox;
                    for ci in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = ((b * cin + ci) * h + iy as usize) * w;
                            let crow = ((ci * k + ky) * k) * n_cols + col;
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cs[crow + kx * n_cols] = xs[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    fn assemble(&self, y2: &Array2<f32>, bsz: usize, oh: usize, ow: usize) -> Array4<f32> {
        let mut y = Array4::<f32>::zeros((bsz, self.out_ch, oh, ow));
        let ys = y.as_slice_mut().unwrap();
        let y2s = y2.as_slice().unwrap();
        let n_cols = bsz * oh * ow;
        for c in 0..self.out_ch {
            for b in 0..bsz {
                for i in 0..oh * ow {
                    ys[(b * self.out_ch + c) * oh * ow + i] = y2s[c * n_cols + b * oh * ow + i];
                }
            }
        }
        y
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let (y, _) = self.run(ps, x);
        y
    }

    pub fn forward_t(&self, ps: &ParamStore, x: &Array4<f32>) -> (Array4<f32>, Conv2dCache) {
        self.run(ps, x)
    }

    fn run(&self, ps: &ParamStore, x: &Array4<f32>) -> (Array4<f32>, Conv2dCache) {
        let (bsz, _, _, _) = x.dim();
        let (cols, (oh, ow)) = self.im2col(x);
        let mut y2 = self.wmat(ps).dot(&cols);
        if let Some(b) = self.b {
            let bv = ps.value(b).into_dimensionality::<Ix1>().unwrap();
            y2 += &bv.insert_axis(Axis(1));
        }
        let y = self.assemble(&y2, bsz, oh, ow);
        (
            y,
            Conv2dCache {
                cols,
                x_dim: x.dim(),
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &Conv2dCache,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let (bsz, cin, h, w) = cache.x_dim;
        let (oh, ow) = cache.out_hw;
        let n_cols = bsz * oh * ow;
        let (k, s, p) = (self.k, self.stride, self.pad);

        // Regroup dy as (out_ch, B*OH*OW) to mirror the forward matmul.
        let mut dy2 = Array2::<f32>::zeros((self.out_ch, n_cols));
        {
            let dys = dy.as_slice().expect("conv grad must be standard layout");
            let d2 = dy2.as_slice_mut().unwrap();
            for c in 0..self.out_ch {
                for b in 0..bsz {
                    for i in 0..oh * ow {
                        d2[c * n_cols + b * oh * ow + i] = dys[(b * self.out_ch + c) * oh * ow + i];
                    }
                }
            }
        }

        let dcols = self.wmat(ps).t().dot(&dy2);
        let dwmat = dy2.dot(&cache.cols.t());
        ps.add_grad(
            self.w,
            &dwmat
                .into_shape_with_order((self.out_ch, self.in_ch, k, k))
                .unwrap(),
        );
        if let Some(b) = self.b {
            ps.add_grad(b, &dy2.sum_axis(Axis(1)));
        }

        // col2im: scatter column gradients back onto the input.
        let mut dx = Array4::<f32>::zeros((bsz, cin, h, w));
        {
            let dxs = dx.as_slice_mut().unwrap();
            let dcs = dcols.as_slice().unwrap();
            for b in 0..bsz {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let col = (b * oh + oy) * ow + ox;
                        for ci in 0..cin {
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = ((b * cin + ci) * h + iy as usize) * w;
                                let crow = ((ci * k + ky) * k) * n_cols + col;
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    dxs[xrow + ix as usize] += dcs[crow + kx * n_cols];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub ch: usize,
    pub eps: f32,
    pub momentum: f32,
}

pub struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(vb: &mut VarBuilder, name: &str, ch: usize) -> BatchNorm2d {
        let mut vb = vb.scope(name);
        let gamma = vb.add("gamma", Init::Ones, &[ch]);
        let beta = vb.add("beta", Init::Zeros, &[ch]);
        let running_mean = vb.add_buffer("running_mean", Init::Zeros, &[ch]);
        let running_var = vb.add_buffer("running_var", Init::Ones, &[ch]);
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            ch,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn ch_view<'s>(&self, ps: &'s ParamStore, id: ParamId) -> ArrayView1<'s, f32> {
        ps.value(id).into_dimensionality::<Ix1>().unwrap()
    }

    /// Inference path: normalizes with the running statistics.
    pub fn forward(&self, ps: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let gamma = self.ch_view(ps, self.gamma);
        let beta = self.ch_view(ps, self.beta);
        let rm = self.ch_view(ps, self.running_mean);
        let rv = self.ch_view(ps, self.running_var);
        let mut y = x.clone();
        for c in 0..self.ch {
            let scale = gamma[c] / (rv[c] + self.eps).sqrt();
            let shift = beta[c] - rm[c] * scale;
            y.index_axis_mut(Axis(1), c)
                .mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    /// Training path: normalizes with batch statistics and refreshes the
    /// running estimates in the store.
    pub fn forward_t(&self, ps: &mut ParamStore, x: &Array4<f32>) -> (Array4<f32>, BnCache) {
        let (bsz, ch, h, w) = x.dim();
        debug_assert_eq!(ch, self.ch);
        let n = (bsz * h * w) as f32;

        let mut mean = Array1::<f32>::zeros(ch);
        let mut var = Array1::<f32>::zeros(ch);
        for c in 0..ch {
            let xc = x.index_axis(Axis(1), c);
            let m = xc.sum() / n;
            mean[c] = m;
            var[c] = xc.iter().map(|&v| (v - m) * (v - m)).sum::<f32>() / n;
        }

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for c in 0..ch {
            let (m, is) = (mean[c], inv_std[c]);
            xhat.index_axis_mut(Axis(1), c)
                .mapv_inplace(|v| (v - m) * is);
        }

        let gamma = self.ch_view(ps, self.gamma).to_owned();
        let beta = self.ch_view(ps, self.beta).to_owned();
        let mut y = xhat.clone();
        for c in 0..ch {
            let (g, b) = (gamma[c], beta[c]);
            y.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * g + b);
        }

        let m = self.momentum;
        {
            let rm = ps.value_mut(self.running_mean);
            for c in 0..ch {
                rm[c] = (1.0 - m) * rm[c] + m * mean[c];
            }
        }
        {
            let rv = ps.value_mut(self.running_var);
            for c in 0..ch {
                rv[c] = (1.0 - m) * rv[c] + m * var[c];
            }
        }

        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &BnCache, dy: &Array4<f32>) -> Array4<f32> {
        let (bsz, ch, h, w) = dy.dim();
        let n = (bsz * h * w) as f32;
        let gamma = self.ch_view(ps, self.gamma).to_owned();

        let mut dgamma = Array1::<f32>::zeros(ch);
        let mut dbeta = Array1::<f32>::zeros(ch);
        for c in 0..ch {
            let dyc = dy.index_axis(Axis(1), c);
            let xc = cache.xhat.index_axis(Axis(1), c);
            dgamma[c] = dyc.iter().zip(xc.iter()).map(|(&d, &x)| d * x).sum();
            dbeta[c] = dyc.sum();
        }

        let mut dx = Array4::<f32>::zeros(dy.raw_dim());
        for c in 0..ch {
            let coeff = gamma[c] * cache.inv_std[c] / n;
            let (dg, db) = (dgamma[c], dbeta[c]);
            let dyc = dy.index_axis(Axis(1), c);
            let xc = cache.xhat.index_axis(Axis(1), c);
            let mut dxc = dx.index_axis_mut(Axis(1), c);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xc)
                .for_each(|o, &d, &x| *o = coeff * (n * d - db - x * dg));
        }

        ps.add_grad(self.gamma, &dgamma);
        ps.add_grad(self.beta, &dbeta);
        dx
    }
}

// ---------------------------------------------------------------------------
// LayerNorm (over the last axis of a 2-d array)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f32,
}

pub struct LnCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(vb: &mut VarBuilder, name: &str, dim: usize) -> LayerNorm {
        let mut vb = vb.scope(name);
        let gamma = vb.add("gamma", Init::Ones, &[dim]);
        let beta = vb.add("beta", Init::Zeros, &[dim]);
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    fn params<'s>(&self, ps: &'s ParamStore) -> (ArrayView1<'s, f32>, ArrayView1<'s, f32>) {
        (
            ps.value(self.gamma).into_dimensionality::<Ix1>().unwrap(),
            ps.value(self.beta).into_dimensionality::<Ix1>().unwrap(),
        )
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        self.run(ps, x).0
    }

    pub fn forward_t(&self, ps: &ParamStore, x: &Array2<f32>) -> (Array2<f32>, LnCache) {
        self.run(ps, x)
    }

    fn run(&self, ps: &ParamStore, x: &Array2<f32>) -> (Array2<f32>, LnCache) {
        debug_assert_eq!(x.ncols(), self.dim);
        let (gamma, beta) = self.params(ps);
        let n = x.nrows();
        let c = x.ncols() as f32;
        let mut xhat = x.clone();
        let mut inv_std = Array1::<f32>::zeros(n);
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / c;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[i] = is;
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&gamma)
                .and(&beta)
                .for_each(|o, &g, &b| *o = *o * g + b);
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &LnCache, dy: &Array2<f32>) -> Array2<f32> {
        let (gamma, _) = self.params(ps);
        let c = dy.ncols() as f32;

        let mut dx = Array2::<f32>::zeros(dy.raw_dim());
        let mut dgamma = Array1::<f32>::zeros(dy.ncols());
        let mut dbeta = Array1::<f32>::zeros(dy.ncols());

        for i in 0..dy.nrows() {
            let dyr = dy.row(i);
            let xr = cache.xhat.row(i);
            for j in 0..dy.ncols() {
                dgamma[j] += dyr[j] * xr[j];
                dbeta[j] += dyr[j];
            }
            let dxhat: Vec<f32> = (0..dy.ncols()).map(|j| dyr[j] * gamma[j]).collect();
            let mean_dxhat: f32 = dxhat.iter().sum::<f32>() / c;
            let mean_dxhat_x: f32 = dxhat
                .iter()
                .zip(xr.iter())
                .map(|(&d, &x)| d * x)
                .sum::<f32>()
                / c;
            let is = cache.inv_std[i];
            let mut dxr = dx.row_mut(i);
            for j in 0..dy.ncols() {
                dxr[j] = is * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_x);
            }
        }

        ps.add_grad(self.gamma, &dgamma);
        ps.add_grad(self.beta, &dbeta);
        dx
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu<D: Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through relu given the forward *output* (mask is y > 0, so the
/// subgradient at exactly zero is zero).
pub fn relu_backward<D: Dimension>(
    y: &ndarray::Array<f32, D>,
    dy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu<D: Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_backward<D: Dimension>(
    x: &ndarray::Array<f32, D>,
    dy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let inner = GELU_C * (v + GELU_A * v * v * v);
        let t = inner.tanh();
        let dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
    });
    dx
}

// ---------------------------------------------------------------------------
// Softmax over rows
// ---------------------------------------------------------------------------

pub fn softmax_rows(x: &Array2<f32>) -> Array2<f32> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    y
}

/// Backward through a row softmax given probabilities `p` and upstream `dp`.
pub fn softmax_rows_backward(p: &Array2<f32>, dp: &Array2<f32>) -> Array2<f32> {
    let mut dx = Array2::<f32>::zeros(p.raw_dim());
    for i in 0..p.nrows() {
        let pr = p.row(i);
        let dpr = dp.row(i);
        let dot: f32 = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
        let mut dxr = dx.row_mut(i);
        for j in 0..p.ncols() {
            dxr[j] = pr[j] * (dpr[j] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Spatial mean of a feature map: (B, C, H, W) -> (B, C).
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let mut y = Array2::<f32>::zeros((b, c));
    let inv = 1.0 / (h * w) as f32;
    for bi in 0..b {
        for ci in 0..c {
            y[[bi, ci]] = x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward(hw: (usize, usize), dy: &Array2<f32>) -> Array4<f32> {
    let (b, c) = dy.dim();
    let (h, w) = hw;
    let inv = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(dy[[bi, ci]] * inv);
        }
    }
    dx
}

/// Mean over the token axis: (B, T, C) -> (B, C).
pub fn token_mean(x: &Array3<f32>) -> Array2<f32> {
    x.mean_axis(Axis(1)).unwrap()
}

pub fn token_mean_backward(t: usize, dy: &Array2<f32>) -> Array3<f32> {
    let (b, c) = dy.dim();
    let inv = 1.0 / t as f32;
    let mut dx = Array3::<f32>::zeros((b, t, c));
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                dx[[bi, ti, ci]] = dy[[bi, ci]] * inv;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1234)
    }

    fn rand_array<D: Dimension>(
        shape: impl ndarray::IntoDimension<Dim = D>,
        rng: &mut ChaCha8Rng,
    ) -> ndarray::Array<f32, D> {
        ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
    }

    /// Compares `analytic` against central finite differences of `loss` taken
    /// with respect to the entries of `target`.
    fn assert_grad_matches<D: Dimension>(
        analytic: &ndarray::Array<f32, D>,
        target: &RefCell<ndarray::Array<f32, D>>,
        loss: impl Fn() -> f32,
        tol: f32,
    ) {
        const H: f32 = 1e-2;
        let n = analytic.len();
        let flat: Vec<f32> = analytic.iter().cloned().collect();
        for i in 0..n {
            let orig = target.borrow().as_slice().unwrap()[i];
            target.borrow_mut().as_slice_mut().unwrap()[i] = orig + H;
            let fp = loss();
            target.borrow_mut().as_slice_mut().unwrap()[i] = orig - H;
            let fm = loss();
            target.borrow_mut().as_slice_mut().unwrap()[i] = orig;
            let fd = (fp - fm) / (2.0 * H);
            let a = flat[i];
            let denom = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() / denom < tol,
                "grad mismatch at {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    /// Same check for a parameter that lives inside a store.
    fn assert_param_grad_matches(
        store: &ParamStore,
        id: ParamId,
        loss: impl Fn(&ParamStore) -> f32,
        tol: f32,
    ) {
        const H: f32 = 1e-2;
        let analytic: Vec<f32> = store.param(id).grad.iter().cloned().collect();
        let shadow = RefCell::new(store.clone());
        for (i, a) in analytic.iter().enumerate() {
            let orig = shadow.borrow().param(id).value.as_slice().unwrap()[i];
            shadow.borrow_mut().value_mut(id).as_slice_mut().unwrap()[i] = orig + H;
            let fp = loss(&shadow.borrow());
            shadow.borrow_mut().value_mut(id).as_slice_mut().unwrap()[i] = orig - H;
            let fm = loss(&shadow.borrow());
            shadow.borrow_mut().value_mut(id).as_slice_mut().unwrap()[i] = orig;
            let fd = (fp - fm) / (2.0 * H);
            let denom = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() / denom < tol,
                "param grad mismatch at {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = {
            let mut vb = VarBuilder::new(&mut store, &mut r);
            Linear::new(&mut vb, "lin", 4, 3, true, Init::TruncNormal { std: 0.5 })
        };
        let x = rand_array((5, 4), &mut r);
        let probe = rand_array((5, 3), &mut r);

        let (_, cache) = layer.forward_t(&store, &x);
        store.zero_grads();
        let dx = layer.backward(&mut store, &cache, &probe);

        let x_var = RefCell::new(x.clone());
        assert_grad_matches(
            &dx,
            &x_var,
            || (layer.forward(&store, &x_var.borrow()) * &probe).sum(),
            1e-2,
        );
        assert_param_grad_matches(
            &store,
            layer.w,
            |s| (layer.forward(s, &x) * &probe).sum(),
            1e-2,
        );
        assert_param_grad_matches(
            &store,
            layer.b.unwrap(),
            |s| (layer.forward(s, &x) * &probe).sum(),
            1e-2,
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let conv = {
            let mut vb = VarBuilder::new(&mut store, &mut r);
            Conv2d::new(&mut vb, "conv", 2, 3, 3, 2, 1)
        };
        let x = rand_array((2, 2, 5, 4), &mut r);
        let (y, cache) = conv.forward_t(&store, &x);
        let probe = rand_array(y.raw_dim(), &mut r);

        store.zero_grads();
        let dx = conv.backward(&mut store, &cache, &probe);

        let x_var = RefCell::new(x.clone());
        assert_grad_matches(
            &dx,
            &x_var,
            || (conv.forward(&store, &x_var.borrow()) * &probe).sum(),
            1.5e-2,
        );
        assert_param_grad_matches(
            &store,
            conv.w,
            |s| (conv.forward(s, &x) * &probe).sum(),
            1.5e-2,
        );
        assert_param_grad_matches(
            &store,
            conv.b.unwrap(),
            |s| (conv.forward(s, &x) * &probe).sum(),
            1e-2,
        );
    }

    #[test]
    fn conv_output_shape_follows_stride_and_padding() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let conv = {
            let mut vb = VarBuilder::new(&mut store, &mut r);
            Conv2d::new(&mut vb, "c", 3, 8, 3, 2, 1)
        };
        let x = rand_array((1, 3, 64, 64), &mut r);
        assert_eq!(conv.forward(&store, &x).dim(), (1, 8, 32, 32));
    }

    #[test]
    fn batchnorm_train_gradients_match_finite_differences() {
        // The loss re-runs the training path, so finite differences see the
        // batch statistics; running-stat updates go to a scratch store.
        let mut store = ParamStore::new();
        let mut r = rng();
        let bn = {
            let mut vb = VarBuilder::new(&mut store, &mut r);
            BatchNorm2d::new(&mut vb, "bn", 3)
        };
        let x = rand_array((2, 3, 3, 2), &mut r);
        let probe = rand_array(x.raw_dim(), &mut r);

        let (_, cache) = bn.forward_t(&mut store, &x);
        store.zero_grads();
        let dx = bn.backward(&mut store, &cache, &probe);

        let x_var = RefCell::new(x.clone());
        assert_grad_matches(
            &dx,
            &x_var,
            || {
                let (y, _) = bn.forward_t(&mut store.clone(), &x_var.borrow());
                (y * &probe).sum()
            },
            2e-2,
        );
        assert_param_grad_matches(
            &store,
            bn.gamma,
            |s| {
                let (y, _) = bn.forward_t(&mut s.clone(), &x);
                (y * &probe).sum()
            },
            1e-2,
        );
        assert_param_grad_matches(
            &store,
            bn.beta,
            |s| {
                let (y, _) = bn.forward_t(&mut s.clone(), &x);
                (y * &probe).sum()
            },
            1e-2,
        );
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_is_pure() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let bn = {
            let mut vb = VarBuilder::new(&mut store, &mut r);
            BatchNorm2d::new(&mut vb, "bn", 2)
        };
        let x = rand_array((3, 2, 2, 2), &mut r);
        // Fresh stats: mean 0, var 1 -> eval output ~ x (eps-scaled).
        let y = bn.forward(&store, &x);
        assert!((&y - &x).iter().all(|v| v.abs() < 1e-4));

        // After a training pass the running stats move, eval changes, and two
        // eval passes agree exactly.
        let _ = bn.forward_t(&mut store, &x);
        let y1 = bn.forward(&store, &x);
        let y2 = bn.forward(&store, &x);
        assert_eq!(y1, y2);
        assert!(y1 != y);
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let ln = {
            let mut vb = VarBuilder::new(&mut store, &mut r);
            LayerNorm::new(&mut vb, "ln", 6)
        };
        let x = rand_array((4, 6), &mut r);
        let probe = rand_array((4, 6), &mut r);

        let (_, cache) = ln.forward_t(&store, &x);
        store.zero_grads();
        let dx = ln.backward(&mut store, &cache, &probe);

        let x_var = RefCell::new(x.clone());
        assert_grad_matches(
            &dx,
            &x_var,
            || (ln.forward(&store, &x_var.borrow()) * &probe).sum(),
            2e-2,
        );
        assert_param_grad_matches(
            &store,
            ln.gamma,
            |s| (ln.forward(s, &x) * &probe).sum(),
            1e-2,
        );
        assert_param_grad_matches(
            &store,
            ln.beta,
            |s| (ln.forward(s, &x) * &probe).sum(),
            1e-2,
        );
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let ln = {
            let mut vb = VarBuilder::new(&mut store, &mut r);
            LayerNorm::new(&mut vb, "ln", 8)
        };
        let x = rand_array((3, 8), &mut r) * 5.0 + 2.0;
        let y = ln.forward(&store, &x);
        for row in y.rows() {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut r = rng();
        let x = rand_array((40,), &mut r) * 2.0;
        let probe = rand_array((40,), &mut r);

        let dx = gelu_backward(&x, &probe);
        let x_var = RefCell::new(x.clone());
        assert_grad_matches(
            &dx,
            &x_var,
            || (gelu(&x_var.borrow().clone()) * &probe).sum(),
            2e-2,
        );

        let y = relu(&x);
        let drelu = relu_backward(&y, &probe);
        for i in 0..x.len() {
            let expect = if x[i] > 0.0 { probe[i] } else { 0.0 };
            assert_eq!(drelu[i], expect);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches_fd() {
        let mut r = rng();
        let x = rand_array((3, 5), &mut r) * 3.0;
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }

        let probe = rand_array((3, 5), &mut r);
        let dx = softmax_rows_backward(&p, &probe);
        let x_var = RefCell::new(x.clone());
        assert_grad_matches(
            &dx,
            &x_var,
            || (softmax_rows(&x_var.borrow()) * &probe).sum(),
            2e-2,
        );
    }

    #[test]
    fn pooling_means_and_backwards() {
        let mut r = rng();
        let x = rand_array((2, 3, 4, 4), &mut r);
        let y = global_avg_pool(&x);
        assert_eq!(y.dim(), (2, 3));
        let manual = x
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 1)
            .mean()
            .unwrap();
        assert!((y[[0, 1]] - manual).abs() < 1e-6);

        // a constant channel pools to that constant
        let flat = ndarray::Array4::from_elem((1, 2, 3, 3), 0.75f32);
        let pooled = global_avg_pool(&flat);
        assert_eq!(pooled[[0, 0]], 0.75);
        assert_eq!(pooled[[0, 1]], 0.75);

        let dy = rand_array((2, 3), &mut r);
        let dx = global_avg_pool_backward((4, 4), &dy);
        assert!((dx[[0, 1, 2, 2]] - dy[[0, 1]] / 16.0).abs() < 1e-7);

        let t = rand_array((2, 5, 3), &mut r);
        let tm = token_mean(&t);
        let dtm = token_mean_backward(5, &dy);
        assert_eq!(tm.dim(), (2, 3));
        assert_eq!(dtm.dim(), (2, 5, 3));
    }
}
