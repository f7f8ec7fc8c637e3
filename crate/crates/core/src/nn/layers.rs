use rand::Rng;

use super::{gemm, Module, Param, Tensor};

/// Fully connected layer over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub w: Param,
    pub b: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Normal init with standard deviation `gain / sqrt(in_dim)`.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        Linear {
            w: Param::randn(in_dim * out_dim, gain / (in_dim as f64).sqrt(), rng),
            b: Param::zeros(out_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Linear {
            w: Param::new(w),
            b: Param::zeros(dim),
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let rows = x.len() / self.in_dim;
        assert_eq!(rows * self.in_dim, x.len(), "linear input width mismatch");
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar input") = self.out_dim;
        let mut y = vec![0.0; rows * self.out_dim];
        for r in 0..rows {
            y[r * self.out_dim..(r + 1) * self.out_dim].copy_from_slice(&self.b.value);
        }
        gemm(rows, self.in_dim, self.out_dim, x.data(), false, &self.w.value, true, 1.0, &mut y);
        Tensor::from_vec(&shape, y)
    }

    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let rows = x.len() / self.in_dim;
        self.w.zero_grad_if_unset();
        self.b.zero_grad_if_unset();
        gemm(self.out_dim, rows, self.in_dim, gy.data(), true, x.data(), false, 1.0, &mut self.w.grad);
        for r in 0..rows {
            for (g, v) in self.b.grad.iter_mut().zip(&gy.data()[r * self.out_dim..(r + 1) * self.out_dim]) {
                *g += v;
            }
        }
        let mut gx = vec![0.0; x.len()];
        gemm(rows, self.out_dim, self.in_dim, gy.data(), false, &self.w.value, false, 0.0, &mut gx);
        Tensor::from_vec(x.shape(), gx)
    }
}

impl Module for Linear {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

impl Param {
    pub(crate) fn zero_grad_if_unset(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
    }
}

/// Square-kernel convolution, stride 1, zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub w: Param,
    pub b: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, k: usize, gain: f64, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = (in_ch * k * k) as f64;
        Conv2d {
            w: Param::randn(out_ch * in_ch * k * k, gain / fan_in.sqrt(), rng),
            b: Param::zeros(out_ch),
            in_ch,
            out_ch,
            k,
        }
    }

    /// Unfolds one `[c, h, w]` item into `[c*k*k, h*w]`.
    pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
        let pad = (k / 2) as isize;
        let hw = h * w;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let out = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &x[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                        for (xx, o) in out.iter_mut().enumerate() {
                            let sx = xx as isize + dx;
                            *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, gx: &mut [f64]) {
        let pad = (k / 2) as isize;
        let hw = h * w;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut gx[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                        for xx in 0..w {
                            let sx = xx as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                dst[sx as usize] += src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Convolution with explicit weights, no bias. Used by modulated layers.
    pub(crate) fn conv_raw(x: &Tensor, weight: &[f64], out_ch: usize, k: usize) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let ckk = c * k * k;
        let mut y = vec![0.0; n * out_ch * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
        for i in 0..n {
            let xi = x.item(i);
            let src: &[f64] = if k == 1 {
                xi
            } else {
                Self::im2col(xi, c, h, w, k, &mut cols);
                &cols
            };
            gemm(out_ch, ckk, hw, weight, false, src, false, 0.0, &mut y[i * out_ch * hw..(i + 1) * out_ch * hw]);
        }
        Tensor::from_vec(&[n, out_ch, h, w], y)
    }

    /// Backward of [`Conv2d::conv_raw`]: accumulates into `gw`, returns `gx`.
    pub(crate) fn conv_raw_backward(x: &Tensor, weight: &[f64], out_ch: usize, k: usize, gy: &Tensor, gw: &mut [f64]) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let ckk = c * k * k;
        let mut gx = vec![0.0; x.len()];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
        let mut dcols = vec![0.0; ckk * hw];
        for i in 0..n {
            let xi = x.item(i);
            let gyi = gy.item(i);
            let src: &[f64] = if k == 1 {
                xi
            } else {
                Self::im2col(xi, c, h, w, k, &mut cols);
                &cols
            };
            gemm(out_ch, hw, ckk, gyi, false, src, true, 1.0, gw);
            gemm(ckk, out_ch, hw, weight, true, gyi, false, 0.0, &mut dcols);
            let gxi = &mut gx[i * c * hw..(i + 1) * c * hw];
            if k == 1 {
                for (g, d) in gxi.iter_mut().zip(&dcols) {
                    *g += d;
                }
            } else {
                Self::col2im(&dcols, c, h, w, k, gxi);
            }
        }
        Tensor::from_vec(x.shape(), gx)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let mut y = Self::conv_raw(x, &self.w.value, self.out_ch, self.k);
        let hw = h * w;
        for item in y.data_mut().chunks_mut(self.out_ch * hw) {
            for (o, plane) in item.chunks_mut(hw).enumerate() {
                let b = self.b.value[o];
                for v in plane {
                    *v += b;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        self.w.zero_grad_if_unset();
        self.b.zero_grad_if_unset();
        let (_, _, h, w) = x.dims4();
        let hw = h * w;
        for item in gy.data().chunks(self.out_ch * hw) {
            for (o, plane) in item.chunks(hw).enumerate() {
                self.b.grad[o] += plane.iter().sum::<f64>();
            }
        }
        Self::conv_raw_backward(x, &self.w.value, self.out_ch, self.k, gy, &mut self.w.grad)
    }
}

impl Module for Conv2d {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub dim: usize,
}

const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(vec![1.0; dim]),
            beta: Param::zeros(dim),
            dim,
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Cache) {
        let d = self.dim;
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * self.gamma.value[j] + self.beta.value[j];
            }
        }
        (
            Tensor::from_vec(x.shape(), y),
            Cache::Norm {
                xhat: Tensor::from_vec(x.shape(), xhat),
                rstd,
            },
        )
    }

    fn backward(&mut self, cache: &Cache, gy: &Tensor) -> Tensor {
        let Cache::Norm { xhat, rstd } = cache else {
            unreachable!("layer norm cache")
        };
        self.gamma.zero_grad_if_unset();
        self.beta.zero_grad_if_unset();
        let d = self.dim;
        let rows = gy.len() / d;
        let mut gx = vec![0.0; gy.len()];
        for r in 0..rows {
            let g = &gy.data()[r * d..(r + 1) * d];
            let xh = &xhat.data()[r * d..(r + 1) * d];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for j in 0..d {
                self.gamma.grad[j] += g[j] * xh[j];
                self.beta.grad[j] += g[j];
                let gxh = g[j] * self.gamma.value[j];
                sum_g += gxh;
                sum_gx += gxh * xh[j];
            }
            for j in 0..d {
                let gxh = g[j] * self.gamma.value[j];
                gx[r * d + j] = rstd[r] / d as f64 * (d as f64 * gxh - sum_g - xh[j] * sum_gx);
            }
        }
        Tensor::from_vec(gy.shape(), gx)
    }
}

/// Splits `[n, c, h, w]` into non-overlapping `p×p` patches and embeds each
/// as a token: output `[n, tokens, dim]`, with a learned position table.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: Param,
    pub patch: usize,
    pub tokens: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(channels: usize, resolution: usize, patch: usize, dim: usize, rng: &mut R) -> Self {
        assert!(resolution % patch == 0, "resolution must be a multiple of the patch size");
        let tokens = (resolution / patch).pow(2);
        PatchEmbed {
            proj: Linear::new(channels * patch * patch, dim, 1.0, rng),
            pos: Param::randn(tokens * dim, 0.02, rng),
            patch,
            tokens,
            dim,
        }
    }

    fn patches(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let mut out = vec![0.0; x.len()];
        let pl = c * p * p;
        for i in 0..n {
            let xi = x.item(i);
            for ty in 0..gh {
                for tx in 0..gw {
                    let t = ty * gw + tx;
                    let base = (i * gh * gw + t) * pl;
                    for ci in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                out[base + (ci * p + py) * p + px] = xi[ci * h * w + (ty * p + py) * w + tx * p + px];
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[n, gh * gw, pl], out)
    }

    fn unpatch(&self, gp: &Tensor, shape: &[usize]) -> Tensor {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let pl = c * p * p;
        let mut gx = vec![0.0; n * c * h * w];
        for i in 0..n {
            for ty in 0..gh {
                for tx in 0..gw {
                    let base = (i * gh * gw + ty * gw + tx) * pl;
                    for ci in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                gx[i * c * h * w + ci * h * w + (ty * p + py) * w + tx * p + px] =
                                    gp.data()[base + (ci * p + py) * p + px];
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(shape, gx)
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Cache) {
        let patches = self.patches(x);
        let mut y = self.proj.forward(&patches);
        let td = self.tokens * self.dim;
        for item in y.data_mut().chunks_mut(td) {
            for (v, p) in item.iter_mut().zip(&self.pos.value) {
                *v += p;
            }
        }
        (y, Cache::Patches(patches))
    }

    fn backward(&mut self, x: &Tensor, cache: &Cache, gy: &Tensor) -> Tensor {
        let Cache::Patches(patches) = cache else {
            unreachable!("patch cache")
        };
        self.pos.zero_grad_if_unset();
        let td = self.tokens * self.dim;
        for item in gy.data().chunks(td) {
            for (g, v) in self.pos.grad.iter_mut().zip(item) {
                *g += v;
            }
        }
        let gp = self.proj.backward(patches, gy);
        self.unpatch(&gp, x.shape())
    }
}

/// Single-head scaled dot-product self-attention over `[n, tokens, dim]`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::new(dim, dim, 1.0, rng),
            k: Linear::new(dim, dim, 1.0, rng),
            v: Linear::new(dim, dim, 1.0, rng),
            o: Linear::new(dim, dim, 1.0, rng),
            dim,
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Cache) {
        let n = x.shape()[0];
        let t = x.shape()[1];
        let d = self.dim;
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let scale = 1.0 / (d as f64).sqrt();
        let mut p = vec![0.0; n * t * t];
        let mut o = vec![0.0; n * t * d];
        for i in 0..n {
            let pi = &mut p[i * t * t..(i + 1) * t * t];
            gemm(t, d, t, q.item(i), false, k.item(i), true, 0.0, pi);
            for row in pi.chunks_mut(t) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut s = 0.0;
                for r in row.iter_mut() {
                    *r = (*r * scale - mx).exp();
                    s += *r;
                }
                for r in row.iter_mut() {
                    *r /= s;
                }
            }
            gemm(t, t, d, pi, false, v.item(i), false, 0.0, &mut o[i * t * d..(i + 1) * t * d]);
        }
        let o = Tensor::from_vec(&[n, t, d], o);
        let y = self.o.forward(&o);
        (
            y,
            Cache::Attn {
                q,
                k,
                v,
                p: Tensor::from_vec(&[n, t, t], p),
                o,
            },
        )
    }

    fn backward(&mut self, x: &Tensor, cache: &Cache, gy: &Tensor) -> Tensor {
        let Cache::Attn { q, k, v, p, o } = cache else {
            unreachable!("attention cache")
        };
        let n = x.shape()[0];
        let t = x.shape()[1];
        let d = self.dim;
        let scale = 1.0 / (d as f64).sqrt();
        let go = self.o.backward(o, gy);
        let mut gq = vec![0.0; n * t * d];
        let mut gk = vec![0.0; n * t * d];
        let mut gv = vec![0.0; n * t * d];
        let mut gp = vec![0.0; t * t];
        for i in 0..n {
            let pi = p.item(i);
            let goi = go.item(i);
            gemm(t, d, t, goi, false, v.item(i), true, 0.0, &mut gp);
            gemm(t, t, d, pi, true, goi, false, 0.0, &mut gv[i * t * d..(i + 1) * t * d]);
            // softmax backward, folded with the score scale
            for r in 0..t {
                let prow = &pi[r * t..(r + 1) * t];
                let grow = &mut gp[r * t..(r + 1) * t];
                let dot: f64 = prow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                for (g, pv) in grow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            gemm(t, t, d, &gp, false, k.item(i), false, 0.0, &mut gq[i * t * d..(i + 1) * t * d]);
            gemm(t, t, d, &gp, true, q.item(i), false, 0.0, &mut gk[i * t * d..(i + 1) * t * d]);
        }
        let shape = [n, t, d];
        let mut gx = self.q.backward(x, &Tensor::from_vec(&shape, gq));
        gx.add_assign(&self.k.backward(x, &Tensor::from_vec(&shape, gk)));
        gx.add_assign(&self.v.backward(x, &Tensor::from_vec(&shape, gv)));
        gx
    }
}

/// Per-layer data kept from forward for backward.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Inner(Trace),
    Norm { xhat: Tensor, rstd: Vec<f64> },
    Patches(Tensor),
    Attn { q: Tensor, k: Tensor, v: Tensor, p: Tensor, o: Tensor },
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    LeakyRelu(f64),
    Relu,
    Silu,
    /// 2×2 average pooling.
    AvgPool2,
    /// 2× nearest-neighbour upsampling.
    Upsample2,
    Flatten,
    /// `[n, c, h, w]` → `[n, c]`
    GlobalAvgPool,
    /// `[n, t, d]` → `[n, d]`
    TokenMean,
    LayerNorm(LayerNorm),
    PatchEmbed(PatchEmbed),
    Attention(Attention),
    /// `x + f(x)`
    Residual(Sequential),
}

pub(crate) fn leaky_relu_backward(x: &Tensor, gy: &Tensor, slope: f64) -> Tensor {
    x.zip_map(gy, |a, g| if a > 0.0 { g } else { g * slope })
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> (Tensor, Cache) {
        let y = match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv(c) => c.forward(x),
            Layer::LeakyRelu(s) => {
                let s = *s;
                x.map(|v| if v > 0.0 { v } else { v * s })
            }
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::Silu => x.map(|v| v * sigmoid(v)),
            Layer::AvgPool2 => {
                let (n, c, h, w) = x.dims4();
                let (oh, ow) = (h / 2, w / 2);
                let mut y = vec![0.0; n * c * oh * ow];
                for (plane, out) in x.data().chunks(h * w).zip(y.chunks_mut(oh * ow)) {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let a = plane[2 * yy * w + 2 * xx];
                            let b = plane[2 * yy * w + 2 * xx + 1];
                            let c2 = plane[(2 * yy + 1) * w + 2 * xx];
                            let d = plane[(2 * yy + 1) * w + 2 * xx + 1];
                            out[yy * ow + xx] = 0.25 * (a + b + c2 + d);
                        }
                    }
                }
                Tensor::from_vec(&[n, c, oh, ow], y)
            }
            Layer::Upsample2 => upsample2(x),
            Layer::Flatten => x.clone().reshape(&[x.batch(), x.item_len()]),
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dims4();
                let y = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
                Tensor::from_vec(&[n, c], y)
            }
            Layer::TokenMean => {
                let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut y = vec![0.0; n * d];
                for i in 0..n {
                    for tok in x.item(i).chunks(d) {
                        for (a, b) in y[i * d..(i + 1) * d].iter_mut().zip(tok) {
                            *a += b / t as f64;
                        }
                    }
                }
                Tensor::from_vec(&[n, d], y)
            }
            Layer::LayerNorm(l) => return l.forward(x),
            Layer::PatchEmbed(p) => return p.forward(x),
            Layer::Attention(a) => return a.forward(x),
            Layer::Residual(seq) => {
                let (fx, trace) = seq.forward(x);
                let mut y = fx;
                y.add_assign(x);
                return (y, Cache::Inner(trace));
            }
        };
        (y, Cache::None)
    }

    pub fn backward(&mut self, x: &Tensor, cache: &Cache, gy: &Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.backward(x, gy),
            Layer::Conv(c) => c.backward(x, gy),
            Layer::LeakyRelu(s) => leaky_relu_backward(x, gy, *s),
            Layer::Relu => x.zip_map(gy, |a, g| if a > 0.0 { g } else { 0.0 }),
            Layer::Silu => x.zip_map(gy, |a, g| {
                let s = sigmoid(a);
                g * s * (1.0 + a * (1.0 - s))
            }),
            Layer::AvgPool2 => {
                let (_, _, h, w) = x.dims4();
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; x.len()];
                for (gplane, g) in gx.chunks_mut(h * w).zip(gy.data().chunks(oh * ow)) {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * g[yy * ow + xx];
                            gplane[2 * yy * w + 2 * xx] = v;
                            gplane[2 * yy * w + 2 * xx + 1] = v;
                            gplane[(2 * yy + 1) * w + 2 * xx] = v;
                            gplane[(2 * yy + 1) * w + 2 * xx + 1] = v;
                        }
                    }
                }
                Tensor::from_vec(x.shape(), gx)
            }
            Layer::Upsample2 => upsample2_backward(x.shape(), gy),
            Layer::Flatten => gy.clone().reshape(x.shape()),
            Layer::GlobalAvgPool => {
                let (_, _, h, w) = x.dims4();
                let hw = h * w;
                let mut gx = vec![0.0; x.len()];
                for (plane, g) in gx.chunks_mut(hw).zip(gy.data()) {
                    plane.fill(g / hw as f64);
                }
                Tensor::from_vec(x.shape(), gx)
            }
            Layer::TokenMean => {
                let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut gx = vec![0.0; x.len()];
                for i in 0..n {
                    for tok in 0..t {
                        for j in 0..d {
                            gx[(i * t + tok) * d + j] = gy.data()[i * d + j] / t as f64;
                        }
                    }
                }
                Tensor::from_vec(x.shape(), gx)
            }
            Layer::LayerNorm(l) => l.backward(cache, gy),
            Layer::PatchEmbed(p) => p.backward(x, cache, gy),
            Layer::Attention(a) => a.backward(x, cache, gy),
            Layer::Residual(seq) => {
                let Cache::Inner(trace) = cache else {
                    unreachable!("residual cache")
                };
                let mut gx = seq.backward(trace, gy);
                gx.add_assign(gy);
                gx
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(l) => l.params_mut(),
            Layer::Conv(c) => c.params_mut(),
            Layer::LayerNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::PatchEmbed(p) => {
                let mut v = p.proj.params_mut();
                v.push(&mut p.pos);
                v
            }
            Layer::Attention(a) => {
                let mut v = a.q.params_mut();
                v.extend(a.k.params_mut());
                v.extend(a.v.params_mut());
                v.extend(a.o.params_mut());
                v
            }
            Layer::Residual(seq) => seq.params_mut(),
            _ => Vec::new(),
        }
    }
}

pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; n * c * oh * ow];
    for (plane, out) in x.data().chunks(h * w).zip(y.chunks_mut(oh * ow)) {
        for yy in 0..oh {
            for xx in 0..ow {
                out[yy * ow + xx] = plane[(yy / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], y)
}

pub(crate) fn upsample2_backward(in_shape: &[usize], gy: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0; in_shape.iter().product()];
    for (gplane, g) in gx.chunks_mut(h * w).zip(gy.data().chunks(oh * ow)) {
        for yy in 0..oh {
            for xx in 0..ow {
                gplane[(yy / 2) * w + xx / 2] += g[yy * ow + xx];
            }
        }
    }
    Tensor::from_vec(in_shape, gx)
}

/// Inputs and caches recorded by [`Sequential::forward`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    caches: Vec<Cache>,
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(&cur);
            inputs.push(cur);
            caches.push(c);
            cur = y;
        }
        (cur, Trace { inputs, caches })
    }

    /// Forward pass that keeps nothing for backward.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur).0;
        }
        cur
    }

    pub fn backward(&mut self, trace: &Trace, gy: &Tensor) -> Tensor {
        let mut g = gy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(&trace.inputs[i], &trace.caches[i], &g);
        }
        g
    }
}

impl Module for Sequential {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
