use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Module, Param, Tensor};

const SLOPE: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;

fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        SLOPE * v
    }
}

/// Scales each latent row to unit mean square.
pub fn pixel_norm(z: &Tensor) -> Tensor {
    let d = z.item_len();
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + 1e-8).sqrt();
        for v in row {
            *v *= inv;
        }
    }
    out
}

/// Feed-forward mapping from noise to style vectors: dense layers with
/// leaky ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mapping {
    pub layers: Vec<Linear>,
}

pub struct MappingCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl Mapping {
    pub fn new<R: Rng + ?Sized>(dim: usize, depth: usize, rng: &mut R) -> Self {
        Mapping {
            layers: (0..depth).map(|_| Linear::new(dim, dim, 1.0, rng)).collect(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Mapping {
            layers: vec![Linear::identity(dim)],
        }
    }

    pub fn forward(&self, z: &Tensor) -> (Tensor, MappingCache) {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut x = z.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            let y = l.forward(&x);
            inputs.push(x);
            x = if i < last { y.map(lrelu) } else { y.clone() };
            pre.push(y);
        }
        (x, MappingCache { inputs, pre })
    }

    pub fn backward(&mut self, cache: &MappingCache, gw: &Tensor) {
        let last = self.layers.len().saturating_sub(1);
        let mut g = gw.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                g = cache.pre[i].zip_map(&g, |p, gv| if p > 0.0 { gv } else { SLOPE * gv });
            }
            g = self.layers[i].backward(&cache.inputs[i], &g);
        }
    }
}

impl Module for Mapping {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Maps a batch of noise vectors `[n, dim]` to style vectors.
pub fn map_latent(z: &Tensor, mapping: &Mapping) -> Result<Tensor> {
    if z.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("latent contains non-finite values".into()));
    }
    Ok(mapping.forward(z).0)
}

/// Convolution whose input channels are scaled by a style-dependent
/// vector, optionally followed by output demodulation, per-pixel noise,
/// bias and leaky ReLU.
#[derive(Debug, Clone)]
pub struct StyleConv {
    pub affine: Linear,
    pub weight: Param,
    pub bias: Param,
    pub noise_strength: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub demod: bool,
    pub noise: bool,
    pub activate: bool,
}

pub struct StyleConvCache {
    s: Tensor,
    xm: Tensor,
    u: Tensor,
    d: Vec<f64>,
    noise: Option<Tensor>,
    pre: Tensor,
}

impl StyleConv {
    pub fn new<R: Rng + ?Sized>(style_dim: usize, in_ch: usize, out_ch: usize, k: usize, rgb: bool, rng: &mut R) -> Self {
        let mut affine = Linear::new(style_dim, in_ch, 1.0, rng);
        affine.b.value.fill(1.0);
        let conv = Conv2d::new(in_ch, out_ch, k, 1.0, rng);
        StyleConv {
            affine,
            weight: conv.w,
            bias: Param::zeros(out_ch),
            noise_strength: Param::zeros(out_ch),
            in_ch,
            out_ch,
            k,
            demod: !rgb,
            noise: !rgb,
            activate: !rgb,
        }
    }

    fn weight_energy(&self) -> Vec<f64> {
        let kk = self.k * self.k;
        self.weight.value.chunks(kk).map(|c| c.iter().map(|v| v * v).sum()).collect()
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, w: &Tensor, rng: &mut R) -> (Tensor, StyleConvCache) {
        let (n, c, h, wd) = x.dims4();
        let hw = h * wd;
        let s = self.affine.forward(w);
        let mut xm = x.clone();
        for i in 0..n {
            let si = &s.data()[i * c..(i + 1) * c];
            for (ch, plane) in xm.item_mut(i).chunks_mut(hw).enumerate() {
                for v in plane {
                    *v *= si[ch];
                }
            }
        }
        let u = Conv2d::conv_raw(&xm, &self.weight.value, self.out_ch, self.k);
        let mut v = u.clone();
        let mut d = Vec::new();
        if self.demod {
            let q = self.weight_energy();
            d = vec![0.0; n * self.out_ch];
            for i in 0..n {
                let si = &s.data()[i * c..(i + 1) * c];
                for o in 0..self.out_ch {
                    let e: f64 = (0..c).map(|ch| si[ch] * si[ch] * q[o * c + ch]).sum();
                    d[i * self.out_ch + o] = 1.0 / (e + DEMOD_EPS).sqrt();
                }
                for (o, plane) in v.item_mut(i).chunks_mut(hw).enumerate() {
                    let dv = d[i * self.out_ch + o];
                    for p in plane {
                        *p *= dv;
                    }
                }
            }
        }
        let noise = if self.noise {
            let nz = Tensor::randn(&[n, 1, h, wd], rng);
            for i in 0..n {
                let np = nz.item(i).to_vec();
                for (o, plane) in v.item_mut(i).chunks_mut(hw).enumerate() {
                    let st = self.noise_strength.value[o];
                    for (p, e) in plane.iter_mut().zip(&np) {
                        *p += st * e;
                    }
                }
            }
            Some(nz)
        } else {
            None
        };
        for item in v.data_mut().chunks_mut(self.out_ch * hw) {
            for (o, plane) in item.chunks_mut(hw).enumerate() {
                for p in plane {
                    *p += self.bias.value[o];
                }
            }
        }
        let y = if self.activate { v.map(lrelu) } else { v.clone() };
        (
            y,
            StyleConvCache {
                s,
                xm,
                u,
                d,
                noise,
                pre: v,
            },
        )
    }

    /// Returns gradients for the input feature map and the style vector.
    pub fn backward(&mut self, x: &Tensor, w: &Tensor, cache: &StyleConvCache, gy: &Tensor) -> (Tensor, Tensor) {
        for p in [&mut self.weight, &mut self.bias, &mut self.noise_strength] {
            p.zero_grad_if_unset();
        }
        let (n, c, h, wd) = x.dims4();
        let hw = h * wd;
        let oc = self.out_ch;
        let gv = if self.activate {
            cache.pre.zip_map(gy, |p, g| if p > 0.0 { g } else { SLOPE * g })
        } else {
            gy.clone()
        };
        for item in gv.data().chunks(oc * hw) {
            for (o, plane) in item.chunks(hw).enumerate() {
                self.bias.grad[o] += plane.iter().sum::<f64>();
            }
        }
        if let Some(nz) = &cache.noise {
            for i in 0..n {
                let np = nz.item(i);
                for (o, plane) in gv.item(i).chunks(hw).enumerate() {
                    self.noise_strength.grad[o] += plane.iter().zip(np).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let mut gs = vec![0.0; n * c];
        let mut gu = gv.clone();
        if self.demod {
            let q = self.weight_energy();
            let mut gq = vec![0.0; oc * c];
            for i in 0..n {
                let si = &cache.s.data()[i * c..(i + 1) * c];
                let ui = cache.u.item(i);
                let gvi = gv.item(i);
                for o in 0..oc {
                    let dv = cache.d[i * oc + o];
                    let gd: f64 = gvi[o * hw..(o + 1) * hw]
                        .iter()
                        .zip(&ui[o * hw..(o + 1) * hw])
                        .map(|(a, b)| a * b)
                        .sum();
                    let d3 = dv * dv * dv;
                    for ch in 0..c {
                        gs[i * c + ch] -= gd * d3 * si[ch] * q[o * c + ch];
                        gq[o * c + ch] -= 0.5 * gd * d3 * si[ch] * si[ch];
                    }
                }
                for (o, plane) in gu.item_mut(i).chunks_mut(hw).enumerate() {
                    let dv = cache.d[i * oc + o];
                    for p in plane {
                        *p *= dv;
                    }
                }
            }
            let kk = self.k * self.k;
            for (idx, g) in gq.iter().enumerate() {
                for j in 0..kk {
                    self.weight.grad[idx * kk + j] += 2.0 * self.weight.value[idx * kk + j] * g;
                }
            }
        }
        let gxm = Conv2d::conv_raw_backward(&cache.xm, &self.weight.value, oc, self.k, &gu, &mut self.weight.grad);
        let mut gx = gxm.clone();
        for i in 0..n {
            let si = cache.s.data()[i * c..(i + 1) * c].to_vec();
            let xi = x.item(i);
            let gxi = gxm.item(i);
            for ch in 0..c {
                gs[i * c + ch] += gxi[ch * hw..(ch + 1) * hw]
                    .iter()
                    .zip(&xi[ch * hw..(ch + 1) * hw])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            for (ch, plane) in gx.item_mut(i).chunks_mut(hw).enumerate() {
                for p in plane {
                    *p *= si[ch];
                }
            }
        }
        let gw = self.affine.backward(w, &Tensor::from_vec(&[n, c], gs));
        (gx, gw)
    }
}

impl Module for StyleConv {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.affine.params_mut();
        v.push(&mut self.weight);
        v.push(&mut self.bias);
        if self.noise {
            v.push(&mut self.noise_strength);
        }
        v
    }
}

/// Style-based synthesis network: learned 4×4 constant, one modulated
/// convolution per resolution level with 2× upsampling between levels,
/// and a 1×1 modulated projection to one output channel.
#[derive(Debug, Clone)]
pub struct Generator {
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    pub mapping: Mapping,
    pub constant: Param,
    pub blocks: Vec<StyleConv>,
    pub to_gray: StyleConv,
}

pub struct GeneratorCache {
    mapping: MappingCache,
    w: Tensor,
    block_in: Vec<Tensor>,
    block_cache: Vec<StyleConvCache>,
    rgb_in: Tensor,
    rgb_cache: StyleConvCache,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, mapping_layers: usize, channels: &[usize], rng: &mut R) -> Self {
        assert!(!channels.is_empty(), "generator needs at least one level");
        let mapping = Mapping::new(latent_dim, mapping_layers.max(1), rng);
        let constant = Param::randn(channels[0] * 16, 1.0, rng);
        let mut blocks = Vec::new();
        let mut prev = channels[0];
        for &c in channels {
            blocks.push(StyleConv::new(latent_dim, prev, c, 3, false, rng));
            prev = c;
        }
        let to_gray = StyleConv::new(latent_dim, prev, 1, 1, true, rng);
        Generator {
            latent_dim,
            channels: channels.to_vec(),
            mapping,
            constant,
            blocks,
            to_gray,
        }
    }

    pub fn resolution(&self) -> usize {
        4 << (self.channels.len() - 1)
    }

    /// Images in roughly `[-1, 1]`, shape `[n, 1, res, res]`.
    pub fn forward<R: Rng + ?Sized>(&self, z: &Tensor, rng: &mut R) -> (Tensor, GeneratorCache) {
        let n = z.batch();
        let (w, mapping) = self.mapping.forward(&pixel_norm(z));
        let c0 = self.channels[0];
        let mut x = Tensor::from_vec(&[n, c0, 4, 4], self.constant.value.repeat(n));
        let mut block_in = Vec::new();
        let mut block_cache = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = crate::nn::upsample2(&x);
            }
            let (y, c) = b.forward(&x, &w, rng);
            block_in.push(x);
            block_cache.push(c);
            x = y;
        }
        let (img, rgb_cache) = self.to_gray.forward(&x, &w, rng);
        (
            img,
            GeneratorCache {
                mapping,
                w,
                block_in,
                block_cache,
                rgb_in: x,
                rgb_cache,
            },
        )
    }

    pub fn backward(&mut self, cache: &GeneratorCache, gy: &Tensor) {
        self.constant.zero_grad_if_unset();
        let (mut g, mut gw) = self.to_gray.backward(&cache.rgb_in, &cache.w, &cache.rgb_cache, gy);
        for i in (0..self.blocks.len()).rev() {
            let (gx, gwi) = self.blocks[i].backward(&cache.block_in[i], &cache.w, &cache.block_cache[i], &g);
            gw.add_assign(&gwi);
            g = if i > 0 {
                let s = cache.block_in[i].shape();
                crate::nn::upsample2_backward(&[s[0], s[1], s[2] / 2, s[3] / 2], &gx)
            } else {
                gx
            };
        }
        let per = self.constant.len();
        for item in g.data().chunks(per) {
            for (a, b) in self.constant.grad.iter_mut().zip(item) {
                *a += b;
            }
        }
        self.mapping.backward(&cache.mapping, &gw);
    }
}

impl Module for Generator {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.mapping.params_mut();
        v.push(&mut self.constant);
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.to_gray.params_mut());
        v
    }
}
