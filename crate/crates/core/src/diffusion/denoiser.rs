use rand::Rng;

use crate::nn::{Layer, Linear, Module, Param, Sequential, Tensor, Trace};

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (i, &step) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let a = step as f64 * freq;
            out[i * dim + j] = a.sin();
            out[i * dim + half + j] = a.cos();
        }
    }
    Tensor::from_vec(&[t.len(), dim], out)
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// Noise predictor over flat latents: an encoder/decoder stack of dense
/// levels with additive skips between matching widths, each level shifted
/// by a projection of the timestep embedding.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub latent_dim: usize,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    time: Sequential,
    down: Vec<Linear>,
    down_t: Vec<Linear>,
    up: Vec<Linear>,
    up_t: Vec<Linear>,
    out: Linear,
}

pub struct DenoiserCache {
    time_trace: Trace,
    temb: Tensor,
    down_in: Vec<Tensor>,
    down_pre: Vec<Tensor>,
    up_in: Vec<Tensor>,
    up_pre: Vec<Tensor>,
    out_in: Tensor,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, widths: &[usize], time_dim: usize, rng: &mut R) -> Self {
        assert!(!widths.is_empty(), "denoiser needs at least one level");
        let hidden = 2 * time_dim;
        let time = Sequential::new(vec![
            Layer::Linear(Linear::new(time_dim, hidden, 1.0, rng)),
            Layer::Silu,
            Layer::Linear(Linear::new(hidden, hidden, 1.0, rng)),
        ]);
        let mut down = Vec::new();
        let mut down_t = Vec::new();
        let mut prev = latent_dim;
        for &w in widths {
            down.push(Linear::new(prev, w, 1.0, rng));
            down_t.push(Linear::new(hidden, w, 0.5, rng));
            prev = w;
        }
        let mut up = Vec::new();
        let mut up_t = Vec::new();
        for i in 0..widths.len() - 1 {
            up.push(Linear::new(widths[i + 1], widths[i], 1.0, rng));
            up_t.push(Linear::new(hidden, widths[i], 0.5, rng));
        }
        Denoiser {
            latent_dim,
            widths: widths.to_vec(),
            time_dim,
            time,
            down,
            down_t,
            up,
            up_t,
            out: Linear::new(widths[0], latent_dim, 0.5, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, t: &[usize]) -> (Tensor, DenoiserCache) {
        let (temb, time_trace) = self.time.forward(&timestep_embedding(t, self.time_dim));
        let levels = self.widths.len();
        let mut down_in = Vec::with_capacity(levels);
        let mut down_pre = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        let mut a = x.clone();
        for i in 0..levels {
            let mut pre = self.down[i].forward(&a);
            pre.add_assign(&self.down_t[i].forward(&temb));
            down_in.push(a);
            a = pre.map(silu);
            down_pre.push(pre);
            skips.push(a.clone());
        }
        let mut up_in = vec![Tensor::zeros(&[0]); levels.saturating_sub(1)];
        let mut up_pre = vec![Tensor::zeros(&[0]); levels.saturating_sub(1)];
        for i in (0..levels - 1).rev() {
            let mut pre = self.up[i].forward(&a);
            pre.add_assign(&self.up_t[i].forward(&temb));
            let mut next = pre.map(silu);
            next.add_assign(&skips[i]);
            up_in[i] = a;
            up_pre[i] = pre;
            a = next;
        }
        let y = self.out.forward(&a);
        (
            y,
            DenoiserCache {
                time_trace,
                temb,
                down_in,
                down_pre,
                up_in,
                up_pre,
                out_in: a,
            },
        )
    }

    pub fn predict(&self, x: &Tensor, t: &[usize]) -> Tensor {
        self.forward(x, t).0
    }

    /// Accumulates parameter gradients; returns the gradient for `x`.
    pub fn backward(&mut self, cache: &DenoiserCache, gy: &Tensor) -> Tensor {
        let levels = self.widths.len();
        let mut g_temb = Tensor::zeros(cache.temb.shape());
        let mut g = self.out.backward(&cache.out_in, gy);
        let mut g_skip: Vec<Option<Tensor>> = vec![None; levels];
        for i in 0..levels - 1 {
            g_skip[i] = Some(g.clone());
            let g_pre = cache.up_pre[i].zip_map(&g, |p, gv| gv * silu_grad(p));
            g_temb.add_assign(&self.up_t[i].backward(&cache.temb, &g_pre));
            g = self.up[i].backward(&cache.up_in[i], &g_pre);
        }
        for i in (0..levels).rev() {
            if i < levels - 1 {
                if let Some(s) = &g_skip[i] {
                    g.add_assign(s);
                }
            }
            let g_pre = cache.down_pre[i].zip_map(&g, |p, gv| gv * silu_grad(p));
            g_temb.add_assign(&self.down_t[i].backward(&cache.temb, &g_pre));
            g = self.down[i].backward(&cache.down_in[i], &g_pre);
        }
        self.time.backward(&cache.time_trace, &g_temb);
        g
    }
}

impl Module for Denoiser {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.time.params_mut();
        for l in self.down.iter_mut().chain(self.down_t.iter_mut()).chain(self.up.iter_mut()).chain(self.up_t.iter_mut()) {
            v.extend(l.params_mut());
        }
        v.extend(self.out.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Denoiser::new(5, &[8, 6, 4], 6, &mut rng);
        let x = Tensor::randn(&[3, 5], &mut rng);
        let t = [0, 7, 42];
        let probe = Tensor::randn(&[3, 5], &mut rng);
        let obj = |n: &Denoiser, x: &Tensor| -> f64 {
            n.predict(x, &t).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward(&x, &t);
        net.zero_grad();
        let gx = net.backward(&cache, &probe);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (obj(&net, &p) - obj(&net, &m)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "x[{i}] {fd} vs {}", gx.data()[i]);
        }
        let values = net.flat_values();
        let grads = net.flat_grads();
        for i in (0..values.len()).step_by(7) {
            let mut vp = values.clone();
            vp[i] += h;
            let mut np = net.clone();
            np.load_flat(&vp).unwrap();
            let mut vm = values.clone();
            vm[i] -= h;
            let mut nm = net.clone();
            nm.load_flat(&vm).unwrap();
            let fd = (obj(&np, &x) - obj(&nm, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "p[{i}] {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn single_level_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Denoiser::new(3, &[4], 4, &mut rng);
        let y = net.predict(&Tensor::zeros(&[2, 3]), &[1, 2]);
        assert_eq!(y.shape(), &[2, 3]);
    }
}
