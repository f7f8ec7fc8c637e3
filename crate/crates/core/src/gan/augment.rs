use rand::Rng;

use crate::nn::Tensor;

/// Per-image geometric transform: optional horizontal flip, then an integer
/// shift with edge replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub dx: isize,
    pub dy: isize,
}

impl Augment {
    pub const NONE: Augment = Augment {
        flip: false,
        dx: 0,
        dy: 0,
    };

    pub fn random<R: Rng + ?Sized>(max_shift: isize, rng: &mut R) -> Self {
        Augment {
            flip: rng.random_bool(0.5),
            dx: rng.random_range(-max_shift as i64..=max_shift as i64) as isize,
            dy: rng.random_range(-max_shift as i64..=max_shift as i64) as isize,
        }
    }

    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> usize {
        let sx = (x as isize - self.dx).clamp(0, w as isize - 1) as usize;
        let sy = (y as isize - self.dy).clamp(0, h as isize - 1) as usize;
        let sx = if self.flip { w - 1 - sx } else { sx };
        sy * w + sx
    }
}

pub fn augment(x: &Tensor, plans: &[Augment]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(plans.len(), n);
    let mut out = vec![0.0; x.len()];
    for (i, plan) in plans.iter().enumerate() {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    out[base + y * w + xx] = x.data()[base + plan.source(xx, y, w, h)];
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn augment_backward(gy: &Tensor, plans: &[Augment]) -> Tensor {
    let (_, c, h, w) = gy.dims4();
    let mut gx = vec![0.0; gy.len()];
    for (i, plan) in plans.iter().enumerate() {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    gx[base + plan.source(xx, y, w, h)] += gy.data()[base + y * w + xx];
                }
            }
        }
    }
    Tensor::from_vec(gy.shape(), gx)
}
