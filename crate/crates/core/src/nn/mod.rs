//! Small CPU neural-network toolkit.
//!
//! Layers are stateless with respect to activations: `forward` returns the
//! output together with whatever the backward pass needs, and `backward`
//! takes the input back, accumulates parameter gradients into
//! [`Param::grad`], and returns the gradient with respect to the input.
//! Everything is `f64` and single-threaded, so a fixed seed gives
//! bit-identical results.

mod layers;
mod loss;
mod optim;
mod tensor;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub(crate) use layers::{upsample2, upsample2_backward};
pub use layers::{
    Attention, Cache, Conv2d, Layer, LayerNorm, Linear, PatchEmbed, Sequential, Trace,
};
pub use loss::{cross_entropy, mse, mse_grad, softplus, sigmoid};
pub use optim::{Adam, AdamConfig, ReduceOnPlateau};
pub use tensor::Tensor;

/// A trainable parameter and its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn zeros(n: usize) -> Self {
        Param::new(vec![0.0; n])
    }

    pub fn randn<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Self {
        Param::new((0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.fill(0.0);
        }
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }

    /// Concatenation of all parameter values, in visiting order.
    fn flat_values(&mut self) -> Vec<f64> {
        self.params_mut().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn flat_grads(&mut self) -> Vec<f64> {
        self.params_mut()
            .iter()
            .flat_map(|p| {
                if p.grad.len() == p.value.len() {
                    p.grad.clone()
                } else {
                    vec![0.0; p.value.len()]
                }
            })
            .collect()
    }

    fn load_flat(&mut self, values: &[f64]) -> Result<(), String> {
        let mut params = self.params_mut();
        let total: usize = params.iter().map(|p| p.len()).sum();
        if total != values.len() {
            return Err(format!("expected {total} parameters, got {}", values.len()));
        }
        let mut off = 0;
        for p in params.iter_mut() {
            let n = p.len();
            p.value.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// `c = a · b + beta · c` with `a` `m×k` and `b` `k×n`, row-major.
/// `ta`/`tb` read `a`/`b` as stored transposed (`k×m`, `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have the lengths asserted above and the strides
    // describe exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
