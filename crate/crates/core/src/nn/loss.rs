use super::Tensor;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean softmax cross-entropy of `[n, classes]` logits, with its gradient.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.batch();
    let c = logits.item_len();
    assert_eq!(n, labels.len(), "one label per row");
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.item(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        total += lse - row[label];
        for j in 0..c {
            let p = (row[j] - lse).exp();
            grad[i * c + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (total / n as f64, Tensor::from_vec(logits.shape(), grad))
}

pub fn mse(pred: &Tensor, target: &Tensor) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64
}

pub fn mse_grad(pred: &Tensor, target: &Tensor) -> Tensor {
    let n = pred.len() as f64;
    pred.zip_map(target, |a, b| 2.0 * (a - b) / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_and_accurate() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        for x in [-5.0, -0.3, 0.7, 4.0] {
            assert!((softplus(x) - (1.0 + f64::exp(x)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]);
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels);
        let h = 1e-6;
        for i in 0..6 {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (cross_entropy(&p, &labels).0 - cross_entropy(&m, &labels).0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(&[4, 5]);
        let (l, _) = cross_entropy(&logits, &[0, 1, 2, 3]);
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }
}
