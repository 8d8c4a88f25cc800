//! Minimal dense numeric kernels: row-major matrices, linear layers with
//! explicit forward/backward, stabilized softmax cross-entropy, SGD, a seeded
//! RNG, and a central finite-difference gradient oracle.
//!
//! Everything is `f64`. The RNG is ChaCha8 seeded from a `u64`, which gives a
//! documented, bit-stable stream on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The crate-wide deterministic generator.
pub type Rng = ChaCha8Rng;

/// Build the generator from a seed. Same seed, same stream, everywhere.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Tensor2 {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Shape(format!(
                "tensor data length {} != {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite tensor entry".into()));
        }
        Ok(())
    }
}

/// Fully-connected layer `y = x W^T + b` with gradient buffers.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor2, // out x in
    pub bias: Vec<f64>,  // out
    pub grad_weight: Tensor2,
    pub grad_bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearLayer {
            weight: Tensor2::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            grad_weight: Tensor2::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init in (-1/sqrt(in_dim), 1/sqrt(in_dim)); bias zero.
    pub fn init_uniform(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let mut layer = Self::zeros(out_dim, in_dim);
        let bound = 1.0 / (in_dim as f64).sqrt();
        for w in layer.weight.data.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        layer
    }

    pub fn from_params(weight: Tensor2, bias: Vec<f64>) -> Result<Self> {
        weight.validate()?;
        if bias.len() != weight.rows {
            return Err(Error::Shape(format!(
                "bias length {} != out dim {}",
                bias.len(),
                weight.rows
            )));
        }
        let (r, c) = (weight.rows, weight.cols);
        Ok(LinearLayer {
            weight,
            bias,
            grad_weight: Tensor2::zeros(r, c),
            grad_bias: vec![0.0; r],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    /// `y = W x + b` for a single vector.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear forward: input length {} != in dim {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let w = self.weight.row(o);
            *yo += dot(w, x);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients for one sample and returns `dL/dx`.
    pub fn backward_vec(&mut self, x: &[f64], grad_y: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() || grad_y.len() != self.out_dim() {
            return Err(Error::Shape("linear backward: dimension mismatch".into()));
        }
        let mut grad_x = vec![0.0; x.len()];
        for (o, &gy) in grad_y.iter().enumerate() {
            self.grad_bias[o] += gy;
            let wrow = self.weight.row(o);
            let grow = &mut self.grad_weight.data[o * x.len()..(o + 1) * x.len()];
            for j in 0..x.len() {
                grow[j] += gy * x[j];
                grad_x[j] += gy * wrow[j];
            }
        }
        Ok(grad_x)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.data.iter_mut().for_each(|g| *g = 0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for (p, g) in self.weight.data.iter_mut().zip(&self.grad_weight.data) {
            *p -= lr * g;
        }
        for (p, g) in self.bias.iter_mut().zip(&self.grad_bias) {
            *p -= lr * g;
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight.data);
        out.extend_from_slice(&self.bias);
    }

    pub fn append_grads(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.grad_weight.data);
        out.extend_from_slice(&self.grad_bias);
    }

    /// Reads parameters back from a flat slice; returns how many were consumed.
    pub fn load_params(&mut self, flat: &[f64]) -> usize {
        let nw = self.weight.data.len();
        let nb = self.bias.len();
        self.weight.data.copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..nw + nb]);
        nw + nb
    }
}

/// Batched `y = x W^T + b`; `x` is (batch x in), result (batch x out).
pub fn linear_forward(layer: &LinearLayer, x: &Tensor2) -> Result<Tensor2> {
    if x.cols != layer.in_dim() {
        return Err(Error::Shape(format!(
            "linear forward: x cols {} != in dim {}",
            x.cols,
            layer.in_dim()
        )));
    }
    let mut y = Tensor2::zeros(x.rows, layer.out_dim());
    for r in 0..x.rows {
        let xr = x.row(r);
        for o in 0..layer.out_dim() {
            *y.at_mut(r, o) = layer.bias[o] + dot(layer.weight.row(o), xr);
        }
    }
    Ok(y)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stabilized softmax cross-entropy. Returns the loss and the gradient with
/// respect to the logits: `softmax(logits) - onehot(target)`.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax over empty class set".into()));
    }
    if target >= logits.len() {
        return Err(Error::Domain(format!(
            "target {} outside class set of size {}",
            target,
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// `p <- p - lr * g` elementwise.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Central finite differences `(f(x+h e_i) - f(x-h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric("non-finite function value".into()));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Componentwise relative error with an absolute floor for near-zero entries.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    #[test]
    fn linear_forward_identity() {
        let layer = LinearLayer::from_params(
            Tensor2::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap();
        assert_eq!(layer.forward_vec(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn linear_forward_zero_weights() {
        let layer =
            LinearLayer::from_params(Tensor2::zeros(1, 2), vec![3.0]).unwrap();
        assert_eq!(layer.forward_vec(&[7.0, -4.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn linear_forward_hand_case() {
        let layer = LinearLayer::from_params(
            Tensor2::from_rows(vec![vec![1.0, 1.0]]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        assert_eq!(layer.forward_vec(&[2.0, 3.0]).unwrap(), vec![5.0]);
    }

    #[test]
    fn linear_forward_shape_error() {
        let layer = LinearLayer::zeros(2, 3);
        assert!(layer.forward_vec(&[1.0, 2.0]).is_err());
        let x = Tensor2::zeros(4, 2);
        assert!(linear_forward(&layer, &x).is_err());
    }

    #[test]
    fn linear_backward_matches_finite_diff() {
        let mut rng = rng_from_seed(3);
        let mut layer = LinearLayer::init_uniform(3, 4, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad_y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        layer.zero_grad();
        let grad_x = layer.backward_vec(&x, &grad_y).unwrap();
        let mut analytic = Vec::new();
        layer.append_grads(&mut analytic);

        let mut theta = Vec::new();
        layer.append_params(&mut theta);
        let probe_layer = layer.clone();
        let f = |p: &[f64]| {
            let mut l = probe_layer.clone();
            l.load_params(p);
            dot(&l.forward_vec(&x).unwrap(), &grad_y)
        };
        let fd = finite_diff_grad(f, &theta, 1e-5).unwrap();
        assert!(max_rel_err(&analytic, &fd) < 1e-8);

        let fx = finite_diff_grad(
            |xx| dot(&layer.forward_vec(xx).unwrap(), &grad_y),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&grad_x, &fx) < 1e-8);
    }

    #[test]
    fn softmax_ce_symmetric() {
        let (loss, grad) = softmax_ce(&[0.0, 0.0], 0).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[0], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_ce_hand_case() {
        let (loss, _) = softmax_ce(&[1.0, 0.0], 0).unwrap();
        assert_abs_diff_eq!(loss, (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.313262, epsilon = 1e-6);
    }

    #[test]
    fn softmax_ce_no_overflow() {
        let (loss, grad) = softmax_ce(&[1000.0, 0.0], 0).unwrap();
        assert!(loss < 1e-300 || loss == 0.0);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn softmax_ce_empty_class_set() {
        assert!(softmax_ce(&[], 0).is_err());
    }

    #[test]
    fn softmax_ce_grad_sums_to_zero() {
        let mut rng = rng_from_seed(11);
        for _ in 0..200 {
            let n = rng.gen_range(2..12);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let target = rng.gen_range(0..n);
            let (_, grad) = softmax_ce(&logits, target).unwrap();
            let sum: f64 = grad.iter().sum();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_cases() {
        let mut p = [1.0];
        sgd_step(&mut p, &[0.0], 0.1).unwrap();
        assert_eq!(p, [1.0]);
        let mut p = [1.0];
        sgd_step(&mut p, &[1.0], 0.5).unwrap();
        assert_eq!(p, [0.5]);
        let mut p = [0.0];
        sgd_step(&mut p, &[-2.0], 0.1).unwrap();
        assert_abs_diff_eq!(p[0], 0.2, epsilon = 1e-15);
        assert!(sgd_step(&mut p, &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn sgd_decreases_convex_quadratic() {
        // f(x) = x^2, lr below curvature bound 1/2.
        let mut x = [3.0];
        let mut prev = x[0] * x[0];
        for _ in 0..20 {
            let g = [2.0 * x[0]];
            sgd_step(&mut x, &g, 0.3).unwrap();
            let cur = x[0] * x[0];
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn finite_diff_quadratic_exact() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 1.25, &[0.4, -2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_diff_grad(|x| x[0] * x[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_degree_two_polynomials_near_exact() {
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let c: f64 = rng.gen_range(-2.0..2.0);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |v: &[f64]| a * v[0] * v[0] + b * v[1] * v[2] + c * v[0];
            let fd = finite_diff_grad(f, &x, 1e-5).unwrap();
            let exact = vec![2.0 * a * x[0] + c, b * x[2], b * x[1]];
            for (u, v) in fd.iter().zip(&exact) {
                assert!((u - v).abs() <= 1e-8 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn finite_diff_non_finite_is_error() {
        assert!(finite_diff_grad(|x| 1.0 / (x[0] - x[0]), &[1.0], 1e-5).is_err());
    }

    #[test]
    fn rng_same_seed_same_stream() {
        use rand::RngCore as _;
        let mut a = rng_from_seed(99);
        let mut b = rng_from_seed(99);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
