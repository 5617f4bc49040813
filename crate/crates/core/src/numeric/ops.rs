//! Forward/backward kernels shared by every layer.
//!
//! The slice kernels (`gemv_acc` and friends) are what the model code calls in
//! its inner loops; the `Tensor`-level functions wrap them with shape checks.

use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

/// `out += W x` for row-major `W` of shape `rows x cols`.
#[inline]
pub fn gemv_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `out += W^T g`.
#[inline]
pub fn gemv_t_acc(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(g.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for (gr, row) in g.iter().zip(w.chunks_exact(cols)) {
        if *gr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * gr;
        }
    }
}

/// `gw += g x^T`.
#[inline]
pub fn ger_acc(g: &[f64], x: &[f64], gw: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(gw.len(), g.len() * cols);
    for (gr, row) in g.iter().zip(gw.chunks_exact_mut(cols)) {
        if *gr == 0.0 {
            continue;
        }
        for (o, xv) in row.iter_mut().zip(x) {
            *o += gr * xv;
        }
    }
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax over a slice, written into `out`. Subtracts the max first.
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-sum-exp of a slice.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Gradients of an affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

fn check_affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::shape("affine", format!("W must be a matrix, got {:?}", w.shape())));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.len() != n {
        return Err(Error::shape("affine", format!("x has {} entries, W is {m}x{n}", x.len())));
    }
    if let Some(b) = b {
        if b.len() != m {
            return Err(Error::shape("affine", format!("b has {} entries, W is {m}x{n}", b.len())));
        }
    }
    Ok((m, n))
}

/// `W x + b`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = check_affine(x, w, Some(b))?;
    let mut out = b.data().to_vec();
    gemv_acc(w.data(), m, n, x.data(), &mut out);
    Ok(Tensor::from_parts(vec![m], out))
}

pub fn affine_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<AffineGrads> {
    let (m, n) = check_affine(x, w, None)?;
    if grad_out.len() != m {
        return Err(Error::shape("affine_backward", format!("grad_out has {} entries, expected {m}", grad_out.len())));
    }
    let mut gx = vec![0.0; n];
    gemv_t_acc(w.data(), m, n, grad_out.data(), &mut gx);
    let mut gw = vec![0.0; m * n];
    ger_acc(grad_out.data(), x.data(), &mut gw);
    Ok(AffineGrads {
        x: Tensor::from_parts(vec![n], gx),
        w: Tensor::from_parts(vec![m, n], gw),
        b: grad_out.clone(),
    })
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    map(x, f64::tanh)
}

/// Backward through sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y.data().iter().zip(grad_out.data()).map(|(y, g)| g * y * (1.0 - y)).collect();
    Tensor::from_parts(y.shape().to_vec(), data)
}

/// Backward through tanh given its output `y`.
pub fn tanh_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y.data().iter().zip(grad_out.data()).map(|(y, g)| g * (1.0 - y * y)).collect();
    Tensor::from_parts(y.shape().to_vec(), data)
}

pub fn softmax(z: &Tensor) -> Tensor {
    let mut out = vec![0.0; z.len()];
    softmax_into(z.data(), &mut out);
    Tensor::from_parts(z.shape().to_vec(), out)
}

/// Backward through softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let inner = dot(y.data(), grad_out.data());
    let data = y.data().iter().zip(grad_out.data()).map(|(y, g)| y * (g - inner)).collect();
    Tensor::from_parts(y.shape().to_vec(), data)
}

pub fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("keep_prob must lie in (0, 1], got {keep_prob}")))
    }
}

/// Inverted dropout. Returns the output and the keep mask (all true outside
/// training or when `keep_prob == 1`).
pub fn dropout(x: &Tensor, keep_prob: f64, rng: &mut RngState, training: bool) -> Result<(Tensor, Vec<bool>)> {
    check_keep_prob(keep_prob)?;
    let mut out = x.clone();
    let mask = dropout_in_place(out.data_mut(), keep_prob, rng, training);
    Ok((out, mask))
}

/// Slice form of [`dropout`]; caller validates `keep_prob`.
pub fn dropout_in_place(x: &mut [f64], keep_prob: f64, rng: &mut RngState, training: bool) -> Vec<bool> {
    if !training || keep_prob >= 1.0 {
        return vec![true; x.len()];
    }
    let scale = 1.0 / keep_prob;
    x.iter_mut()
        .map(|v| {
            let keep = rng.random::<f64>() < keep_prob;
            *v = if keep { *v * scale } else { 0.0 };
            keep
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut RngState, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Max abs difference normalised by the larger gradient magnitude.
    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(b).map(|v| v.abs()).fold(1e-7, f64::max);
        diff / scale
    }

    #[test]
    fn affine_identity_and_zero_map() {
        let x = Tensor::vector(vec![3.0, -1.0]).unwrap();
        let out = affine(&x, &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[3.0, -1.0]);

        let w = Tensor::zeros(&[1, 2]);
        let b = Tensor::vector(vec![5.0]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn affine_shape_mismatch_is_config_error() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let err = affine(&x, &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = RngState::new(11);
        let x = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        // loss = c . (Wx + b)
        let c = rand_tensor(&mut rng, &[4]);
        let loss = |w: &Tensor, x: &Tensor, b: &Tensor| dot(affine(x, w, b).unwrap().data(), c.data());
        let grads = affine_backward(&x, &w, &c).unwrap();

        let h = 1e-6;
        let mut num_w = vec![0.0; w.len()];
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            num_w[i] = (loss(&wp, &x, &b) - loss(&wm, &x, &b)) / (2.0 * h);
        }
        assert!(rel_err(grads.w.data(), &num_w) < 1e-6);

        let mut num_x = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            num_x[i] = (loss(&w, &xp, &b) - loss(&w, &xm, &b)) / (2.0 * h);
        }
        assert!(rel_err(grads.x.data(), &num_x) < 1e-6);
        assert_eq!(grads.b.data(), c.data());
    }

    #[test]
    fn sigmoid_and_tanh_anchors() {
        let z = Tensor::vector(vec![0.0]).unwrap();
        assert_eq!(sigmoid(&z).data(), &[0.5]);
        assert_eq!(tanh(&z).data(), &[0.0]);
        let big = Tensor::vector(vec![-800.0, 800.0]).unwrap();
        let s = sigmoid(&big);
        assert!(s.data()[0] >= 0.0 && s.data()[1] <= 1.0);
    }

    #[test]
    fn sigmoid_and_tanh_derivatives_match_finite_differences() {
        let h = 1e-6;
        for &x0 in &[-2.0, 0.0, 3.0] {
            let x = Tensor::vector(vec![x0]).unwrap();
            let one = Tensor::vector(vec![1.0]).unwrap();
            let ds = sigmoid_backward(&sigmoid(&x), &one).data()[0];
            let num = (sigmoid_scalar(x0 + h) - sigmoid_scalar(x0 - h)) / (2.0 * h);
            assert!((ds - num).abs() / ds.abs() < 1e-6, "sigmoid' at {x0}");
            let dt = tanh_backward(&tanh(&x), &one).data()[0];
            let num = ((x0 + h).tanh() - (x0 - h).tanh()) / (2.0 * h);
            assert!((dt - num).abs() / dt.abs() < 1e-6, "tanh' at {x0}");
        }
    }

    #[test]
    fn softmax_anchors() {
        for c in [-3.0, 0.0, 42.0] {
            let s = softmax(&Tensor::vector(vec![c; 7]).unwrap());
            for v in s.data() {
                assert!((v - 1.0 / 7.0).abs() < 1e-15);
            }
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap());
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);

        // exp(ln k) = k, so the normaliser is 1 + 2 + 3.
        let s = softmax(&Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
        for (v, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = RngState::new(5);
        let z = rand_tensor(&mut rng, &[6]);
        let c = rand_tensor(&mut rng, &[6]);
        let g = softmax_backward(&softmax(&z), &c);
        let h = 1e-6;
        let num: Vec<f64> = (0..6)
            .map(|i| {
                let mut zp = z.clone();
                zp.data_mut()[i] += h;
                let mut zm = z.clone();
                zm.data_mut()[i] -= h;
                (dot(softmax(&zp).data(), c.data()) - dot(softmax(&zm).data(), c.data())) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(g.data(), &num) < 1e-6);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = RngState::new(1);
        let x = rand_tensor(&mut rng, &[50]);
        let (y, mask) = dropout(&x, 1.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m));
        let (y, _) = dropout(&x, 0.3, &mut rng, false).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&x, 0.0, &mut rng, true).is_err());
        assert!(dropout(&x, 1.5, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_keep_fraction_converges() {
        let mut rng = RngState::new(2024);
        let x = Tensor::new(vec![1_000_000], vec![1.0; 1_000_000]).unwrap();
        let (y, mask) = dropout(&x, 0.8, &mut rng, true).unwrap();
        let kept = mask.iter().filter(|&&m| m).count() as f64 / 1e6;
        assert!((kept - 0.8).abs() < 0.005, "kept {kept}");
        // Inverted scaling keeps the expectation.
        let mean = y.data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01);
    }
}
