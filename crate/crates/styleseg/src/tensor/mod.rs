//! Dense float64 tensors, the forward kernels the network needs, and a
//! recorded-graph reverse-mode differentiation engine.
//!
//! Activations are laid out `[N, C, H, W]` row-major. Everything is f64:
//! the gradient checks in this crate run at 1e-4 relative tolerance and
//! single precision does not reliably clear that bar.

pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use tape::{Padding, Param, ParamId, ParamStore, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch on axis {axis}: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        axis: usize,
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: String, index: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Hard error on any NaN/Inf, naming the producing operation.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        check_finite_slice(&self.data, op)
    }
}

pub(crate) fn check_finite_slice(data: &[f64], op: &str) -> Result<()> {
    for (i, &v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.to_string(),
                index: i,
            });
        }
    }
    Ok(())
}

/// Split an activation shape into (n, c, h, w), erroring with the axis name.
pub(crate) fn nchw(shape: &[usize], context: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(TensorError::Contract(format!(
            "{context}: expected a 4-d [N,C,H,W] tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Per-instance, per-channel spatial mean and standard deviation.
///
/// `sigma = sqrt(population variance + eps)`; eps sits inside the square
/// root so constant channels stay differentiable. Statistics never cross
/// the batch axis.
pub fn instance_stats(z: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    if eps <= 0.0 {
        return Err(TensorError::Contract(format!(
            "instance_stats: eps must be > 0, got {eps}"
        )));
    }
    let (n, c, h, w) = nchw(z.shape(), "instance_stats")?;
    let hw = h * w;
    if hw == 0 {
        return Err(TensorError::Contract(
            "instance_stats: spatial extent must be >= 1".into(),
        ));
    }
    let mut mu = Tensor::zeros(&[n, c]);
    let mut sigma = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let plane = &z.data()[base..base + hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            mu.data_mut()[i * c + ch] = mean;
            sigma.data_mut()[i * c + ch] = (var + eps).sqrt();
        }
    }
    Ok((mu, sigma))
}

/// Numerically fused binary cross-entropy with logits, mean-reduced.
///
/// Per element: `max(x,0) - x*t + ln(1 + exp(-|x|))`, which never forms an
/// intermediate probability of exactly 0 or 1.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(TensorError::Contract(format!(
            "bce: logits shape {:?} != targets shape {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    for (i, &t) in targets.data().iter().enumerate() {
        if t != 0.0 && t != 1.0 {
            return Err(TensorError::Contract(format!(
                "bce: target at flat index {i} is {t}, expected 0 or 1"
            )));
        }
    }
    let m = logits.len() as f64;
    let mut total = 0.0;
    for (&x, &t) in logits.data().iter().zip(targets.data()) {
        total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    }
    let loss = total / m;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            op: "bce_with_logits".into(),
            index: 0,
        });
    }
    Ok(loss)
}

/// Elementwise logistic sigmoid (used by metrics and inference; the model
/// head emits raw logits).
pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| {
        let v = x.data()[i];
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn instance_stats_constant_channel() {
        // constant value 5 -> mu = 5, sigma = sqrt(eps)
        let eps = 1e-5;
        let z = Tensor::filled(&[1, 1, 2, 3], 5.0);
        let (mu, sigma) = instance_stats(&z, eps).unwrap();
        assert_eq!(mu.data(), &[5.0]);
        assert!((sigma.data()[0] - eps.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn instance_stats_two_values() {
        // values {2,4}: population variance 1, so sigma = sqrt(1 + eps)
        let eps = 1e-5;
        let z = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let (mu, sigma) = instance_stats(&z, eps).unwrap();
        assert_eq!(mu.data(), &[3.0]);
        assert!((sigma.data()[0] - (1.0 + eps).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn instance_stats_is_per_instance() {
        let mut z = Tensor::zeros(&[2, 1, 2, 2]);
        z.data_mut()[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        z.data_mut()[4..].copy_from_slice(&[10.0, 20.0, 30.0, 40.0]);
        let (mu_a, sig_a) = instance_stats(&z, 1e-5).unwrap();
        // swap item 2's data; item 1's stats must not move
        let mut z2 = z.clone();
        z2.data_mut()[4..].copy_from_slice(&[-7.0, 0.0, 12.5, 3.0]);
        let (mu_b, sig_b) = instance_stats(&z2, 1e-5).unwrap();
        assert_eq!(mu_a.data()[0], mu_b.data()[0]);
        assert_eq!(sig_a.data()[0], sig_b.data()[0]);
        assert_ne!(mu_a.data()[1], mu_b.data()[1]);
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let logits = Tensor::zeros(&[2, 3]);
        let targets = Tensor::from_fn(&[2, 3], |i| (i % 2) as f64);
        let loss = bce_with_logits(&logits, &targets).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_extreme_logits_stay_finite() {
        // oracle: loss(x=20, t=1) = log1p(exp(-20)); loss(x=-20, t=1) = 20 + log1p(exp(-20))
        let oracle = (-20.0f64).exp().ln_1p();
        let l = bce_with_logits(&Tensor::scalar(20.0), &Tensor::scalar(1.0)).unwrap();
        assert!((l - oracle).abs() < 1e-18, "got {l}, oracle {oracle}");
        let l = bce_with_logits(&Tensor::scalar(-20.0), &Tensor::scalar(1.0)).unwrap();
        assert!((l - (20.0 + oracle)).abs() < 1e-12);
        assert!(l.is_finite());
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let err = bce_with_logits(&Tensor::scalar(0.0), &Tensor::scalar(0.5));
        assert!(err.is_err());
    }

    #[test]
    fn sigmoid_matches_logistic() {
        let x = Tensor::new(vec![3], vec![-700.0, 0.0, 700.0]).unwrap();
        let s = sigmoid(&x);
        assert!(s.data()[0] >= 0.0 && s.data()[0] < 1e-300);
        assert_eq!(s.data()[1], 0.5);
        assert_eq!(s.data()[2], 1.0);
    }
}
