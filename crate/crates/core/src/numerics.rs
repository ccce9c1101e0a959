//! Dense arithmetic, probability vectors and seeded random streams.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor added inside the logarithm of [`cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-major tensor of rank 1 or 2 holding finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "tensor shape {shape:?} must have rank 1 or 2 with positive extents"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!("{len} elements"), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("tensor entries must be finite".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows; a rank-1 tensor is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// `self · x` for a `rows × cols` matrix.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols());
        (0..self.rows()).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y` for a `rows × cols` matrix.
    pub fn matvec_transposed(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows());
        let mut out = vec![0.0; self.cols()];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// In-place update that must keep every entry finite.
    pub(crate) fn update(&mut self, f: impl Fn(usize, f64) -> f64) -> Result<()> {
        for (i, v) in self.data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "update produced non-finite values".into(),
            ));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Estimate of a conditional class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidParameter(
                "a probability vector needs at least two classes".into(),
            ));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidParameter(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(ProbVector(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    if logits.len() < 2 {
        return Err(Error::InvalidParameter(
            "softmax needs at least two logits".into(),
        ));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `-ln(pred[label] + 1e-12)`.
pub fn cross_entropy(pred: &ProbVector, label: usize) -> Result<f64> {
    let p = pred.probs().get(label).ok_or(Error::LabelOutOfRange {
        label,
        classes: pred.len(),
    })?;
    Ok((-(p + LOG_FLOOR).ln()).max(0.0))
}

/// Distribution families drawable from an [`RngStream`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Draw {
    Uniform { lo: f64, hi: f64 },
    Bernoulli { p: f64 },
    Rayleigh { sigma: f64 },
    Normal { mean: f64, std: f64 },
}

impl Draw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Draw::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Draw::Bernoulli { p } => (0.0..=1.0).contains(&p),
            Draw::Rayleigh { sigma } => sigma.is_finite() && sigma > 0.0,
            Draw::Normal { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{self:?}")))
        }
    }
}

/// Seeded stream of random draws.
///
/// Every draw consumes a whole number of 64-bit words from a ChaCha8
/// generator, and `position` counts those words, so a stream can be
/// recreated at any point with [`RngStream::at`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    position: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            position: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn at(seed: u64, position: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(2 * position as u128);
        RngStream {
            seed,
            position,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Independent child stream with seed `seed + index`.
    pub fn derive(&self, index: u64) -> RngStream {
        RngStream::new(self.seed.wrapping_add(index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position += 1;
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn open_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Inverse-CDF Rayleigh draw; always strictly positive.
    pub fn rayleigh(&mut self, sigma: f64) -> f64 {
        sigma * (-2.0 * self.open_uniform().ln()).sqrt()
    }

    /// Box-Muller, always consuming two words.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.open_uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in `0..n` (n > 0).
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn draw(&mut self, spec: Draw) -> f64 {
        match spec {
            Draw::Uniform { lo, hi } => self.uniform_range(lo, hi),
            Draw::Bernoulli { p } => {
                if self.bernoulli(p) {
                    1.0
                } else {
                    0.0
                }
            }
            Draw::Rayleigh { sigma } => self.rayleigh(sigma),
            Draw::Normal { mean, std } => mean + std * self.standard_normal(),
        }
    }
}

/// `count` draws from `spec`, advancing `stream`.
pub fn rng_draws(stream: &mut RngStream, spec: Draw, count: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok((0..count).map(|_| stream.draw(spec)).collect())
}

/// `1 - exp(-x²/(2σ²))` for `x > 0`, else 0.
pub fn rayleigh_cdf(x: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-x * x / (2.0 * sigma * sigma)).exp_m1()
    }
}

/// Inverse of [`rayleigh_cdf`] on `[0, 1)`.
pub fn rayleigh_quantile(q: f64, sigma: f64) -> f64 {
    sigma * (-2.0 * (-q).ln_1p()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_pair() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p.probs()[0], 1.0);
        assert!(p.probs()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[f64::NAN, 1.0]),
            Err(Error::NonFiniteLogits)
        ));
        assert!(matches!(
            softmax(&[f64::INFINITY, 1.0]),
            Err(Error::NonFiniteLogits)
        ));
    }

    #[test]
    fn cross_entropy_values() {
        let one_hot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy(&one_hot, 1).unwrap() < 1e-11);
        let uniform = ProbVector::new(vec![0.25; 4]).unwrap();
        for label in 0..4 {
            assert!((cross_entropy(&uniform, label).unwrap() - 4f64.ln()).abs() < 1e-11);
        }
        let p = ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        assert!((cross_entropy(&p, 1).unwrap() + 0.2f64.ln()).abs() < 1e-11);
        assert!(matches!(
            cross_entropy(&p, 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn bernoulli_endpoints() {
        let mut s = RngStream::new(3);
        assert!(rng_draws(&mut s, Draw::Bernoulli { p: 0.0 }, 100)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(rng_draws(&mut s, Draw::Bernoulli { p: 1.0 }, 100)
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_draw_parameters() {
        let mut s = RngStream::new(0);
        assert!(rng_draws(&mut s, Draw::Bernoulli { p: 1.5 }, 1).is_err());
        assert!(rng_draws(&mut s, Draw::Rayleigh { sigma: 0.0 }, 1).is_err());
        assert!(rng_draws(&mut s, Draw::Rayleigh { sigma: -1.0 }, 1).is_err());
    }

    #[test]
    fn rayleigh_sample_mean() {
        let mut s = RngStream::new(11);
        let draws = rng_draws(&mut s, Draw::Rayleigh { sigma: 1.0 }, 1_000_000).unwrap();
        assert!(draws.iter().all(|&d| d > 0.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let analytic = (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean - analytic).abs() / analytic < 0.01, "mean {mean}");
    }

    #[test]
    fn rayleigh_cdf_matches_integrated_density() {
        let sigma = 1.3;
        let density = |x: f64| x / (sigma * sigma) * (-x * x / (2.0 * sigma * sigma)).exp();
        for i in 1..=10 {
            let x = 0.4 * i as f64;
            // composite Simpson on [0, x]
            let n = 2000;
            let h = x / n as f64;
            let mut acc = density(0.0) + density(x);
            for k in 1..n {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * density(k as f64 * h);
            }
            let integral = acc * h / 3.0;
            assert!((integral - rayleigh_cdf(x, sigma)).abs() < 1e-9);
        }
        assert_eq!(rayleigh_cdf(0.0, sigma), 0.0);
        assert_eq!(rayleigh_cdf(-1.0, sigma), 0.0);
    }

    #[test]
    fn rayleigh_quantile_inverts_cdf() {
        for q in [0.001, 0.1, 0.5, 0.9] {
            assert!((rayleigh_cdf(rayleigh_quantile(q, 2.0), 2.0) - q).abs() < 1e-12);
        }
    }

    #[test]
    fn stream_reconstructs_at_position() {
        let mut a = RngStream::new(42);
        for _ in 0..17 {
            a.uniform();
        }
        a.standard_normal();
        let mut b = RngStream::at(42, a.position());
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(a.rayleigh(1.0).to_bits(), b.rayleigh(1.0).to_bits());
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn matvec_and_transpose() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_transposed(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4]), 1);
    }
}
