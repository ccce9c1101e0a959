//! Shared trainable vector quantizer.
//!
//! Encoder features are viewed as `m` sub-vectors of dimension `d`; each
//! sub-vector is replaced by its nearest codeword, so a feature tensor is
//! transmitted as `m` indices of `log2 P` bits each.

use std::path::Path;

use crate::numerics::{squared_distance, RngStream, Tensor};
use crate::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"EEQ1";

/// Default weight of the commitment term.
pub const DEFAULT_BETA: f64 = 0.25;

/// `P` codewords of dimension `d`, applied to features split into `m` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Tensor,
    subvectors: usize,
}

impl Codebook {
    pub fn new(vectors: Tensor, subvectors: usize) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::InvalidCodebook("codewords must form a P x d matrix".into()));
        }
        let p = vectors.rows();
        if !p.is_power_of_two() {
            return Err(Error::InvalidCodebook(format!("P = {p} is not a power of two")));
        }
        if subvectors == 0 {
            return Err(Error::InvalidCodebook("m must be at least 1".into()));
        }
        for i in 0..p {
            for j in 0..i {
                if vectors.row(i) == vectors.row(j) {
                    return Err(Error::InvalidCodebook(format!(
                        "codewords {j} and {i} are identical"
                    )));
                }
            }
        }
        Ok(Codebook {
            vectors,
            subvectors,
        })
    }

    /// Rows drawn i.i.d. uniform on `[-1/P, 1/P]`.
    pub fn random(size: usize, dim: usize, subvectors: usize, rng: &mut RngStream) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidCodebook("P and d must be positive".into()));
        }
        let bound = 1.0 / size as f64;
        let data = (0..size * dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Codebook::new(Tensor::matrix(size, dim, data)?, subvectors)
    }

    pub fn size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn subvectors(&self) -> usize {
        self.subvectors
    }

    /// Length of the flattened feature vector, `m * d`.
    pub fn feature_len(&self) -> usize {
        self.subvectors * self.dim()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn codeword(&self, index: usize) -> &[f64] {
        self.vectors.row(index)
    }

    /// `m * log2 P` bits per transmitted feature tensor.
    pub fn bit_budget(&self) -> u64 {
        self.subvectors as u64 * self.size().trailing_zeros() as u64
    }

    /// Nearest codeword for one sub-vector; ties go to the lowest index.
    pub fn nearest(&self, row: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = squared_distance(row, self.codeword(0));
        for i in 1..self.size() {
            let dist = squared_distance(row, self.codeword(i));
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }

    pub fn quantize(&self, features: &Tensor) -> Result<QuantizedFeatures> {
        let expected = [self.subvectors, self.dim()];
        let matches = match features.shape() {
            [r, c] => [*r, *c] == expected,
            [n] => self.subvectors == 1 && *n == self.dim(),
            _ => false,
        };
        if !matches {
            return Err(Error::shape(
                format!("{}x{}", expected[0], expected[1]),
                format!("{:?}", features.shape()),
            ));
        }
        self.quantize_flat(features.data())
    }

    /// Quantize a flattened `m * d` feature vector.
    pub fn quantize_flat(&self, features: &[f64]) -> Result<QuantizedFeatures> {
        if features.len() != self.feature_len() {
            return Err(Error::shape(self.feature_len(), features.len()));
        }
        let d = self.dim();
        let indices: Vec<usize> = features.chunks(d).map(|row| self.nearest(row)).collect();
        let mut data = Vec::with_capacity(features.len());
        for &i in &indices {
            data.extend_from_slice(self.codeword(i));
        }
        Ok(QuantizedFeatures {
            indices,
            dequantized: Tensor::matrix(self.subvectors, d, data)?,
        })
    }

    /// Rebuild the dequantized tensor from transmitted indices.
    pub fn dequantize(&self, indices: &[usize]) -> Result<QuantizedFeatures> {
        if indices.len() != self.subvectors {
            return Err(Error::shape(self.subvectors, indices.len()));
        }
        let mut data = Vec::with_capacity(self.feature_len());
        for &i in indices {
            if i >= self.size() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.size(),
                });
            }
            data.extend_from_slice(self.codeword(i));
        }
        Ok(QuantizedFeatures {
            indices: indices.to_vec(),
            dequantized: Tensor::matrix(self.subvectors, self.dim(), data)?,
        })
    }

    /// Distance from `row` to the bisector between its nearest and
    /// second-nearest codewords. Infinite when `P = 1`.
    pub fn boundary_margin(&self, row: &[f64]) -> f64 {
        let best = self.nearest(row);
        let d_best = squared_distance(row, self.codeword(best));
        let mut margin = f64::INFINITY;
        for i in (0..self.size()).filter(|&i| i != best) {
            let sep = squared_distance(self.codeword(i), self.codeword(best)).sqrt();
            let gap = (squared_distance(row, self.codeword(i)) - d_best) / (2.0 * sep);
            margin = margin.min(gap);
        }
        margin
    }

    /// One gradient step on the codewords.
    pub(crate) fn step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        self.vectors.update(|i, v| v - lr * grad[i])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.vectors.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        for n in [self.size(), self.dim(), self.subvectors] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.vectors.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: Default::default(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(bad("missing EEQ1 header"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        let (p, d, m) = (word(0), word(1), word(2));
        let body = &bytes[16..];
        if body.len() != p * d * 8 {
            return Err(bad("payload length does not match P*d"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Codebook::new(Tensor::matrix(p, d, data)?, m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Codebook::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// Transmitted indices plus the stacked codewords they stand for.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFeatures {
    pub indices: Vec<usize>,
    pub dequantized: Tensor,
}

/// `(‖sg(x) − z‖², β‖x − sg(z)‖²)`.
///
/// The two terms have the same value up to `β`; they differ only in which
/// side receives the gradient (codebook vs. encoder).
pub fn vq_losses(features: &Tensor, quantized: &QuantizedFeatures, beta: f64) -> Result<(f64, f64)> {
    if features.len() != quantized.dequantized.len() {
        return Err(Error::shape(quantized.dequantized.len(), features.len()));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidParameter(format!("beta = {beta} must be >= 0")));
    }
    let sq = squared_distance(features.data(), quantized.dequantized.data());
    Ok((sq, beta * sq))
}

/// Backward pass through the quantizer: the gradient at the decoder input
/// is passed to the encoder output unchanged.
pub fn straight_through_grad(upstream_grad_at_z: &Tensor) -> Tensor {
    upstream_grad_at_z.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> Codebook {
        Codebook::new(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap(), 1).unwrap()
    }

    #[test]
    fn nearest_codeword_examples() {
        let cb = two_point();
        let q = cb.quantize(&Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap()).unwrap();
        assert_eq!(q.indices, vec![0]);
        let q = cb.quantize(&Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(q.indices, vec![0]);
        let q = cb.quantize(&Tensor::matrix(1, 2, vec![0.9, 0.4]).unwrap()).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.dequantized.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn quantize_shape_mismatch() {
        let cb = two_point();
        assert!(cb.quantize(&Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()).is_err());
        assert!(cb.quantize(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).is_err());
        assert!(cb.quantize_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn bit_budget_examples() {
        let mut rng = RngStream::new(0);
        assert_eq!(Codebook::random(16, 2, 64, &mut rng).unwrap().bit_budget(), 256);
        assert_eq!(Codebook::random(2, 2, 1, &mut rng).unwrap().bit_budget(), 1);
        assert_eq!(Codebook::random(4096, 1, 8, &mut rng).unwrap().bit_budget(), 96);
        assert_eq!(Codebook::random(1, 3, 5, &mut rng).unwrap().bit_budget(), 0);
    }

    #[test]
    fn codebook_invariants_rejected() {
        let dup = Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap();
        assert!(Codebook::new(dup, 1).is_err());
        let three = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(Codebook::new(three, 1).is_err());
        let ok = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(Codebook::new(ok, 0).is_err());
    }

    #[test]
    fn random_init_range() {
        let mut rng = RngStream::new(5);
        let cb = Codebook::random(8, 3, 2, &mut rng).unwrap();
        assert!(cb.vectors().data().iter().all(|v| v.abs() <= 1.0 / 8.0));
    }

    #[test]
    fn vq_loss_examples() {
        let cb = Codebook::new(Tensor::matrix(2, 2, vec![0.0, 0.0, 5.0, 5.0]).unwrap(), 1).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let q = cb.quantize(&x).unwrap();
        let (vq, commit) = vq_losses(&x, &q, 0.25).unwrap();
        assert_eq!((vq, commit), (1.0, 0.25));

        let on = Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap();
        let q = cb.quantize(&on).unwrap();
        assert_eq!(vq_losses(&on, &q, 0.25).unwrap(), (0.0, 0.0));
        assert!(vq_losses(&on, &q, -1.0).is_err());
    }

    #[test]
    fn straight_through_is_identity() {
        let g = Tensor::matrix(2, 2, vec![0.1, -3.0, 1e-300, 7.5]).unwrap();
        let out = straight_through_grad(&g);
        assert!(out.data().iter().zip(g.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let z = Tensor::zeros(vec![3, 2]).unwrap();
        assert_eq!(straight_through_grad(&z), z);
    }

    #[test]
    fn boundary_margin_two_points() {
        let cb = two_point();
        // bisector x + y = 1; distance of (0.25, 0.25) is 0.5/sqrt(2)
        let m = cb.boundary_margin(&[0.25, 0.25]);
        assert!((m - 0.5 / 2f64.sqrt()).abs() < 1e-12);
        assert!(cb.boundary_margin(&[0.5, 0.5]).abs() < 1e-12);
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let mut rng = RngStream::new(9);
        let cb = Codebook::random(16, 4, 3, &mut rng).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"EEQ1");
        assert_eq!(bytes.len(), 16 + 16 * 4 * 8);
        let back = Codebook::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Codebook::from_bytes(&wrong).is_err());
    }

    #[test]
    fn dequantize_matches_quantize() {
        let mut rng = RngStream::new(2);
        let cb = Codebook::random(8, 2, 3, &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.uniform_range(-0.2, 0.2)).collect();
        let q = cb.quantize_flat(&x).unwrap();
        assert_eq!(cb.dequantize(&q.indices).unwrap(), q);
        assert!(cb.dequantize(&[0, 8, 1]).is_err());
    }
}
