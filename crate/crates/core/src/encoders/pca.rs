use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{EncoderError, Result};

const MAGIC: &[u8; 4] = b"PCAB";
const VERSION: u32 = 1;

/// Principal axes of a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k` rows of length `dim`, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
}

/// Fits `k` principal components to `samples` (each of equal length).
pub fn fit_pca<S: AsRef<[f64]>>(samples: &[S], k: usize) -> Result<PcaBasis> {
    let n = samples.len();
    let dim = samples.first().map(|s| s.as_ref().len()).unwrap_or(0);
    if n < 2 || k == 0 || k > (n - 1).min(dim) {
        return Err(EncoderError::PcaRank { k, n, dim });
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(EncoderError::ShapeMismatch {
                what: "pca sample".into(),
                expected: vec![dim],
                got: vec![s.len()],
            });
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, dim, |i, j| samples[i].as_ref()[j] - mean[j]);
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut c: Vec<f64> = v_t.row(i).iter().copied().collect();
        // Deterministic sign: largest-magnitude entry positive.
        let big = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        let s = svd.singular_values[i];
        explained_variance.push(s * s / (n - 1) as f64);
    }
    let basis = PcaBasis { mean, components, explained_variance };
    if basis.is_rank_deficient() {
        log::warn!("pca: {} of {k} components carry no variance", basis.explained_variance.iter().filter(|v| **v <= basis.zero_tol()).count());
    }
    Ok(basis)
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    fn zero_tol(&self) -> f64 {
        1e-12 * self.explained_variance.first().copied().unwrap_or(0.0).max(1e-300)
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.explained_variance.iter().any(|v| *v <= self.zero_tol())
    }

    /// Coefficients `C (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(EncoderError::ShapeMismatch {
                what: "pca input".into(),
                expected: vec![self.dim()],
                got: vec![x.len()],
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, comp) in coeffs.iter().zip(&self.components) {
            for (o, v) in out.iter_mut().zip(comp) {
                *o += c * v;
            }
        }
        out
    }

    /// `PCAB | u32 version | u64 dim | u64 k | mean | components | variances`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(24 + 8 * (self.dim() * (self.k() + 1) + self.k()));
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        b.extend_from_slice(&(self.k() as u64).to_le_bytes());
        let vals = self.mean.iter().chain(self.components.iter().flatten()).chain(&self.explained_variance);
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| EncoderError::BadFile(format!("pca basis: {m}"));
        if b.len() < 24 || &b[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let k = u64::from_le_bytes(b[16..24].try_into().unwrap()) as usize;
        let count = dim.checked_mul(k + 1).and_then(|v| v.checked_add(k)).ok_or_else(|| bad("size overflow"))?;
        if b.len() != 24 + 8 * count {
            return Err(bad("truncated"));
        }
        let vals: Vec<f64> = b[24..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self {
            mean: vals[..dim].to_vec(),
            components: vals[dim..dim * (k + 1)].chunks(dim.max(1)).map(|c| c.to_vec()).take(k).collect(),
            explained_variance: vals[dim * (k + 1)..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn points_on_a_line() {
        let pts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 - 2.0, 2.0 * (i as f64 - 2.0)]).collect();
        let b = fit_pca(&pts, 1).unwrap();
        let c = &b.components[0];
        assert!((c[0] - 1.0 / 5f64.sqrt()).abs() < 1e-12 && (c[1] - 2.0 / 5f64.sqrt()).abs() < 1e-12);
        let pts3: Vec<Vec<f64>> = pts.clone();
        let b2 = fit_pca(&pts3[..3], 2).unwrap();
        assert!(b2.explained_variance[1].abs() < 1e-20);
        assert!(b2.is_rank_deficient());
    }

    #[test]
    fn constant_data_has_no_variance() {
        let pts = vec![vec![1.0, 2.0, 3.0]; 5];
        let b = fit_pca(&pts, 2).unwrap();
        assert!(b.explained_variance.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn k_too_large_rejected() {
        let pts = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(fit_pca(&pts, 3), Err(EncoderError::PcaRank { .. })));
        assert!(matches!(fit_pca(&pts[..1], 1), Err(EncoderError::PcaRank { .. })));
    }

    #[test]
    fn coefficients_of_mean_and_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b = fit_pca(&pts, 4).unwrap();
        assert!(b.project(&b.mean).unwrap().iter().all(|c| c.abs() < 1e-12));
        let x: Vec<f64> = b.mean.iter().zip(&b.components[0]).map(|(m, c)| m + c).collect();
        let c = b.project(&x).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12 && c[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(b.project(&[0.0; 5]).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b = fit_pca(&pts, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("basis.pcab");
        b.save(&p).unwrap();
        assert_eq!(PcaBasis::load(&p).unwrap(), b);
        let mut bytes = b.to_bytes();
        bytes.pop();
        assert!(PcaBasis::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn components_orthonormal_and_sorted(seed in 0u64..1000, n in 4usize..30, dim in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64).collect()).collect();
            let k = (n - 1).min(dim);
            let b = fit_pca(&pts, k).unwrap();
            for i in 0..k {
                for j in 0..k {
                    let d: f64 = b.components[i].iter().zip(&b.components[j]).map(|(a, b)| a * b).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((d - want).abs() < 1e-6);
                }
            }
            prop_assert!(b.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn reconstruction_error_bounded_by_residual_variance(seed in 0u64..1000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 6;
            let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let full = fit_pca(&pts, dim).unwrap();
            let b = fit_pca(&pts, k).unwrap();
            // Mean squared residual over the fitting set equals the sum of
            // the discarded variances (with the n-1 normalization).
            let resid: f64 = pts.iter().map(|x| {
                let r = b.reconstruct(&b.project(x).unwrap());
                r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            }).sum::<f64>() / (pts.len() - 1) as f64;
            let tail: f64 = full.explained_variance[k..].iter().sum();
            prop_assert!((resid - tail).abs() <= 1e-9 * tail.max(1.0));
        }
    }
}
