//! Spectral graph wavelet signatures and cross-modal signature similarity.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpectralBasis;
use crate::numkit::DenseMatrix;

pub type Kernel = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Eigenvalues at or below this (relative to the largest) count as zero.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-9;

/// Band-pass kernel `g`, low-pass kernel `h` and the wavelet scales.
#[derive(Clone)]
pub struct WaveletKernelSpec {
    pub g: Kernel,
    pub h: Kernel,
    pub scales: Vec<f64>,
}

impl fmt::Debug for WaveletKernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WaveletKernelSpec")
            .field("scales", &self.scales)
            .finish_non_exhaustive()
    }
}

impl WaveletKernelSpec {
    pub fn new(g: Kernel, h: Kernel, scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::arg("at least one wavelet scale is required"));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::arg(format!(
                "wavelet scale {s} is not positive and finite"
            )));
        }
        Ok(WaveletKernelSpec { g, h, scales })
    }

    /// Resolution `R`, the number of wavelet scales.
    pub fn resolution(&self) -> usize {
        self.scales.len()
    }
}

pub fn mexican_hat(x: f64) -> f64 {
    x * (-x).exp()
}

/// `g(x) = x e^{-x}`, `h(x) = e^{-1} exp(-(x / (0.6 lambda_min_nz))^4)` and
/// `R` scales spaced geometrically from `2 / lambda_min_nz` down to `2 / lambda_max`.
pub fn default_kernels(lambda_max: f64, lambda_min_nz: f64, r: usize) -> Result<WaveletKernelSpec> {
    if !(lambda_min_nz > 0.0 && lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::arg(format!(
            "eigenvalue range ({lambda_min_nz}, {lambda_max}) must be positive"
        )));
    }
    if lambda_min_nz >= lambda_max {
        return Err(Error::arg(format!(
            "lambda_min_nz = {lambda_min_nz} must be below lambda_max = {lambda_max}"
        )));
    }
    if r == 0 {
        return Err(Error::arg("resolution R must be at least 1"));
    }
    let hi = 2.0 / lambda_min_nz;
    let lo = 2.0 / lambda_max;
    let scales = if r == 1 {
        vec![hi]
    } else {
        let step = (lo / hi).ln() / (r - 1) as f64;
        (0..r)
            .map(|m| match m {
                0 => hi,
                _ if m == r - 1 => lo,
                _ => hi * (step * m as f64).exp(),
            })
            .collect()
    };
    let width = 0.6 * lambda_min_nz;
    let gamma = (-1.0f64).exp();
    let h: Kernel = Arc::new(move |x: f64| gamma * (-(x / width).powi(4)).exp());
    WaveletKernelSpec::new(Arc::new(mexican_hat), h, scales)
}

/// Default kernels with the eigenvalue range read off a computed basis.
pub fn kernels_for_basis(basis: &SpectralBasis, r: usize) -> Result<WaveletKernelSpec> {
    let lambda_max = basis.eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = ZERO_EIGENVALUE_TOL * lambda_max.max(1.0);
    let lambda_min_nz = basis
        .eigenvalues
        .iter()
        .copied()
        .filter(|&v| v > floor)
        .fold(f64::INFINITY, f64::min);
    if !lambda_min_nz.is_finite() || lambda_min_nz >= lambda_max {
        return Err(Error::arg(format!(
            "spectral basis of size {} has fewer than two distinct nonzero eigenvalues",
            basis.size()
        )));
    }
    default_kernels(lambda_max, lambda_min_nz, r)
}

/// `N x (R + 1)` signatures: wavelet coefficients per scale, then the scaling coefficient.
#[derive(Debug, Clone)]
pub struct SignatureMatrix {
    pub id: String,
    pub s: DenseMatrix,
}

impl SignatureMatrix {
    pub fn q(&self) -> usize {
        self.s.ncols()
    }

    pub fn samples(&self) -> usize {
        self.s.nrows()
    }
}

pub fn sgws_matrix(
    id: impl Into<String>,
    basis: &SpectralBasis,
    spec: &WaveletKernelSpec,
) -> Result<SignatureMatrix> {
    let n = basis.samples();
    let k = basis.size();
    if k == 0 {
        return Err(Error::arg("spectral basis is empty"));
    }
    let r = spec.resolution();
    // filter[l, m] = g(eta_m lambda_l) for m < R, h(lambda_l) for m = R
    let filter = DenseMatrix::from_fn(k, r + 1, |l, m| {
        let lambda = basis.eigenvalues[l];
        if m < r {
            (spec.g)(spec.scales[m] * lambda)
        } else {
            (spec.h)(lambda)
        }
    });
    let squared = basis.vectors.map(|v| v * v);
    let s = &squared * &filter;
    debug_assert_eq!(s.shape(), (n, r + 1));
    crate::numkit::ensure_finite(&s, "signature matrix")?;
    Ok(SignatureMatrix { id: id.into(), s })
}

pub fn sgws_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "signature rows differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(crate::numkit::sq_dist(a, b))
}

/// How the similarity bandwidth is derived from the pairwise distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Sample standard deviation of the distances.
    #[default]
    StdDev,
    /// Sample variance of the distances.
    Variance,
}

#[derive(Debug, Clone)]
pub struct CrossSimilarity {
    pub pi: DenseMatrix,
    pub sigma: f64,
}

/// `pi[r, t] = exp(-d^2 / (2 sigma^2))` with `d` the signature distance of
/// row `r` of `si` and row `t` of `sj`.
pub fn cross_similarity(
    si: &SignatureMatrix,
    sj: &SignatureMatrix,
    mode: SigmaMode,
) -> Result<CrossSimilarity> {
    if si.q() != sj.q() {
        return Err(Error::arg(format!(
            "signature widths differ: {} vs {}",
            si.q(),
            sj.q()
        )));
    }
    let (ni, nj) = (si.samples(), sj.samples());
    let rows_i: Vec<Vec<f64>> = (0..ni).map(|r| crate::numkit::row_vec(&si.s, r)).collect();
    let rows_j: Vec<Vec<f64>> = (0..nj).map(|t| crate::numkit::row_vec(&sj.s, t)).collect();
    let mut d = DenseMatrix::zeros(ni, nj);
    for (r, a) in rows_i.iter().enumerate() {
        for (t, b) in rows_j.iter().enumerate() {
            d[(r, t)] = crate::numkit::sq_dist(a, b);
        }
    }
    let count = (ni * nj) as f64;
    let mean = d.sum() / count;
    let var = if ni * nj > 1 {
        d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    let sigma = match mode {
        SigmaMode::StdDev => var.sqrt(),
        SigmaMode::Variance => var,
    };
    if sigma.is_nan() || sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::DegenerateSimilarity);
    }
    let denom = 2.0 * sigma * sigma;
    // entries stay strictly positive even for very distant pairs
    let pi = d.map(|v| (-(v * v) / denom).exp().max(f64::MIN_POSITIVE));
    Ok(CrossSimilarity { pi, sigma })
}
