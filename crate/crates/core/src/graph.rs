//! Per-modality neighborhood graphs, Laplacians and truncated spectral bases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, row_vec, sq_dist, DenseMatrix, NeighborIndex};

pub const DEFAULT_KNN: usize = 5;

/// Samples of one modality, one per row.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    id: String,
    data: DenseMatrix,
}

impl FeatureMatrix {
    pub fn new(id: impl Into<String>, data: DenseMatrix) -> Result<Self> {
        let id = id.into();
        if data.nrows() < 2 {
            return Err(Error::arg(format!(
                "modality `{id}` needs at least 2 samples, got {}",
                data.nrows()
            )));
        }
        if data.ncols() < 1 {
            return Err(Error::arg(format!(
                "modality `{id}` has no feature columns"
            )));
        }
        numkit::ensure_finite(&data, &format!("features of `{id}`"))?;
        Ok(FeatureMatrix { id, data })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.data
    }

    pub fn samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Rows reordered so that row `i` of the result is row `order[i]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Result<Self> {
        let data = DenseMatrix::from_fn(order.len(), self.dim(), |r, c| self.data[(order[r], c)]);
        FeatureMatrix::new(self.id.clone(), data)
    }
}

/// Symmetric Gaussian-weighted k-nearest-neighbor graph.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub weights: DenseMatrix,
    pub k: usize,
    pub sigma: f64,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }
}

/// Build the kNN graph with weights `exp(-|x_r - x_t|^2 / (2 sigma^2))` on
/// pairs where either endpoint is among the other's `k` nearest neighbors.
///
/// `sigma` is the mean over samples of the mean Euclidean distance to their
/// `k` nearest neighbors.
pub fn build_knn_graph(x: &FeatureMatrix, k: usize) -> Result<NeighborGraph> {
    let n = x.samples();
    if k == 0 || k >= n {
        return Err(Error::arg(format!("knn k = {k} must lie in 1..{n}")));
    }
    let index = NeighborIndex::new(x.data());
    let rows: Vec<Vec<f64>> = (0..n).map(|r| row_vec(x.data(), r)).collect();

    let mut neighbors = Vec::with_capacity(n);
    let mut dist_sum = 0.0;
    for (r, row) in rows.iter().enumerate() {
        let mut found = index.query(row, k + 1)?;
        // drop self; with duplicates self may not come first
        match found.iter().position(|&i| i == r) {
            Some(p) => {
                found.remove(p);
            }
            None => {
                found.pop();
            }
        }
        dist_sum += found
            .iter()
            .map(|&t| sq_dist(row, &rows[t]).sqrt())
            .sum::<f64>()
            / k as f64;
        neighbors.push(found);
    }
    let sigma = dist_sum / n as f64;

    let mut weights = DenseMatrix::zeros(n, n);
    for (r, list) in neighbors.iter().enumerate() {
        for &t in list {
            let z = sq_dist(&rows[r], &rows[t]);
            let w = if sigma > 0.0 {
                (-z / (2.0 * sigma * sigma)).exp()
            } else {
                1.0
            };
            weights[(r, t)] = w;
            weights[(t, r)] = w;
        }
    }
    Ok(NeighborGraph { weights, k, sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianFlavor {
    /// `D^{-1/2} (D - W) D^{-1/2}`
    #[default]
    Normalized,
    /// `D - W`
    Combinatorial,
}

#[derive(Debug, Clone)]
pub struct Laplacian {
    pub matrix: DenseMatrix,
    pub flavor: LaplacianFlavor,
    pub degrees: Vec<f64>,
}

pub fn laplacian(graph: &NeighborGraph, flavor: LaplacianFlavor) -> Result<Laplacian> {
    laplacian_from_weights(&graph.weights, flavor)
}

pub fn laplacian_from_weights(w: &DenseMatrix, flavor: LaplacianFlavor) -> Result<Laplacian> {
    numkit::check_symmetric(w)?;
    let n = w.nrows();
    let degrees: Vec<f64> = (0..n).map(|r| w.row(r).sum()).collect();
    if let Some(vertex) = degrees.iter().position(|&d| d <= 0.0) {
        return Err(Error::DegenerateGraph { vertex });
    }
    let matrix = match flavor {
        LaplacianFlavor::Combinatorial => DenseMatrix::from_fn(n, n, |r, c| {
            if r == c {
                degrees[r] - w[(r, c)]
            } else {
                -w[(r, c)]
            }
        }),
        LaplacianFlavor::Normalized => {
            let s: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
            DenseMatrix::from_fn(n, n, |r, c| {
                let off = s[r] * w[(r, c)] * s[c];
                if r == c {
                    (degrees[r] - w[(r, c)]) * s[r] * s[r]
                } else {
                    -off
                }
            })
        }
    };
    Ok(Laplacian {
        matrix,
        flavor,
        degrees,
    })
}

/// The `k` lowest-frequency Laplacian eigenvectors of one modality.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub eigenvalues: Vec<f64>,
    pub vectors: DenseMatrix,
    pub flavor: LaplacianFlavor,
}

impl SpectralBasis {
    pub fn size(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn samples(&self) -> usize {
        self.vectors.nrows()
    }
}

pub fn spectral_basis(l: &Laplacian, k: usize) -> Result<SpectralBasis> {
    let pairs = numkit::sym_eig_smallest(&l.matrix, k)?;
    Ok(SpectralBasis {
        eigenvalues: pairs.values,
        vectors: pairs.vectors,
        flavor: l.flavor,
    })
}
