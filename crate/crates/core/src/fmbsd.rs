//! Functional maps between spectral graph wavelet signatures: spectral
//! projection of descriptors, the convex map objective with its gradient,
//! the optimizer, and pointwise correspondence and retrieval on top of a map.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_knn_graph, laplacian, spectral_basis, FeatureMatrix, Laplacian, LaplacianFlavor,
    NeighborGraph, SpectralBasis,
};
use crate::numkit::{self, row_vec, DenseMatrix, NeighborIndex};
use crate::sgws::{kernels_for_basis, sgws_matrix, SigmaMode, SignatureMatrix, WaveletKernelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmbsdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_b: f64,
    pub lambda_w: f64,
    pub k_basis: usize,
    pub knn: usize,
    pub resolution: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub sigma_mode: SigmaMode,
    /// Laplacian used inside the within-modality smoothness term.
    pub smoothness_laplacian: LaplacianFlavor,
}

impl Default for FmbsdConfig {
    fn default() -> Self {
        FmbsdConfig {
            alpha: 0.1,
            beta: 1.0,
            lambda_b: 1e4,
            lambda_w: 1e4,
            k_basis: 60,
            knn: crate::graph::DEFAULT_KNN,
            resolution: 60,
            max_iters: 500,
            grad_tol: 1e-6,
            sigma_mode: SigmaMode::StdDev,
            smoothness_laplacian: LaplacianFlavor::Combinatorial,
        }
    }
}

impl FmbsdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_b", self.lambda_b),
            ("lambda_w", self.lambda_w),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!(
                    "{name} = {v} must be a nonnegative number"
                )));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::arg(
                "at least one of alpha and beta must be positive",
            ));
        }
        if self.k_basis == 0 || self.knn == 0 || self.resolution == 0 {
            return Err(Error::arg("k_basis, knn and resolution must be at least 1"));
        }
        if self.grad_tol.is_nan() || self.grad_tol <= 0.0 {
            return Err(Error::arg(format!(
                "grad_tol = {} must be positive",
                self.grad_tol
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda_b: self.lambda_b,
            lambda_w: self.lambda_w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_b: f64,
    pub lambda_w: f64,
}

/// Spectral coefficients `A = Δᵀ S` of every descriptor column (`k x q`).
#[derive(Debug, Clone)]
pub struct FourierCoefficients {
    pub a: DenseMatrix,
}

pub fn project_descriptors(
    basis: &SpectralBasis,
    s: &SignatureMatrix,
) -> Result<FourierCoefficients> {
    if basis.samples() != s.samples() {
        return Err(Error::arg(format!(
            "basis has {} rows, signatures have {}",
            basis.samples(),
            s.samples()
        )));
    }
    Ok(FourierCoefficients {
        a: basis.vectors.transpose() * &s.s,
    })
}

/// Multiplication-by-descriptor operators `Φ_k = Δ⁺ diag(s_k) Δ`.
#[derive(Debug, Clone)]
pub struct DescriptorOperators {
    pub phi: Vec<DenseMatrix>,
}

pub fn descriptor_operators(
    basis: &SpectralBasis,
    s: &SignatureMatrix,
) -> Result<DescriptorOperators> {
    if basis.samples() != s.samples() {
        return Err(Error::arg(format!(
            "basis has {} rows, signatures have {}",
            basis.samples(),
            s.samples()
        )));
    }
    let delta = &basis.vectors;
    let pinv = numkit::pinv(delta)?;
    let phi = (0..s.q())
        .map(|c| {
            let mut scaled = delta.clone();
            for (r, mut row) in scaled.row_iter_mut().enumerate() {
                row *= s.s[(r, c)];
            }
            &pinv * scaled
        })
        .collect();
    Ok(DescriptorOperators { phi })
}

/// Row and column sums of a cross-modal similarity matrix.
#[derive(Debug, Clone)]
pub struct SimilarityRowSums {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
}

impl SimilarityRowSums {
    pub fn new(pi: &DenseMatrix) -> Self {
        SimilarityRowSums {
            rows: pi.row_iter().map(|r| r.sum()).collect(),
            cols: pi.column_iter().map(|c| c.sum()).collect(),
        }
    }
}

/// Everything the map fit needs from one modality.
#[derive(Debug, Clone)]
pub struct ModalityBundle {
    pub id: String,
    pub graph: NeighborGraph,
    pub basis: SpectralBasis,
    pub kernels: WaveletKernelSpec,
    pub signatures: SignatureMatrix,
    pub coefficients: FourierCoefficients,
    pub operators: DescriptorOperators,
    /// Laplacian entering the within-modality smoothness term.
    pub smoothness: Laplacian,
}

pub fn prepare_modality(x: &FeatureMatrix, cfg: &FmbsdConfig) -> Result<ModalityBundle> {
    cfg.validate()?;
    let graph = build_knn_graph(x, cfg.knn)?;
    let normalized = laplacian(&graph, LaplacianFlavor::Normalized)?;
    let basis = spectral_basis(&normalized, cfg.k_basis.min(x.samples()))?;
    let kernels = kernels_for_basis(&basis, cfg.resolution)?;
    let signatures = sgws_matrix(x.id(), &basis, &kernels)?;
    let coefficients = project_descriptors(&basis, &signatures)?;
    let operators = descriptor_operators(&basis, &signatures)?;
    let smoothness = match cfg.smoothness_laplacian {
        LaplacianFlavor::Normalized => normalized,
        flavor => laplacian(&graph, flavor)?,
    };
    Ok(ModalityBundle {
        id: x.id().to_string(),
        graph,
        basis,
        kernels,
        signatures,
        coefficients,
        operators,
        smoothness,
    })
}

/// The quadratic map objective for one ordered modality pair, with every
/// `C`-independent product precomputed.
#[derive(Debug, Clone)]
pub struct MapProblem {
    w: ObjectiveWeights,
    ki: usize,
    kj: usize,
    q: usize,
    a_i: DenseMatrix,
    a_j: DenseMatrix,
    /// `[Φ_i^1; ...; Φ_i^q]`, `q k_i x k_i`
    phi_i_v: DenseMatrix,
    /// `[Φ_i^1ᵀ ... Φ_i^qᵀ]`, `k_i x q k_i`
    phi_i_ht: DenseMatrix,
    /// `[Φ_j^1 ... Φ_j^q]`, `k_j x q k_j`
    phi_j_h: DenseMatrix,
    /// `[Φ_j^1ᵀ; ...; Φ_j^qᵀ]`, `q k_j x k_j`
    phi_j_vt: DenseMatrix,
    /// `Δ_iᵀ D_Π Δ_i`
    m_b: DenseMatrix,
    /// `Δ_iᵀ Π Δ_j`
    cross: DenseMatrix,
    /// `tr(Δ_jᵀ D̃_Π Δ_j)`
    const_b: f64,
    /// `Δ_iᵀ L_i Δ_i`
    m_w: DenseMatrix,
}

impl MapProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_i: &DenseMatrix,
        a_j: &DenseMatrix,
        phi_i: &[DenseMatrix],
        phi_j: &[DenseMatrix],
        pi: &DenseMatrix,
        delta_i: &DenseMatrix,
        delta_j: &DenseMatrix,
        l_i: &DenseMatrix,
        w: ObjectiveWeights,
    ) -> Result<Self> {
        let (ni, ki) = delta_i.shape();
        let (nj, kj) = delta_j.shape();
        let q = a_i.ncols();
        let shape_err = |what: &str| {
            Err(Error::arg(format!(
                "map problem: {what} has the wrong shape"
            )))
        };
        if a_i.nrows() != ki {
            return shape_err("A_i");
        }
        if a_j.shape() != (kj, q) {
            return shape_err("A_j");
        }
        if phi_i.len() != phi_j.len() {
            return shape_err("descriptor operator list");
        }
        if phi_i.iter().any(|p| p.shape() != (ki, ki)) {
            return shape_err("Φ_i");
        }
        if phi_j.iter().any(|p| p.shape() != (kj, kj)) {
            return shape_err("Φ_j");
        }
        if pi.shape() != (ni, nj) {
            return shape_err("Π");
        }
        if l_i.shape() != (ni, ni) {
            return shape_err("L_i");
        }
        let nq = phi_i.len();
        let mut phi_i_v = DenseMatrix::zeros(nq * ki, ki);
        let mut phi_j_h = DenseMatrix::zeros(kj, nq * kj);
        for (k, (pi_k, pj_k)) in phi_i.iter().zip(phi_j).enumerate() {
            phi_i_v.view_mut((k * ki, 0), (ki, ki)).copy_from(pi_k);
            phi_j_h.view_mut((0, k * kj), (kj, kj)).copy_from(pj_k);
        }
        let sums = SimilarityRowSums::new(pi);
        let mut weighted_i = delta_i.clone();
        for (r, mut row) in weighted_i.row_iter_mut().enumerate() {
            row *= sums.rows[r];
        }
        let m_b = delta_i.transpose() * weighted_i;
        let cross = delta_i.transpose() * (pi * delta_j);
        let const_b = (0..nj)
            .map(|t| sums.cols[t] * delta_j.row(t).norm_squared())
            .sum();
        let m_w = delta_i.transpose() * (l_i * delta_i);
        Ok(MapProblem {
            w,
            ki,
            kj,
            q: nq,
            a_i: a_i.clone(),
            a_j: a_j.clone(),
            phi_i_ht: phi_i_v.transpose(),
            phi_i_v,
            phi_j_vt: phi_j_h.transpose(),
            phi_j_h,
            m_b,
            cross,
            const_b,
            m_w,
        })
    }

    pub fn from_bundles(
        bi: &ModalityBundle,
        bj: &ModalityBundle,
        pi: &DenseMatrix,
        w: ObjectiveWeights,
    ) -> Result<Self> {
        MapProblem::new(
            &bi.coefficients.a,
            &bj.coefficients.a,
            &bi.operators.phi,
            &bj.operators.phi,
            pi,
            &bi.basis.vectors,
            &bj.basis.vectors,
            &bi.smoothness.matrix,
            w,
        )
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ki, self.kj)
    }

    fn check(&self, c: &DenseMatrix) -> Result<()> {
        if c.shape() != (self.ki, self.kj) {
            return Err(Error::arg(format!(
                "map is {}x{}, expected {}x{}",
                c.nrows(),
                c.ncols(),
                self.ki,
                self.kj
            )));
        }
        Ok(())
    }

    /// Stacked commutators `E_k = Φ_i^k C − C Φ_j^k`, returning
    /// `Σ ||E_k||²` and `Σ (Φ_i^kᵀ E_k − E_k Φ_j^kᵀ)`.
    fn commutators(&self, c: &DenseMatrix, want_grad: bool) -> (f64, Option<DenseMatrix>) {
        if self.q == 0 || self.w.beta == 0.0 {
            return (0.0, want_grad.then(|| DenseMatrix::zeros(self.ki, self.kj)));
        }
        let (ki, kj) = (self.ki, self.kj);
        let mut e_v = &self.phi_i_v * c;
        let c_phi = c * &self.phi_j_h;
        for k in 0..self.q {
            let mut block = e_v.view_mut((k * ki, 0), (ki, kj));
            block -= c_phi.view((0, k * kj), (ki, kj));
        }
        let sum_sq = e_v.norm_squared();
        if !want_grad {
            return (sum_sq, None);
        }
        let mut e_h = DenseMatrix::zeros(ki, self.q * kj);
        for k in 0..self.q {
            e_h.view_mut((0, k * kj), (ki, kj))
                .copy_from(&e_v.view((k * ki, 0), (ki, kj)));
        }
        let grad = &self.phi_i_ht * &e_v - &e_h * &self.phi_j_vt;
        (sum_sq, Some(grad))
    }

    fn value(&self, c: &DenseMatrix, comm: f64) -> f64 {
        let w = &self.w;
        let data = (c.transpose() * &self.a_i - &self.a_j).norm_squared();
        let between =
            (c.transpose() * &self.m_b * c).trace() - 2.0 * c.dot(&self.cross) + self.const_b;
        let within = (c.transpose() * &self.m_w * c).trace();
        w.alpha * data + w.beta * comm + w.lambda_b * between + w.lambda_w * within
    }

    pub fn objective(&self, c: &DenseMatrix) -> Result<f64> {
        self.check(c)?;
        let (comm, _) = self.commutators(c, false);
        Ok(self.value(c, comm))
    }

    pub fn gradient(&self, c: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.objective_and_gradient(c)?.1)
    }

    pub fn objective_and_gradient(&self, c: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
        self.check(c)?;
        let w = &self.w;
        let (comm, comm_grad) = self.commutators(c, true);
        let residual = c.transpose() * &self.a_i - &self.a_j;
        let mut g = &self.a_i * residual.transpose() * (2.0 * w.alpha);
        g += comm_grad.expect("requested") * (2.0 * w.beta);
        g += (&self.m_b * c - &self.cross) * (2.0 * w.lambda_b);
        g += &self.m_w * c * (2.0 * w.lambda_w);
        Ok((self.value(c, comm), g))
    }

    /// Hessian applied to `d` (the gradient of the homogeneous quadratic part).
    fn hessian_apply(&self, d: &DenseMatrix) -> DenseMatrix {
        let w = &self.w;
        let (_, comm_grad) = self.commutators(d, true);
        let mut h = &self.a_i * (d.transpose() * &self.a_i).transpose() * (2.0 * w.alpha);
        h += comm_grad.expect("requested") * (2.0 * w.beta);
        h += &self.m_b * d * (2.0 * w.lambda_b);
        h += &self.m_w * d * (2.0 * w.lambda_w);
        h
    }
}

/// `I` padded with zeros to `rows x cols`.
pub fn rectangular_identity(rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::identity(rows, cols)
}

#[derive(Debug, Clone)]
pub struct FunctionalMap {
    pub c: DenseMatrix,
    pub source: String,
    pub target: String,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Objective at the start point and after every accepted step.
    pub trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl From<&FmbsdConfig> for OptimizerSettings {
    fn from(cfg: &FmbsdConfig) -> Self {
        OptimizerSettings {
            max_iters: cfg.max_iters,
            grad_tol: cfg.grad_tol,
        }
    }
}

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
/// Recompute the gradient from scratch this often instead of updating it.
const GRADIENT_REFRESH: usize = 25;

/// Minimize the map objective from `c0` by nonlinear conjugate gradients
/// (Polak-Ribière, restarted on loss of descent). Each step goes to the exact
/// minimizer along the search direction; Armijo backtracking is the fallback
/// when the direction has no positive curvature.
pub fn minimize(
    problem: &MapProblem,
    c0: DenseMatrix,
    settings: OptimizerSettings,
) -> Result<(DenseMatrix, Vec<f64>, usize, bool)> {
    let mut c = c0;
    let (mut f, mut g) = problem.objective_and_gradient(&c)?;
    if !f.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut trace = vec![f];
    let mut dir = -&g;
    let mut g_sq = g.norm_squared();
    let mut since_refresh = 0;
    for iter in 0..settings.max_iters {
        if g_sq.sqrt() <= settings.grad_tol {
            return Ok((c, trace, iter, true));
        }
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            dir = -&g;
            slope = -g_sq;
        }
        let h_dir = problem.hessian_apply(&dir);
        let curvature = dir.dot(&h_dir);
        let mut t;
        let accepted = if curvature > 0.0 {
            // the objective is quadratic: the exact minimizer along `dir` and
            // its value are known without evaluating it
            t = -slope / curvature;
            if !t.is_finite() {
                return Err(Error::Divergence {
                    iteration: iter + 1,
                });
            }
            Some((&c + &dir * t, f + 0.5 * t * slope))
        } else {
            t = 1.0;
            let mut found = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial = &c + &dir * t;
                let ft = problem.objective(&trial)?;
                if !ft.is_finite() {
                    return Err(Error::Divergence {
                        iteration: iter + 1,
                    });
                }
                if ft <= f + ARMIJO_C1 * t * slope {
                    found = Some((trial, ft));
                    break;
                }
                t *= BACKTRACK;
            }
            found
        };
        let Some((next, f_next)) = accepted else {
            // no decrease representable at this precision
            return Ok((c, trace, iter, false));
        };
        let f_prev = f;
        c = next;
        since_refresh += 1;
        let g_next = if since_refresh >= GRADIENT_REFRESH {
            since_refresh = 0;
            let (fe, ge) = problem.objective_and_gradient(&c)?;
            f = fe;
            ge
        } else {
            f = f_next;
            &g + &h_dir * t
        };
        // guard against an exact recomputation nudging above the previous value
        f = f.min(f_prev);
        trace.push(f);
        let g_next_sq = g_next.norm_squared();
        let pr = ((g_next_sq - g_next.dot(&g)) / g_sq).max(0.0);
        dir = &dir * pr - &g_next;
        g = g_next;
        g_sq = g_next_sq;
    }
    let (_, g_exact) = problem.objective_and_gradient(&c)?;
    let converged = g_exact.norm() <= settings.grad_tol;
    Ok((c, trace, settings.max_iters, converged))
}

/// Fit the functional map from modality `bi` to modality `bj`.
pub fn fit_map(
    bi: &ModalityBundle,
    bj: &ModalityBundle,
    pi: &DenseMatrix,
    cfg: &FmbsdConfig,
) -> Result<FunctionalMap> {
    cfg.validate()?;
    let problem = MapProblem::from_bundles(bi, bj, pi, cfg.weights())?;
    fit_problem(&problem, &bi.id, &bj.id, cfg.into())
}

pub fn fit_problem(
    problem: &MapProblem,
    source: &str,
    target: &str,
    settings: OptimizerSettings,
) -> Result<FunctionalMap> {
    let (ki, kj) = problem.shape();
    let (c, trace, iterations, converged) =
        minimize(problem, rectangular_identity(ki, kj), settings)?;
    let (objective, g) = problem.objective_and_gradient(&c)?;
    if !objective.is_finite() {
        return Err(Error::Divergence {
            iteration: iterations,
        });
    }
    numkit::ensure_finite(&c, "functional map")?;
    Ok(FunctionalMap {
        c,
        source: source.to_string(),
        target: target.to_string(),
        objective,
        gradient_norm: g.norm(),
        iterations,
        trace,
        converged,
    })
}

/// Pointwise assignment of every source sample to one target sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceMatrix {
    /// `rho[r]` is the 0-based target index matched to source row `r`.
    pub rho: Vec<usize>,
    pub targets: usize,
}

impl CorrespondenceMatrix {
    pub fn new(rho: Vec<usize>, targets: usize) -> Result<Self> {
        if let Some(&bad) = rho.iter().find(|&&t| t >= targets) {
            return Err(Error::arg(format!(
                "correspondence target {bad} out of range for {targets} targets"
            )));
        }
        Ok(CorrespondenceMatrix { rho, targets })
    }

    pub fn sources(&self) -> usize {
        self.rho.len()
    }

    /// Dense `N_i x N_j` 0/1 view with one 1 per row.
    pub fn dense(&self) -> DenseMatrix {
        let mut p = DenseMatrix::zeros(self.rho.len(), self.targets);
        for (r, &t) in self.rho.iter().enumerate() {
            p[(r, t)] = 1.0;
        }
        p
    }

    /// Fraction of rows whose assignment equals `truth`.
    pub fn agreement(&self, truth: &[usize]) -> Result<f64> {
        if truth.len() != self.rho.len() {
            return Err(Error::arg(format!(
                "ground truth has {} rows, correspondence has {}",
                truth.len(),
                self.rho.len()
            )));
        }
        let hits = self.rho.iter().zip(truth).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / truth.len().max(1) as f64)
    }
}

fn mapped_rows(
    delta_i: &DenseMatrix,
    c: &DenseMatrix,
    delta_j: &DenseMatrix,
) -> Result<DenseMatrix> {
    if delta_i.ncols() != c.nrows() || c.ncols() != delta_j.ncols() {
        return Err(Error::arg(format!(
            "cannot map a {}-column basis through a {}x{} map onto a {}-column basis",
            delta_i.ncols(),
            c.nrows(),
            c.ncols(),
            delta_j.ncols()
        )));
    }
    if delta_j.nrows() == 0 {
        return Err(Error::arg("target basis has no rows"));
    }
    Ok(delta_i * c)
}

/// Match every row of `Δ_i C` to its nearest row of `Δ_j`.
pub fn extract_correspondences(
    delta_i: &DenseMatrix,
    c: &DenseMatrix,
    delta_j: &DenseMatrix,
) -> Result<CorrespondenceMatrix> {
    let gamma = mapped_rows(delta_i, c, delta_j)?;
    nearest_rows(&gamma, delta_j)
}

/// Nearest row of `reference` for every row of `queries`.
pub fn nearest_rows(
    queries: &DenseMatrix,
    reference: &DenseMatrix,
) -> Result<CorrespondenceMatrix> {
    let index = NeighborIndex::new(reference);
    let rho = (0..queries.nrows())
        .map(|r| Ok(numkit::nn_query(&index, &row_vec(queries, r), 1)?[0]))
        .collect::<Result<Vec<_>>>()?;
    CorrespondenceMatrix::new(rho, reference.nrows())
}

/// Correspondences from matching signature rows directly, without a map.
pub fn descriptor_correspondences(
    si: &SignatureMatrix,
    sj: &SignatureMatrix,
) -> Result<CorrespondenceMatrix> {
    if si.q() != sj.q() {
        return Err(Error::arg("signature widths differ"));
    }
    nearest_rows(&si.s, &sj.s)
}

/// The `k_ret` rows of `Δ_j` nearest to row `r` of `Δ_i C`, nearest first.
pub fn retrieve(
    delta_i: &DenseMatrix,
    c: &DenseMatrix,
    delta_j: &DenseMatrix,
    r: usize,
    k_ret: usize,
) -> Result<Vec<usize>> {
    if r >= delta_i.nrows() {
        return Err(Error::arg(format!("query row {r} out of range")));
    }
    if k_ret == 0 || k_ret > delta_j.nrows() {
        return Err(Error::arg(format!(
            "k_ret = {k_ret} must lie in 1..={}",
            delta_j.nrows()
        )));
    }
    let gamma = mapped_rows(&delta_i.rows(r, 1).into_owned(), c, delta_j)?;
    let index = NeighborIndex::new(delta_j);
    numkit::nn_query(&index, &row_vec(&gamma, 0), k_ret)
}

/// Ranked target lists for every source row.
pub fn retrieve_all(
    delta_i: &DenseMatrix,
    c: &DenseMatrix,
    delta_j: &DenseMatrix,
    k_ret: usize,
) -> Result<Vec<Vec<usize>>> {
    if k_ret == 0 || k_ret > delta_j.nrows() {
        return Err(Error::arg(format!(
            "k_ret = {k_ret} must lie in 1..={}",
            delta_j.nrows()
        )));
    }
    let gamma = mapped_rows(delta_i, c, delta_j)?;
    let index = NeighborIndex::new(delta_j);
    (0..gamma.nrows())
        .map(|r| numkit::nn_query(&index, &row_vec(&gamma, r), k_ret))
        .collect()
}

/// `Σ_r Σ_t π_rt ||γ_r − δ_t||²` evaluated literally; reference for the trace form.
pub fn between_double_sum(
    delta_i: &DenseMatrix,
    c: &DenseMatrix,
    delta_j: &DenseMatrix,
    pi: &DenseMatrix,
) -> f64 {
    let gamma = delta_i * c;
    let mut total = 0.0;
    for r in 0..gamma.nrows() {
        let gr: DVector<f64> = gamma.row(r).transpose();
        for t in 0..delta_j.nrows() {
            let dt: DVector<f64> = delta_j.row(t).transpose();
            total += pi[(r, t)] * (&gr - &dt).norm_squared();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        rand_mat(n, k, rng).qr().q()
    }

    fn random_laplacian(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let w = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        let w = (&w + w.transpose()) * 0.5;
        let mut l = -w.clone();
        for r in 0..n {
            l[(r, r)] = w.row(r).sum() - w[(r, r)];
        }
        l
    }

    struct Instance {
        problem: MapProblem,
        delta_i: DenseMatrix,
        delta_j: DenseMatrix,
        pi: DenseMatrix,
        ki: usize,
        kj: usize,
    }

    fn instance(rng: &mut ChaCha8Rng, w: ObjectiveWeights) -> Instance {
        let ki = rng.random_range(2..=8);
        let kj = rng.random_range(2..=8);
        let q = rng.random_range(1..=5);
        let ni = rng.random_range(ki..=20);
        let nj = rng.random_range(kj..=20);
        let delta_i = orthonormal(ni, ki, rng);
        let delta_j = orthonormal(nj, kj, rng);
        let a_i = rand_mat(ki, q, rng);
        let a_j = rand_mat(kj, q, rng);
        let phi_i: Vec<_> = (0..q).map(|_| rand_mat(ki, ki, rng)).collect();
        let phi_j: Vec<_> = (0..q).map(|_| rand_mat(kj, kj, rng)).collect();
        let pi = DenseMatrix::from_fn(ni, nj, |_, _| rng.random_range(0.01..1.0));
        let l_i = random_laplacian(ni, rng);
        let problem =
            MapProblem::new(&a_i, &a_j, &phi_i, &phi_j, &pi, &delta_i, &delta_j, &l_i, w).unwrap();
        Instance {
            problem,
            delta_i,
            delta_j,
            pi,
            ki,
            kj,
        }
    }

    const ALL_ON: ObjectiveWeights = ObjectiveWeights {
        alpha: 0.7,
        beta: 1.3,
        lambda_b: 0.9,
        lambda_w: 0.4,
    };

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let inst = instance(&mut rng, ALL_ON);
            let c = rand_mat(inst.ki, inst.kj, &mut rng);
            let g = inst.problem.gradient(&c).unwrap();
            let h = 1e-5;
            for r in 0..inst.ki {
                for s in 0..inst.kj {
                    let mut cp = c.clone();
                    cp[(r, s)] += h;
                    let mut cm = c.clone();
                    cm[(r, s)] -= h;
                    let fd = (inst.problem.objective(&cp).unwrap()
                        - inst.problem.objective(&cm).unwrap())
                        / (2.0 * h);
                    assert!((fd - g[(r, s)]).abs() <= 1e-5 * g[(r, s)].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn trace_form_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let only_b = ObjectiveWeights {
            alpha: 0.0,
            beta: 0.0,
            lambda_b: 1.0,
            lambda_w: 0.0,
        };
        for _ in 0..10 {
            let inst = instance(&mut rng, only_b);
            let c = rand_mat(inst.ki, inst.kj, &mut rng);
            let trace = inst.problem.objective(&c).unwrap();
            let sum = between_double_sum(&inst.delta_i, &c, &inst.delta_j, &inst.pi);
            assert!((trace - sum).abs() <= 1e-9 * sum.max(1.0));
        }
    }

    #[test]
    fn objective_is_convex_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let inst = instance(&mut rng, ALL_ON);
            let c1 = rand_mat(inst.ki, inst.kj, &mut rng) * 3.0;
            let c2 = rand_mat(inst.ki, inst.kj, &mut rng) * 3.0;
            let t: f64 = rng.random_range(0.0..1.0);
            let mid = &c1 * t + &c2 * (1.0 - t);
            let p = &inst.problem;
            let lhs = p.objective(&mid).unwrap();
            let rhs = t * p.objective(&c1).unwrap() + (1.0 - t) * p.objective(&c2).unwrap();
            assert!(lhs <= rhs + 1e-9 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn objective_special_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let delta = orthonormal(10, 4, &mut rng);
        let a = rand_mat(4, 3, &mut rng);
        let phi: Vec<_> = (0..3).map(|_| rand_mat(4, 4, &mut rng)).collect();
        let pi = DenseMatrix::from_element(10, 10, 0.5);
        let l = random_laplacian(10, &mut rng);
        let w = ObjectiveWeights {
            alpha: 0.3,
            beta: 2.0,
            lambda_b: 0.0,
            lambda_w: 0.0,
        };
        let p = MapProblem::new(&a, &a, &phi, &phi, &pi, &delta, &delta, &l, w).unwrap();
        assert_eq!(p.objective(&DenseMatrix::identity(4, 4)).unwrap(), 0.0);

        let only_a = ObjectiveWeights {
            alpha: 1.0,
            beta: 0.0,
            lambda_b: 0.0,
            lambda_w: 0.0,
        };
        let aj = rand_mat(4, 3, &mut rng);
        let p = MapProblem::new(&a, &aj, &phi, &phi, &pi, &delta, &delta, &l, only_a).unwrap();
        let v = p.objective(&DenseMatrix::zeros(4, 4)).unwrap();
        assert!((v - aj.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn zero_terms_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let delta = orthonormal(8, 3, &mut rng);
        let a = rand_mat(3, 2, &mut rng);
        let phi: Vec<_> = (0..2).map(|_| rand_mat(3, 3, &mut rng)).collect();
        let w = ObjectiveWeights {
            alpha: 0.0,
            beta: 0.0,
            lambda_b: 5.0,
            lambda_w: 0.0,
        };
        let p = MapProblem::new(
            &a,
            &a,
            &phi,
            &phi,
            &DenseMatrix::zeros(8, 8),
            &delta,
            &delta,
            &random_laplacian(8, &mut rng),
            w,
        )
        .unwrap();
        let g = p.gradient(&rand_mat(3, 3, &mut rng)).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inst = instance(&mut rng, ALL_ON);
        let bad = DenseMatrix::zeros(inst.ki + 1, inst.kj);
        assert!(matches!(
            inst.problem.objective(&bad),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            inst.problem.gradient(&bad),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn minimizer_reaches_stationarity_and_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = ObjectiveWeights {
            alpha: 1.0,
            beta: 0.5,
            lambda_b: 0.0,
            lambda_w: 0.1,
        };
        for _ in 0..5 {
            let inst = instance(&mut rng, w);
            let settings = OptimizerSettings {
                max_iters: 2000,
                grad_tol: 1e-10,
            };
            let map = fit_problem(&inst.problem, "i", "j", settings).unwrap();
            assert!(map.trace.windows(2).all(|p| p[1] <= p[0]));
            assert!(map.gradient_norm <= 1e-8, "gradient {}", map.gradient_norm);
            assert!(
                (map.objective - inst.problem.objective(&map.c).unwrap()).abs()
                    <= 1e-9 * map.objective.max(1.0)
            );
        }
    }

    #[test]
    fn projection_and_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let full = orthonormal(6, 6, &mut rng);
        let basis = SpectralBasis {
            eigenvalues: vec![0.0; 6],
            vectors: full.clone(),
            flavor: LaplacianFlavor::Normalized,
        };
        let mut s = rand_mat(6, 3, &mut rng);
        s.column_mut(1).fill(2.5);
        s.column_mut(2).fill(0.0);
        let sig = SignatureMatrix {
            id: "m".into(),
            s: s.clone(),
        };
        let a = project_descriptors(&basis, &sig).unwrap();
        assert!((a.a.norm() - s.norm()).abs() < 1e-12);
        assert!((&full * &a.a - &s).amax() < 1e-12);
        for l in 0..6 {
            for c in 0..3 {
                assert!((a.a[(l, c)] - full.column(l).dot(&s.column(c))).abs() < 1e-14);
            }
        }
        let ops = descriptor_operators(&basis, &sig).unwrap();
        assert!((&ops.phi[1] - DenseMatrix::identity(6, 6) * 2.5).amax() < 1e-10);
        assert_eq!(ops.phi[2].amax(), 0.0);

        let partial = SpectralBasis {
            eigenvalues: vec![0.0; 3],
            vectors: orthonormal(6, 3, &mut rng),
            flavor: LaplacianFlavor::Normalized,
        };
        let ops = descriptor_operators(&partial, &sig).unwrap();
        let explicit = numkit::pinv(&partial.vectors).unwrap()
            * DenseMatrix::from_diagonal(&s.column(0).into_owned())
            * &partial.vectors;
        assert!((&ops.phi[0] - explicit).amax() < 1e-10);

        let short = SignatureMatrix {
            id: "m".into(),
            s: rand_mat(5, 3, &mut rng),
        };
        assert!(matches!(
            project_descriptors(&basis, &short),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            descriptor_operators(&basis, &short),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn correspondences_follow_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = rand_mat(30, 5, &mut rng);
        let id = DenseMatrix::identity(5, 5);
        let same = extract_correspondences(&delta, &id, &delta).unwrap();
        assert_eq!(same.rho, (0..30).collect::<Vec<_>>());
        let mut perm: Vec<usize> = (0..30).collect();
        perm.shuffle(&mut rng);
        // row t of the target is source row perm[t]
        let permuted = DenseMatrix::from_fn(30, 5, |t, c| delta[(perm[t], c)]);
        let rho = extract_correspondences(&delta, &id, &permuted).unwrap();
        for r in 0..30 {
            assert_eq!(perm[rho.rho[r]], r);
        }
        let p = rho.dense();
        for r in 0..30 {
            assert_eq!(p.row(r).sum(), 1.0);
            assert_eq!(p[(r, rho.rho[r])], 1.0);
        }
    }

    #[test]
    fn correspondences_match_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let di = rand_mat(40, 6, &mut rng);
        let dj = rand_mat(25, 4, &mut rng);
        let c = rand_mat(6, 4, &mut rng);
        let rho = extract_correspondences(&di, &c, &dj).unwrap();
        let gamma = &di * &c;
        for r in 0..40 {
            let mut scored: Vec<(f64, usize)> = (0..25)
                .map(|t| ((gamma.row(r) - dj.row(t)).norm_squared(), t))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            assert_eq!(rho.rho[r], scored[0].1);
            let top5 = retrieve(&di, &c, &dj, r, 5).unwrap();
            assert_eq!(top5, scored.iter().take(5).map(|s| s.1).collect::<Vec<_>>());
            assert_eq!(retrieve(&di, &c, &dj, r, 1).unwrap(), vec![rho.rho[r]]);
        }
        let mut all = retrieve(&di, &c, &dj, 3, 25).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
        assert!(matches!(
            retrieve(&di, &c, &dj, 0, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            retrieve(&di, &c, &dj, 0, 26),
            Err(Error::Argument(_))
        ));
        let lists = retrieve_all(&di, &c, &dj, 3).unwrap();
        assert_eq!(lists[7], retrieve(&di, &c, &dj, 7, 3).unwrap());
    }

    fn two_clusters(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(n, 3, |r, c| {
            let centre = if c == 0 { (r % 3) as f64 * 0.8 } else { 0.0 };
            centre + rng.random_range(-1.0..1.0)
        })
    }

    #[test]
    fn permuted_copy_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = two_clusters(80, &mut rng);
        let mut perm: Vec<usize> = (0..80).collect();
        perm.shuffle(&mut rng);
        let xi = FeatureMatrix::new("a", x.clone()).unwrap();
        let xj = xi.select_rows(&perm).unwrap();
        let cfg = FmbsdConfig {
            lambda_b: 0.0,
            lambda_w: 0.0,
            k_basis: 20,
            resolution: 12,
            ..FmbsdConfig::default()
        };
        let bi = prepare_modality(&xi, &cfg).unwrap();
        let bj = prepare_modality(&xj, &cfg).unwrap();
        let pi = crate::sgws::cross_similarity(&bi.signatures, &bj.signatures, cfg.sigma_mode)
            .unwrap()
            .pi;
        let map = fit_map(&bi, &bj, &pi, &cfg).unwrap();
        let rho = extract_correspondences(&bi.basis.vectors, &map.c, &bj.basis.vectors).unwrap();
        let truth: Vec<usize> = {
            let mut inv = vec![0; 80];
            for (t, &r) in perm.iter().enumerate() {
                inv[r] = t;
            }
            inv
        };
        assert!(rho.agreement(&truth).unwrap() >= 0.95);
        let start = rectangular_identity(20, 20);
        let problem = MapProblem::from_bundles(&bi, &bj, &pi, cfg.weights()).unwrap();
        assert!(map.objective <= problem.objective(&start).unwrap());
    }

    #[test]
    fn exact_copy_converges_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = FeatureMatrix::new("a", two_clusters(60, &mut rng)).unwrap();
        let cfg = FmbsdConfig {
            lambda_b: 0.0,
            lambda_w: 0.0,
            k_basis: 15,
            resolution: 8,
            ..FmbsdConfig::default()
        };
        let b = prepare_modality(&x, &cfg).unwrap();
        let pi = DenseMatrix::from_element(60, 60, 0.5);
        let map = fit_map(&b, &b, &pi, &cfg).unwrap();
        assert!(map.objective <= 1e-8);
        assert!((&map.c - DenseMatrix::identity(15, 15)).amax() <= 1e-4);
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = FmbsdConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: FmbsdConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let partial: FmbsdConfig = serde_json::from_str(r#"{"alpha": 2.0}"#).unwrap();
        assert_eq!(partial.alpha, 2.0);
        assert_eq!(partial.lambda_w, 1e4);
        let bad = FmbsdConfig {
            alpha: 0.0,
            beta: 0.0,
            ..FmbsdConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<FmbsdConfig>(r#"{"alpah": 2.0}"#).is_err());
    }
}
