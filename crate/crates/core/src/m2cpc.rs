//! Manifold-regularized multimodal multiclass classification with a
//! Gaussian vector-valued kernel.
//!
//! Vectors of length `cN` are stored sample-major as `N x c` matrices, so a
//! Kronecker lift `M ⊗ I_c` acts as a plain left product `M Y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmbsd::CorrespondenceMatrix;
use crate::graph::FeatureMatrix;
use crate::numkit::{self, sq_dist, DenseMatrix};

/// Labels of one modality: `Some(class)` with classes numbered `1..=c`, `None` when unlabeled.
pub type Labels = Vec<Option<usize>>;

#[derive(Debug, Clone)]
pub struct LabelEncoding {
    pub classes: usize,
    /// Encoded targets of every modality stacked in labeled-first order, `N x c`.
    pub y: DenseMatrix,
    /// Labeled count per modality.
    pub labeled: Vec<usize>,
    /// Sample count per modality.
    pub sizes: Vec<usize>,
    /// `orders[i][p]` is the original row of modality `i` at internal position `p`.
    pub orders: Vec<Vec<usize>>,
}

impl LabelEncoding {
    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn total_labeled(&self) -> usize {
        self.labeled.iter().sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        offsets(&self.sizes)
    }

    /// Internal position of each original row, per modality.
    pub fn inverse_orders(&self) -> Vec<Vec<usize>> {
        self.orders
            .iter()
            .map(|order| {
                let mut inv = vec![0; order.len()];
                for (p, &r) in order.iter().enumerate() {
                    inv[r] = p;
                }
                inv
            })
            .collect()
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .iter()
        .map(|&n| {
            let o = acc;
            acc += n;
            o
        })
        .collect()
}

/// `+1` at the true class and `-1` elsewhere for labeled samples, zeros for
/// unlabeled ones; labeled samples move to the front of each modality.
pub fn encode_labels(labels: &[Labels], classes: usize) -> Result<LabelEncoding> {
    if classes < 2 {
        return Err(Error::arg(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut orders = Vec::with_capacity(labels.len());
    let mut labeled = Vec::with_capacity(labels.len());
    let sizes: Vec<usize> = labels.iter().map(|l| l.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut y = DenseMatrix::zeros(total, classes);
    let mut row = 0;
    for (m, lab) in labels.iter().enumerate() {
        if let Some((r, bad)) = lab
            .iter()
            .enumerate()
            .find_map(|(r, l)| l.filter(|&v| v == 0 || v > classes).map(|v| (r, v)))
        {
            return Err(Error::arg(format!(
                "modality {m} row {r}: label {bad} outside 1..={classes}"
            )));
        }
        let order: Vec<usize> = (0..lab.len())
            .filter(|&r| lab[r].is_some())
            .chain((0..lab.len()).filter(|&r| lab[r].is_none()))
            .collect();
        let count = lab.iter().filter(|l| l.is_some()).count();
        for &r in &order[..count] {
            let class = lab[r].expect("labeled prefix");
            y.row_mut(row).fill(-1.0);
            y[(row, class - 1)] = 1.0;
            row += 1;
        }
        row += lab.len() - count;
        orders.push(order);
        labeled.push(count);
    }
    Ok(LabelEncoding {
        classes,
        y,
        labeled,
        sizes,
        orders,
    })
}

/// Diagonal of the label mask over samples: 1 on the first `l_i` samples of each modality.
pub fn label_mask(labeled: &[usize], sizes: &[usize]) -> Result<Vec<f64>> {
    if labeled.len() != sizes.len() {
        return Err(Error::arg("labeled counts and sizes differ in length"));
    }
    let mut mask = Vec::with_capacity(sizes.iter().sum());
    for (&l, &n) in labeled.iter().zip(sizes) {
        if l > n {
            return Err(Error::arg(format!(
                "{l} labeled samples exceed modality size {n}"
            )));
        }
        mask.extend(std::iter::repeat_n(1.0, l));
        mask.extend(std::iter::repeat_n(0.0, n - l));
    }
    Ok(mask)
}

/// The full `cN x cN` label mask `J`.
pub fn build_j(labeled: &[usize], sizes: &[usize], classes: usize) -> Result<DenseMatrix> {
    let mask = label_mask(labeled, sizes)?;
    Ok(kron_identity(
        &DenseMatrix::from_diagonal(&mask.into()),
        classes,
    ))
}

/// `m ⊗ I_c`.
pub fn kron_identity(m: &DenseMatrix, c: usize) -> DenseMatrix {
    m.kronecker(&DenseMatrix::identity(c, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MpMode {
    /// Sum of the Laplacians of the matched-pair graphs.
    #[default]
    LaplacianExact,
    /// `(m-1) I` diagonal blocks and `-P` off-diagonal blocks.
    UniformDiagonal,
}

/// One set of correspondences from modality `source` into modality `target`.
#[derive(Debug, Clone)]
pub struct PairCorrespondence {
    pub source: usize,
    pub target: usize,
    pub map: CorrespondenceMatrix,
}

/// The `N x N` between-modality operator from pairwise correspondences.
pub fn build_mp(
    pairs: &[PairCorrespondence],
    sizes: &[usize],
    mode: MpMode,
) -> Result<DenseMatrix> {
    let m = sizes.len();
    let n: usize = sizes.iter().sum();
    let off = offsets(sizes);
    let mut mp = DenseMatrix::zeros(n, n);
    for pair in pairs {
        let (j, k) = (pair.source, pair.target);
        if j >= m || k >= m || j == k {
            return Err(Error::arg(format!("invalid modality pair ({j}, {k})")));
        }
        if pair.map.sources() != sizes[j] || pair.map.targets != sizes[k] {
            return Err(Error::arg(format!(
                "correspondence ({j}, {k}) is {}x{}, modalities have {} and {} samples",
                pair.map.sources(),
                pair.map.targets,
                sizes[j],
                sizes[k]
            )));
        }
        for (r, &t) in pair.map.rho.iter().enumerate() {
            let (a, b) = (off[j] + r, off[k] + t);
            mp[(a, b)] -= 1.0;
            mp[(b, a)] -= 1.0;
            if mode == MpMode::LaplacianExact {
                mp[(a, a)] += 1.0;
                mp[(b, b)] += 1.0;
            }
        }
    }
    if mode == MpMode::UniformDiagonal {
        let diag = m.saturating_sub(1) as f64;
        for i in 0..n {
            mp[(i, i)] += diag;
        }
    }
    Ok(mp)
}

/// Block-diagonal stack of per-modality matrices.
pub fn block_diagonal(blocks: &[DenseMatrix]) -> Result<DenseMatrix> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DenseMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        if !b.is_square() {
            return Err(Error::arg("diagonal blocks must be square"));
        }
        out.view_mut((o, o), b.shape()).copy_from(b);
        o += b.nrows();
    }
    Ok(out)
}

/// `M_W = L ⊗ I_c` with `L` the block-diagonal within-modality Laplacian.
pub fn build_mw(laplacians: &[DenseMatrix], classes: usize) -> Result<DenseMatrix> {
    Ok(kron_identity(&block_diagonal(laplacians)?, classes))
}

/// Gaussian kernel widths, one per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub widths: Vec<f64>,
}

impl KernelSpec {
    pub fn uniform(width: f64, modalities: usize) -> Self {
        KernelSpec {
            widths: vec![width; modalities],
        }
    }

    fn width(&self, i: usize) -> Result<f64> {
        let w = *self
            .widths
            .get(i)
            .ok_or_else(|| Error::arg(format!("no kernel width for modality {i}")))?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::arg(format!("kernel width {w} must be positive")));
        }
        Ok(w)
    }
}

/// `exp(-|x_p - y_q|^2 / (2 w^2))` for every row pair.
pub fn gaussian_kernel(x: &DenseMatrix, y: &DenseMatrix, width: f64) -> Result<DenseMatrix> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::arg(format!("kernel width {width} must be positive")));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::arg(format!(
            "feature dimensions differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let xr: Vec<Vec<f64>> = (0..x.nrows()).map(|r| numkit::row_vec(x, r)).collect();
    let yr: Vec<Vec<f64>> = (0..y.nrows()).map(|r| numkit::row_vec(y, r)).collect();
    let denom = 2.0 * width * width;
    Ok(DenseMatrix::from_fn(x.nrows(), y.nrows(), |p, q| {
        (-sq_dist(&xr[p], &yr[q]) / denom).exp()
    }))
}

/// Block-diagonal scalar Gram matrix `K` over all modalities.
pub fn gram_scalar(features: &[FeatureMatrix], spec: &KernelSpec) -> Result<DenseMatrix> {
    let blocks = features
        .iter()
        .enumerate()
        .map(|(i, f)| gaussian_kernel(f.data(), f.data(), spec.width(i)?))
        .collect::<Result<Vec<_>>>()?;
    block_diagonal(&blocks)
}

/// The lifted Gram matrix `G = K ⊗ I_c`.
pub fn gram(features: &[FeatureMatrix], spec: &KernelSpec, classes: usize) -> Result<DenseMatrix> {
    Ok(kron_identity(&gram_scalar(features, spec)?, classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub gamma_a: f64,
    pub gamma_w: f64,
    pub gamma_b: f64,
}

impl Regularization {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_a", self.gamma_a),
            ("gamma_w", self.gamma_w),
            ("gamma_b", self.gamma_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!(
                    "{name} = {v} must be a nonnegative number"
                )));
            }
        }
        Ok(())
    }
}

fn sym(m: &DenseMatrix) -> DenseMatrix {
    (m + m.transpose()) * 0.5
}

/// The reduced system matrix `B_N` with `B = B_N ⊗ I_c`.
pub fn system_matrix(
    mask: &[f64],
    k: &DenseMatrix,
    l: &DenseMatrix,
    mp: &DenseMatrix,
    labeled: usize,
    reg: Regularization,
) -> Result<DenseMatrix> {
    let n = k.nrows();
    if mask.len() != n || l.shape() != (n, n) || mp.shape() != (n, n) || !k.is_square() {
        return Err(Error::arg("system operators are not conformable"));
    }
    let mut b = k.clone();
    for (r, &m) in mask.iter().enumerate() {
        b.row_mut(r).scale_mut(m);
    }
    for i in 0..n {
        b[(i, i)] += 2.0 * labeled as f64 * reg.gamma_a;
    }
    if reg.gamma_w != 0.0 {
        b += sym(l) * k * reg.gamma_w;
    }
    if reg.gamma_b != 0.0 {
        b += sym(mp) * k * reg.gamma_b;
    }
    Ok(b)
}

/// Fitted coefficients plus everything prediction needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Coefficients in internal (labeled-first) order, `N x c`.
    pub a: DenseMatrix,
    /// Training features per modality in internal order.
    pub training: Vec<FeatureMatrix>,
    pub kernel: KernelSpec,
    pub reg: Regularization,
    pub classes: usize,
    pub offsets: Vec<usize>,
    pub relative_residual: f64,
}

impl TrainedModel {
    /// Coefficient block `a^i` of modality `i`.
    pub fn block(&self, i: usize) -> DenseMatrix {
        self.a
            .rows(self.offsets[i], self.training[i].samples())
            .into_owned()
    }
}

pub const RESIDUAL_TOL: f64 = 1e-8;

/// Solve `B a = y` on internally ordered operators.
///
/// `features`, `l` and `mp` must already follow the order of `enc`.
pub fn fit(
    enc: &LabelEncoding,
    features: &[FeatureMatrix],
    kernel: &KernelSpec,
    l: &DenseMatrix,
    mp: &DenseMatrix,
    reg: Regularization,
) -> Result<TrainedModel> {
    reg.validate()?;
    if features.len() != enc.sizes.len()
        || features
            .iter()
            .zip(&enc.sizes)
            .any(|(f, &n)| f.samples() != n)
    {
        return Err(Error::arg("features do not match the label encoding"));
    }
    let mask = label_mask(&enc.labeled, &enc.sizes)?;
    let full_mask = mask.iter().all(|&v| v == 1.0);
    if reg.gamma_a == 0.0 && !full_mask {
        return Err(Error::arg(
            "gamma_a must be positive when some samples are unlabeled",
        ));
    }
    let k = gram_scalar(features, kernel)?;
    let b = system_matrix(&mask, &k, l, mp, enc.total_labeled(), reg)?;
    let a = numkit::solve_matrix(&b, &enc.y)?;
    let y_norm = enc.y.norm();
    let relative_residual = (&b * &a - &enc.y).norm() / y_norm.max(f64::MIN_POSITIVE);
    if y_norm > 0.0 && relative_residual > RESIDUAL_TOL {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    }
    Ok(TrainedModel {
        a,
        training: features.to_vec(),
        kernel: kernel.clone(),
        reg,
        classes: enc.classes,
        offsets: enc.offsets(),
        relative_residual,
    })
}

/// Everything needed to train, in original row order.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub features: Vec<FeatureMatrix>,
    pub labels: Vec<Labels>,
    pub classes: usize,
    /// Within-modality Laplacians, one per modality.
    pub laplacians: Vec<DenseMatrix>,
    pub correspondences: Vec<PairCorrespondence>,
}

/// Encode, reorder labeled-first, assemble the operators and fit.
pub fn train(
    set: &TrainingSet,
    kernel: &KernelSpec,
    mode: MpMode,
    reg: Regularization,
) -> Result<TrainedModel> {
    let m = set.features.len();
    if set.labels.len() != m || set.laplacians.len() != m {
        return Err(Error::arg(
            "features, labels and Laplacians must cover the same modalities",
        ));
    }
    for (i, (f, l)) in set.features.iter().zip(&set.labels).enumerate() {
        if f.samples() != l.len() {
            return Err(Error::arg(format!(
                "modality {i}: {} samples but {} labels",
                f.samples(),
                l.len()
            )));
        }
        if set.laplacians[i].shape() != (f.samples(), f.samples()) {
            return Err(Error::arg(format!(
                "modality {i}: Laplacian has the wrong size"
            )));
        }
    }
    let enc = encode_labels(&set.labels, set.classes)?;
    let inv = enc.inverse_orders();
    let features = set
        .features
        .iter()
        .zip(&enc.orders)
        .map(|(f, o)| f.select_rows(o))
        .collect::<Result<Vec<_>>>()?;
    let laplacians: Vec<DenseMatrix> = set
        .laplacians
        .iter()
        .zip(&enc.orders)
        .map(|(l, o)| DenseMatrix::from_fn(o.len(), o.len(), |a, b| l[(o[a], o[b])]))
        .collect();
    let pairs = set
        .correspondences
        .iter()
        .map(|p| {
            if p.source >= m || p.target >= m {
                return Err(Error::arg(format!(
                    "correspondence between modalities {} and {} out of range",
                    p.source, p.target
                )));
            }
            let src = &enc.orders[p.source];
            if p.map.sources() != src.len() {
                return Err(Error::arg(
                    "correspondence length does not match its modality",
                ));
            }
            let rho = src.iter().map(|&r| inv[p.target][p.map.rho[r]]).collect();
            Ok(PairCorrespondence {
                source: p.source,
                target: p.target,
                map: CorrespondenceMatrix::new(rho, p.map.targets)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mp = build_mp(&pairs, &enc.sizes, mode)?;
    let l = block_diagonal(&laplacians)?;
    fit(&enc, &features, kernel, &l, &mp, reg)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Predicted classes, `1..=c`.
    pub labels: Vec<usize>,
    /// Score vectors, one row per test sample.
    pub scores: DenseMatrix,
}

/// Index (1-based) of the largest entry; ties go to the lowest class.
pub fn argmax_class(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best + 1
}

pub fn predict(model: &TrainedModel, test: &DenseMatrix, modality: usize) -> Result<Prediction> {
    let train = model
        .training
        .get(modality)
        .ok_or_else(|| Error::arg(format!("model has no modality {modality}")))?;
    if test.ncols() != train.dim() {
        return Err(Error::arg(format!(
            "test features have dimension {}, modality {modality} was trained on {}",
            test.ncols(),
            train.dim()
        )));
    }
    let k_test = gaussian_kernel(test, train.data(), model.kernel.width(modality)?)?;
    let scores = k_test * model.block(modality);
    let labels = scores
        .row_iter()
        .map(|r| argmax_class(&r.iter().copied().collect::<Vec<_>>()))
        .collect();
    Ok(Prediction { labels, scores })
}
