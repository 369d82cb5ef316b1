//! Seeded synthetic multimodal datasets with known correspondences.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmbsd::{CorrespondenceMatrix, FmbsdConfig};
use crate::harness::io::{
    format_correspondence, format_labels, format_matrix, read_text, write_text, GroundTruthSpec,
    M2cpcConfig, Manifest, ModalityEntry, RelevanceRule,
};
use crate::m2cpc::Labels;
use crate::numkit::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentFamily {
    TwoMoons,
    SwissRoll,
}

impl LatentFamily {
    pub fn dim(self) -> usize {
        match self {
            LatentFamily::TwoMoons => 2,
            LatentFamily::SwissRoll => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Identity,
    /// Isometric embedding: orthonormal columns from a Gaussian QR.
    Orthonormal,
    /// Independent `N(0, 1/dim)` entries.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModality {
    pub id: String,
    pub dim: usize,
    pub map: MapKind,
    #[serde(default)]
    pub map_seed: u64,
    /// Noise standard deviation relative to the RMS of the clean projected entries.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub family: LatentFamily,
    /// Training samples shared by every modality.
    pub n: usize,
    #[serde(default)]
    pub test_n: usize,
    /// Absolute Gaussian noise added to the latent points.
    #[serde(default)]
    pub latent_noise: f64,
    pub seed: u64,
    /// Shuffles the training rows of every modality after the first; identity when absent.
    #[serde(default)]
    pub permutation_seed: Option<u64>,
    /// Swiss-roll angular bins; two-moons always has two classes.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "one")]
    pub labeled_fraction: f64,
    #[serde(default)]
    pub label_seed: u64,
    pub modalities: Vec<SyntheticModality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fmbsd: Option<FmbsdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m2cpc: Option<M2cpcConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<RelevanceRule>,
}

impl SyntheticSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn classes(&self) -> usize {
        match self.family {
            LatentFamily::TwoMoons => 2,
            LatentFamily::SwissRoll => self.classes.unwrap_or(3),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::arg(format!("n = {} must be at least 10", self.n)));
        }
        if self.modalities.is_empty() {
            return Err(Error::arg("synthetic spec lists no modalities"));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::arg("labeled_fraction must lie in [0, 1]"));
        }
        if self.latent_noise.is_nan() || self.latent_noise < 0.0 {
            return Err(Error::arg("latent_noise must be nonnegative"));
        }
        if self.family == LatentFamily::TwoMoons && self.classes.is_some_and(|c| c != 2) {
            return Err(Error::arg("two-moons data has exactly two classes"));
        }
        if self.classes() < 2 {
            return Err(Error::arg("at least two classes are required"));
        }
        let latent = self.family.dim();
        for m in &self.modalities {
            if !(m.noise >= 0.0 && m.scale > 0.0) {
                return Err(Error::arg(format!(
                    "modality `{}`: noise and scale invalid",
                    m.id
                )));
            }
            match m.map {
                MapKind::Identity if m.dim != latent => {
                    return Err(Error::arg(format!(
                        "modality `{}`: identity map needs dim {latent}",
                        m.id
                    )))
                }
                MapKind::Orthonormal if m.dim < latent => {
                    return Err(Error::arg(format!(
                        "modality `{}`: orthonormal map needs dim >= {latent}",
                        m.id
                    )))
                }
                _ if m.dim == 0 => return Err(Error::arg("modality dim must be positive")),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedModality {
    pub id: String,
    pub train: DenseMatrix,
    /// Published labels (unlabeled rows are `None`).
    pub labels: Labels,
    /// Every training label, for evaluation.
    pub full_labels: Vec<usize>,
    pub test: DenseMatrix,
    pub test_labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub modalities: Vec<GeneratedModality>,
    /// Training row `t` of every later modality is latent sample `permutation[t]`.
    pub permutation: Vec<usize>,
    /// First modality into each later one.
    pub ground_truth: CorrespondenceMatrix,
    pub classes: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn latent(spec: &SyntheticSpec, total: usize, rng: &mut ChaCha8Rng) -> (DenseMatrix, Vec<usize>) {
    let d = spec.family.dim();
    let mut z = DenseMatrix::zeros(total, d);
    let mut labels = vec![0; total];
    match spec.family {
        LatentFamily::TwoMoons => {
            let upper = total / 2;
            for r in 0..total {
                let t = rng.random_range(0.0..PI);
                let (x, y, c) = if r < upper {
                    (t.cos(), t.sin(), 1)
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin(), 2)
                };
                z[(r, 0)] = x;
                z[(r, 1)] = y;
                labels[r] = c;
            }
        }
        LatentFamily::SwissRoll => {
            let mut angles = Vec::with_capacity(total);
            for r in 0..total {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let h = 21.0 * rng.random::<f64>();
                z[(r, 0)] = t * t.cos();
                z[(r, 1)] = h;
                z[(r, 2)] = t * t.sin();
                angles.push((t, r));
            }
            // equal-count bins along the roll angle
            angles.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let classes = spec.classes();
            for (rank, &(_, r)) in angles.iter().enumerate() {
                labels[r] = rank * classes / total + 1;
            }
        }
    }
    if spec.latent_noise > 0.0 {
        for v in z.iter_mut() {
            *v += spec.latent_noise * normal(rng);
        }
    }
    // mix the class blocks before splitting into training and test rows
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let z = DenseMatrix::from_fn(total, d, |r, c| z[(order[r], c)]);
    let labels = order.iter().map(|&r| labels[r]).collect();
    (z, labels)
}

/// `dim x latent` projection matrix.
fn projection(m: &SyntheticModality, latent: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    match m.map {
        MapKind::Identity => DenseMatrix::identity(m.dim, latent),
        MapKind::Orthonormal => {
            let g = DenseMatrix::from_fn(m.dim, latent, |_, _| normal(rng));
            g.qr().q()
        }
        MapKind::Gaussian => {
            let s = 1.0 / (m.dim as f64).sqrt();
            DenseMatrix::from_fn(m.dim, latent, |_, _| s * normal(rng))
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let total = spec.n + spec.test_n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (z, labels) = latent(spec, total, &mut rng);

    let permutation: Vec<usize> = match spec.permutation_seed {
        Some(seed) => {
            let mut p: Vec<usize> = (0..spec.n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            p
        }
        None => (0..spec.n).collect(),
    };
    let mut inverse = vec![0; spec.n];
    for (t, &r) in permutation.iter().enumerate() {
        inverse[r] = t;
    }

    let mut modalities = Vec::with_capacity(spec.modalities.len());
    for (i, m) in spec.modalities.iter().enumerate() {
        let mut mrng = ChaCha8Rng::seed_from_u64(m.map_seed);
        let proj = projection(m, spec.family.dim(), &mut mrng);
        let mut y = &z * proj.transpose() * m.scale;
        if m.noise > 0.0 {
            let rms = (y.norm_squared() / y.len() as f64).sqrt();
            let sd = m.noise * rms;
            for v in y.iter_mut() {
                *v += sd * normal(&mut mrng);
            }
        }
        let order: Vec<usize> = if i == 0 {
            (0..spec.n).collect()
        } else {
            permutation.clone()
        };
        let train = DenseMatrix::from_fn(spec.n, m.dim, |r, c| y[(order[r], c)]);
        let full_labels: Vec<usize> = order.iter().map(|&r| labels[r]).collect();
        let mut lrng = ChaCha8Rng::seed_from_u64(spec.label_seed.wrapping_add(i as u64));
        let labeled_count = (spec.labeled_fraction * spec.n as f64).round() as usize;
        let mut rows: Vec<usize> = (0..spec.n).collect();
        rows.shuffle(&mut lrng);
        let mut published: Labels = vec![None; spec.n];
        for &r in &rows[..labeled_count] {
            published[r] = Some(full_labels[r]);
        }
        let test = y.rows(spec.n, spec.test_n).into_owned();
        modalities.push(GeneratedModality {
            id: m.id.clone(),
            train,
            labels: published,
            full_labels,
            test,
            test_labels: labels[spec.n..].to_vec(),
        });
    }
    Ok(GeneratedDataset {
        modalities,
        ground_truth: CorrespondenceMatrix::new(inverse, spec.n)?,
        permutation,
        classes: spec.classes(),
    })
}

/// Write CSVs and a manifest into `out`; returns the manifest path.
pub fn write_synthetic(
    spec: &SyntheticSpec,
    data: &GeneratedDataset,
    out: &Path,
) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for m in &data.modalities {
        let file = |suffix: &str| PathBuf::from(format!("{}{suffix}.csv", m.id));
        write_text(&out.join(file("")), &format_matrix(&m.train))?;
        write_text(&out.join(file("_labels")), &format_labels(&m.labels))?;
        let (test_features, test_labels) = if m.test.nrows() > 0 {
            write_text(&out.join(file("_test")), &format_matrix(&m.test))?;
            let tl: Vec<Option<usize>> = m.test_labels.iter().map(|&c| Some(c)).collect();
            write_text(&out.join(file("_test_labels")), &format_labels(&tl))?;
            (Some(file("_test")), Some(file("_test_labels")))
        } else {
            (None, None)
        };
        entries.push(ModalityEntry {
            id: m.id.clone(),
            features: file(""),
            labels: Some(file("_labels")),
            test_features,
            test_labels,
        });
    }
    let ground_truth = if data.modalities.len() >= 2 {
        let f = PathBuf::from("ground_truth.csv");
        write_text(&out.join(&f), &format_correspondence(&data.ground_truth))?;
        Some(GroundTruthSpec::File(f))
    } else {
        None
    };
    let manifest = Manifest {
        modalities: entries,
        ground_truth,
        classes: Some(data.classes),
        fmbsd: spec.fmbsd.clone().unwrap_or_default(),
        m2cpc: spec.m2cpc.clone().unwrap_or_default(),
        relevance: spec.relevance,
    };
    let path = out.join("manifest.json");
    write_text(&path, &manifest.to_json())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: LatentFamily) -> SyntheticSpec {
        SyntheticSpec {
            family,
            n: 200,
            test_n: 0,
            latent_noise: 0.0,
            seed: 1,
            permutation_seed: Some(2),
            classes: None,
            labeled_fraction: 1.0,
            label_seed: 0,
            modalities: vec![
                SyntheticModality {
                    id: "a".into(),
                    dim: 5,
                    map: MapKind::Orthonormal,
                    map_seed: 3,
                    noise: 0.02,
                    scale: 1.0,
                },
                SyntheticModality {
                    id: "b".into(),
                    dim: 7,
                    map: MapKind::Gaussian,
                    map_seed: 4,
                    noise: 0.02,
                    scale: 2.0,
                },
            ],
            fmbsd: None,
            m2cpc: None,
            relevance: None,
        }
    }

    #[test]
    fn moons_have_balanced_labels() {
        let d = generate_synthetic(&spec(LatentFamily::TwoMoons)).unwrap();
        let l = &d.modalities[0].full_labels;
        assert_eq!(l.iter().filter(|&&c| c == 1).count(), 100);
        assert_eq!(l.iter().filter(|&&c| c == 2).count(), 100);
        assert!(l.iter().all(|&c| c == 1 || c == 2));
    }

    #[test]
    fn ground_truth_aligns_modalities() {
        let d = generate_synthetic(&spec(LatentFamily::SwissRoll)).unwrap();
        let (a, b) = (&d.modalities[0], &d.modalities[1]);
        for r in 0..200 {
            assert_eq!(a.full_labels[r], b.full_labels[d.ground_truth.rho[r]]);
        }
        let mut counts = [0; 3];
        for &c in &a.full_labels {
            counts[c - 1] += 1;
        }
        assert!(counts.iter().all(|&c| (66..=67).contains(&c)));
    }

    #[test]
    fn noiseless_identity_modalities_are_identical() {
        let mut s = spec(LatentFamily::TwoMoons);
        s.permutation_seed = None;
        for m in &mut s.modalities {
            m.dim = 2;
            m.map = MapKind::Identity;
            m.noise = 0.0;
            m.scale = 1.0;
        }
        let d = generate_synthetic(&s).unwrap();
        assert_eq!(d.modalities[0].train, d.modalities[1].train);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(LatentFamily::TwoMoons);
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a.modalities[1].train, b.modalities[1].train);
        assert_eq!(a.permutation, b.permutation);
    }

    #[test]
    fn labeled_fraction_and_test_split() {
        let mut s = spec(LatentFamily::TwoMoons);
        s.labeled_fraction = 0.1;
        s.test_n = 50;
        let d = generate_synthetic(&s).unwrap();
        for m in &d.modalities {
            assert_eq!(m.labels.iter().filter(|l| l.is_some()).count(), 20);
            assert_eq!(m.test.nrows(), 50);
            assert_eq!(m.test_labels.len(), 50);
        }
        assert_eq!(d.modalities[0].test_labels, d.modalities[1].test_labels);
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(LatentFamily::TwoMoons);
        s.n = 5;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(LatentFamily::TwoMoons);
        s.modalities[0].map = MapKind::Identity;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(LatentFamily::TwoMoons);
        s.classes = Some(3);
        assert!(generate_synthetic(&s).is_err());
    }
}
