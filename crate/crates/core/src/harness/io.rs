//! CSV and manifest input/output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmbsd::{CorrespondenceMatrix, FmbsdConfig};
use crate::graph::FeatureMatrix;
use crate::m2cpc::{Labels, MpMode};
use crate::numkit::DenseMatrix;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Headerless comma-separated matrix of finite decimals.
pub fn parse_matrix(text: &str, path: &Path) -> Result<DenseMatrix> {
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (ln, line) in lines(text) {
        let mut count = 0;
        for (col, cell) in line.split(',').enumerate() {
            let cell = cell.trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, ln, col + 1, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    ln,
                    col + 1,
                    format!("`{cell}` is not finite"),
                ));
            }
            values.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(parse_err(
                    path,
                    ln,
                    count.min(w) + 1,
                    format!("row has {count} fields, expected {w}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| parse_err(path, 1, 1, "file contains no rows"))?;
    Ok(DenseMatrix::from_row_slice(rows, width, &values))
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    parse_matrix(&read_text(path)?, path)
}

pub fn read_features(id: &str, path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::new(id, read_matrix(path)?)
}

/// One row of a label file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelCell {
    Unlabeled,
    Classes(Vec<usize>),
}

impl LabelCell {
    pub fn single(&self) -> Option<usize> {
        match self {
            LabelCell::Classes(c) if c.len() == 1 => Some(c[0]),
            _ => None,
        }
    }
}

/// One integer class per row, `;`-separated classes for multi-label rows, `?` for unlabeled.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<LabelCell>> {
    lines(text)
        .map(|(ln, line)| {
            if line == "?" {
                return Ok(LabelCell::Unlabeled);
            }
            let mut classes = Vec::new();
            for (i, part) in line.split(';').enumerate() {
                let part = part.trim();
                let v: usize = part.parse().map_err(|_| {
                    parse_err(path, ln, i + 1, format!("`{part}` is not a class label"))
                })?;
                if v == 0 {
                    return Err(parse_err(path, ln, i + 1, "class labels start at 1"));
                }
                classes.push(v);
            }
            Ok(LabelCell::Classes(classes))
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelCell>> {
    parse_labels(&read_text(path)?, path)
}

/// Single-label view for classification; multi-label rows are rejected.
pub fn single_labels(cells: &[LabelCell], path: &Path) -> Result<Labels> {
    cells
        .iter()
        .enumerate()
        .map(|(r, c)| match c {
            LabelCell::Unlabeled => Ok(None),
            LabelCell::Classes(v) if v.len() == 1 => Ok(Some(v[0])),
            LabelCell::Classes(_) => Err(Error::Alignment {
                path: path.to_path_buf(),
                message: format!(
                    "row {} carries several labels; classification needs one",
                    r + 1
                ),
            }),
        })
        .collect()
}

/// Rows `source,target` with 1-based indices.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    lines(text)
        .map(|(ln, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(parse_err(
                    path,
                    ln,
                    fields.len().min(2) + 1,
                    format!("expected `source,target`, got {} fields", fields.len()),
                ));
            }
            let mut out = [0usize; 2];
            for (i, f) in fields.iter().enumerate() {
                let v: usize = f
                    .parse()
                    .map_err(|_| parse_err(path, ln, i + 1, format!("`{f}` is not an index")))?;
                if v == 0 {
                    return Err(parse_err(path, ln, i + 1, "indices start at 1"));
                }
                out[i] = v - 1;
            }
            Ok((out[0], out[1]))
        })
        .collect()
}

/// A complete correspondence file: every source row exactly once.
pub fn read_correspondence(
    path: &Path,
    sources: usize,
    targets: usize,
) -> Result<CorrespondenceMatrix> {
    let pairs = parse_pairs(&read_text(path)?, path)?;
    let mut rho = vec![None; sources];
    for &(s, t) in &pairs {
        if s >= sources || t >= targets {
            return Err(Error::Alignment {
                path: path.to_path_buf(),
                message: format!("pair ({}, {}) outside {sources}x{targets}", s + 1, t + 1),
            });
        }
        if rho[s].replace(t).is_some() {
            return Err(Error::Alignment {
                path: path.to_path_buf(),
                message: format!("source {} listed twice", s + 1),
            });
        }
    }
    let rho = rho
        .into_iter()
        .enumerate()
        .map(|(s, t)| {
            t.ok_or_else(|| Error::Alignment {
                path: path.to_path_buf(),
                message: format!("source {} has no correspondence", s + 1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CorrespondenceMatrix::new(rho, targets)
}

pub fn format_matrix(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn format_labels(labels: &[Option<usize>]) -> String {
    let mut out = String::new();
    for l in labels {
        match l {
            Some(v) => writeln!(out, "{v}").expect("string write"),
            None => out.push_str("?\n"),
        }
    }
    out
}

pub fn format_correspondence(c: &CorrespondenceMatrix) -> String {
    let mut out = String::new();
    for (s, &t) in c.rho.iter().enumerate() {
        writeln!(out, "{},{}", s + 1, t + 1).expect("string write");
    }
    out
}

pub fn format_rankings(lists: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for list in lists {
        let cells: Vec<String> = list.iter().map(|t| (t + 1).to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Ranked lists of 1-based indices, one query per row.
pub fn parse_rankings(text: &str, path: &Path) -> Result<Vec<Vec<usize>>> {
    lines(text)
        .map(|(ln, line)| {
            line.split(',')
                .enumerate()
                .map(|(i, f)| {
                    let f = f.trim();
                    match f.parse::<usize>() {
                        Ok(v) if v > 0 => Ok(v - 1),
                        _ => Err(parse_err(path, ln, i + 1, format!("`{f}` is not an index"))),
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub id: String,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

/// Known correspondences between two modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEntry {
    pub source: String,
    pub target: String,
    pub file: PathBuf,
}

/// Either a single file (first modality into second) or explicit pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundTruthSpec {
    File(PathBuf),
    Pairs(Vec<GroundTruthEntry>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceSource {
    /// Fit functional maps and extract correspondences.
    #[default]
    Fmbsd,
    /// Use the manifest's ground-truth files.
    GroundTruth,
    /// No between-modality coupling.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct M2cpcConfig {
    pub gamma_a: f64,
    pub gamma_w: f64,
    pub gamma_b: f64,
    pub kernel_width: f64,
    pub mp_mode: MpMode,
    /// Neighbor count of the graphs behind the within-modality Laplacians.
    pub knn: usize,
    pub correspondences: CorrespondenceSource,
}

impl Default for M2cpcConfig {
    fn default() -> Self {
        M2cpcConfig {
            gamma_a: 1e-3,
            gamma_w: 1e-2,
            gamma_b: 1e-2,
            kernel_width: 1.0,
            mp_mode: MpMode::LaplacianExact,
            knn: crate::graph::DEFAULT_KNN,
            correspondences: CorrespondenceSource::Fmbsd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceRule {
    SameLabel,
    SharedLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub modalities: Vec<ModalityEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default)]
    pub fmbsd: FmbsdConfig,
    #[serde(default)]
    pub m2cpc: M2cpcConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<RelevanceRule>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if m.modalities.is_empty() {
            return Err(Error::arg(format!(
                "{}: manifest lists no modalities",
                path.display()
            )));
        }
        let mut seen = BTreeMap::new();
        for (i, e) in m.modalities.iter().enumerate() {
            let valid = !e.id.is_empty()
                && e.id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
            if !valid {
                return Err(Error::arg(format!(
                    "{}: modality id `{}` must be non-empty ASCII letters, digits, `_`, `-` or `.`",
                    path.display(),
                    e.id
                )));
            }
            if let Some(prev) = seen.insert(e.id.clone(), i) {
                return Err(Error::arg(format!(
                    "{}: modality id `{}` used by entries {} and {}",
                    path.display(),
                    e.id,
                    prev + 1,
                    i + 1
                )));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

/// A modality loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedModality {
    pub features: FeatureMatrix,
    pub labels: Option<Vec<LabelCell>>,
    pub labels_path: Option<PathBuf>,
    pub test_features: Option<DenseMatrix>,
    pub test_labels: Option<Vec<LabelCell>>,
    pub test_labels_path: Option<PathBuf>,
}

/// Ground-truth correspondences between modality indices.
#[derive(Debug, Clone)]
pub struct KnownPair {
    pub source: usize,
    pub target: usize,
    pub map: CorrespondenceMatrix,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub modalities: Vec<LoadedModality>,
    pub ground_truth: Vec<KnownPair>,
}

impl Dataset {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.features.id() == id)
    }

    pub fn truth_for(&self, source: usize, target: usize) -> Option<&CorrespondenceMatrix> {
        self.ground_truth
            .iter()
            .find(|p| p.source == source && p.target == target)
            .map(|p| &p.map)
    }
}

fn check_aligned(path: &Path, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Alignment {
            path: path.to_path_buf(),
            message: format!("{what} has {got} rows, expected {want}"),
        });
    }
    Ok(())
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::parse(&read_text(manifest_path)?, manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let resolve = |p: &Path| root.join(p);
    let mut modalities = Vec::new();
    for entry in &manifest.modalities {
        let fpath = resolve(&entry.features);
        let features = read_features(&entry.id, &fpath)?;
        let n = features.samples();
        let labels_path = entry.labels.as_deref().map(resolve);
        let labels = match &labels_path {
            Some(p) => {
                let l = read_labels(p)?;
                check_aligned(p, "label file", l.len(), n)?;
                Some(l)
            }
            None => None,
        };
        let test_features = match &entry.test_features {
            Some(p) => {
                let p = resolve(p);
                let t = read_matrix(&p)?;
                if t.ncols() != features.dim() {
                    return Err(Error::Alignment {
                        path: p,
                        message: format!(
                            "test features have {} columns, training features have {}",
                            t.ncols(),
                            features.dim()
                        ),
                    });
                }
                Some(t)
            }
            None => None,
        };
        let test_labels_path = entry.test_labels.as_deref().map(resolve);
        let test_labels = match (&test_labels_path, &test_features) {
            (Some(p), Some(t)) => {
                let l = read_labels(p)?;
                check_aligned(p, "test label file", l.len(), t.nrows())?;
                Some(l)
            }
            (Some(p), None) => {
                return Err(Error::Alignment {
                    path: p.clone(),
                    message: "test labels given without test features".into(),
                })
            }
            _ => None,
        };
        modalities.push(LoadedModality {
            features,
            labels,
            labels_path,
            test_features,
            test_labels,
            test_labels_path,
        });
    }
    let find = |id: &str| {
        modalities
            .iter()
            .position(|m| m.features.id() == id)
            .ok_or_else(|| Error::arg(format!("ground truth names unknown modality `{id}`")))
    };
    let entries: Vec<(usize, usize, PathBuf)> = match &manifest.ground_truth {
        None => Vec::new(),
        Some(GroundTruthSpec::File(f)) => {
            if modalities.len() < 2 {
                return Err(Error::arg("ground truth needs at least two modalities"));
            }
            vec![(0, 1, resolve(f))]
        }
        Some(GroundTruthSpec::Pairs(list)) => list
            .iter()
            .map(|e| Ok((find(&e.source)?, find(&e.target)?, resolve(&e.file))))
            .collect::<Result<_>>()?,
    };
    let ground_truth = entries
        .into_iter()
        .map(|(s, t, p)| {
            let map = read_correspondence(
                &p,
                modalities[s].features.samples(),
                modalities[t].features.samples(),
            )?;
            Ok(KnownPair {
                source: s,
                target: t,
                map,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest,
        root,
        modalities,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("x.csv")
    }

    #[test]
    fn matrix_parsing() {
        let m = parse_matrix("1,2\n3.5, -4e-1\n\n", &p()).unwrap();
        assert_eq!(m, DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.5, -0.4]));
        match parse_matrix("1,2\n3,abc\n", &p()) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 2)),
            other => panic!("{other:?}"),
        }
        match parse_matrix("1,2\n3\n", &p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_matrix("1,NaN\n", &p()),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(parse_matrix("\n", &p()), Err(Error::Parse { .. })));
    }

    #[test]
    fn matrix_round_trip_is_exact() {
        let m = DenseMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.5e-300, 7.0]);
        assert_eq!(parse_matrix(&format_matrix(&m), &p()).unwrap(), m);
    }

    #[test]
    fn label_parsing() {
        let l = parse_labels("1\n?\n2;3\n", &p()).unwrap();
        assert_eq!(
            l,
            vec![
                LabelCell::Classes(vec![1]),
                LabelCell::Unlabeled,
                LabelCell::Classes(vec![2, 3])
            ]
        );
        assert!(matches!(
            parse_labels("1\nx\n", &p()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_labels("0\n", &p()),
            Err(Error::Parse { .. })
        ));
        assert!(single_labels(&l, &p()).is_err());
        assert_eq!(single_labels(&l[..2], &p()).unwrap(), vec![Some(1), None]);
    }

    #[test]
    fn pair_parsing() {
        assert_eq!(
            parse_pairs("1,2\n2,1\n", &p()).unwrap(),
            vec![(0, 1), (1, 0)]
        );
        assert!(parse_pairs("1,2,3\n", &p()).is_err());
        assert!(parse_pairs("0,1\n", &p()).is_err());
    }

    #[test]
    fn manifest_defaults_and_errors() {
        let m = Manifest::parse(
            r#"{"modalities":[{"id":"a","features":"a.csv"}],"fmbsd":{"alpha":2}}"#,
            &p(),
        )
        .unwrap();
        assert_eq!(m.fmbsd.alpha, 2.0);
        assert_eq!(m.fmbsd.beta, 1.0);
        assert_eq!(m.m2cpc, M2cpcConfig::default());
        assert!(matches!(
            Manifest::parse("{", &p()),
            Err(Error::Json { .. })
        ));
        assert!(Manifest::parse(r#"{"modalities":[]}"#, &p()).is_err());
        assert!(Manifest::parse(
            r#"{"modalities":[{"id":"a","features":"a"},{"id":"a","features":"b"}]}"#,
            &p()
        )
        .is_err());
        let back = Manifest::parse(&m.to_json(), &p()).unwrap();
        assert_eq!(back, m);
    }
}
