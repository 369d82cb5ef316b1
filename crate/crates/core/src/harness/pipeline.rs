//! Chaining map fitting, correspondence, retrieval and classification over a
//! manifest, with line-oriented and JSON reports.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::fmbsd::{
    descriptor_correspondences, extract_correspondences, fit_map, prepare_modality, retrieve_all,
    CorrespondenceMatrix, FunctionalMap, ModalityBundle,
};
use crate::graph::{build_knn_graph, laplacian, LaplacianFlavor};
use crate::harness::io::{
    format_correspondence, format_labels, format_rankings, load_dataset, parse_pairs,
    parse_rankings, read_labels, read_text, single_labels, write_text, CorrespondenceSource,
    Dataset, LabelCell,
};
use crate::harness::metrics::{accuracy, default_rule, map_from_judgments, map_score, relevant};
use crate::m2cpc::{predict, train, KernelSpec, PairCorrespondence, Regularization, TrainingSet};
use crate::sgws::cross_similarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Correspond,
    Retrieve { k: usize },
    Classify,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Correspond => "correspond",
            Task::Retrieve { .. } => "retrieve",
            Task::Classify => "classify",
        }
    }
}

/// Machine-readable outcome of one run; keys serialize in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub value: Value,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.value).expect("report serializes") + "\n"
    }

    /// One `path = value` line per scalar.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        flatten("", &self.value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), child, out);
            }
        }
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn prepare_all(ds: &Dataset) -> Result<Vec<ModalityBundle>> {
    ds.modalities
        .iter()
        .map(|m| {
            stage(
                &format!("prepare modality `{}`", m.features.id()),
                prepare_modality(&m.features, &ds.manifest.fmbsd),
            )
        })
        .collect()
}

/// Fitted map and correspondences from modality `j` into modality `k`.
pub struct PairFit {
    pub source: usize,
    pub target: usize,
    pub map: FunctionalMap,
    pub correspondence: CorrespondenceMatrix,
}

pub fn fit_pair(ds: &Dataset, bundles: &[ModalityBundle], j: usize, k: usize) -> Result<PairFit> {
    let cfg = &ds.manifest.fmbsd;
    let (bi, bj) = (&bundles[j], &bundles[k]);
    let label = format!("{} -> {}", bi.id, bj.id);
    let sim = stage(
        &format!("similarity {label}"),
        cross_similarity(&bi.signatures, &bj.signatures, cfg.sigma_mode),
    )?;
    let map = stage(&format!("fit map {label}"), fit_map(bi, bj, &sim.pi, cfg))?;
    let correspondence = stage(
        &format!("correspondences {label}"),
        extract_correspondences(&bi.basis.vectors, &map.c, &bj.basis.vectors),
    )?;
    Ok(PairFit {
        source: j,
        target: k,
        map,
        correspondence,
    })
}

/// Fit every listed pair, one scoped thread per pair; results keep list order.
pub fn fit_pairs(
    ds: &Dataset,
    bundles: &[ModalityBundle],
    list: &[(usize, usize)],
) -> Result<Vec<PairFit>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = list
            .iter()
            .map(|&(j, k)| scope.spawn(move || fit_pair(ds, bundles, j, k)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("map fitting thread panicked"))
            .collect()
    })
}

fn upper_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .flat_map(|j| ((j + 1)..m).map(move |k| (j, k)))
        .collect()
}

fn map_summary(map: &FunctionalMap) -> Value {
    json!({
        "objective": map.objective,
        "start_objective": map.trace[0],
        "iterations": map.iterations,
        "converged": map.converged,
        "gradient_norm": map.gradient_norm,
    })
}

pub fn run_pipeline(manifest: &Path, task: Task, out: &Path) -> Result<Report> {
    let ds = stage("load", load_dataset(manifest))?;
    let body = match task {
        Task::Correspond => correspond(&ds, out)?,
        Task::Retrieve { k } => retrieve(&ds, k, out)?,
        Task::Classify => classify(&ds, out)?,
    };
    let mut root = Map::new();
    root.insert("task".into(), json!(task.name()));
    root.insert(
        "modalities".into(),
        Value::Array(
            ds.modalities
                .iter()
                .map(|m| json!({"id": m.features.id(), "samples": m.features.samples(), "dim": m.features.dim()}))
                .collect(),
        ),
    );
    for (k, v) in body {
        root.insert(k, v);
    }
    let report = Report {
        value: Value::Object(root),
    };
    stage(
        "write report",
        write_text(&out.join("report.json"), &report.to_json()),
    )?;
    stage(
        "write report",
        write_text(&out.join("report.txt"), &report.to_text()),
    )?;
    Ok(report)
}

fn require_pairs(ds: &Dataset) -> Result<()> {
    if ds.modalities.len() < 2 {
        return Err(Error::arg("this task needs at least two modalities").in_stage("load"));
    }
    Ok(())
}

fn correspond(ds: &Dataset, out: &Path) -> Result<Map<String, Value>> {
    require_pairs(ds)?;
    let bundles = prepare_all(ds)?;
    let fits = fit_pairs(ds, &bundles, &upper_pairs(ds.modalities.len()))?;
    let mut pairs = Vec::new();
    for fit in fits {
        let (j, k) = (fit.source, fit.target);
        let name = format!("correspondence_{}_{}.csv", bundles[j].id, bundles[k].id);
        stage(
            "write correspondences",
            write_text(
                &out.join(&name),
                &format_correspondence(&fit.correspondence),
            ),
        )?;
        let mut entry = Map::new();
        entry.insert("source".into(), json!(bundles[j].id));
        entry.insert("target".into(), json!(bundles[k].id));
        entry.insert("file".into(), json!(name));
        entry.insert("map".into(), map_summary(&fit.map));
        if let Some(truth) = ds.truth_for(j, k) {
            let acc = fit.correspondence.agreement(&truth.rho)?;
            let baseline = stage(
                "descriptor baseline",
                descriptor_correspondences(&bundles[j].signatures, &bundles[k].signatures),
            )?
            .agreement(&truth.rho)?;
            entry.insert("accuracy".into(), json!(acc));
            entry.insert("descriptor_baseline_accuracy".into(), json!(baseline));
        }
        pairs.push(Value::Object(entry));
    }
    let mut body = Map::new();
    body.insert("pairs".into(), Value::Array(pairs));
    Ok(body)
}

fn labels_of(ds: &Dataset, i: usize, what: &str) -> Result<Vec<LabelCell>> {
    ds.modalities[i].labels.clone().ok_or_else(|| {
        Error::arg(format!(
            "{what} needs labels for modality `{}`",
            ds.modalities[i].features.id()
        ))
        .in_stage("load")
    })
}

fn retrieve(ds: &Dataset, k_ret: usize, out: &Path) -> Result<Map<String, Value>> {
    require_pairs(ds)?;
    let m = ds.modalities.len();
    let labels = (0..m)
        .map(|i| labels_of(ds, i, "retrieval"))
        .collect::<Result<Vec<_>>>()?;
    let rule = ds
        .manifest
        .relevance
        .unwrap_or_else(|| default_rule(&labels.iter().map(Vec::as_slice).collect::<Vec<_>>()));
    let bundles = prepare_all(ds)?;
    let directions: Vec<(usize, usize)> = (0..m)
        .flat_map(|j| (0..m).filter(move |&k| k != j).map(move |k| (j, k)))
        .collect();
    let fits = fit_pairs(ds, &bundles, &directions)?;
    let mut runs = Vec::new();
    for fit in fits {
        let (j, k) = (fit.source, fit.target);
        let (src, tgt) = (&bundles[j].id, &bundles[k].id);
        let lists = stage(
            &format!("retrieve {src} -> {tgt}"),
            retrieve_all(
                &bundles[j].basis.vectors,
                &fit.map.c,
                &bundles[k].basis.vectors,
                k_ret,
            ),
        )?;
        let result = stage(
            "score retrieval",
            map_score(&lists, &labels[j], &labels[k], rule),
        )?;
        let rank_file = format!("ranking_{src}_{tgt}.csv");
        let qrels_file = format!("qrels_{src}_{tgt}.csv");
        let mut qrels = String::new();
        for (q, ql) in labels[j].iter().enumerate() {
            for (t, tl) in labels[k].iter().enumerate() {
                if relevant(rule, ql, tl) {
                    qrels.push_str(&format!("{},{}\n", q + 1, t + 1));
                }
            }
        }
        stage(
            "write rankings",
            write_text(&out.join(&rank_file), &format_rankings(&lists)),
        )?;
        stage(
            "write judgments",
            write_text(&out.join(&qrels_file), &qrels),
        )?;
        runs.push(json!({
            "source": src,
            "target": tgt,
            "k": k_ret,
            "map": result.map,
            "admissible_queries": result.admissible,
            "skipped_queries": result.skipped,
            "rankings": rank_file,
            "judgments": qrels_file,
            "functional_map": map_summary(&fit.map),
        }));
    }
    let mut body = Map::new();
    body.insert(
        "relevance".into(),
        serde_json::to_value(rule).expect("rule serializes"),
    );
    body.insert("directions".into(), Value::Array(runs));
    Ok(body)
}

fn classify(ds: &Dataset, out: &Path) -> Result<Map<String, Value>> {
    let m = ds.modalities.len();
    let cfg = &ds.manifest.m2cpc;
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let cells = labels_of(ds, i, "classification")?;
        let path = ds.modalities[i].labels_path.clone().unwrap_or_default();
        labels.push(stage("load", single_labels(&cells, &path))?);
    }
    let classes = match ds.manifest.classes {
        Some(c) => c,
        None => labels
            .iter()
            .flatten()
            .flatten()
            .copied()
            .max()
            .unwrap_or(0),
    };

    let mut body = Map::new();
    let mut pairs = Vec::new();
    let mut pair_reports = Vec::new();
    match cfg.correspondences {
        CorrespondenceSource::None => {}
        CorrespondenceSource::GroundTruth => {
            for j in 0..m {
                for k in (j + 1)..m {
                    let truth = ds.truth_for(j, k).ok_or_else(|| {
                        Error::arg(format!(
                            "no ground-truth correspondences from `{}` to `{}`",
                            ds.modalities[j].features.id(),
                            ds.modalities[k].features.id()
                        ))
                        .in_stage("load")
                    })?;
                    pairs.push(PairCorrespondence {
                        source: j,
                        target: k,
                        map: truth.clone(),
                    });
                }
            }
        }
        CorrespondenceSource::Fmbsd => {
            let bundles = prepare_all(ds)?;
            for fit in fit_pairs(ds, &bundles, &upper_pairs(m))? {
                let (j, k) = (fit.source, fit.target);
                let mut entry = Map::new();
                entry.insert("source".into(), json!(bundles[j].id));
                entry.insert("target".into(), json!(bundles[k].id));
                entry.insert("map".into(), map_summary(&fit.map));
                if let Some(truth) = ds.truth_for(j, k) {
                    entry.insert(
                        "accuracy".into(),
                        json!(fit.correspondence.agreement(&truth.rho)?),
                    );
                }
                pair_reports.push(Value::Object(entry));
                pairs.push(PairCorrespondence {
                    source: j,
                    target: k,
                    map: fit.correspondence,
                });
            }
        }
    }

    let laplacians = ds
        .modalities
        .iter()
        .map(|md| {
            let g = build_knn_graph(&md.features, cfg.knn)?;
            Ok(laplacian(&g, LaplacianFlavor::Combinatorial)?.matrix)
        })
        .collect::<Result<Vec<_>>>();
    let laplacians = stage("within-modality graphs", laplacians)?;
    let set = TrainingSet {
        features: ds.modalities.iter().map(|md| md.features.clone()).collect(),
        labels,
        classes,
        laplacians,
        correspondences: pairs,
    };
    let reg = Regularization {
        gamma_a: cfg.gamma_a,
        gamma_w: cfg.gamma_w,
        gamma_b: cfg.gamma_b,
    };
    let kernel = KernelSpec::uniform(cfg.kernel_width, m);
    let model = stage("fit classifier", train(&set, &kernel, cfg.mp_mode, reg))?;

    let mut per_modality = Vec::new();
    let mut accs = Vec::new();
    for (i, md) in ds.modalities.iter().enumerate() {
        let Some(test) = &md.test_features else {
            continue;
        };
        let pred = stage("predict", predict(&model, test, i))?;
        let file = format!("predictions_{}.csv", md.features.id());
        let published: Vec<Option<usize>> = pred.labels.iter().map(|&c| Some(c)).collect();
        stage(
            "write predictions",
            write_text(&out.join(&file), &format_labels(&published)),
        )?;
        let mut entry = Map::new();
        entry.insert("id".into(), json!(md.features.id()));
        entry.insert("predictions".into(), json!(file));
        entry.insert("test_samples".into(), json!(test.nrows()));
        if let Some(truth) = &md.test_labels {
            let truth: Vec<Option<usize>> = truth.iter().map(LabelCell::single).collect();
            let acc = accuracy(&published, &truth)?;
            accs.push(acc);
            entry.insert("accuracy".into(), json!(acc));
        }
        per_modality.push(Value::Object(entry));
    }
    body.insert("classes".into(), json!(classes));
    body.insert("relative_residual".into(), json!(model.relative_residual));
    body.insert(
        "correspondence_source".into(),
        serde_json::to_value(cfg.correspondences).expect("serializes"),
    );
    if !pair_reports.is_empty() {
        body.insert("pairs".into(), Value::Array(pair_reports));
    }
    body.insert("test".into(), Value::Array(per_modality));
    if !accs.is_empty() {
        body.insert(
            "mean_accuracy".into(),
            json!(accs.iter().sum::<f64>() / accs.len() as f64),
        );
    }
    Ok(body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Map,
    Accuracy,
}

/// Score a prediction file against a truth file.
///
/// Accuracy compares two label files row by row. MAP reads a ranking file
/// (1-based target indices per query row) and a judgment file of relevant
/// `query,target` pairs.
pub fn evaluate(pred: &Path, truth: &Path, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Accuracy => {
            let p: Vec<Option<usize>> = read_labels(pred)?.iter().map(LabelCell::single).collect();
            let t: Vec<Option<usize>> = read_labels(truth)?.iter().map(LabelCell::single).collect();
            if p.len() != t.len() {
                return Err(Error::Alignment {
                    path: PathBuf::from(pred),
                    message: format!("{} predictions for {} true labels", p.len(), t.len()),
                });
            }
            accuracy(&p, &t)
        }
        Metric::Map => {
            let rankings = parse_rankings(&read_text(pred)?, pred)?;
            let pairs = parse_pairs(&read_text(truth)?, truth)?;
            let mut sets = vec![Vec::new(); rankings.len()];
            for (q, t) in pairs {
                sets.get_mut(q)
                    .ok_or_else(|| Error::Alignment {
                        path: truth.to_path_buf(),
                        message: format!(
                            "judgment for query {} beyond {} rankings",
                            q + 1,
                            rankings.len()
                        ),
                    })?
                    .push(t);
            }
            let result = map_from_judgments(&rankings, &sets, usize::MAX)?;
            result
                .map
                .ok_or_else(|| Error::arg("no query has a relevant target; MAP is undefined"))
        }
    }
}
