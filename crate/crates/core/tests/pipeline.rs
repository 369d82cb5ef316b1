use std::fs;
use std::path::{Path, PathBuf};

use crossmap::harness::io::{read_labels, CorrespondenceSource, Manifest};
use crossmap::harness::pipeline::{evaluate, run_pipeline, Metric, Task};
use crossmap::harness::synth::{generate_synthetic, write_synthetic, SyntheticSpec};
use crossmap::Error;
use serde_json::Value;

fn make_dataset(dir: &Path, spec: &str) -> PathBuf {
    let spec = SyntheticSpec::parse(spec, Path::new("spec.json")).unwrap();
    let data = generate_synthetic(&spec).unwrap();
    write_synthetic(&spec, &data, dir).unwrap()
}

const PERMUTED_COPY: &str = r#"{"family":"swiss_roll","n":200,"seed":12,"permutation_seed":5,
    "modalities":[{"id":"x","dim":3,"map":"identity"},{"id":"y","dim":3,"map":"identity"}],
    "fmbsd":{"alpha":1000,"beta":1,"lambda_b":0,"lambda_w":0,"knn":8}}"#;

const MOONS: &str = r#"{"family":"two_moons","n":150,"test_n":60,"seed":2,"permutation_seed":4,
    "latent_noise":0.1,"labeled_fraction":0.1,"label_seed":6,
    "modalities":[{"id":"a","dim":6,"map":"orthonormal","map_seed":1,"noise":0.05,"scale":3},
                  {"id":"b","dim":9,"map":"orthonormal","map_seed":2,"noise":0.05,"scale":3}],
    "fmbsd":{"alpha":1000,"beta":1,"lambda_b":0,"lambda_w":0,"knn":8,"k_basis":40},
    "m2cpc":{"gamma_a":0.001,"gamma_w":0.01,"gamma_b":0,"kernel_width":0.5,"knn":8}}"#;

fn json_report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn permuted_copy_is_recovered() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&tmp.path().join("data"), PERMUTED_COPY);
    let report = run_pipeline(&manifest, Task::Correspond, &tmp.path().join("out")).unwrap();
    let acc = report.value["pairs"][0]["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "recovered {acc}");
}

#[test]
fn reports_have_text_and_json_twins() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&tmp.path().join("data"), MOONS);
    let out = tmp.path().join("out");
    let report = run_pipeline(&manifest, Task::Correspond, &out).unwrap();
    assert_eq!(json_report(&out), report.value);
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("task = correspond"));
    assert!(text
        .lines()
        .any(|l| l.starts_with("pairs[0].descriptor_baseline_accuracy = ")));
}

fn with_m2cpc(manifest: &Path, gamma_b: f64, source: CorrespondenceSource) -> PathBuf {
    let text = fs::read_to_string(manifest).unwrap();
    let mut m = Manifest::parse(&text, manifest).unwrap();
    m.m2cpc.gamma_b = gamma_b;
    m.m2cpc.correspondences = source;
    let name = format!("manifest_{gamma_b}_{source:?}.json");
    let path = manifest.parent().unwrap().join(name);
    fs::write(&path, m.to_json()).unwrap();
    path
}

#[test]
fn between_term_off_makes_correspondences_irrelevant() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&tmp.path().join("data"), MOONS);
    let mut accuracies = Vec::new();
    for (i, source) in [
        CorrespondenceSource::Fmbsd,
        CorrespondenceSource::GroundTruth,
        CorrespondenceSource::None,
    ]
    .into_iter()
    .enumerate()
    {
        let m = with_m2cpc(&manifest, 0.0, source);
        let out = tmp.path().join(format!("out{i}"));
        let report = run_pipeline(&m, Task::Classify, &out).unwrap();
        accuracies.push(report.value["test"].clone());
        let preds = fs::read(out.join("predictions_a.csv")).unwrap();
        accuracies.push(Value::String(String::from_utf8(preds).unwrap()));
    }
    assert_eq!(accuracies[0], accuracies[2]);
    assert_eq!(accuracies[0], accuracies[4]);
    assert_eq!(accuracies[1], accuracies[3]);
    assert_eq!(accuracies[1], accuracies[5]);
}

#[test]
fn classification_reports_accuracy_consistent_with_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = make_dataset(&data, MOONS);
    let m = with_m2cpc(&manifest, 0.03, CorrespondenceSource::Fmbsd);
    let out = tmp.path().join("out");
    let report = run_pipeline(&m, Task::Classify, &out).unwrap();
    for (i, id) in ["a", "b"].iter().enumerate() {
        let reported = report.value["test"][i]["accuracy"].as_f64().unwrap();
        let evaluated = evaluate(
            &out.join(format!("predictions_{id}.csv")),
            &data.join(format!("{id}_test_labels.csv")),
            Metric::Accuracy,
        )
        .unwrap();
        assert_eq!(reported, evaluated);
        assert!(reported > 0.8, "{id}: {reported}");
        assert_eq!(
            read_labels(&out.join(format!("predictions_{id}.csv")))
                .unwrap()
                .len(),
            60
        );
    }
    let mean = report.value["mean_accuracy"].as_f64().unwrap();
    assert!(report.value["relative_residual"].as_f64().unwrap() <= 1e-8);
    assert!((0.0..=1.0).contains(&mean));
}

#[test]
fn full_length_retrieval_lists_every_target() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&tmp.path().join("data"), MOONS);
    let out = tmp.path().join("out");
    let report = run_pipeline(&manifest, Task::Retrieve { k: 150 }, &out).unwrap();
    let dirs = report.value["directions"].as_array().unwrap();
    assert_eq!(dirs.len(), 2);
    for d in dirs {
        let map = d["map"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&map));
        let file = out.join(d["rankings"].as_str().unwrap());
        for line in fs::read_to_string(file).unwrap().lines() {
            let mut ids: Vec<usize> = line.split(',').map(|v| v.parse().unwrap()).collect();
            ids.sort_unstable();
            assert_eq!(ids, (1..=150).collect::<Vec<_>>());
        }
    }
}

#[test]
fn stage_errors_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&tmp.path().join("data"), MOONS);
    let err = run_pipeline(
        &manifest,
        Task::Retrieve { k: 151 },
        &tmp.path().join("out"),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Stage { .. }));
    assert!(err.to_string().contains("retrieve a -> b"), "{err}");
    assert_eq!(err.exit_code(), 1);

    let single = tmp.path().join("single.json");
    fs::write(
        &single,
        r#"{"modalities":[{"id":"a","features":"data/a.csv"}]}"#,
    )
    .unwrap();
    let err = run_pipeline(&single, Task::Correspond, &tmp.path().join("out2")).unwrap_err();
    assert!(err.to_string().contains("at least two modalities"), "{err}");
}

#[test]
fn retrieval_without_labels_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, MOONS);
    let m = tmp.path().join("m.json");
    fs::write(
        &m,
        r#"{"modalities":[{"id":"a","features":"data/a.csv"},{"id":"b","features":"data/b.csv"}]}"#,
    )
    .unwrap();
    let err = run_pipeline(&m, Task::Retrieve { k: 5 }, &tmp.path().join("out")).unwrap_err();
    assert!(err.to_string().contains("needs labels"), "{err}");
}
