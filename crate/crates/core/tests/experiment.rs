use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bias_audit::annotation::{AnnotationSession, VerdictSubmission};
use bias_audit::experiment::*;
use bias_audit::metrics::{BiasCountTable, MetricsReport};
use bias_audit::Error;

/// A desk-sized configuration that exercises every stage in seconds.
fn small_config(out: &Path) -> ExperimentConfig {
    let toml = r#"
        [experiment]
        seed = 11
        parallel = false

        [dataset]
        class_train_size = 16
        test_fraction = 0.25

        [dataset.synthetic]
        per_subgroup = 24
        width = 32
        height = 32
        attribute_count = 1
        glyph_size = 8
        marker_size = 8

        [extractor]
        channels = [4, 6]
        pools = [true, false]

        [pretrain]
        samples = 64
        epochs = 1

        [training]
        epochs = 3
        hidden = 4

        [gradcam]
        budget_per_subgroup = 4

        [tcav]
        runs = 3
        random_runs = 3
        examples_per_concept = 8

        [tolerances]
        disc_color = 0.0
    "#;
    let mut c = ExperimentConfig::from_toml(toml).unwrap();
    c.experiment.out = out.to_path_buf();
    c
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn auto_run_writes_every_table_with_one_row_per_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let (store, summary) = run_experiment(&small_config(&tmp.path().join("run"))).unwrap();
    assert!(summary.success(), "{:?}", summary.failures);
    assert_eq!(summary.completed, ["1:0", "3:1", "1:1", "1:3", "0:1"]);
    let reports = store.root().join(REPORTS_DIR);
    for name in ["accuracy.csv", "counts.csv", "metrics.csv", "tcav.csv"] {
        let text = fs::read_to_string(reports.join(name)).unwrap();
        let ratios: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        let mut distinct = ratios.clone();
        distinct.dedup();
        assert_eq!(distinct, ["1:0", "3:1", "1:1", "1:3", "0:1"], "{name}");
    }
    let metrics = fs::read_to_string(reports.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("ratio,unfairness,M1,M2,M3,M4\n"));

    // Every rendered metric is re-derivable from the stored report.
    for ratio in &summary.completed {
        let report: MetricsReport = store.read_json(Scope::Ratio(ratio), METRICS_FILE).unwrap();
        let line = metrics.lines().find(|l| l.starts_with(&format!("{ratio},"))).unwrap();
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.1}")).unwrap_or_default();
        let expected = [report.unfairness, report.m1, report.m2, report.m3, report.m4]
            .map(fmt)
            .join(",");
        assert_eq!(line, format!("{ratio},{expected}"));
        // A zero tolerance flags any disparity without failing the report.
        assert_eq!(report.flags.is_empty(), report.unfairness == Some(0.0));
        let counts: BiasCountTable = store.read_json(Scope::Ratio(ratio), COUNTS_FILE).unwrap();
        assert_eq!(counts.totals().2 + counts.unjudgeable, 16);
    }

    // Provenance lists each stage once, with the derived seed.
    let provenance = store.provenance().unwrap();
    let train: Vec<_> = provenance.iter().filter(|p| p.stage == "train").collect();
    assert_eq!(train.len(), 5);
    assert!(train.iter().all(|p| p.status == StageStatus::Done && p.seed.is_some()));
}

#[test]
fn identical_runs_give_identical_tables_and_complete_resume_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = run_experiment(&small_config(&tmp.path().join("a"))).unwrap();
    let (b, _) = run_experiment(&small_config(&tmp.path().join("b"))).unwrap();
    for ratio in ["1:0", "1:1", "0:1"] {
        for name in [ACCURACY_FILE, METRICS_FILE, COUNTS_FILE, TCAV_FILE] {
            assert_eq!(
                fs::read(a.path(Scope::Ratio(ratio), name)).unwrap(),
                fs::read(b.path(Scope::Ratio(ratio), name)).unwrap(),
                "{ratio} {name}"
            );
        }
    }
    for name in ["accuracy.csv", "metrics.csv", "accuracy.md", "metrics.md"] {
        assert_eq!(
            fs::read(a.root().join(REPORTS_DIR).join(name)).unwrap(),
            fs::read(b.root().join(REPORTS_DIR).join(name)).unwrap(),
            "{name}"
        );
    }

    let before = snapshot(a.root());
    let (_, summary) = resume_experiment(a.root(), Some(a.config()), None).unwrap();
    assert_eq!(summary.completed.len(), 5);
    assert_eq!(snapshot(a.root()), before);
}

#[test]
fn resume_refuses_an_edited_config_and_recreate_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(&tmp.path().join("run"));
    config.experiment.ratios = vec!["1:1".parse().unwrap()];
    config.tcav.enabled = false;
    let (store, _) = run_experiment(&config).unwrap();
    let mut edited = config.clone();
    edited.gradcam.tau = 0.7;
    match resume_experiment(store.root(), Some(&edited), None) {
        Err(Error::ConfigChanged(keys)) => assert_eq!(keys, ["gradcam.tau"]),
        other => panic!("expected refusal, got {other:?}"),
    }
    assert!(matches!(run_experiment(&config), Err(Error::Store(_))));
    // Without TCAV the table is omitted and the others still render.
    let reports = store.root().join(REPORTS_DIR);
    assert!(!reports.join("tcav.md").exists());
    assert!(reports.join("metrics.md").exists());
}

#[test]
fn partial_resume_runs_only_the_missing_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(&tmp.path().join("run"));
    config.experiment.ratios = vec!["3:1".parse().unwrap()];
    let store = ResultsStore::create(&config).unwrap();
    drop(store);
    let (store, summary) = resume_experiment(&config.experiment.out, None, Some(Stage::Evaluate)).unwrap();
    assert_eq!(summary.pending, ["3:1"]);
    assert!(store.exists(Scope::Ratio("3:1"), ACCURACY_FILE));
    assert!(!store.exists(Scope::Ratio("3:1"), RECORDS_FILE));
    let model_before = fs::read(store.path(Scope::Ratio("3:1"), MODEL_FILE)).unwrap();
    let (store, summary) = resume_experiment(&config.experiment.out, Some(&config), None).unwrap();
    assert_eq!(summary.completed, ["3:1"]);
    assert_eq!(fs::read(store.path(Scope::Ratio("3:1"), MODEL_FILE)).unwrap(), model_before);
    let trains = store.provenance().unwrap().iter().filter(|p| p.stage == "train").count();
    assert_eq!(trains, 1);

    // The stage artifacts equal those of an uninterrupted run.
    let mut fresh = config.clone();
    fresh.experiment.out = tmp.path().join("fresh");
    let (fresh, _) = run_experiment(&fresh).unwrap();
    for name in [ACCURACY_FILE, METRICS_FILE] {
        assert_eq!(
            fs::read(store.path(Scope::Ratio("3:1"), name)).unwrap(),
            fs::read(fresh.path(Scope::Ratio("3:1"), name)).unwrap()
        );
    }
}

#[test]
fn a_failing_ratio_does_not_stop_the_others() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(&tmp.path().join("run"));
    // 18 training samples per subgroup: 1:0 needs 30 of one instance.
    config.dataset.class_train_size = 30;
    config.experiment.ratios = vec!["1:0".parse().unwrap(), "1:1".parse().unwrap()];
    config.tcav.enabled = false;
    let (store, summary) = run_experiment(&config).unwrap();
    assert_eq!(summary.completed, ["1:1"]);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].ratio, "1:0");
    assert_eq!(summary.failures[0].stage, Stage::Split);
    assert!(summary.failures[0].error.contains("insufficient"), "{}", summary.failures[0].error);
    let failed = store
        .provenance()
        .unwrap()
        .into_iter()
        .find(|p| p.status == StageStatus::Failed)
        .unwrap();
    assert_eq!((failed.scope.as_str(), failed.stage.as_str()), ("1:0", "split"));
    let metrics = fs::read_to_string(store.root().join(REPORTS_DIR).join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn human_mode_waits_for_verdicts_then_reports_from_them() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(&tmp.path().join("run"));
    config.experiment.judging = JudgingMode::Human;
    config.annotation.enabled = true;
    config.experiment.ratios = vec!["1:0".parse().unwrap()];
    let (store, summary) = run_experiment(&config).unwrap();
    assert_eq!(summary.pending, ["1:0"]);
    assert!(store.exists(Scope::Ratio("1:0"), TCAV_FILE));
    assert!(!store.exists(Scope::Ratio("1:0"), METRICS_FILE));
    let dirs = session_dirs(&store);
    assert_eq!(dirs.len(), 1);

    // Resuming before every item is judged changes nothing.
    let (_, summary) = resume_experiment(store.root(), None, None).unwrap();
    assert_eq!(summary.pending, ["1:0"]);

    let mut session = AnnotationSession::open(&dirs[0]).unwrap();
    assert_eq!(session.id(), session_id(&"1:0".parse().unwrap()));
    assert_eq!(session.items().len(), 16);
    let ids: Vec<String> = session.items().iter().map(|i| i.item_id.clone()).collect();
    assert!(session.overlay_path(&ids[0]).unwrap().exists());
    for (k, id) in ids.iter().enumerate() {
        let biased = k % 2 == 0;
        session
            .submit_verdict(
                id,
                VerdictSubmission {
                    biased,
                    attribute: biased.then(|| "disc_color".to_string()),
                    feature: biased.then(|| "disc".to_string()),
                    annotator: None,
                },
            )
            .unwrap();
    }
    let expected = session.export_counts(false).unwrap();
    let (store, summary) = resume_experiment(store.root(), Some(&config), None).unwrap();
    assert_eq!(summary.completed, ["1:0"]);
    let counts: BiasCountTable = store.read_json(Scope::Ratio("1:0"), COUNTS_FILE).unwrap();
    assert_eq!(counts, expected);
    let report: MetricsReport = store.read_json(Scope::Ratio("1:0"), METRICS_FILE).unwrap();
    assert_eq!(report.m2, Some(50.0));
    assert_eq!(report.params.judging, "human");
}
