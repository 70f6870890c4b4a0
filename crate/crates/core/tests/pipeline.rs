use std::path::Path;

use agribench::models::ModelKind;
use agribench::pipeline::{emit_tables, run_pipeline, ErrorKind, Run, RunConfig, Stage};

fn write_series(path: &Path, n: usize, phase: f64) {
    let start = chrono::NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    let mut s = String::from("date,min_price,max_price\n");
    for i in 0..n {
        let t = i as f64;
        let mid = 50.0 + 10.0 * (2.0 * std::f64::consts::PI * t / 7.0 + phase).sin() + 0.02 * t;
        let date = start + chrono::Days::new(i as u64);
        s.push_str(&format!("{},{:.2},{:.2}\n", date.format("%Y-%m-%d"), mid - 1.0, mid + 1.0));
    }
    std::fs::write(path, s).unwrap();
}

fn config(dir: &Path, models: &str, extra: &str) -> RunConfig {
    write_series(&dir.join("alpha.csv"), 420, 0.0);
    write_series(&dir.join("beta.csv"), 420, 1.0);
    let text = format!(
        "[run]\nseed = 3\nmodels = [{models}]\noutput_dir = \"out\"\n\n[data]\nalpha = \"alpha.csv\"\nbeta = \"beta.csv\"\n\n\
         [window]\nseq_len = 28\nhorizon = 7\n\n[diagnostics]\nperiod = 7\n\n[train]\nmax_epochs = 2\n{extra}"
    );
    RunConfig::parse(&text, dir).unwrap()
}

#[test]
fn naive_only_run_has_one_row_per_commodity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "\"naive\"", "");
    cfg.data.remove("beta");
    let report = run_pipeline(cfg, 1).unwrap();
    assert_eq!(report.metrics.len(), 1);
    assert_eq!(report.metrics[0].model, ModelKind::Naive);
    assert!(report.dm.is_empty());
    let out = dir.path().join("out");
    for f in ["metrics.csv", "diagnostics.csv", "dm.csv", "summary.txt", "provenance.txt"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(text.starts_with("# config_hash="), "{f}");
    }
    let forecasts = std::fs::read_to_string(out.join("forecasts/alpha/naive.csv")).unwrap();
    assert_eq!(
        forecasts.lines().nth(1).unwrap(),
        "commodity,model,window_id,step,date,actual,predicted"
    );
}

#[test]
fn rerun_is_byte_identical_across_jobs_and_directories() {
    let dir = tempfile::tempdir().unwrap();
    let models = "\"naive\", \"sarima\", \"transformer\", \"t2v_transformer\"";
    let cfg = config(dir.path(), models, "");
    let a = run_pipeline(cfg.clone(), 1).unwrap();
    let mut again = cfg;
    again.output_dir = dir.path().join("second");
    let b = run_pipeline(again, 2).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.dm, b.dm);
    assert_eq!(a.metrics.len(), 8);
    assert_eq!(a.dm.len(), 2);
    for f in ["metrics.csv", "dm.csv", "diagnostics.csv", "forecasts/beta/sarima.csv"] {
        let x = std::fs::read(dir.path().join("out").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("second").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn stages_run_independently_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "\"naive\", \"sarima\"", "[dm]\npairs = [\"sarima:naive\"]\n");
    let run = Run::new(cfg.clone()).unwrap();
    for c in run.commodities() {
        run.ingest(&c).unwrap();
    }
    assert_eq!(run.predict("alpha", ModelKind::Naive).unwrap_err().kind, ErrorKind::Config);
    for c in run.commodities() {
        run.diagnose(&c).unwrap();
        for m in [ModelKind::Naive, ModelKind::Sarima] {
            run.train(&c, m).unwrap();
        }
    }
    let fresh = Run::new(cfg).unwrap();
    for c in fresh.commodities() {
        for m in [ModelKind::Naive, ModelKind::Sarima] {
            fresh.predict(&c, m).unwrap();
        }
    }
    let report = fresh.report(None).unwrap();
    emit_tables(&report, fresh.layout()).unwrap();
    assert_eq!(report.metrics.len(), 4);
    assert_eq!(report.dm.len(), 2);
    assert_eq!(report.diagnostics.len(), 2);
}

#[test]
fn artifacts_from_another_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "\"naive\"", "");
    run_pipeline(cfg.clone(), 1).unwrap();
    let mut changed = cfg;
    changed.seed = 4;
    let run = Run::new(changed).unwrap();
    let err = run.predict("alpha", ModelKind::Naive).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Config);
    assert!(err.message.contains("refusing to mix"), "{}", err.message);
}

#[test]
fn failures_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "\"naive\"", "");
    std::fs::write(dir.path().join("beta.csv"), "date,min_price,max_price\n2021-01-01,abc,2\n").unwrap();
    let err = run_pipeline(cfg.clone(), 1).unwrap_err();
    assert_eq!((err.stage, err.kind), (Stage::Ingest, ErrorKind::Data));
    assert_eq!(err.exit_code(), 2);
    std::fs::remove_file(dir.path().join("beta.csv")).unwrap();
    assert_eq!(run_pipeline(cfg, 1).unwrap_err().exit_code(), 1);
}

#[test]
fn forecasts_start_at_the_test_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "\"naive\"", "");
    run_pipeline(cfg.clone(), 1).unwrap();
    let run = Run::new(cfg).unwrap();
    let n = run.load_series("alpha").unwrap().len();
    let split = agribench::split::temporal_split(n, run.config().fractions).unwrap();
    let f = run.load_forecasts("alpha", ModelKind::Naive).unwrap();
    let first_test_date = run.load_series("alpha").unwrap().dates()[split.test.start];
    let earliest = f.rows.iter().map(|r| r.date.clone()).min().unwrap();
    assert_eq!(earliest, first_test_date.format("%Y-%m-%d").to_string());
}
