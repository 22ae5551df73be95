use loadanon::backtest::{
    aggregate_anonymized, aggregate_raw, parse_config, run_experiment, ExperimentConfig, ExperimentReport, Level,
};
use loadanon::forecast::{fit_model, predict_recursive, ModelKind, ModelSpec};
use loadanon::ingest::{synth_panel, SynthConfig};
use loadanon::mdav::anonymize;
use loadanon::panel::ProfilePanel;

fn year_panel(n: usize) -> ProfilePanel {
    synth_panel(&SynthConfig {
        n_households: n,
        days: 365,
        seed: 21,
        ..Default::default()
    })
    .unwrap()
}

fn small_config(extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
            "input": "unused.csv",
            "k_ladder": [2, 3, 5],
            "models": [
                {{"kind": "seasonal-naive"}},
                {{"kind": "decomposition"}},
                {{"kind": "lag-linear"}},
                {{"kind": "mlp", "mlp": {{"input_window": 96, "hidden": 4, "epochs": 2, "max_windows": 32}}}}
            ],
            "seed": 17
            {extra}
        }}"#
    );
    parse_config(&text).unwrap()
}

#[test]
fn full_grid_is_complete() {
    // Fifteen-level default ladder plus raw, four models, five windows and
    // two repeats; k beyond the panel size collapses to one group.
    let panel = year_panel(6);
    let text = r#"{
        "input": "unused.csv",
        "models": [
            {"kind": "seasonal-naive"},
            {"kind": "decomposition"},
            {"kind": "lag-linear"},
            {"kind": "mlp", "mlp": {"input_window": 48, "hidden": 2, "epochs": 1, "max_windows": 8}}
        ],
        "seed": 5
    }"#;
    let config = parse_config(text).unwrap();
    let report = run_experiment(&config, &panel).unwrap();
    assert_eq!(report.levels.len(), 16);
    assert_eq!(report.records.len() + report.failures.len(), 16 * 4 * 5 * 2);
    assert!(report.failures.is_empty(), "{:?}", report.failures.first());
    assert_eq!(report.summaries.len(), 16 * 4);
    assert!(report.summaries.iter().all(|s| s.count == 10));
}

#[test]
fn reports_are_deterministic_across_thread_counts() {
    let panel = year_panel(8);
    let config = small_config(r#", "repeats": 1, "sample_size": 6"#);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| serde_json::to_string(&run_experiment(&config, &panel).unwrap()).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, run(1));
}

#[test]
fn later_data_does_not_leak_into_forecasts() {
    let panel = year_panel(5);
    let config = small_config(r#", "repeats": 1, "windows": [{"train_end": "2013-08-28"}]"#);
    let base = run_experiment(&config, &panel).unwrap();
    // Everything after the forecast day is overwritten.
    let cut = panel
        .index()
        .position(chrono::TimeZone::with_ymd_and_hms(&chrono::Utc, 2013, 8, 30, 0, 0, 0).unwrap())
        .unwrap();
    let rows: Vec<Vec<f64>> = panel
        .rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, v)| if j >= cut { 50.0 } else { *v })
                .collect()
        })
        .collect();
    let altered = ProfilePanel::from_rows(panel.ids().to_vec(), *panel.index(), &rows).unwrap();
    let other = run_experiment(&config, &altered).unwrap();
    // Grouping sees whole series (the anonymized release precedes any
    // forecasting), so only the raw level is comparable here.
    let raw = |r: &ExperimentReport| {
        r.records
            .iter()
            .filter(|x| x.k == Level::Raw)
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(raw(&base).len(), 4);
    assert_eq!(raw(&base), raw(&other));
}

#[test]
fn centroid_forecasts_ignore_later_data() {
    let panel = year_panel(6);
    let anon = anonymize(&panel, 2).unwrap();
    let cal = *panel.index();
    let origin = cal
        .position(chrono::TimeZone::with_ymd_and_hms(&chrono::Utc, 2013, 8, 29, 0, 0, 0).unwrap())
        .unwrap();
    let spec = ModelSpec::new(ModelKind::LagLinear);
    for c in anon.centroids() {
        let mut altered = c.to_vec();
        altered[origin..].iter_mut().for_each(|v| *v = 0.0);
        let f = |s: &[f64]| {
            predict_recursive(
                &fit_model(&spec, &s[..origin], &cal, 0).unwrap(),
                &s[..origin],
                &cal,
                48,
            )
            .unwrap()
        };
        assert_eq!(f(c), f(&altered));
    }
}

#[test]
fn csv_has_five_rows_per_record() {
    let panel = year_panel(4);
    let config = small_config(r#", "repeats": 1, "windows": [{"train_end": "2013-09-28"}]"#);
    let report = run_experiment(&config, &panel).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("k,model,window,repeat,metric,value"));
    assert_eq!(text.lines().count(), 1 + 5 * report.records.len());
    assert!(text.lines().any(|l| l.starts_with("raw,lag-linear,1,0,mae,")));
}

#[test]
fn conservation_across_levels() {
    let panel = year_panel(30);
    let raw_rows: Vec<Vec<f64>> = panel.rows().map(<[f64]>::to_vec).collect();
    let raw = aggregate_raw(&raw_rows).unwrap();
    for k in [1, 2, 4, 7, 15, 30, 45] {
        let anon = anonymize(&panel, k).unwrap();
        let cents: Vec<Vec<f64>> = anon.centroids().map(<[f64]>::to_vec).collect();
        let agg = aggregate_anonymized(&cents, &anon.group_sizes()).unwrap();
        for (a, b) in raw.iter().zip(&agg) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "k={k}");
        }
    }
}

#[test]
fn window_outside_panel_is_an_error() {
    let panel = synth_panel(&SynthConfig {
        n_households: 3,
        days: 30,
        ..Default::default()
    })
    .unwrap();
    let config = small_config("");
    assert!(run_experiment(&config, &panel).is_err());
    assert_eq!(config.levels()[0], Level::Raw);
}
