mod common;

use std::sync::OnceLock;

use common::tiny_pipeline;
use tokenprune::bench::*;
use tokenprune::predictor::PredictorKind;
use tokenprune::pruning::Strategy;
use tokenprune::Error;

fn runs() -> &'static Vec<SeedRun> {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| build_runs(&ExperimentSpec::new("tiny", tiny_pipeline())).unwrap())
}

fn row(grid: &str, seed: u64) -> ResultRow {
    ResultRow {
        experiment: "sweep".into(),
        grid_id: grid.into(),
        seed,
        strategy: Strategy::Predictor,
        keep_rate: 0.6,
        locations: "2-3-4-5".into(),
        arch: Some(PredictorKind::MixMlp),
        tuning: "none".into(),
        train_variant: None,
        test_variant: Some(1),
        accuracy: 87.5,
        mean_true_prob: 0.123_456_79,
        matching_rate: Some(57.128906),
        match_k: Some(16),
        total_macs: 11_883_648,
        relative_macs: 0.73251960676019,
        wall_time_s: 0.0,
    }
}

#[test]
fn report_roundtrip_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = row("sweep/random/keep0.60", 1);
    b.strategy = Strategy::Random;
    b.arch = None;
    b.matching_rate = None;
    b.match_k = None;
    b.accuracy = 1.0 / 3.0;
    let rows = vec![b.clone(), row("sweep/predictor/keep0.60", 2), row("sweep/predictor/keep0.60", 0)];
    let files = emit_report(&rows, dir.path(), "t").unwrap();
    let back = read_rows(&files.rows).unwrap();
    assert_eq!(back, vec![row("sweep/predictor/keep0.60", 0), row("sweep/predictor/keep0.60", 2), b]);
}

#[test]
fn empty_rows_give_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&[], dir.path(), "empty").unwrap();
    let text = std::fs::read_to_string(&files.rows).unwrap();
    assert_eq!(text, format!("{}\n", COLUMNS.join(",")));
    assert!(read_rows(&files.rows).unwrap().is_empty());
    assert_eq!(std::fs::read_to_string(&files.summary).unwrap(), "[]\n");
}

#[test]
fn column_order_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&[row("g", 0)], dir.path(), "one").unwrap();
    let text = std::fs::read_to_string(&files.rows).unwrap();
    assert_eq!(
        text,
        "experiment,grid_id,seed,strategy,keep_rate,locations,arch,tuning,train_variant,test_variant,\
         accuracy,mean_true_prob,matching_rate,match_k,total_macs,relative_macs,wall_time_s\n\
         sweep,g,0,predictor,0.6,2-3-4-5,mix_mlp,none,,1,87.5,0.12345679,57.128906,16,11883648,0.73251960676019,0.0\n"
    );
    let plot = std::fs::read_to_string(&files.plot).unwrap();
    assert_eq!(plot, "series,keep_rate,accuracy,mean_true_prob\npredictor/mix_mlp,0.6,87.5,0.12345679\n");
}

#[test]
fn reemission_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<ResultRow> = (0..5).map(|s| row(&format!("g{}", s % 2), s)).collect();
    let a = emit_report(&rows, dir.path(), "a").unwrap();
    let reread = read_rows(&a.rows).unwrap();
    let b = emit_report(&reread, dir.path(), "b").unwrap();
    for (x, y) in [(a.rows, b.rows), (a.summary, b.summary), (a.plot, b.plot)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn read_rows_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    assert!(matches!(read_rows(&missing), Err(Error::MissingArtifact(_))));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "seed,experiment\n0,x\n").unwrap();
    assert!(matches!(read_rows(&bad), Err(Error::Parse { .. })));
}

#[test]
fn summary_aggregates_seeds() {
    let mut a = row("g", 0);
    a.accuracy = 50.0;
    let b = row("g", 1);
    let s = summarize(&[a, b]);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].seeds, vec![0, 1]);
    assert_eq!(s[0].accuracy_mean, 68.75);
    assert_eq!((s[0].accuracy_min, s[0].accuracy_max), (50.0, 87.5));
}

#[test]
fn config_validation() {
    let cfg = PipelineConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.match_k(), 16);

    let mut bad = cfg.clone();
    bad.location_sets.push(vec![3, 4, 7]);
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = cfg.clone();
    bad.seeds.clear();
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = cfg.clone();
    bad.vision.num_patches = 49;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = cfg.clone();
    bad.cross_variants = vec![1, 1];
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn config_file_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"seeds": [4], "tuning_keep": 0.5, "golden": {"r": 3}}"#).unwrap();
    let cfg = PipelineConfig::from_json_file(&p).unwrap();
    assert_eq!(cfg.seeds, vec![4]);
    assert_eq!(cfg.golden.r, 3);
    assert_eq!(cfg.keep_rates, PipelineConfig::default().keep_rates);

    std::fs::write(&p, r#"{"seeds": [4], "keep_rate": 0.5}"#).unwrap();
    assert!(matches!(PipelineConfig::from_json_file(&p), Err(Error::Parse { .. })));
    std::fs::write(&p, r#"{"tuning_keep": 1.5}"#).unwrap();
    assert!(matches!(PipelineConfig::from_json_file(&p), Err(Error::Config(_))));
    assert!(matches!(
        PipelineConfig::from_json_file(&dir.path().join("none.json")),
        Err(Error::Config(_))
    ));
}

#[test]
fn artifact_key_tracks_model_settings_only() {
    let a = PipelineConfig::default();
    let mut b = a.clone();
    b.keep_rates = vec![0.5];
    assert_eq!(a.artifact_key(), b.artifact_key());
    b.golden.r = 3;
    assert_ne!(a.artifact_key(), b.artifact_key());
}

#[test]
fn missing_stage_names_its_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::new(dir.path());
    let cfg = tiny_pipeline();
    let msg = |e: Error| match e {
        Error::MissingArtifact(m) => m,
        e => panic!("expected a missing artifact, got {e}"),
    };
    assert!(msg(store.load_run(&cfg, 0).unwrap_err()).contains("gen-data"));
    assert!(msg(store.pretrain(&cfg, 0).unwrap_err()).contains("gen-data"));
    store.gen_data(&cfg, 0).unwrap();
    assert!(msg(store.golden(&cfg, 0).unwrap_err()).contains("`pretrain`"));
    store.pretrain(&cfg, 0).unwrap();
    assert!(msg(store.train_predictor(&cfg, 0).unwrap_err()).contains("`golden`"));
    store.golden(&cfg, 0).unwrap();
    assert!(msg(store.load_run(&cfg, 0).unwrap_err()).contains("train-predictor"));
    store.train_predictor(&cfg, 0).unwrap();

    // cached stages reproduce the in-memory run exactly
    let cached = store.load_run(&cfg, 0).unwrap();
    let sweep_cached = run_keep_rate_sweep(&cfg, std::slice::from_ref(&cached)).unwrap();
    let sweep_memory = run_keep_rate_sweep(&cfg, &runs()[..1]).unwrap();
    assert_eq!(sweep_cached, sweep_memory);
    assert_eq!(cached.predictor_mr, runs()[0].predictor_mr);
}

#[test]
fn sweep_shape_and_identity() {
    let cfg = tiny_pipeline();
    let rows = run_keep_rate_sweep(&cfg, runs()).unwrap();
    assert_eq!(rows.len(), cfg.keep_rates.len() * Strategy::ALL.len() * cfg.seeds.len());
    for seed in &cfg.seeds {
        let full: Vec<&ResultRow> = rows.iter().filter(|r| r.keep_rate == 1.0 && r.seed == *seed).collect();
        assert_eq!(full.len(), Strategy::ALL.len());
        for r in &full {
            assert_eq!(r.accuracy, full[0].accuracy);
            assert_eq!(r.mean_true_prob, full[0].mean_true_prob);
            assert_eq!(r.total_macs, full[0].total_macs);
            assert_eq!(r.relative_macs, 1.0);
        }
    }
    for r in &rows {
        assert!((0.0..=100.0).contains(&r.accuracy));
        assert!(r.relative_macs > 0.0 && r.relative_macs <= 1.0);
        assert_eq!(r.matching_rate.is_some(), r.strategy == Strategy::Predictor);
    }
    let again = run_keep_rate_sweep(&cfg, runs()).unwrap();
    assert_eq!(rows, again);
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| (&a.grid_id, a.seed).cmp(&(&b.grid_id, b.seed)));
    assert_eq!(rows, sorted);
}

#[test]
fn location_ablation_shape() {
    let cfg = tiny_pipeline();
    let rows = run_location_ablation(&cfg, runs()).unwrap();
    assert_eq!(rows.len(), cfg.location_sets.len() * cfg.seeds.len());
    // conservation: every set removes the same number of tokens
    assert!(rows.iter().all(|r| r.keep_rate == cfg.location_keep));
    let n = cfg.num_tokens();
    for set in &cfg.location_sets {
        let s = tokenprune::pruning::make_schedule(
            tokenprune::pruning::KeepRate::new(cfg.location_keep).unwrap(),
            set,
            n,
            Strategy::Predictor,
        )
        .unwrap();
        assert_eq!(s.total_drop(), (n as f32 * (1.0 - cfg.location_keep)).round() as usize);
    }
}

#[test]
fn arch_ablation_shape_and_reproducibility() {
    let cfg = tiny_pipeline();
    let rows = run_arch_ablation(&cfg, runs()).unwrap();
    assert_eq!(rows.len(), 3 * cfg.arch_keep_rates.len() * cfg.seeds.len());
    for arch in PredictorKind::ALL {
        assert_eq!(
            rows.iter().filter(|r| r.arch == Some(arch)).count(),
            cfg.arch_keep_rates.len() * cfg.seeds.len()
        );
    }
    assert_eq!(rows, run_arch_ablation(&cfg, runs()).unwrap());
    // the configured architecture reproduces the run's own predictor
    let mix = rows.iter().find(|r| r.arch == Some(PredictorKind::MixMlp) && r.seed == 0).unwrap();
    assert_eq!(mix.matching_rate, Some(runs()[0].predictor_mr));
}

#[test]
fn tuning_grid_shape_and_accounting() {
    let cfg = tiny_pipeline();
    let rows = run_tuning_grid(&cfg, &runs()[..1]).unwrap();
    assert_eq!(rows.len(), 6);
    let get = |t: &str, pruned: bool| {
        rows.iter()
            .find(|r| r.tuning == t && (r.keep_rate < 1.0) == pruned)
            .unwrap_or_else(|| panic!("missing cell {t} {pruned}"))
    };
    for t in ["none", "t_only", "t_and_v"] {
        assert!(get(t, false).relative_macs > get(t, true).relative_macs);
        assert_eq!(get(t, false).relative_macs, 1.0);
    }
    // visual prompts add tokens to every block
    assert!(get("t_and_v", false).total_macs > get("t_only", false).total_macs);
    assert_eq!(get("t_only", false).total_macs, get("none", false).total_macs);
}

#[test]
fn cross_dataset_matrix() {
    let mut cfg = tiny_pipeline();
    cfg.seeds = vec![3];
    let rows = run_cross_dataset(&cfg, &cfg.seeds).unwrap();
    let v = cfg.cross_variants.len();
    assert_eq!(rows.len(), v * v);
    for a in &cfg.cross_variants {
        for b in &cfg.cross_variants {
            let r = rows
                .iter()
                .find(|r| r.train_variant == Some(*a) && r.test_variant == Some(*b))
                .unwrap();
            assert_eq!(r.grid_id, format!("cross/train{a}/test{b}"));
            assert_eq!(r.keep_rate, cfg.cross_keep);
        }
    }
    assert_eq!(rows, run_cross_dataset(&cfg, &cfg.seeds).unwrap());
}

#[test]
fn random_strategy_depends_on_seed_only() {
    let cfg = tiny_pipeline();
    let run = &runs()[0];
    let sched = tokenprune::pruning::make_schedule(
        tokenprune::pruning::KeepRate::new(0.5).unwrap(),
        &cfg.locations,
        cfg.num_tokens(),
        Strategy::Random,
    )
    .unwrap();
    let ctx = EvalContext::for_run(run);
    assert_eq!(evaluate(&ctx, &sched).unwrap(), evaluate(&ctx, &sched).unwrap());
}
