mod common;

use common::{random_grid, random_vision, tiny_model, tiny_text};
use tokenprune::clipcore::{ClipModel, VisionConfig};
use tokenprune::golden::{golden_scores, normalize_scores, ranking_from_scores, GoldenConfig, GoldenScores, ScoreKind};
use tokenprune::nncore::{SeededRng, Tensor};
use tokenprune::predictor::{Predictor, PredictorConfig, PredictorKind};
use tokenprune::pruning::*;
use tokenprune::Error;

fn keep(r: f32) -> KeepRate {
    KeepRate::new(r).unwrap()
}

fn drops(s: &PruneSchedule) -> Vec<(usize, usize)> {
    s.entries.iter().map(|e| (e.layer, e.drop_count)).collect()
}

#[test]
fn schedule_arithmetic() {
    let s = make_schedule(keep(0.6), &[4, 6, 8, 10], 196, Strategy::Predictor).unwrap();
    assert_eq!(drops(&s), vec![(4, 20), (6, 20), (8, 19), (10, 19)]);
    // rounding gives 78 dropped, two short of 20 per location
    assert_eq!(s.total_drop(), 78);
    assert_ne!(s.total_drop(), 80);
    assert!(make_schedule(keep(1.0), &[2, 3], 64, Strategy::Random).unwrap().entries.is_empty());
    let s = make_schedule(keep(0.5), &[2, 3, 4, 5], 64, Strategy::Random).unwrap();
    assert_eq!(drops(&s), vec![(2, 8), (3, 8), (4, 8), (5, 8)]);
    // fewer drops than locations: later locations drop nothing
    let s = make_schedule(keep(0.95), &[1, 2, 3, 4], 64, Strategy::Random).unwrap();
    assert_eq!(drops(&s), vec![(1, 1), (2, 1), (3, 1)]);
}

#[test]
fn schedule_errors() {
    assert!(matches!(KeepRate::new(0.0), Err(Error::Config(_))));
    assert!(matches!(KeepRate::new(1.01), Err(Error::Config(_))));
    assert!(matches!(KeepRate::new(f32::NAN), Err(Error::Config(_))));
    assert!(matches!(make_schedule(keep(0.001), &[1], 64, Strategy::Random), Err(Error::Config(_))));
    assert!(matches!(make_schedule(keep(0.5), &[], 64, Strategy::Random), Err(Error::Config(_))));
    assert!(matches!(make_schedule(keep(0.5), &[3, 3], 64, Strategy::Random), Err(Error::Config(_))));
    assert!(matches!(make_schedule(keep(0.5), &[0, 2], 64, Strategy::Random), Err(Error::Config(_))));
    let s = make_schedule(keep(0.5), &[2, 5], 16, Strategy::Random).unwrap();
    assert!(matches!(s.validate(4, 16), Err(Error::Schedule(_))));
    assert!(s.validate(5, 16).is_ok());
}

#[test]
fn lowest_keep_scores_drop_first_with_high_id_ties() {
    let ids = [3, 5, 8, 9, 11];
    let keep = [0.5, 0.1, 0.5, 0.1, 0.9];
    assert_eq!(lowest_k(&ids, &keep, 1).unwrap(), vec![9]);
    assert_eq!(lowest_k(&ids, &keep, 2).unwrap(), vec![5, 9]);
    assert_eq!(lowest_k(&ids, &keep, 3).unwrap(), vec![5, 8, 9]);
    assert!(matches!(lowest_k(&ids, &[0.0, f32::NAN, 0.0, 0.0, 0.0], 1), Err(Error::Numeric(_))));
}

fn golden_for(model: &ClipModel, grid: &tokenprune::data::TokenGrid) -> GoldenScores {
    let embs = model.encode_text(None).unwrap();
    let cfg = GoldenConfig {
        r: 2,
        ..Default::default()
    };
    golden_scores(model, &embs, grid, Some(0), &cfg, true).unwrap()
}

fn predictor_for(model: &ClipModel) -> Predictor {
    Predictor::new(
        PredictorConfig::for_model(model, PredictorKind::MixMlp, 2),
        &mut SeededRng::new(5),
    )
    .unwrap()
}

#[test]
fn empty_schedule_reproduces_unpruned_probs_bitwise() {
    let model = tiny_model(1, 3);
    let embs = model.encode_text(None).unwrap();
    let grid = random_grid(&mut SeededRng::new(2), 4, 12);
    let golden = golden_for(&model, &grid);
    let pred = predictor_for(&model);
    let base = model.classify(&model.encode_image(&grid, &[], None).unwrap().z_cls, &embs).unwrap();
    for strategy in Strategy::ALL {
        let mut rng = SeededRng::new(3);
        let mut inputs = PruneInputs::new(&embs);
        inputs.predictor = Some(&pred);
        inputs.golden = Some(&golden);
        inputs.rng = Some(&mut rng);
        let out = prune_infer(&model, &grid, &PruneSchedule::empty(strategy), &mut inputs).unwrap();
        assert_eq!(out.probs, base, "{strategy}");
        assert_eq!(out.flops.relative_to_unpruned, 1.0);
        assert_eq!(out.surviving_ids, (0..16).collect::<Vec<_>>());
    }
}

#[test]
fn survivors_are_conserved() {
    let model = tiny_model(4, 3);
    let embs = model.encode_text(None).unwrap();
    let pred = predictor_for(&model);
    let mut rng = SeededRng::new(6);
    for trial in 0..8 {
        let grid = random_grid(&mut rng, 4, 12);
        let golden = golden_for(&model, &grid);
        let strategy = Strategy::ALL[trial % 4];
        let sched = make_schedule(keep(0.4 + 0.05 * trial as f32), &[1, 2, 4], 16, strategy).unwrap();
        let mut r = rng.fork(trial as u64);
        let mut inputs = PruneInputs::new(&embs);
        inputs.predictor = Some(&pred);
        inputs.golden = Some(&golden);
        inputs.rng = Some(&mut r);
        let out = prune_infer(&model, &grid, &sched, &mut inputs).unwrap();
        assert_eq!(out.surviving_ids.len(), 16 - sched.total_drop());
        assert_eq!(out.trace.len(), sched.entries.len());
        for (st, e) in out.trace.iter().zip(&sched.entries) {
            assert_eq!(st.layer, e.layer);
            assert_eq!(st.dropped.len(), e.drop_count);
            for d in &st.dropped {
                assert!(!out.surviving_ids.contains(d));
                assert!(!st.surviving.contains(d));
            }
        }
        assert_eq!(out.trace.last().unwrap().surviving, out.surviving_ids);
    }
}

#[test]
fn strategies_drop_what_their_scores_say() {
    let model = tiny_model(7, 3);
    let embs = model.encode_text(None).unwrap();
    let grid = random_grid(&mut SeededRng::new(8), 4, 12);
    let golden = golden_for(&model, &grid);
    let pred = predictor_for(&model);
    let full = model.encode_image(&grid, &[], None).unwrap();
    let layer = 2;
    let k = 5;
    let sched = |s| PruneSchedule {
        entries: vec![ScheduleEntry { layer, drop_count: k }],
        strategy: s,
    };
    let run = |s: Strategy| {
        let mut inputs = PruneInputs::new(&embs);
        inputs.predictor = Some(&pred);
        inputs.golden = Some(&golden);
        let mut dropped = prune_infer(&model, &grid, &sched(s), &mut inputs).unwrap().trace[0].dropped.clone();
        dropped.sort_unstable();
        dropped
    };
    let top = |scores: &Tensor| {
        let mut t = ranking_from_scores(scores).unwrap().top(k).to_vec();
        t.sort_unstable();
        t
    };
    // highest golden score = most redundant
    assert_eq!(run(Strategy::GoldenOracle), top(&golden.normalized));
    let seq = &full.intermediates[&layer];
    let rows: Vec<usize> = (1..seq.rows()).collect();
    let ids: Vec<usize> = (0..16).collect();
    let s_hat = pred.score(&seq.gather_rows(&rows), &ids).unwrap();
    assert_eq!(run(Strategy::Predictor), top(&s_hat));
    let attn = cls_attention_prune_scores(&full, layer).unwrap();
    let neg = Tensor::vector(attn.data().iter().map(|v| -v).collect());
    assert_eq!(run(Strategy::ClsAttention), top(&neg));
    assert!((attn.data().iter().sum::<f32>() - 1.0).abs() < 1e-5);
}

#[test]
fn cls_attention_and_golden_disagree_somewhere() {
    let model = tiny_model(9, 3);
    let mut rng = SeededRng::new(10);
    let differs = (0..5).any(|_| {
        let grid = random_grid(&mut rng, 4, 12);
        let golden = golden_for(&model, &grid);
        let full = model.encode_image(&grid, &[], None).unwrap();
        let attn = cls_attention_prune_scores(&full, 2).unwrap();
        // most redundant by attention = lowest attention
        let neg = Tensor::vector(attn.data().iter().map(|v| -v).collect());
        let mut a = ranking_from_scores(&neg).unwrap().top(4).to_vec();
        let mut g = ranking_from_scores(&golden.normalized).unwrap().top(4).to_vec();
        a.sort_unstable();
        g.sort_unstable();
        a != g
    });
    assert!(differs);
}

#[test]
fn random_strategy_is_seeded() {
    let model = tiny_model(11, 3);
    let embs = model.encode_text(None).unwrap();
    let grid = random_grid(&mut SeededRng::new(12), 4, 12);
    let sched = make_schedule(keep(0.5), &[1, 3], 16, Strategy::Random).unwrap();
    let run = |seed| {
        let mut r = SeededRng::new(seed);
        let mut inputs = PruneInputs::new(&embs);
        inputs.rng = Some(&mut r);
        prune_infer(&model, &grid, &sched, &mut inputs).unwrap().surviving_ids
    };
    assert_eq!(run(1), run(1));
    assert!((2..6).any(|s| run(s) != run(1)));
}

#[test]
fn missing_strategy_inputs_are_usage_errors() {
    let model = tiny_model(13, 3);
    let embs = model.encode_text(None).unwrap();
    let grid = random_grid(&mut SeededRng::new(14), 4, 12);
    for s in [Strategy::Predictor, Strategy::GoldenOracle, Strategy::Random] {
        let sched = make_schedule(keep(0.5), &[2], 16, s).unwrap();
        let mut inputs = PruneInputs::new(&embs);
        assert!(matches!(prune_infer(&model, &grid, &sched, &mut inputs), Err(Error::Usage(_))), "{s}");
    }
    let sched = make_schedule(keep(0.5), &[2, 5], 16, Strategy::ClsAttention).unwrap();
    let mut inputs = PruneInputs::new(&embs);
    assert!(matches!(prune_infer(&model, &grid, &sched, &mut inputs), Err(Error::Schedule(_))));
}

#[test]
fn analytic_macs_match_instrumented_forward() {
    let mut rng = SeededRng::new(15);
    for trial in 0..20 {
        let vc = random_vision(&mut rng);
        let n = vc.num_patches;
        let names = vec!["a".to_string(), "b".to_string()];
        let model = ClipModel::new(vc.clone(), tiny_text(), names, &mut rng.fork(trial)).unwrap();
        let embs = model.encode_text(None).unwrap();
        let k = 1 + rng.below(vc.layers);
        let mut locs = rng.sample_indices(vc.layers, k);
        locs.sort_unstable();
        let locs: Vec<usize> = locs.into_iter().map(|l| l + 1).collect();
        let kr = 0.3 + 0.7 * rng.uniform();
        let sched = match make_schedule(keep(kr), &locs, n, Strategy::Random) {
            Ok(s) => s,
            Err(_) => PruneSchedule::empty(Strategy::Random),
        };
        let b_v = rng.below(3);
        let prompts = rng.normal_tensor(&[b_v, vc.dim], 0.0, 0.1);
        let grid = random_grid(&mut rng, (n as f64).sqrt() as usize, vc.patch_dim);
        let mut r = rng.fork(99);
        let mut inputs = PruneInputs::new(&embs);
        inputs.rng = Some(&mut r);
        inputs.prompts_v = Some(&prompts);
        let out = prune_infer(&model, &grid, &sched, &mut inputs).unwrap();
        let analytic = count_flops(&vc, &sched, b_v);
        assert_eq!(analytic.total_macs, out.instrumented_macs, "trial {trial}: {vc:?} {sched:?}");
        assert_eq!(analytic.per_layer.iter().sum::<u64>(), analytic.total_macs);
        assert_eq!(analytic.per_layer.len(), vc.layers + 2);
        assert!(analytic.relative_to_unpruned > 0.0 && analytic.relative_to_unpruned <= 1.0);
        assert_eq!(out.flops, analytic);
    }
}

#[test]
fn macs_decrease_with_more_drops() {
    let vc = VisionConfig::default();
    let n = vc.num_patches;
    let mut prev = count_flops(&vc, &PruneSchedule::empty(Strategy::Random), 0);
    assert_eq!(prev.relative_to_unpruned, 1.0);
    assert_eq!(prev.total_flops(), 2 * prev.total_macs);
    for pct in (1..=19).rev().map(|i| i * 5) {
        let s = make_schedule(keep(pct as f32 / 100.0), &[2, 3, 4, 5], n, Strategy::Random).unwrap();
        let cur = count_flops(&vc, &s, 0);
        if s.total_drop() > 0 {
            assert!(cur.total_macs < prev.total_macs, "keep {pct}%");
        }
        prev = cur;
    }
    // prompts add cost
    let s = PruneSchedule::empty(Strategy::Random);
    assert!(count_flops(&vc, &s, 16).total_macs > count_flops(&vc, &s, 0).total_macs);
}

#[test]
fn trace_file_roundtrip() {
    let model = tiny_model(16, 3);
    let embs = model.encode_text(None).unwrap();
    let mut rng = SeededRng::new(17);
    let sched = make_schedule(keep(0.5), &[1, 2], 16, Strategy::Random).unwrap();
    let mut records = Vec::new();
    for i in 0..3 {
        let grid = random_grid(&mut rng, 4, 12);
        let mut r = rng.fork(i);
        let mut inputs = PruneInputs::new(&embs);
        inputs.rng = Some(&mut r);
        let out = prune_infer(&model, &grid, &sched, &mut inputs).unwrap();
        records.push(TraceRecord::new(i as usize, &sched, &out));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace/prune.jsonl");
    write_trace(&path, &records).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    assert_eq!(read_trace(&path).unwrap(), records);
}

#[test]
fn degenerate_golden_input_still_prunes() {
    // constant golden scores: every keep score ties, highest ids go first
    let model = tiny_model(18, 3);
    let embs = model.encode_text(None).unwrap();
    let grid = random_grid(&mut SeededRng::new(19), 4, 12);
    let golden = normalize_scores(&Tensor::vector(vec![0.5; 16]), &[1; 16], ScoreKind::Preservation, 2).unwrap();
    let sched = make_schedule(keep(0.75), &[2], 16, Strategy::GoldenOracle).unwrap();
    let mut inputs = PruneInputs::new(&embs);
    inputs.golden = Some(&golden);
    let out = prune_infer(&model, &grid, &sched, &mut inputs).unwrap();
    assert_eq!(out.trace[0].dropped, vec![12, 13, 14, 15]);
}
