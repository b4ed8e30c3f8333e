mod common;

use common::{random_grid, random_plan, reference_forward, tiny_model};
use tokenprune::clipcore::{
    cls_attention_scores, pretrain_contrastive, zero_shot_probs, ClassEmbeddings, ClipModel, PretrainConfig,
    RemovalStep,
};
use tokenprune::data::{generate_synthetic, SplitCounts, SplitRole, SyntheticConfig};
use tokenprune::nncore::{SeededRng, Tensor};
use tokenprune::Error;

#[test]
fn empty_plan_matches_reference_forward() {
    let model = tiny_model(1, 3);
    let grid = random_grid(&mut SeededRng::new(2), 4, 12);
    let res = model.encode_image(&grid, &[], None).unwrap();
    let (z_cls, z) = reference_forward(&model, &grid.tokens, &[], None);
    assert_eq!(res.z.rows(), 16);
    assert!(res.z_cls.max_abs_diff(&z_cls) < 1e-5);
    assert!(res.z.max_abs_diff(&z) < 1e-5);
    assert_eq!(res.surviving_ids, (0..16).collect::<Vec<_>>());
}

#[test]
fn drop_all_but_one_patch() {
    let model = tiny_model(1, 3);
    let grid = random_grid(&mut SeededRng::new(3), 4, 12);
    let plan = [RemovalStep { layer: 1, drop: (0..15).collect() }];
    let res = model.encode_image(&grid, &plan, None).unwrap();
    assert_eq!(res.z.rows(), 1);
    assert_eq!(res.surviving_ids, vec![15]);
    assert!(res.z.all_finite() && res.z_cls.all_finite());
    let attn = cls_attention_scores(&res, 2).unwrap();
    assert_eq!(attn.data(), &[1.0]);
}

#[test]
fn drop_two_at_layer_two_matches_shortened_forward() {
    let model = tiny_model(4, 3);
    let grid = random_grid(&mut SeededRng::new(5), 4, 12);
    let plan = [RemovalStep { layer: 2, drop: vec![0, 1] }];
    let res = model.encode_image(&grid, &plan, None).unwrap();
    let (z_cls, z) = reference_forward(&model, &grid.tokens, &plan, None);
    assert_eq!(res.z.rows(), 14);
    assert!(res.z_cls.max_abs_diff(&z_cls) < 1e-5);
    assert!(res.z.max_abs_diff(&z) < 1e-5);
}

#[test]
fn random_plans_match_reference_forward_with_prompts() {
    let model = tiny_model(6, 3);
    let mut rng = SeededRng::new(7);
    for trial in 0..10 {
        let grid = random_grid(&mut rng, 4, 12);
        let plan = random_plan(&mut rng, 16, 4);
        let prompts = if trial % 2 == 0 { Some(rng.normal_tensor(&[3, 16], 0.0, 0.1)) } else { None };
        let res = model.encode_image(&grid, &plan, prompts.as_ref()).unwrap();
        let (z_cls, z) = reference_forward(&model, &grid.tokens, &plan, prompts.as_ref());
        assert!(res.z_cls.max_abs_diff(&z_cls) < 1e-5, "trial {trial}");
        assert!(res.z.max_abs_diff(&z) < 1e-5, "trial {trial}");
        assert!(res.surviving_ids.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn removal_errors() {
    let model = tiny_model(1, 3);
    let grid = random_grid(&mut SeededRng::new(3), 4, 12);
    let all = [RemovalStep { layer: 1, drop: (0..16).collect() }];
    assert!(matches!(model.encode_image(&grid, &all, None), Err(Error::Schedule(_))));
    let twice = [
        RemovalStep { layer: 1, drop: vec![3] },
        RemovalStep { layer: 2, drop: vec![3] },
    ];
    assert!(matches!(model.encode_image(&grid, &twice, None), Err(Error::Logic(_))));
    let unordered = [
        RemovalStep { layer: 3, drop: vec![1] },
        RemovalStep { layer: 2, drop: vec![2] },
    ];
    assert!(matches!(model.encode_image(&grid, &unordered, None), Err(Error::Schedule(_))));
    let beyond = [RemovalStep { layer: 5, drop: vec![1] }];
    assert!(matches!(model.encode_image(&grid, &beyond, None), Err(Error::Schedule(_))));
}

#[test]
fn permuting_tokens_with_positions_keeps_cls() {
    let mut model = tiny_model(8, 3);
    let mut rng = SeededRng::new(9);
    let grid = random_grid(&mut rng, 4, 12);
    let base = model.encode_image(&grid, &[], None).unwrap();

    let mut perm: Vec<usize> = (0..16).collect();
    rng.shuffle(&mut perm);
    let mut permuted = grid.clone();
    permuted.tokens = grid.tokens.gather_rows(&perm);
    let pos = model.params().by_name("visual.pos").unwrap().value().clone();
    let mut rows = vec![0];
    rows.extend(perm.iter().map(|i| i + 1));
    model
        .params_mut()
        .by_name_mut("visual.pos")
        .unwrap()
        .set_value(pos.gather_rows(&rows))
        .unwrap();
    let after = model.encode_image(&permuted, &[], None).unwrap();
    assert!(base.z_cls.max_abs_diff(&after.z_cls) < 1e-5);
}

#[test]
fn class_embeddings_are_unit_rows() {
    let model = tiny_model(10, 4);
    let mut rng = SeededRng::new(11);
    for b in [0, 1, 5] {
        let prompts = (b > 0).then(|| rng.normal_tensor(&[b, 8], 0.0, 0.5));
        let e = model.encode_text(prompts.as_ref()).unwrap();
        assert_eq!(e.e.shape(), &[4, 8]);
        for r in 0..4 {
            assert!((Tensor::l2_norm(e.e.row(r)) - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn perturbing_one_prompt_changes_every_class_row() {
    let model = tiny_model(12, 4);
    let mut rng = SeededRng::new(13);
    let prompts = rng.normal_tensor(&[3, 8], 0.0, 0.5);
    let base = model.encode_text(Some(&prompts)).unwrap();
    let mut moved = prompts.clone();
    moved.row_mut(1)[2] += 0.5;
    let after = model.encode_text(Some(&moved)).unwrap();
    for r in 0..4 {
        let d: f32 = base.e.row(r).iter().zip(after.e.row(r)).map(|(a, b)| (a - b).abs()).sum();
        assert!(d > 1e-6, "class {r} unchanged");
    }
}

#[test]
fn text_overflow_is_config_error() {
    let model = tiny_model(12, 2);
    let prompts = Tensor::zeros(&[8, 8]);
    assert!(matches!(model.encode_text(Some(&prompts)), Err(Error::Config(_))));
}

#[test]
fn duplicate_class_names_rejected() {
    let names = vec!["a".to_string(), "a".to_string()];
    let r = ClipModel::new(common::tiny_vision(), common::tiny_text(), names, &mut SeededRng::new(0));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn zero_shot_single_class_is_certain() {
    let embs = ClassEmbeddings { e: Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap(), logit_scale: 10.0 };
    let p = zero_shot_probs(&Tensor::vector(vec![1.0, -2.0]), &embs, &Tensor::identity(2)).unwrap();
    assert_eq!(p.data(), &[1.0]);
}

#[test]
fn zero_shot_aligned_class_wins() {
    let embs = ClassEmbeddings { e: Tensor::identity(3), logit_scale: 100.0 };
    let p = zero_shot_probs(&Tensor::vector(vec![0.0, 0.0, 3.0]), &embs, &Tensor::identity(3)).unwrap();
    assert!(p.data()[2] > 0.999);
}

#[test]
fn zero_shot_probs_sum_to_one_and_ignore_scale() {
    let mut rng = SeededRng::new(14);
    for _ in 0..100 {
        let e = rng.normal_tensor(&[5, 4], 0.0, 1.0);
        let mut rows = Vec::new();
        for r in 0..5 {
            let n = Tensor::l2_norm(e.row(r));
            rows.extend(e.row(r).iter().map(|v| v / n));
        }
        let embs = ClassEmbeddings { e: Tensor::matrix(5, 4, rows).unwrap(), logit_scale: 20.0 };
        let proj = rng.normal_tensor(&[6, 4], 0.0, 1.0);
        let z = rng.normal_tensor(&[6], 0.0, 1.0);
        let p = zero_shot_probs(&z, &embs, &proj).unwrap();
        let s: f32 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        let k = 0.1 + 10.0 * rng.uniform();
        let q = zero_shot_probs(&z.map(|v| v * k), &embs, &proj).unwrap();
        assert!(p.max_abs_diff(&q) < 1e-6);
    }
}

#[test]
fn zero_norm_embedding_is_numeric_error() {
    let embs = ClassEmbeddings { e: Tensor::identity(2), logit_scale: 1.0 };
    let r = zero_shot_probs(&Tensor::zeros(&[2]), &embs, &Tensor::identity(2));
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn cls_attention_sums_to_one_and_unhooked_layer_errors() {
    let model = tiny_model(15, 3);
    let grid = random_grid(&mut SeededRng::new(16), 4, 12);
    let res = model.encode_image(&grid, &[], Some(&Tensor::full(&[2, 16], 0.1))).unwrap();
    for layer in 1..=4 {
        let full = &res.cls_attention[&layer];
        assert_eq!(full.len(), 1 + 2 + 16);
        assert!((full.data().iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let a = cls_attention_scores(&res, layer).unwrap();
        assert_eq!(a.len(), 16);
        assert!((a.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    assert!(matches!(cls_attention_scores(&res, 9), Err(Error::Usage(_))));
}

#[test]
fn cls_attention_uniform_for_identical_tokens_without_positions() {
    let mut model = tiny_model(17, 3);
    let pos = model.params().by_name("visual.pos").unwrap().value().shape().to_vec();
    model.params_mut().by_name_mut("visual.pos").unwrap().set_value(Tensor::zeros(&pos)).unwrap();
    let mut grid = random_grid(&mut SeededRng::new(18), 4, 12);
    let row = grid.tokens.row(0).to_vec();
    for r in 0..16 {
        grid.tokens.row_mut(r).copy_from_slice(&row);
    }
    let res = model.encode_image(&grid, &[], None).unwrap();
    for layer in 1..=4 {
        let a = cls_attention_scores(&res, layer).unwrap();
        for v in a.data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-6);
        }
    }
}

#[test]
fn probe_matches_captured_attention() {
    let model = tiny_model(19, 3);
    let grid = random_grid(&mut SeededRng::new(20), 4, 12);
    let res = model.encode_image(&grid, &[], None).unwrap();
    for layer in 1..=4 {
        let probe = model.probe_cls_attention(layer, &res.intermediates[&layer]);
        let captured = res.cls_attention[&layer].data();
        for (a, b) in probe.iter().zip(captured) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

fn tiny_dataset() -> tokenprune::data::Dataset {
    let cfg = SyntheticConfig {
        num_classes: 3,
        images_per_class: SplitCounts::uniform(4),
        grid_side: 4,
        patch_size: 2,
        glyph_size: 2,
        ..Default::default()
    };
    generate_synthetic(&cfg, &mut SeededRng::new(21)).unwrap()
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let ds = tiny_dataset();
    let mut model = tiny_model(22, 3);
    let before = model.params().fingerprint();
    let cfg = PretrainConfig { epochs: 0, ..Default::default() };
    pretrain_contrastive(&mut model, ds.split(SplitRole::Pretrain), &cfg, &mut SeededRng::new(0)).unwrap();
    assert_eq!(before, model.params().fingerprint());
}

#[test]
fn pretraining_reduces_loss_and_starts_near_uniform() {
    let ds = tiny_dataset();
    let mut model = tiny_model(23, 3);
    // unit logit scale keeps random-cosine logits close to uniform
    model
        .params_mut()
        .by_name_mut("logit_scale")
        .unwrap()
        .set_value(Tensor::scalar(0.0))
        .unwrap();
    let cfg = PretrainConfig { epochs: 15, lr: 3e-3 };
    let log = pretrain_contrastive(&mut model, ds.split(SplitRole::Pretrain), &cfg, &mut SeededRng::new(1)).unwrap();
    let init = log.initial_loss.unwrap();
    assert!((init - 3f32.ln()).abs() < 0.25, "initial loss {init}");
    assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
    assert!(model.logit_scale() <= 100.0);
}

#[test]
fn model_save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(24, 3);
    model.save(dir.path()).unwrap();
    let back = ClipModel::load(dir.path()).unwrap();
    assert_eq!(model.params().fingerprint(), back.params().fingerprint());
    assert_eq!(model.class_names(), back.class_names());
    let missing = ClipModel::load(&dir.path().join("nope"));
    assert!(matches!(missing, Err(Error::MissingArtifact(_))));
}
