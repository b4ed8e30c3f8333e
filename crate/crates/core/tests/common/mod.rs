#![allow(dead_code)]

use tokenprune::clipcore::{ClipModel, RemovalStep, TextConfig, VisionConfig};
use tokenprune::data::TokenGrid;
use tokenprune::nncore::{gelu, layer_norm, matmul, softmax, SeededRng, Tensor, LN_EPS};

pub fn tiny_vision() -> VisionConfig {
    VisionConfig {
        layers: 4,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        num_patches: 16,
        patch_dim: 12,
        embed_dim: 8,
    }
}

pub fn tiny_text() -> TextConfig {
    TextConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        max_len: 12,
    }
}

pub fn tiny_model(seed: u64, classes: usize) -> ClipModel {
    let names = (0..classes).map(|k| format!("class{k}")).collect();
    ClipModel::new(tiny_vision(), tiny_text(), names, &mut SeededRng::new(seed)).unwrap()
}

pub fn random_grid(rng: &mut SeededRng, side: usize, dim: usize) -> TokenGrid {
    TokenGrid {
        tokens: rng.normal_tensor(&[side * side, dim], 0.5, 0.3),
        grid_side: side,
    }
}

fn p<'a>(model: &'a ClipModel, name: &str) -> &'a Tensor {
    model
        .params()
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .value()
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, bb) in out.row_mut(r).iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    out
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn cols(x: &Tensor, start: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(x.rows() * width);
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row(r)[start..start + width]);
    }
    Tensor::matrix(x.rows(), width, data).unwrap()
}

fn block(model: &ClipModel, prefix: &str, x: &Tensor, heads: usize) -> Tensor {
    let q = |n: &str| p(model, &format!("{prefix}.{n}"));
    let dim = x.cols();
    let dh = dim / heads;
    let h = layer_norm(x, q("ln1_g"), q("ln1_b"), LN_EPS).unwrap();
    let qkv = add_bias(&matmul(&h, q("qkv_w")).unwrap(), q("qkv_b"));
    let mut attn = vec![Vec::new(); x.rows()];
    for hd in 0..heads {
        let qh = cols(&qkv, hd * dh, dh);
        let kh = cols(&qkv, dim + hd * dh, dh);
        let vh = cols(&qkv, 2 * dim + hd * dh, dh);
        let s = matmul(&qh, &kh.transpose()).unwrap().map(|v| v / (dh as f32).sqrt());
        let a = softmax(&s, 1).unwrap();
        let o = matmul(&a, &vh).unwrap();
        for (r, row) in attn.iter_mut().enumerate() {
            row.extend_from_slice(o.row(r));
        }
    }
    let attn = Tensor::matrix(x.rows(), dim, attn.concat()).unwrap();
    let o = add_bias(&matmul(&attn, q("out_w")).unwrap(), q("out_b"));
    let x = add(x, &o);
    let h = layer_norm(&x, q("ln2_g"), q("ln2_b"), LN_EPS).unwrap();
    let h = gelu(&add_bias(&matmul(&h, q("fc1_w")).unwrap(), q("fc1_b")));
    let h = add_bias(&matmul(&h, q("fc2_w")).unwrap(), q("fc2_b"));
    add(&x, &h)
}

/// Plain forward built from tensor ops: the sequence is shortened by the
/// plan before the named blocks, survivors keep their position rows.
/// Returns `(z_cls, z)`.
pub fn reference_forward(
    model: &ClipModel,
    tokens: &Tensor,
    plan: &[RemovalStep],
    prompts_v: Option<&Tensor>,
) -> (Tensor, Tensor) {
    let vc = &model.vision_config;
    let pos = p(model, "visual.pos");
    let patches = add_bias(&matmul(tokens, p(model, "visual.patch_w")).unwrap(), p(model, "visual.patch_b"));
    let pos_rows: Vec<usize> = (1..=vc.num_patches).collect();
    let patches = add(&patches, &pos.gather_rows(&pos_rows));
    let cls = add(p(model, "visual.cls"), &pos.gather_rows(&[0]));
    let b = prompts_v.map(|t| t.rows()).unwrap_or(0);
    let mut parts = vec![&cls];
    if let Some(pv) = prompts_v {
        parts.push(pv);
    }
    parts.push(&patches);
    let mut x = Tensor::concat_rows(&parts).unwrap();
    let mut alive: Vec<usize> = (0..vc.num_patches).collect();
    for layer in 1..=vc.layers {
        if let Some(step) = plan.iter().find(|s| s.layer == layer) {
            let mut rows: Vec<usize> = (0..1 + b).collect();
            let mut next = Vec::new();
            for (i, id) in alive.iter().enumerate() {
                if !step.drop.contains(id) {
                    rows.push(1 + b + i);
                    next.push(*id);
                }
            }
            alive = next;
            x = x.gather_rows(&rows);
        }
        x = block(model, &format!("visual.blocks.{}", layer - 1), &x, vc.heads);
    }
    let out = layer_norm(&x, p(model, "visual.ln_post_g"), p(model, "visual.ln_post_b"), LN_EPS).unwrap();
    let z_cls = Tensor::vector(out.row(0).to_vec());
    let z_rows: Vec<usize> = (1 + b..out.rows()).collect();
    (z_cls, out.gather_rows(&z_rows))
}

/// Random valid removal plan over `n` patches and `layers` blocks.
pub fn random_plan(rng: &mut SeededRng, n: usize, layers: usize) -> Vec<RemovalStep> {
    let mut alive: Vec<usize> = (0..n).collect();
    let mut plan = Vec::new();
    for layer in 1..=layers {
        if rng.uniform() < 0.5 || alive.len() <= 1 {
            continue;
        }
        let k = 1 + rng.below(alive.len() - 1).min(alive.len() / 2);
        rng.shuffle(&mut alive);
        let mut drop: Vec<usize> = alive.drain(..k).collect();
        drop.sort_unstable();
        alive.sort_unstable();
        plan.push(RemovalStep { layer, drop });
    }
    plan
}

/// Seconds-scale pipeline: 4x4 grid of 2-pixel patches, 4 classes, tiny
/// encoders and one training epoch per stage.
pub fn tiny_pipeline() -> tokenprune::bench::PipelineConfig {
    use tokenprune::bench::{PipelineConfig, PredictorSetup};
    use tokenprune::data::{SplitCounts, SyntheticConfig};
    let mut cfg = PipelineConfig {
        data: SyntheticConfig {
            num_classes: 4,
            images_per_class: SplitCounts::uniform(4),
            grid_side: 4,
            patch_size: 2,
            glyph_size: 2,
            ..Default::default()
        },
        vision: tiny_vision(),
        text: tiny_text(),
        predictor: PredictorSetup {
            attach_layer: 1,
            ..Default::default()
        },
        locations: vec![2, 3, 4],
        location_sets: vec![vec![2, 3, 4], vec![1, 3, 4], vec![1, 2, 4], vec![2, 4]],
        seeds: vec![0, 1],
        ..Default::default()
    };
    cfg.pretrain.epochs = 1;
    cfg.golden.r = 2;
    cfg.golden.prune_layer = 1;
    cfg.predictor.train.epochs = 2;
    cfg.tune.b = 2;
    cfg.tune.shots = 2;
    cfg.tune.epochs = 2;
    cfg
}

/// Small random vision geometry for accounting checks.
pub fn random_vision(rng: &mut SeededRng) -> VisionConfig {
    let heads = 1 + rng.below(2);
    let side = 2 + rng.below(3);
    VisionConfig {
        layers: 4 + rng.below(3),
        dim: heads * (2 + 2 * rng.below(3)),
        heads,
        mlp_ratio: 1 + rng.below(3),
        num_patches: side * side,
        patch_dim: 3 + rng.below(4),
        embed_dim: 4,
    }
}
