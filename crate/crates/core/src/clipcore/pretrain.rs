//! Contrastive image/class-prompt pretraining.
//!
//! Each step draws one image per class, so every batch holds exactly one
//! positive pair per row and column of the `C x C` logit matrix.

use serde::{Deserialize, Serialize};

use super::ClipModel;
use crate::data::{patchify, DatasetSplit, TokenGrid};
use crate::error::{Error, Result};
use crate::nncore::{OptimizerKind, SeededRng, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 6, lr: 2e-3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean symmetric loss per epoch.
    pub epoch_losses: Vec<f32>,
    /// Loss of the very first step, before any update.
    pub initial_loss: Option<f32>,
}

/// Symmetric cross-entropy over a square logit matrix whose diagonal holds
/// the positive pairs.
pub fn symmetric_infonce(tape: &mut Tape, logits: Var) -> Var {
    let b = tape.value(logits).rows();
    let targets: Vec<usize> = (0..b).collect();
    let l_img = tape.cross_entropy(logits, &targets);
    let lt = tape.transpose(logits);
    let l_txt = tape.cross_entropy(lt, &targets);
    let l = tape.add(l_img, l_txt);
    tape.scale(l, 0.5)
}

/// Trains every weight of `model` in place.
pub fn pretrain_contrastive(
    model: &mut ClipModel,
    split: &DatasetSplit,
    cfg: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<PretrainLog> {
    if split.is_empty() {
        return Err(Error::Config("pretrain split is empty".into()));
    }
    let c = model.num_classes();
    if split.num_classes() != c {
        return Err(Error::Config(format!(
            "split has {} classes, model has {c}",
            split.num_classes()
        )));
    }
    let grids: Vec<TokenGrid> = split
        .examples
        .iter()
        .map(|ex| patchify(ex, split.patch_size))
        .collect::<Result<_>>()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, ex) in split.examples.iter().enumerate() {
        by_class[ex.label].push(i);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "pretrain split has no images of class '{}'",
            split.class_names[k]
        )));
    }
    let steps = by_class.iter().map(Vec::len).min().unwrap_or(0);

    let mut log = PretrainLog::default();
    let mut last_finite: Option<f32> = None;
    for epoch in 0..cfg.epochs {
        for ids in &mut by_class {
            rng.shuffle(ids);
        }
        let mut total = 0.0f64;
        for step in 0..steps {
            let batch: Vec<&crate::nncore::Tensor> =
                (0..c).map(|k| &grids[by_class[k][step]].tokens).collect();
            let mut tape = Tape::new();
            let w = model.bind(&mut tape, true);
            let (z_cls, _) = model.forward_vision_batch(&mut tape, &w, &batch, None, |_, _| Ok(Vec::new()))?;
            let e = model.text_forward(&mut tape, &w, None)?;
            let logits = model.image_logits(&mut tape, &w, z_cls, e);
            let loss = symmetric_infonce(&mut tape, logits);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "pretraining diverged at epoch {epoch} step {step}; last finite loss {last_finite:?}"
                )));
            }
            if log.initial_loss.is_none() {
                log.initial_loss = Some(lv);
            }
            last_finite = Some(lv);
            total += lv as f64;
            let grads = tape.backward(loss);
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads, &w);
            params.step(cfg.lr, OptimizerKind::Adam)?;
            model.clamp_logit_scale();
        }
        let mean = (total / steps.max(1) as f64) as f32;
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

/// Top-1 zero-shot accuracy (percent) of the unpruned model on `split`.
pub fn zero_shot_accuracy(model: &ClipModel, split: &DatasetSplit) -> Result<f32> {
    let embs = model.encode_text(None)?;
    let mut correct = 0usize;
    for ex in &split.examples {
        let grid = patchify(ex, split.patch_size)?;
        let res = model.encode_image(&grid, &[], None)?;
        let probs = model.classify(&res.z_cls, &embs)?;
        if argmax(probs.data()) == ex.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f32 / split.len().max(1) as f32)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
