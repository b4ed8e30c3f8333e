//! Learnable prompt tokens for the frozen, pruned dual encoder.
//!
//! `b` text tokens `P_t` are prepended to every class prompt. Visual tokens
//! are never stored: `P_v = P_t M^T` (row `i` is `M P_t[i]`) and they sit
//! between CLS and the patch tokens, where pruning never reaches them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clipcore::{argmax, ClipModel};
use crate::data::{patchify, DatasetSplit, TokenGrid};
use crate::error::{Error, Result};
use crate::nncore::io::{load_checkpoint_into, save_checkpoint};
use crate::nncore::{Bound, OptimizerKind, ParamSet, SeededRng, Tape, Tensor, Var};
use crate::predictor::Predictor;
use crate::pruning::{keep_scores, lowest_k, prune_infer, PruneInputs, PruneSchedule, Strategy};

const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    TOnly,
    TAndV,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::TOnly => "t_only",
            PromptMode::TAndV => "t_and_v",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_only" => Ok(PromptMode::TOnly),
            "t_and_v" => Ok(PromptMode::TAndV),
            _ => Err(Error::Config(format!("unknown prompt mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    /// `[b, d_t]`.
    pub p_t: Tensor,
    /// `[d_v, d_t]`.
    pub m: Tensor,
}

impl PromptState {
    /// `P_t ~ N(0, 0.02^2)`, `M` identity in the top-left corner.
    pub fn init(b: usize, d_t: usize, d_v: usize, rng: &mut SeededRng) -> Self {
        let mut m = Tensor::zeros(&[d_v, d_t]);
        for i in 0..d_v.min(d_t) {
            m.data_mut()[i * d_t + i] = 1.0;
        }
        PromptState {
            p_t: rng.normal_tensor(&[b, d_t], 0.0, INIT_STD),
            m,
        }
    }

    pub fn for_model(model: &ClipModel, b: usize, rng: &mut SeededRng) -> Self {
        Self::init(b, model.text_config.dim, model.vision_config.dim, rng)
    }

    pub fn b(&self) -> usize {
        self.p_t.rows()
    }

    fn check(&self) -> Result<()> {
        if self.p_t.shape().len() != 2 || self.m.shape().len() != 2 || self.m.cols() != self.p_t.cols() {
            return Err(Error::Shape(format!(
                "prompt state P_t {:?} and M {:?} disagree on the text width",
                self.p_t.shape(),
                self.m.shape()
            )));
        }
        Ok(())
    }

    fn param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("prompt.p_t", self.p_t.clone());
        ps.add("prompt.m", self.m.clone());
        ps
    }

    /// Checkpoint tagged with mode, prompt count, shots and schedule hash.
    pub fn save(&self, dir: &Path, mode: PromptMode, shots: usize, schedule: &PruneSchedule) -> Result<()> {
        let tags = BTreeMap::from([
            ("mode".to_string(), mode.to_string()),
            ("b".to_string(), self.b().to_string()),
            ("shots".to_string(), shots.to_string()),
            ("schedule_hash".to_string(), schedule_hash(schedule)),
        ]);
        save_checkpoint(dir, &self.param_set(), &tags)
    }

    pub fn load(dir: &Path) -> Result<(PromptState, BTreeMap<String, String>)> {
        let manifest = crate::nncore::io::read_manifest(dir)?;
        let shape = |name: &str| {
            manifest
                .params
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.shape.clone())
                .ok_or_else(|| Error::parse(dir.join("manifest.json"), format!("params: missing '{name}'")))
        };
        let mut ps = ParamSet::new();
        ps.add("prompt.p_t", Tensor::zeros(&shape("prompt.p_t")?));
        ps.add("prompt.m", Tensor::zeros(&shape("prompt.m")?));
        let tags = load_checkpoint_into(dir, &mut ps)?;
        let state = PromptState {
            p_t: ps.value(0).clone(),
            m: ps.value(1).clone(),
        };
        state.check()?;
        Ok((state, tags))
    }
}

/// Short stable digest of a schedule.
pub fn schedule_hash(schedule: &PruneSchedule) -> String {
    let json = serde_json::to_string(schedule).expect("schedule serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

/// `P_v[i] = M P_t[i]`, shape `[b, d_v]`.
pub fn project_visual_prompts(state: &PromptState) -> Result<Tensor> {
    state.check()?;
    crate::nncore::ops::matmul(&state.p_t, &state.m.transpose())
}

/// Text: `[P_t; w_t]`. Vision: `[w_v[0]; P_v; w_v[1..]]` in `TAndV` mode,
/// untouched otherwise.
pub fn inject_prompts(
    w_t: &Tensor,
    w_v: &Tensor,
    state: &PromptState,
    mode: PromptMode,
    max_text_len: usize,
) -> Result<(Tensor, Tensor)> {
    state.check()?;
    if w_t.cols() != state.p_t.cols() {
        return Err(Error::Shape(format!(
            "text sequence width {} vs prompt width {}",
            w_t.cols(),
            state.p_t.cols()
        )));
    }
    if w_t.rows() + state.b() > max_text_len {
        return Err(Error::Config(format!(
            "{} prompts + {} text tokens exceed the maximum length {max_text_len}",
            state.b(),
            w_t.rows()
        )));
    }
    let text = Tensor::concat_rows(&[&state.p_t, w_t])?;
    if mode == PromptMode::TOnly || state.b() == 0 {
        return Ok((text, w_v.clone()));
    }
    let p_v = project_visual_prompts(state)?;
    if p_v.cols() != w_v.cols() {
        return Err(Error::Shape(format!(
            "visual prompts width {} vs vision sequence width {}",
            p_v.cols(),
            w_v.cols()
        )));
    }
    let cls = w_v.gather_rows(&[0]);
    let rest: Vec<usize> = (1..w_v.rows()).collect();
    let vision = Tensor::concat_rows(&[&cls, &p_v, &w_v.gather_rows(&rest)])?;
    Ok((text, vision))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub shots: usize,
    pub b: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub mode: PromptMode,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            shots: 16,
            b: 16,
            epochs: 30,
            lr: 2e-3,
            batch_size: 8,
            mode: PromptMode::TAndV,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneLog {
    pub epoch_losses: Vec<f32>,
    /// Pruned test accuracy after each epoch (empty without a test split).
    pub test_accuracy: Vec<f32>,
}

/// Prompt variables on a tape. `m` is `None` when visual prompts are off.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub p_t: Var,
    pub m: Option<Var>,
}

/// Mean cross-entropy of the pruned, prompted forward over `grids`.
/// Pruning decisions are made on the fly exactly as at inference.
#[allow(clippy::too_many_arguments)]
pub fn tuning_loss(
    tape: &mut Tape,
    model: &ClipModel,
    w: &Bound,
    predictor: Option<&Predictor>,
    schedule: &PruneSchedule,
    prompts: PromptVars,
    grids: &[&TokenGrid],
    labels: &[usize],
) -> Result<Var> {
    if schedule.strategy == Strategy::GoldenOracle && !schedule.entries.is_empty() {
        return Err(Error::Usage("prompt tuning cannot prune with golden scores".into()));
    }
    if schedule.strategy == Strategy::Random && !schedule.entries.is_empty() {
        return Err(Error::Usage("prompt tuning prunes deterministically".into()));
    }
    let class_emb = model.text_forward(tape, w, Some(prompts.p_t))?;
    let p_v = match prompts.m {
        Some(m) if tape.value(prompts.p_t).rows() > 0 => {
            let mt = tape.transpose(m);
            Some(tape.matmul(prompts.p_t, mt))
        }
        _ => None,
    };
    let tokens: Vec<&Tensor> = grids.iter().map(|g| &g.tokens).collect();
    let (z_cls, _) = model.forward_vision_batch(tape, w, &tokens, p_v, |_, stage| {
        let k = schedule.drop_at(stage.layer);
        if k == 0 {
            return Ok(Vec::new());
        }
        let keep = keep_scores(model, schedule.strategy, stage, predictor, None, None)?;
        lowest_k(stage.surviving, &keep, k)
    })?;
    let logits = model.image_logits(tape, w, z_cls, class_emb);
    Ok(tape.cross_entropy(logits, labels))
}

/// Pruned accuracy (percent) on `split` with the given prompts.
pub fn prompted_accuracy(
    model: &ClipModel,
    predictor: Option<&Predictor>,
    schedule: &PruneSchedule,
    state: Option<&PromptState>,
    mode: PromptMode,
    split: &DatasetSplit,
) -> Result<f32> {
    let embs = model.encode_text(state.map(|s| &s.p_t))?;
    let p_v = match (state, mode) {
        (Some(s), PromptMode::TAndV) if s.b() > 0 => Some(project_visual_prompts(s)?),
        _ => None,
    };
    let correct: Vec<bool> = split
        .examples
        .par_iter()
        .map(|ex| {
            let grid = patchify(ex, split.patch_size)?;
            let mut inputs = PruneInputs::new(&embs);
            inputs.predictor = predictor;
            inputs.prompts_v = p_v.as_ref();
            let out = prune_infer(model, &grid, schedule, &mut inputs)?;
            Ok(argmax(out.probs.data()) == ex.label)
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * correct.iter().filter(|&&c| c).count() as f32 / split.len().max(1) as f32)
}

/// Few-shot tuning of `{P_t, M}` (only `P_t` in `TOnly` mode) against the
/// frozen model and predictor.
pub fn tune_prompts(
    model: &ClipModel,
    predictor: Option<&Predictor>,
    schedule: &PruneSchedule,
    few_shot: &DatasetSplit,
    test: Option<&DatasetSplit>,
    cfg: &TuneConfig,
    rng: &mut SeededRng,
) -> Result<(PromptState, TuneLog)> {
    cfg.validate()?;
    let counts = few_shot.class_counts();
    if few_shot.is_empty() || counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::Config(format!("few-shot split is not class balanced: {counts:?}")));
    }
    schedule.validate(model.vision_config.layers, model.vision_config.num_patches)?;
    let grids: Vec<TokenGrid> = few_shot
        .examples
        .iter()
        .map(|ex| patchify(ex, few_shot.patch_size))
        .collect::<Result<_>>()?;
    let labels = few_shot.labels();

    let state = PromptState::for_model(model, cfg.b, &mut rng.fork(0));
    let mut params = state.param_set();
    let tune_m = cfg.mode == PromptMode::TAndV;
    let mut order: Vec<usize> = (0..grids.len()).collect();
    let mut log = TuneLog::default();
    let current = |ps: &ParamSet| PromptState {
        p_t: ps.value(0).clone(),
        m: ps.value(1).clone(),
    };

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        // cosine decay over epochs
        let lr = 0.5 * cfg.lr * (1.0 + (std::f32::consts::PI * epoch as f32 / cfg.epochs as f32).cos());
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let w = model.bind(&mut tape, false);
            let p_t = tape.leaf_arc(params.get(0).value_arc(), true);
            let m = tune_m.then(|| tape.leaf_arc(params.get(1).value_arc(), true));
            let bg: Vec<&TokenGrid> = batch.iter().map(|&i| &grids[i]).collect();
            let bl: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = tuning_loss(&mut tape, model, &w, predictor, schedule, PromptVars { p_t, m }, &bg, &bl)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                log::error!("prompt tuning diverged at epoch {epoch}; losses so far {:?}", log.epoch_losses);
                return Err(Error::Numeric(format!("prompt tuning loss diverged at epoch {epoch}")));
            }
            total += lv as f64 * batch.len() as f64;
            let grads = tape.backward(loss);
            params.zero_grad();
            if let Some(g) = grads.wrt(p_t) {
                params.get_mut(0).accumulate_grad(g);
            }
            if let Some(g) = m.and_then(|m| grads.wrt(m)) {
                params.get_mut(1).accumulate_grad(g);
            }
            params.step(lr, OptimizerKind::Adam)?;
        }
        let mean = (total / grids.len() as f64) as f32;
        log.epoch_losses.push(mean);
        if let Some(t) = test {
            let acc = prompted_accuracy(model, predictor, schedule, Some(&current(&params)), cfg.mode, t)?;
            log::debug!("prompt epoch {epoch}: loss {mean:.4}, test accuracy {acc:.1}");
            log.test_accuracy.push(acc);
        }
    }
    Ok((current(&params), log))
}
