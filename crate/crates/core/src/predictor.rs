//! Token ranking predictors and their training.
//!
//! A predictor maps the patch rows of an intermediate vision sequence
//! `[n, d]` to one score per token, regressing the per-image normalized
//! golden scores. Three architectures share the interface:
//!
//! * `MixMlp`: channel-mixing MLP with residual, then token-mixing MLP with
//!   residual, then the mean over channels. Each MLP is a fully connected
//!   layer, layer norm and GELU. The token-mixing weight is sized for the
//!   full grid and restricted to the surviving ids on shorter sequences.
//! * `Mlp`: per-token `d -> 256 -> LN -> GELU -> N`, then the mean.
//! * `TransBlock`: one pre-norm transformer block, then the mean over
//!   channels.
//!
//! Scores are centered over the tokens of each image by default. The loss
//! only rewards raising predictions, so an uncentered head can lower it by
//! shifting every score up without ordering tokens; with centering the
//! optimum orders tokens by their golden score.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clipcore::{add_block, block_forward, linear, BlockIdx, ClipModel};
use crate::data::{patchify, DatasetSplit};
use crate::error::{Error, Result};
use crate::golden::{ranking_from_scores, GoldenTable, Ranking, ScoreKind};
use crate::nncore::io::{load_checkpoint_into, read_manifest, save_checkpoint};
use crate::nncore::ops::log_sigmoid as log_sigmoid_scalar;
use crate::nncore::ops::sigmoid;
use crate::nncore::{Bound, OptimizerKind, ParamSet, SeededRng, Tape, Tensor, Var, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    MixMlp,
    Mlp,
    TransBlock,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 3] = [PredictorKind::Mlp, PredictorKind::TransBlock, PredictorKind::MixMlp];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::MixMlp => "mix_mlp",
            PredictorKind::Mlp => "mlp",
            PredictorKind::TransBlock => "trans_block",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PredictorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown predictor architecture '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Full token count `N_max`.
    pub num_tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Vision block whose incoming sequence feeds the predictor.
    pub attach_layer: usize,
    /// Subtract the mean score over the tokens of each image.
    #[serde(default = "yes")]
    pub center_output: bool,
}

fn yes() -> bool {
    true
}

impl PredictorConfig {
    pub fn for_model(model: &ClipModel, kind: PredictorKind, attach_layer: usize) -> Self {
        PredictorConfig {
            kind,
            num_tokens: model.vision_config.num_patches,
            dim: model.vision_config.dim,
            heads: model.vision_config.heads,
            hidden: 256,
            attach_layer,
            center_output: true,
        }
    }
}

#[derive(Clone, Debug)]
enum Layout {
    MixMlp {
        ch_w: usize,
        ch_b: usize,
        ch_g: usize,
        ch_beta: usize,
        tok_w: usize,
        tok_b: usize,
        tok_g: usize,
        tok_beta: usize,
    },
    Mlp {
        fc1_w: usize,
        fc1_b: usize,
        ln_g: usize,
        ln_b: usize,
        fc2_w: usize,
        fc2_b: usize,
    },
    TransBlock {
        block: BlockIdx,
    },
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: PredictorConfig,
    params: ParamSet,
    layout: Layout,
}

impl Predictor {
    pub fn new(config: PredictorConfig, rng: &mut SeededRng) -> Result<Self> {
        if config.attach_layer == 0 {
            return Err(Error::Config("predictor attach layer is 1-based".into()));
        }
        if config.num_tokens == 0 || config.dim == 0 {
            return Err(Error::Config("predictor sizes must be positive".into()));
        }
        let (n, d) = (config.num_tokens, config.dim);
        let mut ps = ParamSet::new();
        let layout = match config.kind {
            PredictorKind::MixMlp => Layout::MixMlp {
                ch_w: ps.add("channel.w", rng.normal_tensor(&[d, d], 0.0, (d as f32).powf(-0.5))),
                ch_b: ps.add("channel.b", Tensor::zeros(&[d])),
                ch_g: ps.add("channel.ln_g", Tensor::ones(&[d])),
                ch_beta: ps.add("channel.ln_b", Tensor::zeros(&[d])),
                tok_w: ps.add("token.w", rng.normal_tensor(&[n, n], 0.0, (n as f32).powf(-0.5))),
                tok_b: ps.add("token.b", Tensor::zeros(&[n])),
                tok_g: ps.add("token.ln_g", Tensor::ones(&[n])),
                tok_beta: ps.add("token.ln_b", Tensor::zeros(&[n])),
            },
            PredictorKind::Mlp => {
                let h = config.hidden;
                Layout::Mlp {
                    fc1_w: ps.add("fc1.w", rng.normal_tensor(&[d, h], 0.0, (d as f32).powf(-0.5))),
                    fc1_b: ps.add("fc1.b", Tensor::zeros(&[h])),
                    ln_g: ps.add("ln.g", Tensor::ones(&[h])),
                    ln_b: ps.add("ln.b", Tensor::zeros(&[h])),
                    fc2_w: ps.add("fc2.w", rng.normal_tensor(&[h, n], 0.0, (h as f32).powf(-0.5))),
                    fc2_b: ps.add("fc2.b", Tensor::zeros(&[n])),
                }
            }
            PredictorKind::TransBlock => {
                if config.heads == 0 || d % config.heads != 0 {
                    return Err(Error::Config(format!("predictor dim {d} not divisible by {} heads", config.heads)));
                }
                Layout::TransBlock {
                    block: add_block(&mut ps, "block", d, 2 * d, 1, rng),
                }
            }
        };
        Ok(Predictor { config, params: ps, layout })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        self.params.bind(tape, track)
    }

    /// Scores `[n]` for patch rows `z` `[n, d]` whose original token ids are
    /// `ids` (used to restrict position-aware weights).
    pub fn forward(&self, tape: &mut Tape, w: &Bound, z: Var, ids: &[usize]) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        let n = shape[0];
        if shape.len() != 2 || shape[1] != self.config.dim || ids.len() != n {
            return Err(Error::Shape(format!(
                "predictor input {shape:?} with {} ids, expected [n, {}]",
                ids.len(),
                self.config.dim
            )));
        }
        if n > self.config.num_tokens {
            return Err(Error::Shape(format!(
                "predictor got {n} tokens, token mixing is sized for {}",
                self.config.num_tokens
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.num_tokens) {
            return Err(Error::Shape(format!("token id {bad} outside 0..{}", self.config.num_tokens)));
        }
        let full = n == self.config.num_tokens && ids.iter().enumerate().all(|(i, &t)| i == t);
        let out = match &self.layout {
            Layout::MixMlp {
                ch_w,
                ch_b,
                ch_g,
                ch_beta,
                tok_w,
                tok_b,
                tok_g,
                tok_beta,
            } => {
                let c = channel_mix(tape, z, w[*ch_w], w[*ch_b], w[*ch_g], w[*ch_beta]);
                let (tw, tb, tg, tbeta) = if full {
                    (w[*tok_w], w[*tok_b], w[*tok_g], w[*tok_beta])
                } else {
                    let rows = tape.gather_rows(w[*tok_w], ids);
                    let rt = tape.transpose(rows);
                    let cols = tape.gather_rows(rt, ids);
                    (
                        tape.transpose(cols),
                        restrict(tape, w[*tok_b], ids),
                        restrict(tape, w[*tok_g], ids),
                        restrict(tape, w[*tok_beta], ids),
                    )
                };
                let ct = tape.transpose(c);
                let h = linear(tape, ct, tw, tb);
                let h = tape.layer_norm(h, tg, tbeta, LN_EPS);
                let h = tape.gelu(h);
                let t = tape.add(h, ct);
                let t = tape.transpose(t);
                tape.mean_cols(t)
            }
            Layout::Mlp {
                fc1_w,
                fc1_b,
                ln_g,
                ln_b,
                fc2_w,
                fc2_b,
            } => {
                let h = linear(tape, z, w[*fc1_w], w[*fc1_b]);
                let h = tape.layer_norm(h, w[*ln_g], w[*ln_b], LN_EPS);
                let h = tape.gelu(h);
                let h = linear(tape, h, w[*fc2_w], w[*fc2_b]);
                tape.mean_cols(h)
            }
            Layout::TransBlock { block } => {
                let h = block_forward(tape, w, block, z, &[n], self.config.heads, None);
                tape.mean_cols(h)
            }
        };
        Ok(if self.config.center_output { tape.center(out) } else { out })
    }

    /// Channel-mixing sub-layer of the Mix-MLP alone.
    pub fn channel_mix_only(&self, z: &Tensor) -> Result<Tensor> {
        match &self.layout {
            Layout::MixMlp { ch_w, ch_b, ch_g, ch_beta, .. } => {
                let mut tape = Tape::new();
                let w = self.bind(&mut tape, false);
                let zv = tape.constant(z.clone());
                let c = channel_mix(&mut tape, zv, w[*ch_w], w[*ch_b], w[*ch_g], w[*ch_beta]);
                Ok(tape.value(c).clone())
            }
            _ => Err(Error::Usage(format!("{} has no channel-mixing layer", self.config.kind))),
        }
    }

    pub fn score(&self, z: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let s = self.forward(&mut tape, &w, zv, ids)?;
        Ok(tape.value(s).clone())
    }

    pub fn save(&self, dir: &Path, score_kind: ScoreKind, grid_side: usize) -> Result<()> {
        let mut tags = BTreeMap::new();
        tags.insert("arch".to_string(), self.config.kind.to_string());
        tags.insert("attach_layer".to_string(), self.config.attach_layer.to_string());
        tags.insert("score_kind".to_string(), score_kind.to_string());
        tags.insert("grid_side".to_string(), grid_side.to_string());
        tags.insert(
            "config".to_string(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        save_checkpoint(dir, &self.params, &tags)
    }

    /// Loads a checkpoint; returns the predictor and its tags.
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let manifest = read_manifest(dir)?;
        let cfg_text = manifest
            .tags
            .get("config")
            .ok_or_else(|| Error::parse(dir.join("manifest.json"), "missing 'config' tag"))?;
        let config: PredictorConfig =
            serde_json::from_str(cfg_text).map_err(|e| Error::parse(dir.join("manifest.json"), e.to_string()))?;
        let mut p = Predictor::new(config, &mut SeededRng::new(0))?;
        let tags = load_checkpoint_into(dir, &mut p.params)?;
        Ok((p, tags))
    }
}

fn channel_mix(tape: &mut Tape, z: Var, w: Var, b: Var, g: Var, beta: Var) -> Var {
    let h = linear(tape, z, w, b);
    let h = tape.layer_norm(h, g, beta, LN_EPS);
    let h = tape.gelu(h);
    tape.add(h, z)
}

fn restrict(tape: &mut Tape, v: Var, ids: &[usize]) -> Var {
    tape.gather_rows(v, ids)
}

/// `-sum_t sigmoid(s_t) * log sigmoid(s_hat_t)`.
pub fn predictor_loss(tape: &mut Tape, s_norm: &Tensor, s_hat: Var) -> Result<Var> {
    if tape.value(s_hat).len() != s_norm.len() {
        return Err(Error::Shape(format!(
            "loss targets {:?} vs predictions {:?}",
            s_norm.shape(),
            tape.value(s_hat).shape()
        )));
    }
    let weights = Tensor::new(
        tape.value(s_hat).shape().to_vec(),
        s_norm.data().iter().map(|&s| sigmoid(s)).collect(),
    )?;
    let wv = tape.constant(weights);
    let ls = tape.log_sigmoid(s_hat);
    let prod = tape.mul(wv, ls);
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0))
}

/// Loss value without a tape, accumulated in double precision.
pub fn predictor_loss_value(s_norm: &[f32], s_hat: &[f32]) -> Result<f64> {
    if s_norm.len() != s_hat.len() {
        return Err(Error::Shape(format!(
            "loss targets [{}] vs predictions [{}]",
            s_norm.len(),
            s_hat.len()
        )));
    }
    Ok(-s_norm
        .iter()
        .zip(s_hat)
        .map(|(&s, &h)| sigmoid(s) as f64 * log_sigmoid_scalar(h) as f64)
        .sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            epochs: 50,
            lr: 1e-3,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainLog {
    /// Mean per-image loss of each epoch.
    pub epoch_losses: Vec<f32>,
}

/// Patch rows entering block `layer` for every image of `split`.
pub fn extract_features(model: &ClipModel, split: &DatasetSplit, layer: usize) -> Result<Vec<Tensor>> {
    use rayon::prelude::*;
    if layer == 0 || layer > model.vision_config.layers {
        return Err(Error::Config(format!(
            "attach layer {layer} outside 1..={}",
            model.vision_config.layers
        )));
    }
    split
        .examples
        .par_iter()
        .map(|ex| {
            let grid = patchify(ex, split.patch_size)?;
            let res = model.encode_image(&grid, &[], None)?;
            let seq = &res.intermediates[&layer];
            let rows: Vec<usize> = (1..seq.rows()).collect();
            Ok(seq.gather_rows(&rows))
        })
        .collect()
}

/// Mean per-image loss over precomputed features.
pub fn mean_loss(predictor: &Predictor, features: &[Tensor], table: &GoldenTable) -> Result<f32> {
    let ids: Vec<usize> = (0..predictor.config.num_tokens).collect();
    let mut total = 0.0f64;
    for (i, z) in features.iter().enumerate() {
        let s_hat = predictor.score(z, &ids)?;
        total += predictor_loss_value(table.get(i)?.normalized.data(), s_hat.data())?;
    }
    Ok((total / features.len().max(1) as f64) as f32)
}

/// Fits `predictor` on precomputed features against `table` (image `i` of
/// the feature list uses golden entry `i`).
pub fn train_on_features(
    predictor: &mut Predictor,
    features: &[Tensor],
    table: &GoldenTable,
    cfg: &PredictorTrainConfig,
    rng: &mut SeededRng,
) -> Result<PredictorTrainLog> {
    for i in 0..features.len() {
        table.get(i).map_err(|_| Error::MissingArtifact(format!("golden scores for training image {i}")))?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let ids: Vec<usize> = (0..predictor.config.num_tokens).collect();
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut log = PredictorTrainLog::default();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let w = predictor.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let z = tape.constant(features[i].clone());
                let s_hat = predictor.forward(&mut tape, &w, z, &ids)?;
                losses.push(predictor_loss(&mut tape, &table.get(i)?.normalized, s_hat)?);
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = tape.add(loss, l);
            }
            let loss = tape.scale(loss, 1.0 / batch.len() as f32);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("predictor loss diverged at epoch {epoch}")));
            }
            total += lv as f64 * batch.len() as f64;
            let grads = tape.backward(loss);
            predictor.params.zero_grad();
            predictor.params.accumulate(&grads, &w);
            predictor.params.step(cfg.lr, OptimizerKind::Adam)?;
        }
        let mean = (total / features.len().max(1) as f64) as f32;
        log::debug!("predictor epoch {epoch}: loss {mean:.5}");
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

/// Extracts features for `split` and trains on them.
pub fn train_predictor(
    model: &ClipModel,
    split: &DatasetSplit,
    table: &GoldenTable,
    predictor: &mut Predictor,
    cfg: &PredictorTrainConfig,
    rng: &mut SeededRng,
) -> Result<PredictorTrainLog> {
    for i in 0..split.len() {
        table.get(i)?;
    }
    let features = extract_features(model, split, predictor.config.attach_layer)?;
    train_on_features(predictor, &features, table, cfg, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRateReport {
    pub k: usize,
    /// Percentage in `[0, 100]`.
    pub rate: f32,
}

/// Share of the top-`k` predicted tokens that are also in the golden top-`k`.
pub fn matching_rate(pred: &Ranking, golden: &Ranking, k: usize) -> Result<MatchRateReport> {
    if k == 0 {
        return Err(Error::Usage("matching rate needs K >= 1".into()));
    }
    let n = golden.order.len();
    if k > n || pred.order.len() != n {
        return Err(Error::Usage(format!(
            "matching rate K = {k} with rankings of length {} and {n}",
            pred.order.len()
        )));
    }
    let mut in_golden = vec![false; n];
    for &t in golden.top(k) {
        in_golden[t] = true;
    }
    let hits = pred.top(k).iter().filter(|&&t| in_golden[t]).count();
    Ok(MatchRateReport {
        k,
        rate: 100.0 * hits as f32 / k as f32,
    })
}

/// Mean matching rate of `predictor` over features against `table`.
pub fn mean_matching_rate(predictor: &Predictor, features: &[Tensor], table: &GoldenTable, k: usize) -> Result<f32> {
    let ids: Vec<usize> = (0..predictor.config.num_tokens).collect();
    let mut total = 0.0f64;
    for (i, z) in features.iter().enumerate() {
        let pred = ranking_from_scores(&predictor.score(z, &ids)?)?;
        let gold = ranking_from_scores(&table.get(i)?.normalized)?;
        total += matching_rate(&pred, &gold, k)?.rate as f64;
    }
    Ok((total / features.len().max(1) as f64) as f32)
}
