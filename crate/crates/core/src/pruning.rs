//! Inference-time token pruning and compute accounting.
//!
//! A [`PruneSchedule`] lists the blocks before which patch tokens are
//! dropped and how many. At each entry every strategy produces a keep score
//! per surviving token and the lowest `drop_count` are removed; among equal
//! keep scores higher token ids go first.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clipcore::{block_macs, cls_attention_scores, ClassEmbeddings, ClipModel, EncodeResult, Stage, VisionConfig};
use crate::data::TokenGrid;
use crate::error::{Error, Result};
use crate::golden::GoldenScores;
use crate::nncore::{SeededRng, Tape, Tensor};
use crate::predictor::Predictor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    GoldenOracle,
    Predictor,
    ClsAttention,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::GoldenOracle,
        Strategy::Predictor,
        Strategy::ClsAttention,
        Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::GoldenOracle => "golden_oracle",
            Strategy::Predictor => "predictor",
            Strategy::ClsAttention => "cls_attention",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pruning strategy '{s}'")))
    }
}

/// Fraction of patch tokens that survive every stage.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct KeepRate(f32);

impl KeepRate {
    pub fn new(rate: f32) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("keep rate {rate} outside (0, 1]")));
        }
        Ok(KeepRate(rate))
    }

    pub fn rate(self) -> f32 {
        self.0
    }

    /// Tokens dropped in total out of `n`: `round((1 - rate) n)`.
    pub fn total_drop(self, n: usize) -> usize {
        ((1.0 - self.0 as f64) * n as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub layer: usize,
    pub drop_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub entries: Vec<ScheduleEntry>,
    pub strategy: Strategy,
}

impl PruneSchedule {
    pub fn empty(strategy: Strategy) -> Self {
        PruneSchedule {
            entries: Vec::new(),
            strategy,
        }
    }

    pub fn total_drop(&self) -> usize {
        self.entries.iter().map(|e| e.drop_count).sum()
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        PruneSchedule {
            entries: self.entries.clone(),
            strategy,
        }
    }

    /// Checks layer order, the layer range and that a token survives.
    pub fn validate(&self, layers: usize, n: usize) -> Result<()> {
        let mut prev = 0;
        for e in &self.entries {
            if e.layer == 0 || e.layer > layers {
                return Err(Error::Schedule(format!("prune layer {} outside 1..={layers}", e.layer)));
            }
            if e.layer <= prev {
                return Err(Error::Schedule(format!(
                    "prune layers must be strictly increasing ({prev} then {})",
                    e.layer
                )));
            }
            if e.drop_count == 0 {
                return Err(Error::Schedule(format!("layer {} drops no tokens", e.layer)));
            }
            prev = e.layer;
        }
        if self.total_drop() >= n {
            return Err(Error::Schedule(format!(
                "schedule drops {} of {n} tokens",
                self.total_drop()
            )));
        }
        Ok(())
    }

    pub fn drop_at(&self, layer: usize) -> usize {
        self.entries
            .iter()
            .find(|e| e.layer == layer)
            .map(|e| e.drop_count)
            .unwrap_or(0)
    }
}

/// Spreads `round((1 - keep) n)` drops over `locations` as evenly as
/// possible; earlier locations take the remainder.
pub fn make_schedule(keep: KeepRate, locations: &[usize], n: usize, strategy: Strategy) -> Result<PruneSchedule> {
    if locations.is_empty() {
        return Err(Error::Config("at least one prune location required".into()));
    }
    if locations[0] == 0 || locations.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "prune locations {locations:?} must be 1-based and strictly increasing"
        )));
    }
    let total = keep.total_drop(n);
    if total >= n {
        return Err(Error::Config(format!(
            "keep rate {} drops all {n} tokens",
            keep.rate()
        )));
    }
    let k = locations.len();
    let entries = locations
        .iter()
        .enumerate()
        .map(|(i, &layer)| ScheduleEntry {
            layer,
            drop_count: total / k + usize::from(i < total % k),
        })
        .filter(|e| e.drop_count > 0)
        .collect();
    Ok(PruneSchedule { entries, strategy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub total_macs: u64,
    /// Patch embedding, blocks `1..=L`, then the image projection.
    pub per_layer: Vec<u64>,
    pub relative_to_unpruned: f64,
}

impl FlopsReport {
    /// FLOPs under the two-per-multiply-accumulate convention.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }
}

fn stage_macs(vc: &VisionConfig, schedule: &PruneSchedule, b_v: usize) -> Vec<u64> {
    let (d, dm) = (vc.dim as u64, vc.mlp_dim() as u64);
    let mut per = Vec::with_capacity(vc.layers + 2);
    // patch embedding: [N, d_in] x [d_in, d]
    per.push((vc.num_patches * vc.patch_dim * vc.dim) as u64);
    let mut patches = vc.num_patches;
    for layer in 1..=vc.layers {
        patches -= schedule.drop_at(layer).min(patches);
        let n = (1 + b_v + patches) as u64;
        per.push(block_macs(n, d, dm));
    }
    // image projection of the CLS row: [1, d] x [d, d_e]
    per.push((vc.dim * vc.embed_dim) as u64);
    per
}

/// Closed-form multiply-accumulate count of the vision path.
pub fn count_flops(vc: &VisionConfig, schedule: &PruneSchedule, b_v: usize) -> FlopsReport {
    let per_layer = stage_macs(vc, schedule, b_v);
    let total: u64 = per_layer.iter().sum();
    let base: u64 = stage_macs(vc, &PruneSchedule::empty(schedule.strategy), b_v).iter().sum();
    FlopsReport {
        total_macs: total,
        per_layer,
        relative_to_unpruned: total as f64 / base as f64,
    }
}

/// CLS-to-patch attention at `layer`, renormalized over patches.
pub fn cls_attention_prune_scores(result: &EncodeResult, layer: usize) -> Result<Tensor> {
    cls_attention_scores(result, layer)
}

/// Everything a strategy may need besides the model and image.
pub struct PruneInputs<'a> {
    pub embs: &'a ClassEmbeddings,
    pub predictor: Option<&'a Predictor>,
    pub golden: Option<&'a GoldenScores>,
    pub rng: Option<&'a mut SeededRng>,
    pub prompts_v: Option<&'a Tensor>,
}

impl<'a> PruneInputs<'a> {
    pub fn new(embs: &'a ClassEmbeddings) -> Self {
        PruneInputs {
            embs,
            predictor: None,
            golden: None,
            rng: None,
            prompts_v: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub layer: usize,
    pub dropped: Vec<usize>,
    pub surviving: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub probs: Tensor,
    pub surviving_ids: Vec<usize>,
    pub flops: FlopsReport,
    /// Multiply-accumulates counted while the forward ran.
    pub instrumented_macs: u64,
    pub trace: Vec<StageTrace>,
}

/// Picks the `k` survivors with the lowest keep score (ties: higher id
/// first). Returned ids are sorted.
pub fn lowest_k(ids: &[usize], keep: &[f32], k: usize) -> Result<Vec<usize>> {
    if let Some(i) = keep.iter().position(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("keep score of token {} is NaN", ids[i])));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        keep[a]
            .partial_cmp(&keep[b])
            .expect("no NaN")
            .then(ids[b].cmp(&ids[a]))
    });
    let mut out: Vec<usize> = order[..k.min(ids.len())].iter().map(|&i| ids[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Keep score of every surviving patch under `strategy`; higher survives.
pub(crate) fn keep_scores(
    model: &ClipModel,
    strategy: Strategy,
    stage: &Stage,
    predictor: Option<&Predictor>,
    golden: Option<&GoldenScores>,
    rng: Option<&mut SeededRng>,
) -> Result<Vec<f32>> {
    let ids = stage.surviving;
    Ok(match strategy {
        Strategy::GoldenOracle => {
            let g = golden.ok_or_else(|| Error::Usage("golden-oracle strategy needs golden scores".into()))?;
            ids.iter().map(|&t| -g.normalized.data()[t]).collect()
        }
        Strategy::Predictor => {
            let p = predictor.ok_or_else(|| Error::Usage("predictor strategy needs a predictor".into()))?;
            p.score(&stage.patch_rows(), ids)?.data().iter().map(|v| -v).collect()
        }
        Strategy::ClsAttention => {
            let row = model.probe_cls_attention(stage.layer, stage.sequence);
            row[1 + stage.num_prompts..].to_vec()
        }
        Strategy::Random => {
            let r = rng.ok_or_else(|| Error::Usage("random strategy needs an rng".into()))?;
            ids.iter().map(|_| r.uniform()).collect()
        }
    })
}

/// Runs the pruned forward for one image and classifies it.
pub fn prune_infer(
    model: &ClipModel,
    grid: &TokenGrid,
    schedule: &PruneSchedule,
    inputs: &mut PruneInputs,
) -> Result<PruneOutcome> {
    let vc = &model.vision_config;
    schedule.validate(vc.layers, vc.num_patches)?;
    if !schedule.entries.is_empty() {
        match schedule.strategy {
            Strategy::Predictor if inputs.predictor.is_none() => {
                return Err(Error::Usage("predictor strategy needs a predictor".into()));
            }
            Strategy::GoldenOracle if inputs.golden.is_none() => {
                return Err(Error::Usage("golden-oracle strategy needs golden scores".into()));
            }
            Strategy::Random if inputs.rng.is_none() => {
                return Err(Error::Usage("random strategy needs an rng".into()));
            }
            _ => {}
        }
    }
    let mut tape = Tape::counting();
    let w = model.bind(&mut tape, false);
    let pv = inputs.prompts_v.map(|p| tape.constant(p.clone()));
    let mut trace = Vec::new();
    let predictor = inputs.predictor;
    let golden = inputs.golden;
    let rng = &mut inputs.rng;
    let vt = model.forward_vision(&mut tape, &w, &grid.tokens, pv, |stage| {
        let k = schedule.drop_at(stage.layer);
        if k == 0 {
            return Ok(Vec::new());
        }
        let ids = stage.surviving;
        let keep = keep_scores(model, schedule.strategy, stage, predictor, golden, rng.as_deref_mut())?;
        let drop = lowest_k(ids, &keep, k)?;
        let surviving = ids.iter().copied().filter(|t| drop.binary_search(t).is_err()).collect();
        trace.push(StageTrace {
            layer: stage.layer,
            dropped: drop.clone(),
            surviving,
        });
        Ok(drop)
    })?;
    // the image projection is part of the counted path
    tape.matmul(vt.z_cls, w[model.proj_v_index()]);
    let instrumented = tape.macs();
    let res = vt.into_result(&tape);
    let probs = model.classify(&res.z_cls, inputs.embs)?;
    Ok(PruneOutcome {
        probs,
        surviving_ids: res.surviving_ids,
        flops: count_flops(vc, schedule, inputs.prompts_v.map(|p| p.rows()).unwrap_or(0)),
        instrumented_macs: instrumented,
        trace,
    })
}

/// One line of the pruning trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image: usize,
    pub strategy: Strategy,
    pub schedule: Vec<ScheduleEntry>,
    pub stages: Vec<StageTrace>,
    pub probs: Vec<f32>,
    pub macs: u64,
}

impl TraceRecord {
    pub fn new(image: usize, schedule: &PruneSchedule, outcome: &PruneOutcome) -> Self {
        TraceRecord {
            image,
            strategy: schedule.strategy,
            schedule: schedule.entries.clone(),
            stages: outcome.trace.clone(),
            probs: outcome.probs.data().to_vec(),
            macs: outcome.flops.total_macs,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("trace record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1))))
        .collect()
}
