//! Golden token ranking by sliding-window removal.
//!
//! Every `r x r` block of patch tokens is removed (before `prune_layer`) and
//! the effect on the output is scored. A token's score is the mean score of
//! the windows that contain it. High scores mean removing the token hurts
//! little, so the top of a [`Ranking`] holds the most redundant tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clipcore::{zero_shot_probs, ClassEmbeddings, ClipModel, RemovalStep};
use crate::data::{patchify, DatasetSplit, TokenGrid};
use crate::error::{Error, Result};
use crate::nncore::io::{load_tensor, read_file, save_tensor, write_file};
use crate::nncore::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Posterior of the ground-truth class after removal.
    Label,
    /// Largest class posterior after removal.
    Confidence,
    /// Cosine between the full and pruned CLS embeddings.
    Preservation,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Label, ScoreKind::Confidence, ScoreKind::Preservation];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Label => "label",
            ScoreKind::Confidence => "confidence",
            ScoreKind::Preservation => "preservation",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown score kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneWindow {
    pub row: usize,
    pub col: usize,
    pub r: usize,
    /// Sorted token ids of the block.
    pub token_ids: Vec<usize>,
}

/// All `r x r` blocks of a `p x p` grid at the given stride, row-major.
pub fn enumerate_windows(p: usize, r: usize, stride: usize) -> Result<Vec<PruneWindow>> {
    if r == 0 || r > p {
        return Err(Error::Config(format!("window side {r} must be in 1..={p}")));
    }
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let mut out = Vec::new();
    for row in (0..=p - r).step_by(stride) {
        for col in (0..=p - r).step_by(stride) {
            let mut token_ids = Vec::with_capacity(r * r);
            for dr in 0..r {
                for dc in 0..r {
                    token_ids.push((row + dr) * p + col + dc);
                }
            }
            out.push(PruneWindow { row, col, r, token_ids });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoldenConfig {
    pub kind: ScoreKind,
    pub r: usize,
    pub stride: usize,
    pub prune_layer: usize,
    /// Divide accumulated window scores by `r^2` instead of the token's
    /// actual coverage count.
    pub block_area_norm: bool,
}

impl Default for GoldenConfig {
    fn default() -> Self {
        GoldenConfig {
            kind: ScoreKind::Preservation,
            r: 5,
            stride: 1,
            prune_layer: 2,
            block_area_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldenScores {
    pub raw: Tensor,
    pub coverage: Vec<u32>,
    pub mu_s: f32,
    pub sigma_s: f32,
    pub normalized: Tensor,
    pub kind: ScoreKind,
    pub source_layer: usize,
    /// Set when `sigma_s` was too small to normalize.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Token ids by descending score, ties by ascending id.
    pub order: Vec<usize>,
    pub scores: Tensor,
}

impl Ranking {
    pub fn top(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }
}

pub fn ranking_from_scores(scores: &Tensor) -> Result<Ranking> {
    if scores.is_empty() {
        return Err(Error::Usage("cannot rank an empty score vector".into()));
    }
    if let Some(i) = scores.data().iter().position(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("score of token {i} is NaN")));
    }
    let d = scores.data();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).expect("no NaN").then(a.cmp(&b)));
    Ok(Ranking {
        order,
        scores: scores.clone(),
    })
}

const SIGMA_FLOOR: f32 = 1e-8;

/// Z-scores `raw` over all tokens with the population standard deviation.
pub fn normalize_scores(raw: &Tensor, coverage: &[u32], kind: ScoreKind, source_layer: usize) -> Result<GoldenScores> {
    let n = raw.len();
    if n < 2 {
        return Err(Error::Usage(format!("need at least 2 tokens to normalize, got {n}")));
    }
    let mean = raw.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = raw.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    let degenerate = sigma < SIGMA_FLOOR as f64;
    let normalized = if degenerate {
        log::warn!("golden scores are constant (sigma {sigma:.3e}); normalized scores set to zero");
        Tensor::zeros(&[n])
    } else {
        Tensor::vector(raw.data().iter().map(|&v| ((v as f64 - mean) / sigma) as f32).collect())
    };
    Ok(GoldenScores {
        raw: raw.clone(),
        coverage: coverage.to_vec(),
        mu_s: mean as f32,
        sigma_s: sigma as f32,
        normalized,
        kind,
        source_layer,
        degenerate,
    })
}

/// Cosine in double precision. Equal inputs give exactly 1.
pub fn cosine_exact(a: &[f32], b: &[f32]) -> f32 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0) as f32
}

/// Reference outputs of the unpruned image, shared by every window.
pub struct ImageContext<'a> {
    pub model: &'a ClipModel,
    pub embs: &'a ClassEmbeddings,
    pub grid: &'a TokenGrid,
    pub z_cls_full: Tensor,
    /// Sequence entering block `prune_layer`.
    pub prefix: Tensor,
    pub prune_layer: usize,
}

impl<'a> ImageContext<'a> {
    pub fn new(model: &'a ClipModel, embs: &'a ClassEmbeddings, grid: &'a TokenGrid, prune_layer: usize) -> Result<Self> {
        if prune_layer == 0 || prune_layer > model.vision_config.layers {
            return Err(Error::Config(format!(
                "prune layer {prune_layer} outside 1..={}",
                model.vision_config.layers
            )));
        }
        let full = model.encode_image(grid, &[], None)?;
        Ok(ImageContext {
            model,
            embs,
            grid,
            z_cls_full: full.z_cls,
            prefix: full.intermediates[&prune_layer].as_ref().clone(),
            prune_layer,
        })
    }

    /// Score of a pruned CLS embedding.
    pub fn score_cls(&self, z_cls: &Tensor, kind: ScoreKind, y_gt: Option<usize>) -> Result<f32> {
        match kind {
            ScoreKind::Preservation => Ok(cosine_exact(self.z_cls_full.data(), z_cls.data())),
            ScoreKind::Label => {
                let y = y_gt.ok_or_else(|| Error::Usage("label score needs a ground-truth class".into()))?;
                let p = zero_shot_probs(z_cls, self.embs, self.model.proj_v())?;
                p.data()
                    .get(y)
                    .copied()
                    .ok_or_else(|| Error::Usage(format!("ground-truth class {y} out of range")))
            }
            ScoreKind::Confidence => {
                let p = zero_shot_probs(z_cls, self.embs, self.model.proj_v())?;
                Ok(p.data().iter().copied().fold(f32::MIN, f32::max))
            }
        }
    }

    fn check_window(&self, w: &PruneWindow) -> Result<()> {
        let n = self.grid.num_tokens();
        if let Some(&bad) = w.token_ids.iter().find(|&&t| t >= n) {
            return Err(Error::Logic(format!("window token {bad} outside 0..{n}")));
        }
        Ok(())
    }

    /// Final CLS embedding with `window` removed, by a full forward pass.
    pub fn pruned_cls_sequential(&self, window: &PruneWindow) -> Result<Tensor> {
        self.check_window(window)?;
        let plan = if window.token_ids.is_empty() {
            Vec::new()
        } else {
            vec![RemovalStep {
                layer: self.prune_layer,
                drop: window.token_ids.clone(),
            }]
        };
        Ok(self.model.encode_image(self.grid, &plan, None)?.z_cls)
    }

    /// Final CLS embeddings for every window from one grouped pass over the
    /// shared prefix.
    pub fn pruned_cls_batched(&self, windows: &[PruneWindow]) -> Result<Vec<Tensor>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.grid.num_tokens();
        let mut rows = Vec::new();
        let mut segs = Vec::with_capacity(windows.len());
        for w in windows {
            self.check_window(w)?;
            if w.token_ids.len() >= n {
                return Err(Error::Schedule(format!(
                    "window removes all {n} patches"
                )));
            }
            let mut removed = vec![false; n];
            for &t in &w.token_ids {
                removed[t] = true;
            }
            let start = rows.len();
            rows.push(0);
            rows.extend((0..n).filter(|&t| !removed[t]).map(|t| 1 + t));
            segs.push(rows.len() - start);
        }
        let mut tape = Tape::new();
        let wts = self.model.bind(&mut tape, false);
        let mut x = tape.constant(self.prefix.gather_rows(&rows));
        for layer in self.prune_layer..=self.model.vision_config.layers {
            x = self.model.vision_block(&mut tape, &wts, layer, x, &segs, None);
        }
        let mut cls_rows = Vec::with_capacity(segs.len());
        let mut off = 0;
        for s in &segs {
            cls_rows.push(off);
            off += s;
        }
        let cls = tape.gather_rows(x, &cls_rows);
        let out = self.model.vision_head(&mut tape, &wts, cls);
        let v = tape.value(out);
        Ok((0..v.rows()).map(|i| Tensor::vector(v.row(i).to_vec())).collect())
    }

    pub fn score_window(&self, window: &PruneWindow, kind: ScoreKind, y_gt: Option<usize>) -> Result<f32> {
        let z = self.pruned_cls_sequential(window)?;
        self.score_cls(&z, kind, y_gt)
    }

    /// `s(T_i)` for every window and every requested kind, `[kind][window]`.
    pub fn window_scores(
        &self,
        windows: &[PruneWindow],
        kinds: &[ScoreKind],
        y_gt: Option<usize>,
        batched: bool,
    ) -> Result<Vec<Vec<f32>>> {
        let cls = if batched {
            self.pruned_cls_batched(windows)?
        } else {
            windows
                .iter()
                .map(|w| self.pruned_cls_sequential(w))
                .collect::<Result<Vec<_>>>()?
        };
        kinds
            .iter()
            .map(|&k| cls.iter().map(|z| self.score_cls(z, k, y_gt)).collect())
            .collect()
    }
}

/// Per-token mean of window scores. Returns `(raw, coverage)`.
pub fn aggregate_window_scores(
    windows: &[PruneWindow],
    scores: &[f32],
    n: usize,
    block_area_norm: bool,
) -> (Tensor, Vec<u32>) {
    let mut coverage = vec![0u32; n];
    for w in windows {
        for &t in &w.token_ids {
            coverage[t] += 1;
        }
    }
    let block = windows.first().map(|w| w.token_ids.len()).unwrap_or(1) as f64;
    let mut acc = vec![0.0f64; n];
    for (w, &s) in windows.iter().zip(scores) {
        for &t in &w.token_ids {
            let denom = if block_area_norm { block } else { coverage[t] as f64 };
            acc[t] += s as f64 / denom;
        }
    }
    (Tensor::vector(acc.iter().map(|&a| a as f32).collect()), coverage)
}

/// Golden scores of one image.
pub fn golden_scores(
    model: &ClipModel,
    embs: &ClassEmbeddings,
    grid: &TokenGrid,
    y_gt: Option<usize>,
    cfg: &GoldenConfig,
    batched: bool,
) -> Result<GoldenScores> {
    let all = golden_scores_multi(model, embs, grid, y_gt, cfg, &[cfg.kind], batched)?;
    Ok(all.into_iter().next().expect("one kind"))
}

/// Golden scores of one image for several kinds from the same pruned passes.
pub fn golden_scores_multi(
    model: &ClipModel,
    embs: &ClassEmbeddings,
    grid: &TokenGrid,
    y_gt: Option<usize>,
    cfg: &GoldenConfig,
    kinds: &[ScoreKind],
    batched: bool,
) -> Result<Vec<GoldenScores>> {
    let windows = enumerate_windows(grid.grid_side, cfg.r, cfg.stride)?;
    let ctx = ImageContext::new(model, embs, grid, cfg.prune_layer)?;
    let per_kind = ctx.window_scores(&windows, kinds, y_gt, batched)?;
    let n = grid.num_tokens();
    kinds
        .iter()
        .zip(per_kind)
        .map(|(&kind, s)| {
            let (raw, coverage) = aggregate_window_scores(&windows, &s, n, cfg.block_area_norm);
            normalize_scores(&raw, &coverage, kind, cfg.prune_layer)
        })
        .collect()
}

/// Golden scores for every image of a split, keyed by image index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoldenTable {
    pub config: Option<GoldenConfig>,
    pub scores: BTreeMap<usize, GoldenScores>,
}

impl GoldenTable {
    pub fn get(&self, image: usize) -> Result<&GoldenScores> {
        self.scores
            .get(&image)
            .ok_or_else(|| Error::MissingArtifact(format!("golden scores for image {image}")))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scores every image of `split` (in parallel, collected in index order).
pub fn golden_table(model: &ClipModel, embs: &ClassEmbeddings, split: &DatasetSplit, cfg: &GoldenConfig) -> Result<GoldenTable> {
    let scores: Vec<GoldenScores> = split
        .examples
        .par_iter()
        .map(|ex| {
            let grid = patchify(ex, split.patch_size)?;
            golden_scores(model, embs, &grid, Some(ex.label), cfg, true)
        })
        .collect::<Result<_>>()?;
    Ok(GoldenTable {
        config: Some(cfg.clone()),
        scores: scores.into_iter().enumerate().collect(),
    })
}

/// On-disk golden-score cache, one directory per
/// `(dataset, image, kind, r, prune_layer)` key.
#[derive(Clone, Debug)]
pub struct ScoreCache {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheMeta {
    mu_s: f32,
    sigma_s: f32,
    kind: ScoreKind,
    source_layer: usize,
    degenerate: bool,
}

impl ScoreCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ScoreCache { root: root.into() }
    }

    pub fn entry_dir(&self, dataset: &str, image: usize, kind: ScoreKind, r: usize, layer: usize) -> PathBuf {
        self.root
            .join(dataset)
            .join(format!("{kind}_r{r}_l{layer}"))
            .join(format!("img{image:05}"))
    }

    pub fn store(&self, dataset: &str, image: usize, r: usize, scores: &GoldenScores) -> Result<()> {
        let dir = self.entry_dir(dataset, image, scores.kind, r, scores.source_layer);
        save_tensor(&dir, "raw", &scores.raw)?;
        save_tensor(&dir, "normalized", &scores.normalized)?;
        let cov = Tensor::vector(scores.coverage.iter().map(|&c| c as f32).collect());
        save_tensor(&dir, "coverage", &cov)?;
        let meta = CacheMeta {
            mu_s: scores.mu_s,
            sigma_s: scores.sigma_s,
            kind: scores.kind,
            source_layer: scores.source_layer,
            degenerate: scores.degenerate,
        };
        write_file(
            &dir.join("meta.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes(),
        )
    }

    pub fn load(&self, dataset: &str, image: usize, kind: ScoreKind, r: usize, layer: usize) -> Result<GoldenScores> {
        let dir = self.entry_dir(dataset, image, kind, r, layer);
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(format!(
                "golden cache entry for image {image} ({kind}, r={r}, layer {layer}) at {}",
                dir.display()
            )));
        }
        let meta: CacheMeta = serde_json::from_slice(&read_file(&meta_path)?)
            .map_err(|e| Error::parse(&meta_path, e.to_string()))?;
        let coverage = load_tensor(&dir, "coverage")?.data().iter().map(|&c| c as u32).collect();
        Ok(GoldenScores {
            raw: load_tensor(&dir, "raw")?,
            coverage,
            mu_s: meta.mu_s,
            sigma_s: meta.sigma_s,
            normalized: load_tensor(&dir, "normalized")?,
            kind: meta.kind,
            source_layer: meta.source_layer,
            degenerate: meta.degenerate,
        })
    }

    pub fn store_table(&self, dataset: &str, table: &GoldenTable) -> Result<()> {
        let r = table.config.as_ref().map(|c| c.r).unwrap_or(0);
        for (&i, s) in &table.scores {
            self.store(dataset, i, r, s)?;
        }
        Ok(())
    }

    /// Loads the entries for images `0..count`; any miss names the image.
    pub fn load_table(&self, dataset: &str, count: usize, cfg: &GoldenConfig) -> Result<GoldenTable> {
        let mut scores = BTreeMap::new();
        for i in 0..count {
            scores.insert(i, self.load(dataset, i, cfg.kind, cfg.r, cfg.prune_layer)?);
        }
        Ok(GoldenTable {
            config: Some(cfg.clone()),
            scores,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
