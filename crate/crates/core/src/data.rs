//! Synthetic glyph-on-noise images with known redundant patches.
//!
//! Each image carries a class-specific glyph (colour plus fill pattern)
//! covering a `glyph x glyph` block of patches at a uniformly random grid
//! position. Everything else is noisy background. The foreground mask records
//! which patches hold the glyph; it is evaluation metadata and never reaches
//! the model.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::io::{load_tensor, read_file, save_tensor, write_file};
use crate::nncore::{SeededRng, Tensor};

const CHANNELS: usize = 3;
const BACKGROUND: f32 = 0.5;
const LO: f32 = 0.1;
const HI: f32 = 0.9;
const NUM_PATTERNS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Pretrain,
    PredictorTrain,
    TuneTrain,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 4] = [
        SplitRole::Pretrain,
        SplitRole::PredictorTrain,
        SplitRole::TuneTrain,
        SplitRole::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Pretrain => "pretrain",
            SplitRole::PredictorTrain => "predictor_train",
            SplitRole::TuneTrain => "tune_train",
            SplitRole::Test => "test",
        }
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Images per class in each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub pretrain: usize,
    pub predictor_train: usize,
    pub tune_train: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            pretrain: 64,
            predictor_train: 16,
            tune_train: 16,
            test: 16,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, role: SplitRole) -> usize {
        match role {
            SplitRole::Pretrain => self.pretrain,
            SplitRole::PredictorTrain => self.predictor_train,
            SplitRole::TuneTrain => self.tune_train,
            SplitRole::Test => self.test,
        }
    }

    pub fn uniform(n: usize) -> Self {
        SplitCounts {
            pretrain: n,
            predictor_train: n,
            tune_train: n,
            test: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub images_per_class: SplitCounts,
    /// Patches per image side.
    pub grid_side: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    pub noise_level: f32,
    /// Glyph side length in patches.
    pub glyph_size: usize,
    /// Selects the palette permutation and pattern family; different
    /// variants act as different datasets.
    pub variant: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 8,
            images_per_class: SplitCounts::default(),
            grid_side: 8,
            patch_size: 4,
            noise_level: 0.05,
            glyph_size: 3,
            variant: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn image_side(&self) -> usize {
        self.grid_side * self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn token_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > palette_size() {
            return Err(Error::Config(format!(
                "num_classes {} exceeds the {} distinguishable glyph colours",
                self.num_classes,
                palette_size()
            )));
        }
        if self.grid_side < 4 {
            return Err(Error::Config(format!(
                "grid_side must be >= 4, got {}",
                self.grid_side
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if self.glyph_size == 0 || self.glyph_size >= self.grid_side {
            return Err(Error::Config(format!(
                "glyph of {} patches does not fit a {}x{} grid with background left over",
                self.glyph_size, self.grid_side, self.grid_side
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Config("noise_level must be >= 0".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|k| format!("v{}_glyph{k}", self.variant))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    /// Row-major `P x P` grid; `true` where the patch overlaps the glyph.
    pub foreground_mask: Vec<bool>,
}

impl SyntheticImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub examples: Vec<SyntheticImage>,
    pub role: SplitRole,
    pub class_names: Vec<String>,
    pub grid_side: usize,
    pub patch_size: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// First `n` examples (or all), keeping metadata.
    pub fn truncated(&self, n: usize) -> DatasetSplit {
        DatasetSplit {
            examples: self.examples.iter().take(n).cloned().collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> DatasetSplit {
        DatasetSplit {
            examples: Vec::new(),
            role: self.role,
            class_names: self.class_names.clone(),
            grid_side: self.grid_side,
            patch_size: self.patch_size,
        }
    }
}

/// All four splits of one generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub splits: BTreeMap<SplitRole, DatasetSplit>,
}

impl Dataset {
    pub fn split(&self, role: SplitRole) -> &DatasetSplit {
        &self.splits[&role]
    }

    pub fn class_names(&self) -> Vec<String> {
        self.config.class_names()
    }
}

/// Row-major `P x P` patch tokens of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[N, 3 p^2]`; each row is a patch flattened channel-major, then row,
    /// then column.
    pub tokens: Tensor,
    pub grid_side: usize,
}

impl TokenGrid {
    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    /// Grid cell `(row, col)` of token `t`.
    pub fn cell(&self, t: usize) -> (usize, usize) {
        (t / self.grid_side, t % self.grid_side)
    }
}

fn palette_size() -> usize {
    26
}

/// Colour `i` of the base palette: the 8 corners of `{LO, HI}^3` first,
/// then the remaining points of `{LO, 0.5, HI}^3` except mid-grey.
fn palette_color(i: usize) -> [f32; 3] {
    let mut colors: Vec<[f32; 3]> = Vec::with_capacity(27);
    for code in 0..8 {
        colors.push([
            if code & 4 != 0 { HI } else { LO },
            if code & 2 != 0 { HI } else { LO },
            if code & 1 != 0 { HI } else { LO },
        ]);
    }
    let levels = [LO, BACKGROUND, HI];
    for a in levels {
        for b in levels {
            for c in levels {
                let col = [a, b, c];
                let is_corner = col.iter().all(|&v| v != BACKGROUND);
                let is_grey = col.iter().all(|&v| v == BACKGROUND);
                if !is_corner && !is_grey {
                    colors.push(col);
                }
            }
        }
    }
    colors[i]
}

/// Fill pattern `k` evaluated at pixel `(u, v)` of an `s x s` glyph. Every
/// pattern covers at least two thirds of the glyph.
fn pattern_on(k: usize, u: usize, v: usize, s: usize) -> bool {
    let q = (s / 4).max(1);
    let c = s as isize / 2;
    match k % NUM_PATTERNS {
        0 => true,
        1 => u < q || v < q || u >= s - q || v >= s - q || (u + v) % 2 == 0,
        2 => ((u as isize - c).abs() < q as isize + 1) || ((v as isize - c).abs() < q as isize + 1) || u < q,
        3 => (u / q.max(1)) % 4 != 3,
        4 => (v / q.max(1)) % 4 != 3,
        5 => ((u + v) / q.max(1)) % 4 != 3,
        6 => !((u as isize - c).abs() < q as isize && (v as isize - c).abs() < q as isize),
        _ => u + v < (3 * s) / 2,
    }
}

fn class_style(cfg: &SyntheticConfig, class: usize) -> ([f32; 3], usize) {
    // Variants rotate colour and pattern assignments independently.
    let n = cfg.num_classes;
    let color_idx = if cfg.variant == 0 {
        class
    } else {
        (class * (2 * cfg.variant + 1) + cfg.variant) % n.max(1)
    };
    let pattern = (class + 3 * cfg.variant) % NUM_PATTERNS;
    (palette_color(color_idx), pattern)
}

fn render(cfg: &SyntheticConfig, class: usize, rng: &mut SeededRng) -> SyntheticImage {
    let side = cfg.image_side();
    let p = cfg.patch_size;
    let g = cfg.glyph_size;
    let positions = cfg.grid_side - g + 1;
    let (gr, gc) = (rng.below(positions), rng.below(positions));
    let (color, pattern) = class_style(cfg, class);
    let gs = g * p;

    let mut data = vec![BACKGROUND; CHANNELS * side * side];
    for y in 0..gs {
        for x in 0..gs {
            if pattern_on(pattern, y, x, gs) {
                let (py, px) = (gr * p + y, gc * p + x);
                for (ch, &col) in color.iter().enumerate() {
                    data[ch * side * side + py * side + px] = col;
                }
            }
        }
    }
    if cfg.noise_level > 0.0 {
        for v in data.iter_mut() {
            *v = (*v + cfg.noise_level * rng.normal()).clamp(0.0, 1.0);
        }
    }
    let mut mask = vec![false; cfg.num_tokens()];
    for r in gr..gr + g {
        for c in gc..gc + g {
            mask[r * cfg.grid_side + c] = true;
        }
    }
    SyntheticImage {
        pixels: Tensor::from_parts(vec![CHANNELS, side, side], data),
        label: class,
        foreground_mask: mask,
    }
}

/// Generates every split. Splits draw from independent streams, so changing
/// one split size does not alter the others.
pub fn generate_synthetic(cfg: &SyntheticConfig, rng: &mut SeededRng) -> Result<Dataset> {
    cfg.validate()?;
    let mut splits = BTreeMap::new();
    for role in SplitRole::ALL {
        let mut srng = rng.fork(role as u64 + 1);
        let per_class = cfg.images_per_class.get(role);
        let mut examples = Vec::with_capacity(per_class * cfg.num_classes);
        // Interleave classes so prefixes of a split stay balanced.
        for _ in 0..per_class {
            for class in 0..cfg.num_classes {
                examples.push(render(cfg, class, &mut srng));
            }
        }
        splits.insert(
            role,
            DatasetSplit {
                examples,
                role,
                class_names: cfg.class_names(),
                grid_side: cfg.grid_side,
                patch_size: cfg.patch_size,
            },
        );
    }
    Ok(Dataset {
        config: cfg.clone(),
        splits,
    })
}

pub fn patchify(image: &SyntheticImage, p: usize) -> Result<TokenGrid> {
    let (h, w) = (image.height(), image.width());
    if p == 0 || h % p != 0 || w % p != 0 || h != w {
        return Err(Error::Shape(format!(
            "image {h}x{w} cannot be split into square {p}x{p} patches"
        )));
    }
    let gs = h / p;
    let d = CHANNELS * p * p;
    let px = image.pixels.data();
    let mut tokens = Vec::with_capacity(gs * gs * d);
    for gr in 0..gs {
        for gc in 0..gs {
            for ch in 0..CHANNELS {
                for y in 0..p {
                    let start = ch * h * w + (gr * p + y) * w + gc * p;
                    tokens.extend_from_slice(&px[start..start + p]);
                }
            }
        }
    }
    Ok(TokenGrid {
        tokens: Tensor::from_parts(vec![gs * gs, d], tokens),
        grid_side: gs,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &TokenGrid, p: usize) -> Result<Tensor> {
    let gs = grid.grid_side;
    let d = CHANNELS * p * p;
    if grid.tokens.cols() != d || grid.tokens.rows() != gs * gs {
        return Err(Error::Shape(format!(
            "token grid {:?} does not match patch size {p}",
            grid.tokens.shape()
        )));
    }
    let side = gs * p;
    let mut out = vec![0.0; CHANNELS * side * side];
    for t in 0..gs * gs {
        let (gr, gc) = (t / gs, t % gs);
        let row = grid.tokens.row(t);
        let mut k = 0;
        for ch in 0..CHANNELS {
            for y in 0..p {
                for x in 0..p {
                    out[ch * side * side + (gr * p + y) * side + gc * p + x] = row[k];
                    k += 1;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![CHANNELS, side, side], out))
}

/// `shots` examples per class without replacement, returned in original
/// split order.
pub fn few_shot_sample(split: &DatasetSplit, shots: usize, rng: &mut SeededRng) -> Result<DatasetSplit> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); split.num_classes()];
    for (i, ex) in split.examples.iter().enumerate() {
        by_class[ex.label].push(i);
    }
    let mut chosen = Vec::with_capacity(shots * by_class.len());
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < shots {
            return Err(Error::Config(format!(
                "class '{}' has {} examples, {shots} shots requested",
                split.class_names[class],
                idx.len()
            )));
        }
        for k in rng.sample_indices(idx.len(), shots) {
            chosen.push(idx[k]);
        }
    }
    chosen.sort_unstable();
    Ok(DatasetSplit {
        examples: chosen.iter().map(|&i| split.examples[i].clone()).collect(),
        ..split.clone_meta()
    })
}

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    role: SplitRole,
    class_names: Vec<String>,
    num_examples: usize,
    class_counts: Vec<usize>,
    grid_side: usize,
    patch_size: usize,
    image_side: usize,
}

pub fn save_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    let side = split.grid_side * split.patch_size;
    let n = split.len();
    let manifest = SplitManifest {
        role: split.role,
        class_names: split.class_names.clone(),
        num_examples: n,
        class_counts: split.class_counts(),
        grid_side: split.grid_side,
        patch_size: split.patch_size,
        image_side: side,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), json.as_bytes())?;

    let mut pixels = Vec::with_capacity(n * CHANNELS * side * side);
    let mut labels = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n * split.grid_side * split.grid_side);
    for ex in &split.examples {
        pixels.extend_from_slice(ex.pixels.data());
        labels.push(ex.label as f32);
        masks.extend(ex.foreground_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    }
    let gg = split.grid_side * split.grid_side;
    save_tensor(dir, "pixels", &Tensor::new_allow_empty(vec![n, CHANNELS, side, side], pixels)?)?;
    save_tensor(dir, "labels", &Tensor::new_allow_empty(vec![n], labels)?)?;
    save_tensor(dir, "masks", &Tensor::new_allow_empty(vec![n, gg], masks)?)
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let mp = dir.join("manifest.json");
    if !mp.exists() {
        return Err(Error::MissingArtifact(format!("split manifest {}", mp.display())));
    }
    let text = read_file(&mp)?;
    let m: SplitManifest = serde_json::from_slice(&text).map_err(|e| Error::parse(&mp, e.to_string()))?;
    if m.image_side != m.grid_side * m.patch_size {
        return Err(Error::parse(&mp, "image_side: inconsistent with grid_side * patch_size"));
    }
    if m.class_counts.len() != m.class_names.len() {
        return Err(Error::parse(&mp, "class_counts: length differs from class_names"));
    }
    if m.class_counts.iter().sum::<usize>() != m.num_examples {
        return Err(Error::parse(&mp, "class_counts: do not sum to num_examples"));
    }
    let side = m.image_side;
    let gg = m.grid_side * m.grid_side;
    let pixels = load_tensor(dir, "pixels")?;
    let labels = load_tensor(dir, "labels")?;
    let masks = load_tensor(dir, "masks")?;
    if pixels.shape() != [m.num_examples, CHANNELS, side, side] {
        return Err(Error::parse(dir.join("pixels.json"), format!("shape: {:?}", pixels.shape())));
    }
    if labels.shape() != [m.num_examples] {
        return Err(Error::parse(dir.join("labels.json"), format!("shape: {:?}", labels.shape())));
    }
    if masks.shape() != [m.num_examples, gg] {
        return Err(Error::parse(dir.join("masks.json"), format!("shape: {:?}", masks.shape())));
    }
    let per_img = CHANNELS * side * side;
    let mut examples = Vec::with_capacity(m.num_examples);
    for i in 0..m.num_examples {
        let label = labels.data()[i];
        if label < 0.0 || label.fract() != 0.0 || label as usize >= m.class_names.len() {
            return Err(Error::parse(dir.join("labels.bin"), format!("label {label} at index {i}")));
        }
        examples.push(SyntheticImage {
            pixels: Tensor::from_parts(
                vec![CHANNELS, side, side],
                pixels.data()[i * per_img..(i + 1) * per_img].to_vec(),
            ),
            label: label as usize,
            foreground_mask: masks.data()[i * gg..(i + 1) * gg].iter().map(|&v| v != 0.0).collect(),
        });
    }
    Ok(DatasetSplit {
        examples,
        role: m.role,
        class_names: m.class_names,
        grid_side: m.grid_side,
        patch_size: m.patch_size,
    })
}

/// Writes `dataset.json` (generation config) and one subdirectory per split.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let json = serde_json::to_string_pretty(&ds.config).expect("config serializes");
    write_file(&dir.join("dataset.json"), json.as_bytes())?;
    for (role, split) in &ds.splits {
        save_split(&dir.join(role.as_str()), split)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let p = dir.join("dataset.json");
    if !p.exists() {
        return Err(Error::MissingArtifact(format!("dataset {}", p.display())));
    }
    let text = read_file(&p)?;
    let config: SyntheticConfig =
        serde_json::from_slice(&text).map_err(|e| Error::parse(&p, e.to_string()))?;
    let mut splits = BTreeMap::new();
    for role in SplitRole::ALL {
        splits.insert(role, load_split(&dir.join(role.as_str()))?);
    }
    Ok(Dataset { config, splits })
}
