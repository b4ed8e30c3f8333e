//! Small CLIP-style dual encoder.
//!
//! The vision encoder is a pre-norm ViT over `[CLS; visual prompts; patches]`
//! with learned per-position embeddings for CLS and patches. Patch tokens can
//! be removed before any block; survivors keep their original position
//! embeddings. The text encoder reads `[text prompts; "a photo of a <class>"]`
//! over a fixed synthetic vocabulary and embeds the last position.
//!
//! Layers are numbered from 1. Removing tokens "at layer k" deletes them
//! before block k runs.

mod block;
pub mod pretrain;
mod text;
mod vision;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use block::{add_block, block_forward, block_macs, linear, BlockIdx};
pub use pretrain::{argmax, pretrain_contrastive, symmetric_infonce, zero_shot_accuracy, PretrainConfig, PretrainLog};
pub use text::TEMPLATE_WORDS;
pub use vision::{Stage, VisionTrace};

use crate::error::{Error, Result};
use crate::nncore::io::{load_checkpoint_into, read_file, save_checkpoint, write_file};
use crate::nncore::{Bound, ParamSet, SeededRng, Tape, Tensor, Var};

/// Upper bound on the learned logit scale.
pub const MAX_LOGIT_SCALE: f32 = 100.0;
/// Initial log logit scale, `ln(1 / 0.07)`.
pub const INIT_LOG_LOGIT_SCALE: f32 = 2.659;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    /// Shared image/text embedding width.
    pub embed_dim: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            layers: 6,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            num_patches: 64,
            patch_dim: 48,
            embed_dim: 32,
        }
    }
}

impl VisionConfig {
    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers < 4 {
            return Err(Error::Config(format!(
                "vision encoder needs >= 4 layers, got {}",
                self.layers
            )));
        }
        if self.num_patches == 0 || self.patch_dim == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("vision sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Longest accepted `[prompts; template]` sequence.
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            layers: 2,
            dim: 32,
            heads: 4,
            mlp_ratio: 2,
            max_len: 24,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "text dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("text encoder sizes must be positive".into()));
        }
        if self.max_len < text::TEMPLATE_LEN {
            return Err(Error::Config(format!(
                "text max_len {} cannot hold the class template",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

#[derive(Clone, Debug)]
pub(crate) struct VisionIdx {
    patch_w: usize,
    patch_b: usize,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    ln_post_g: usize,
    ln_post_b: usize,
    proj: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct TextIdx {
    tok_emb: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    ln_final_g: usize,
    ln_final_b: usize,
    proj: usize,
}

/// Which tokens to delete before a given block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemovalStep {
    pub layer: usize,
    /// Original patch indices.
    pub drop: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EncodeResult {
    /// Final patch embeddings of the survivors, `[N', d_v]`.
    pub z: Tensor,
    /// Final CLS embedding, `[d_v]`.
    pub z_cls: Tensor,
    /// Sequence entering each block (after any removal at that block).
    pub intermediates: BTreeMap<usize, Arc<Tensor>>,
    /// Head-averaged CLS attention row over the full sequence at each block.
    pub cls_attention: BTreeMap<usize, Tensor>,
    /// Surviving original patch ids at each block.
    pub layer_survivors: BTreeMap<usize, Vec<usize>>,
    /// Surviving original patch ids after the last removal.
    pub surviving_ids: Vec<usize>,
    pub num_prompts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    /// `[num_classes, d_e]`, unit rows.
    pub e: Tensor,
    pub logit_scale: f32,
}

#[derive(Clone, Debug)]
pub struct ClipModel {
    pub vision_config: VisionConfig,
    pub text_config: TextConfig,
    class_names: Vec<String>,
    params: ParamSet,
    v: VisionIdx,
    t: TextIdx,
    log_scale: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelConfigFile {
    vision: VisionConfig,
    text: TextConfig,
    class_names: Vec<String>,
}

impl ClipModel {
    pub fn new(
        vision_config: VisionConfig,
        text_config: TextConfig,
        class_names: Vec<String>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        vision_config.validate()?;
        text_config.validate()?;
        if class_names.is_empty() {
            return Err(Error::Config("at least one class name required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &class_names {
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate class name '{name}'")));
            }
        }

        let mut ps = ParamSet::new();
        let vc = &vision_config;
        let d = vc.dim;
        let v = VisionIdx {
            patch_w: ps.add(
                "visual.patch_w",
                rng.normal_tensor(&[vc.patch_dim, d], 0.0, (vc.patch_dim as f32).powf(-0.5)),
            ),
            patch_b: ps.add("visual.patch_b", Tensor::zeros(&[d])),
            cls: ps.add("visual.cls", rng.normal_tensor(&[1, d], 0.0, (d as f32).powf(-0.5))),
            pos: ps.add(
                "visual.pos",
                rng.normal_tensor(&[vc.num_patches + 1, d], 0.0, (d as f32).powf(-0.5)),
            ),
            blocks: (0..vc.layers)
                .map(|l| add_block(&mut ps, &format!("visual.blocks.{l}"), d, vc.mlp_dim(), vc.layers, rng))
                .collect(),
            ln_post_g: ps.add("visual.ln_post_g", Tensor::ones(&[d])),
            ln_post_b: ps.add("visual.ln_post_b", Tensor::zeros(&[d])),
            proj: ps.add(
                "visual.proj",
                rng.normal_tensor(&[d, vc.embed_dim], 0.0, (d as f32).powf(-0.5)),
            ),
        };

        let tc = &text_config;
        let dt = tc.dim;
        let vocab = text::BASE_VOCAB.len() + class_names.len();
        let t = TextIdx {
            tok_emb: ps.add("text.tok_emb", rng.normal_tensor(&[vocab, dt], 0.0, 0.5)),
            pos: ps.add("text.pos", rng.normal_tensor(&[tc.max_len, dt], 0.0, 0.1)),
            blocks: (0..tc.layers)
                .map(|l| add_block(&mut ps, &format!("text.blocks.{l}"), dt, tc.mlp_dim(), tc.layers, rng))
                .collect(),
            ln_final_g: ps.add("text.ln_final_g", Tensor::ones(&[dt])),
            ln_final_b: ps.add("text.ln_final_b", Tensor::zeros(&[dt])),
            proj: ps.add(
                "text.proj",
                rng.normal_tensor(&[dt, vc.embed_dim], 0.0, (dt as f32).powf(-0.5)),
            ),
        };
        let log_scale = ps.add("logit_scale", Tensor::scalar(INIT_LOG_LOGIT_SCALE));

        Ok(ClipModel {
            vision_config,
            text_config,
            class_names,
            params: ps,
            v,
            t,
            log_scale,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn logit_scale(&self) -> f32 {
        self.params.value(self.log_scale).item().exp().min(MAX_LOGIT_SCALE)
    }

    /// Clamps the learned log scale so `exp` stays within `MAX_LOGIT_SCALE`.
    pub(crate) fn clamp_logit_scale(&mut self) {
        let p = self.params.get_mut(self.log_scale);
        let v = p.value().item();
        let max = MAX_LOGIT_SCALE.ln();
        if v > max {
            p.value_mut().data_mut()[0] = max;
        }
    }

    pub(crate) fn proj_v_index(&self) -> usize {
        self.v.proj
    }

    pub fn proj_v(&self) -> &Tensor {
        self.params.value(self.v.proj)
    }

    /// Binds every parameter to `tape`; `track` turns on gradient tracking.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        self.params.bind(tape, track)
    }

    /// Logit scale as a tape scalar, `min(exp(log_scale), MAX_LOGIT_SCALE)`.
    pub fn logit_scale_var(&self, tape: &mut Tape, w: &Bound) -> Var {
        if self.params.value(self.log_scale).item() >= MAX_LOGIT_SCALE.ln() {
            tape.constant(Tensor::scalar(MAX_LOGIT_SCALE))
        } else {
            tape.exp(w[self.log_scale])
        }
    }

    /// Class logits `[rows, C]` for CLS embeddings `[rows, d_v]` against unit
    /// class embeddings `[C, d_e]`.
    pub fn image_logits(&self, tape: &mut Tape, w: &Bound, z_cls: Var, class_emb: Var) -> Var {
        let img = tape.matmul(z_cls, w[self.v.proj]);
        let img = tape.l2_normalize_rows(img);
        let et = tape.transpose(class_emb);
        let cos = tape.matmul(img, et);
        let s = self.logit_scale_var(tape, w);
        tape.mul_scalar(cos, s)
    }

    pub fn classify(&self, z_cls: &Tensor, class_embs: &ClassEmbeddings) -> Result<Tensor> {
        zero_shot_probs(z_cls, class_embs, self.proj_v())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = ModelConfigFile {
            vision: self.vision_config.clone(),
            text: self.text_config.clone(),
            class_names: self.class_names.clone(),
        };
        let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
        write_file(&dir.join("model.json"), json.as_bytes())?;
        let mut tags = BTreeMap::new();
        tags.insert("kind".to_string(), "clip".to_string());
        save_checkpoint(dir, &self.params, &tags)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("model.json");
        if !p.exists() {
            return Err(Error::MissingArtifact(format!("model checkpoint {}", dir.display())));
        }
        let text = read_file(&p)?;
        let cfg: ModelConfigFile =
            serde_json::from_slice(&text).map_err(|e| Error::parse(&p, e.to_string()))?;
        let mut model = ClipModel::new(cfg.vision, cfg.text, cfg.class_names, &mut SeededRng::new(0))?;
        load_checkpoint_into(dir, &mut model.params)?;
        Ok(model)
    }
}

/// `softmax(logit_scale * cos(z_cls proj_v, E_y))` over classes.
pub fn zero_shot_probs(z_cls: &Tensor, class_embs: &ClassEmbeddings, proj_v: &Tensor) -> Result<Tensor> {
    if proj_v.rows() != z_cls.len() || proj_v.cols() != class_embs.e.cols() {
        return Err(Error::Shape(format!(
            "zero_shot_probs: z_cls {:?}, proj {:?}, class embeddings {:?}",
            z_cls.shape(),
            proj_v.shape(),
            class_embs.e.shape()
        )));
    }
    let row = Tensor::matrix(1, z_cls.len(), z_cls.data().to_vec())?;
    let img = crate::nncore::matmul(&row, proj_v)?;
    let norm = Tensor::l2_norm(img.data());
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numeric(format!(
            "image embedding has norm {norm} (|z_cls| = {})",
            Tensor::l2_norm(z_cls.data())
        )));
    }
    let c = class_embs.e.rows();
    let mut logits = Vec::with_capacity(c);
    for y in 0..c {
        let e = class_embs.e.row(y);
        let en = Tensor::l2_norm(e);
        if !(en > 0.0) {
            return Err(Error::Numeric(format!("class embedding {y} has zero norm")));
        }
        logits.push(class_embs.logit_scale * Tensor::dot(img.data(), e) / (norm * en));
    }
    crate::nncore::softmax(&Tensor::vector(logits), 0)
}

/// CLS-to-patch attention at `layer`, renormalized over patch positions.
pub fn cls_attention_scores(result: &EncodeResult, layer: usize) -> Result<Tensor> {
    let row = result.cls_attention.get(&layer).ok_or_else(|| {
        Error::Usage(format!("no CLS attention captured for layer {layer}"))
    })?;
    let start = 1 + result.num_prompts;
    Ok(renormalize(&row.data()[start..]))
}

pub(crate) fn renormalize(xs: &[f32]) -> Tensor {
    let s: f32 = xs.iter().sum();
    Tensor::vector(xs.iter().map(|v| v / s).collect())
}

