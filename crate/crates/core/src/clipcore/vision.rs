use std::collections::BTreeMap;
use std::sync::Arc;

use super::{block_forward, ClipModel, EncodeResult, RemovalStep};
use crate::data::TokenGrid;
use crate::error::{Error, Result};
use crate::nncore::{Bound, Tape, Tensor, Var, LN_EPS};

/// State handed to a removal callback right before block `layer` runs.
pub struct Stage<'a> {
    pub layer: usize,
    /// Sequence entering the block, `[1 + b + n, d_v]`, before removal.
    pub sequence: &'a Tensor,
    /// Original ids of the `n` patch rows, in row order.
    pub surviving: &'a [usize],
    pub num_prompts: usize,
}

impl Stage<'_> {
    /// Patch rows only (CLS and prompts stripped).
    pub fn patch_rows(&self) -> Tensor {
        let start = 1 + self.num_prompts;
        let ids: Vec<usize> = (start..self.sequence.rows()).collect();
        self.sequence.gather_rows(&ids)
    }
}

/// Tape-level result of a vision forward pass.
pub struct VisionTrace {
    /// `[1, d_v]`.
    pub z_cls: Var,
    /// `[n', d_v]`.
    pub z: Var,
    pub intermediates: BTreeMap<usize, Arc<Tensor>>,
    pub cls_attention: BTreeMap<usize, Tensor>,
    pub layer_survivors: BTreeMap<usize, Vec<usize>>,
    pub surviving_ids: Vec<usize>,
    pub num_prompts: usize,
}

impl ClipModel {
    /// `[CLS + pos_0; prompts; patches W + b + pos_{1+t}]`.
    pub fn embed_image(&self, tape: &mut Tape, w: &Bound, tokens: &Tensor, prompts_v: Option<Var>) -> Result<Var> {
        let vc = &self.vision_config;
        if tokens.rows() != vc.num_patches || tokens.cols() != vc.patch_dim {
            return Err(Error::Shape(format!(
                "image tokens {:?}, model expects [{}, {}]",
                tokens.shape(),
                vc.num_patches,
                vc.patch_dim
            )));
        }
        if let Some(p) = prompts_v {
            if tape.value(p).cols() != vc.dim {
                return Err(Error::Shape(format!(
                    "visual prompts {:?} do not match vision width {}",
                    tape.value(p).shape(),
                    vc.dim
                )));
            }
        }
        let x = tape.constant(tokens.clone());
        let patches = tape.matmul(x, w[self.v.patch_w]);
        let patches = tape.add_row(patches, w[self.v.patch_b]);
        let patch_pos_ids: Vec<usize> = (1..=vc.num_patches).collect();
        let patch_pos = tape.gather_rows(w[self.v.pos], &patch_pos_ids);
        let patches = tape.add(patches, patch_pos);
        let cls_pos = tape.gather_rows(w[self.v.pos], &[0]);
        let cls = tape.add(w[self.v.cls], cls_pos);
        let mut parts = vec![cls];
        if let Some(p) = prompts_v {
            if tape.value(p).rows() > 0 {
                parts.push(p);
            }
        }
        parts.push(patches);
        Ok(tape.concat_rows(&parts))
    }

    /// Block `layer` (1-based) over stacked sequences of lengths `segs`.
    pub fn vision_block(
        &self,
        tape: &mut Tape,
        w: &Bound,
        layer: usize,
        x: Var,
        segs: &[usize],
        cls_attn: Option<&mut Vec<Vec<f32>>>,
    ) -> Var {
        block_forward(
            tape,
            w,
            &self.v.blocks[layer - 1],
            x,
            segs,
            self.vision_config.heads,
            cls_attn,
        )
    }

    /// Final layer norm over every row.
    pub fn vision_head(&self, tape: &mut Tape, w: &Bound, x: Var) -> Var {
        tape.layer_norm(x, w[self.v.ln_post_g], w[self.v.ln_post_b], LN_EPS)
    }

    /// Head-averaged CLS attention of block `layer` evaluated on `sequence`
    /// without running the rest of the block.
    pub fn probe_cls_attention(&self, layer: usize, sequence: &Tensor) -> Vec<f32> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let b = &self.v.blocks[layer - 1];
        let x = tape.constant(sequence.clone());
        let h = tape.layer_norm(x, w[b.ln1_g], w[b.ln1_b], LN_EPS);
        let qkv = super::linear(&mut tape, h, w[b.qkv_w], w[b.qkv_b]);
        let dim = self.vision_config.dim;
        let heads = self.vision_config.heads;
        let dh = dim / heads;
        let q0 = tape.slice_rows(qkv, 0, 1);
        let mut avg = vec![0.0f32; sequence.rows()];
        for hd in 0..heads {
            let q = tape.slice_cols(q0, hd * dh, dh);
            let k = tape.slice_cols(qkv, dim + hd * dh, dh);
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt);
            let s = tape.scale(s, (dh as f32).powf(-0.5));
            let a = tape.softmax_rows(s);
            for (acc, &p) in avg.iter_mut().zip(tape.value(a).data()) {
                *acc += p / heads as f32;
            }
        }
        avg
    }

    /// Full vision pass. `decide` is called before every block with the
    /// incoming sequence and returns the original patch ids to delete there.
    pub fn forward_vision<F>(
        &self,
        tape: &mut Tape,
        w: &Bound,
        tokens: &Tensor,
        prompts_v: Option<Var>,
        mut decide: F,
    ) -> Result<VisionTrace>
    where
        F: FnMut(&Stage) -> Result<Vec<usize>>,
    {
        let num_prompts = prompts_v.map(|p| tape.value(p).rows()).unwrap_or(0);
        let prefix = 1 + num_prompts;
        let mut x = self.embed_image(tape, w, tokens, prompts_v)?;
        let mut surviving: Vec<usize> = (0..self.vision_config.num_patches).collect();
        let mut intermediates = BTreeMap::new();
        let mut cls_attention = BTreeMap::new();
        let mut layer_survivors = BTreeMap::new();

        for layer in 1..=self.vision_config.layers {
            let drop = {
                let stage = Stage {
                    layer,
                    sequence: tape.value(x),
                    surviving: &surviving,
                    num_prompts,
                };
                decide(&stage)?
            };
            if !drop.is_empty() {
                x = remove_tokens(tape, x, &mut surviving, &drop, prefix, layer)?;
            }
            intermediates.insert(layer, tape.value_arc(x));
            layer_survivors.insert(layer, surviving.clone());
            let n = tape.value(x).rows();
            let mut rows = Vec::with_capacity(1);
            x = self.vision_block(tape, w, layer, x, &[n], Some(&mut rows));
            cls_attention.insert(layer, Tensor::vector(rows.pop().expect("one segment")));
        }
        let out = self.vision_head(tape, w, x);
        let z_cls = tape.slice_rows(out, 0, 1);
        let n = tape.value(out).rows();
        let z = tape.slice_rows(out, prefix, n - prefix);
        Ok(VisionTrace {
            z_cls,
            z,
            intermediates,
            cls_attention,
            layer_survivors,
            surviving_ids: surviving,
            num_prompts,
        })
    }

    /// Vision pass over several images at once, stacked as independent
    /// sequences. `decide(image, stage)` picks the ids to drop per image.
    /// Returns the final CLS rows `[B, d_v]` and each image's survivors.
    pub fn forward_vision_batch<F>(
        &self,
        tape: &mut Tape,
        w: &Bound,
        tokens: &[&Tensor],
        prompts_v: Option<Var>,
        mut decide: F,
    ) -> Result<(Var, Vec<Vec<usize>>)>
    where
        F: FnMut(usize, &Stage) -> Result<Vec<usize>>,
    {
        if tokens.is_empty() {
            return Err(Error::Usage("empty image batch".into()));
        }
        let num_prompts = prompts_v.map(|p| tape.value(p).rows()).unwrap_or(0);
        let prefix = 1 + num_prompts;
        let mut parts = Vec::with_capacity(tokens.len());
        for t in tokens {
            parts.push(self.embed_image(tape, w, t, prompts_v)?);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        let n = self.vision_config.num_patches;
        let mut surviving: Vec<Vec<usize>> = vec![(0..n).collect(); tokens.len()];

        for layer in 1..=self.vision_config.layers {
            let mut rows = Vec::new();
            let mut changed = false;
            let mut offset = 0;
            for (i, surv) in surviving.iter_mut().enumerate() {
                let len = prefix + surv.len();
                let seq = {
                    let ids: Vec<usize> = (offset..offset + len).collect();
                    tape.value(x).gather_rows(&ids)
                };
                let drop = decide(
                    i,
                    &Stage {
                        layer,
                        sequence: &seq,
                        surviving: surv,
                        num_prompts,
                    },
                )?;
                let keep = survivor_rows(surv, &drop, prefix, layer)?;
                changed |= !drop.is_empty();
                rows.extend(keep.iter().map(|r| offset + r));
                offset += len;
            }
            if changed {
                x = tape.gather_rows(x, &rows);
            }
            let segs: Vec<usize> = surviving.iter().map(|s| prefix + s.len()).collect();
            x = self.vision_block(tape, w, layer, x, &segs, None);
        }
        let out = self.vision_head(tape, w, x);
        let mut cls_rows = Vec::with_capacity(tokens.len());
        let mut offset = 0;
        for s in &surviving {
            cls_rows.push(offset);
            offset += prefix + s.len();
        }
        let z_cls = tape.gather_rows(out, &cls_rows);
        Ok((z_cls, surviving))
    }

    /// Forward pass with a fixed removal plan.
    pub fn encode_image(
        &self,
        grid: &TokenGrid,
        plan: &[RemovalStep],
        prompts_v: Option<&Tensor>,
    ) -> Result<EncodeResult> {
        validate_plan_layers(plan.iter().map(|s| s.layer), self.vision_config.layers)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let pv = prompts_v.map(|p| tape.constant(p.clone()));
        let trace = self.forward_vision(&mut tape, &w, &grid.tokens, pv, |stage| {
            Ok(plan
                .iter()
                .find(|s| s.layer == stage.layer)
                .map(|s| s.drop.clone())
                .unwrap_or_default())
        })?;
        Ok(trace.into_result(&tape))
    }
}

impl VisionTrace {
    pub fn into_result(self, tape: &Tape) -> EncodeResult {
        EncodeResult {
            z: tape.value(self.z).clone(),
            z_cls: Tensor::vector(tape.value(self.z_cls).data().to_vec()),
            intermediates: self.intermediates,
            cls_attention: self.cls_attention,
            layer_survivors: self.layer_survivors,
            surviving_ids: self.surviving_ids,
            num_prompts: self.num_prompts,
        }
    }
}

pub(crate) fn validate_plan_layers(layers: impl Iterator<Item = usize>, depth: usize) -> Result<()> {
    let mut prev = 0;
    for l in layers {
        if l == 0 || l > depth {
            return Err(Error::Schedule(format!("removal layer {l} outside 1..={depth}")));
        }
        if l <= prev {
            return Err(Error::Schedule(format!(
                "removal layers must be strictly increasing ({prev} then {l})"
            )));
        }
        prev = l;
    }
    Ok(())
}

/// Deletes patch rows for the original ids in `drop`, keeping CLS, prompts
/// and the order of survivors.
fn remove_tokens(
    tape: &mut Tape,
    x: Var,
    surviving: &mut Vec<usize>,
    drop: &[usize],
    prefix: usize,
    layer: usize,
) -> Result<Var> {
    let rows = survivor_rows(surviving, drop, prefix, layer)?;
    Ok(tape.gather_rows(x, &rows))
}

/// Validates `drop` against `surviving`, updates `surviving` in place and
/// returns the sequence rows to keep (prefix rows first).
fn survivor_rows(surviving: &mut Vec<usize>, drop: &[usize], prefix: usize, layer: usize) -> Result<Vec<usize>> {
    if drop.len() >= surviving.len() {
        return Err(Error::Schedule(format!(
            "layer {layer}: dropping {} of {} surviving patches leaves none",
            drop.len(),
            surviving.len()
        )));
    }
    let mut remove = vec![false; surviving.len()];
    for &id in drop {
        match surviving.iter().position(|&s| s == id) {
            Some(pos) if !remove[pos] => remove[pos] = true,
            Some(_) => {
                return Err(Error::Logic(format!("layer {layer}: token {id} listed twice")));
            }
            None => {
                return Err(Error::Logic(format!(
                    "layer {layer}: token {id} is not among the surviving patches"
                )));
            }
        }
    }
    let mut rows: Vec<usize> = (0..prefix).collect();
    let mut kept = Vec::with_capacity(surviving.len() - drop.len());
    for (pos, &id) in surviving.iter().enumerate() {
        if !remove[pos] {
            rows.push(prefix + pos);
            kept.push(id);
        }
    }
    *surviving = kept;
    Ok(rows)
}
