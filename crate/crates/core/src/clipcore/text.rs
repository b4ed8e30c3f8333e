use super::{ClassEmbeddings, ClipModel};
use crate::error::{Error, Result};
use crate::nncore::{Bound, Tape, Tensor, Var, LN_EPS};

/// Words preceding the class token: "a photo of a [class]".
pub const TEMPLATE_WORDS: [&str; 4] = ["a", "photo", "of", "a"];
/// Distinct non-class vocabulary entries; class `k` has id `BASE_VOCAB.len() + k`.
pub(crate) const BASE_VOCAB: [&str; 3] = ["a", "photo", "of"];
pub(crate) const TEMPLATE_LEN: usize = TEMPLATE_WORDS.len() + 1;

fn template_ids(class: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = TEMPLATE_WORDS
        .iter()
        .map(|w| BASE_VOCAB.iter().position(|b| b == w).expect("template word in vocab"))
        .collect();
    ids.push(BASE_VOCAB.len() + class);
    ids
}

impl ClipModel {
    /// Token ids of the class prompt for `class`.
    pub fn class_prompt_ids(&self, class: usize) -> Vec<usize> {
        template_ids(class)
    }

    /// Unit class embeddings `[C, d_e]` from `[prompts_t; template]`
    /// sequences, one per class, encoded together.
    pub fn text_forward(&self, tape: &mut Tape, w: &Bound, prompts_t: Option<Var>) -> Result<Var> {
        let tc = &self.text_config;
        let b = prompts_t.map(|p| tape.value(p).rows()).unwrap_or(0);
        if let Some(p) = prompts_t {
            if tape.value(p).cols() != tc.dim {
                return Err(Error::Shape(format!(
                    "text prompts {:?} do not match text width {}",
                    tape.value(p).shape(),
                    tc.dim
                )));
            }
        }
        let len = b + TEMPLATE_LEN;
        if len > tc.max_len {
            return Err(Error::Config(format!(
                "{b} prompts + {TEMPLATE_LEN} template tokens exceed max text length {}",
                tc.max_len
            )));
        }
        let pos_ids: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(w[self.t.pos], &pos_ids);
        let c = self.num_classes();
        let mut seqs = Vec::with_capacity(c);
        for class in 0..c {
            let words = tape.gather_rows(w[self.t.tok_emb], &template_ids(class));
            let seq = match prompts_t {
                Some(p) if b > 0 => tape.concat_rows(&[p, words]),
                _ => words,
            };
            seqs.push(tape.add(seq, pos));
        }
        let mut x = tape.concat_rows(&seqs);
        let segs = vec![len; c];
        for blk in &self.t.blocks {
            x = super::block_forward(tape, w, blk, x, &segs, tc.heads, None);
        }
        let last: Vec<usize> = (0..c).map(|k| (k + 1) * len - 1).collect();
        let x = tape.gather_rows(x, &last);
        let x = tape.layer_norm(x, w[self.t.ln_final_g], w[self.t.ln_final_b], LN_EPS);
        let e = tape.matmul(x, w[self.t.proj]);
        Ok(tape.l2_normalize_rows(e))
    }

    pub fn encode_text(&self, prompts_t: Option<&Tensor>) -> Result<ClassEmbeddings> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let p = prompts_t.map(|p| tape.constant(p.clone()));
        let e = self.text_forward(&mut tape, &w, p)?;
        Ok(ClassEmbeddings {
            e: tape.value(e).clone(),
            logit_scale: self.logit_scale(),
        })
    }
}
