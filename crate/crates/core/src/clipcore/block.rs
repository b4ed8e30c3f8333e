//! Pre-norm transformer block shared by both encoders and the
//! transformer-block predictor.

use crate::nncore::{Bound, ParamSet, SeededRng, Tape, Tensor, Var, LN_EPS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

/// Registers one block's parameters under `prefix`. Residual output
/// projections are scaled down by `sqrt(2 * depth)`.
pub fn add_block(
    ps: &mut ParamSet,
    prefix: &str,
    dim: usize,
    mlp_dim: usize,
    depth: usize,
    rng: &mut SeededRng,
) -> BlockIdx {
    let std_in = (dim as f32).powf(-0.5);
    let std_res = std_in / (2.0 * depth as f32).sqrt();
    let std_mlp = (mlp_dim as f32).powf(-0.5) / (2.0 * depth as f32).sqrt();
    BlockIdx {
        ln1_g: ps.add(format!("{prefix}.ln1_g"), Tensor::ones(&[dim])),
        ln1_b: ps.add(format!("{prefix}.ln1_b"), Tensor::zeros(&[dim])),
        qkv_w: ps.add(format!("{prefix}.qkv_w"), rng.normal_tensor(&[dim, 3 * dim], 0.0, std_in)),
        qkv_b: ps.add(format!("{prefix}.qkv_b"), Tensor::zeros(&[3 * dim])),
        out_w: ps.add(format!("{prefix}.out_w"), rng.normal_tensor(&[dim, dim], 0.0, std_res)),
        out_b: ps.add(format!("{prefix}.out_b"), Tensor::zeros(&[dim])),
        ln2_g: ps.add(format!("{prefix}.ln2_g"), Tensor::ones(&[dim])),
        ln2_b: ps.add(format!("{prefix}.ln2_b"), Tensor::zeros(&[dim])),
        fc1_w: ps.add(format!("{prefix}.fc1_w"), rng.normal_tensor(&[dim, mlp_dim], 0.0, std_in)),
        fc1_b: ps.add(format!("{prefix}.fc1_b"), Tensor::zeros(&[mlp_dim])),
        fc2_w: ps.add(format!("{prefix}.fc2_w"), rng.normal_tensor(&[mlp_dim, dim], 0.0, std_mlp)),
        fc2_b: ps.add(format!("{prefix}.fc2_b"), Tensor::zeros(&[dim])),
    }
}

/// `x W + b` for a row-major activation.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Runs the block over `segs.len()` independent sequences stacked row-wise
/// in `x` (lengths `segs`). Attention never crosses segment boundaries; the
/// dense projections run on the whole stack at once.
///
/// When `cls_attn` is given, it receives for each segment the head-averaged
/// attention row of the segment's first position (the CLS query).
pub fn block_forward(
    tape: &mut Tape,
    w: &Bound,
    b: &BlockIdx,
    x: Var,
    segs: &[usize],
    heads: usize,
    mut cls_attn: Option<&mut Vec<Vec<f32>>>,
) -> Var {
    let dim = tape.value(x).cols();
    let dh = dim / heads;
    let scale = (dh as f32).powf(-0.5);

    let h = tape.layer_norm(x, w[b.ln1_g], w[b.ln1_b], LN_EPS);
    let qkv = linear(tape, h, w[b.qkv_w], w[b.qkv_b]);

    let mut seg_outputs = Vec::with_capacity(segs.len());
    let mut offset = 0;
    for &n in segs {
        let qkv_s = if segs.len() == 1 {
            qkv
        } else {
            tape.slice_rows(qkv, offset, n)
        };
        let mut head_outs = Vec::with_capacity(heads);
        let mut avg_row = cls_attn.as_ref().map(|_| vec![0.0f32; n]);
        for hd in 0..heads {
            let q = tape.slice_cols(qkv_s, hd * dh, dh);
            let k = tape.slice_cols(qkv_s, dim + hd * dh, dh);
            let v = tape.slice_cols(qkv_s, 2 * dim + hd * dh, dh);
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            if let Some(row) = avg_row.as_mut() {
                for (acc, &p) in row.iter_mut().zip(tape.value(a).row(0)) {
                    *acc += p / heads as f32;
                }
            }
            head_outs.push(tape.matmul(a, v));
        }
        if let (Some(sink), Some(row)) = (cls_attn.as_deref_mut(), avg_row) {
            sink.push(row);
        }
        seg_outputs.push(if heads == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)
        });
        offset += n;
    }
    let attn = if seg_outputs.len() == 1 {
        seg_outputs[0]
    } else {
        tape.concat_rows(&seg_outputs)
    };
    let o = linear(tape, attn, w[b.out_w], w[b.out_b]);
    let x = tape.add(x, o);

    let h = tape.layer_norm(x, w[b.ln2_g], w[b.ln2_b], LN_EPS);
    let h = linear(tape, h, w[b.fc1_w], w[b.fc1_b]);
    let h = tape.gelu(h);
    let h = linear(tape, h, w[b.fc2_w], w[b.fc2_b]);
    tape.add(x, h)
}

/// Multiply-accumulates of one block over a single sequence of length `n`.
pub fn block_macs(n: u64, dim: u64, mlp_dim: u64) -> u64 {
    // qkv (3 n d^2) + output projection (n d^2)
    let proj = 4 * n * dim * dim;
    // scores q k^T and weighted sum a v, summed over heads
    let attn = 2 * n * n * dim;
    let mlp = 2 * n * dim * mlp_dim;
    proj + attn + mlp
}
