//! Pre-norm transformer block shared by the text decoder and the image
//! encoder: x + MSA(LN(x)), then + MLP(LN(.)) with a 4x hidden GELU MLP.

use rand_chacha::ChaCha8Rng;

use crate::params::{Bound, ParamSet};
use crate::rng::normal_tensor;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorResult};

pub const LN_EPS: f64 = 1e-5;

/// Register one block's parameters under `prefix`.
pub fn init_block(
    params: &mut ParamSet,
    prefix: &str,
    width: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> TensorResult<()> {
    let hidden = 4 * width;
    let ones = Tensor::new(vec![width], vec![1.0; width])?;
    let zeros_w = Tensor::zeros(vec![width]);
    params.insert(&format!("{prefix}.ln1.g"), ones.clone())?;
    params.insert(&format!("{prefix}.ln1.b"), zeros_w.clone())?;
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(
            &format!("{prefix}.attn.{name}"),
            normal_tensor(rng, vec![width, width], std),
        )?;
        params.insert(
            &format!("{prefix}.attn.b{}", &name[1..]),
            Tensor::zeros(vec![width]),
        )?;
    }
    params.insert(&format!("{prefix}.ln2.g"), ones)?;
    params.insert(&format!("{prefix}.ln2.b"), zeros_w)?;
    params.insert(
        &format!("{prefix}.mlp.w1"),
        normal_tensor(rng, vec![width, hidden], std),
    )?;
    params.insert(&format!("{prefix}.mlp.b1"), Tensor::zeros(vec![hidden]))?;
    params.insert(
        &format!("{prefix}.mlp.w2"),
        normal_tensor(rng, vec![hidden, width], std),
    )?;
    params.insert(&format!("{prefix}.mlp.b2"), Tensor::zeros(vec![width]))?;
    Ok(())
}

fn affine(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> TensorResult<TensorId> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_broadcast(xw, b)
}

/// Multi-head self-attention over `x` [t x width].
///
/// `mask` is an additive [t x t] bias (0 / large-negative) applied to the
/// pre-softmax scores of every head. Per-head attention probability nodes
/// are appended to `attn_out` when provided.
pub fn self_attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    heads: usize,
    x: TensorId,
    mask: Option<TensorId>,
    attn_out: Option<&mut Vec<TensorId>>,
) -> TensorResult<TensorId> {
    let width = tape.shape(x)[1];
    let dh = width / heads;
    let q = affine(tape, x, bound.id(&format!("{prefix}.attn.wq")), bound.id(&format!("{prefix}.attn.bq")))?;
    let k = affine(tape, x, bound.id(&format!("{prefix}.attn.wk")), bound.id(&format!("{prefix}.attn.bk")))?;
    let v = affine(tape, x, bound.id(&format!("{prefix}.attn.wv")), bound.id(&format!("{prefix}.attn.bv")))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx_heads = Vec::with_capacity(heads);
    let mut captured = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let biased = match mask {
            Some(m) => tape.add(scaled, m)?,
            None => scaled,
        };
        let probs = tape.softmax_rows(biased)?;
        captured.push(probs);
        ctx_heads.push(tape.matmul(probs, vh)?);
    }
    if let Some(out) = attn_out {
        out.extend(captured);
    }
    let ctx = tape.concat_cols(&ctx_heads)?;
    affine(tape, ctx, bound.id(&format!("{prefix}.attn.wo")), bound.id(&format!("{prefix}.attn.bo")))
}

/// One pre-norm block. Returns the output and optionally captures the
/// per-head attention probabilities.
pub fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    heads: usize,
    x: TensorId,
    mask: Option<TensorId>,
    attn_out: Option<&mut Vec<TensorId>>,
) -> TensorResult<TensorId> {
    let n1 = tape.layer_norm(
        x,
        bound.id(&format!("{prefix}.ln1.g")),
        bound.id(&format!("{prefix}.ln1.b")),
        LN_EPS,
    )?;
    let attn = self_attention(tape, bound, prefix, heads, n1, mask, attn_out)?;
    let x1 = tape.add(x, attn)?;
    let n2 = tape.layer_norm(
        x1,
        bound.id(&format!("{prefix}.ln2.g")),
        bound.id(&format!("{prefix}.ln2.b")),
        LN_EPS,
    )?;
    let h = affine(tape, n2, bound.id(&format!("{prefix}.mlp.w1")), bound.id(&format!("{prefix}.mlp.b1")))?;
    let g = tape.gelu(h);
    let m = affine(tape, g, bound.id(&format!("{prefix}.mlp.w2")), bound.id(&format!("{prefix}.mlp.b2")))?;
    tape.add(x1, m)
}

/// Additive causal mask for a length-`t` sequence: 0 on and below the
/// diagonal, a large negative bias above it.
pub fn causal_mask(tape: &mut Tape, t: usize) -> TensorResult<TensorId> {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = -1e30;
        }
    }
    tape.constant(vec![t, t], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(width: usize, seed: u64) -> (ParamSet, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_block(&mut params, "blk.0", width, 0.2, &mut rng).unwrap();
        (params, rng)
    }

    #[test]
    fn zero_weights_block_is_identity() {
        let (mut params, _) = setup(8, 1);
        for (_, t) in params.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0); // incl. LN gammas
        }
        let mut tape = Tape::new();
        let bound = Bound::bind_all(&mut tape, &params);
        let x = tape
            .constant(vec![3, 8], (0..24).map(|i| i as f64 * 0.1).collect())
            .unwrap();
        let y = block_forward(&mut tape, &bound, "blk.0", 2, x, None, None).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let (params, _) = setup(8, 2);
        let run = |last: f64| {
            let mut tape = Tape::new();
            let bound = Bound::bind_all(&mut tape, &params);
            let mut data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
            data[31] = last;
            let x = tape.constant(vec![4, 8], data).unwrap();
            let mask = causal_mask(&mut tape, 4).unwrap();
            let y = block_forward(&mut tape, &bound, "blk.0", 2, x, Some(mask), None).unwrap();
            tape.value(y).to_vec()
        };
        let a = run(0.5);
        let b = run(-2.0);
        assert_eq!(&a[0..24], &b[0..24]); // rows before the change: bit-identical
        assert_ne!(&a[24..], &b[24..]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (params, _) = setup(8, 3);
        let mut tape = Tape::new();
        let bound = Bound::bind_all(&mut tape, &params);
        let x = tape
            .constant(vec![5, 8], (0..40).map(|i| (i as f64 * 0.13).cos()).collect())
            .unwrap();
        let mut attn = Vec::new();
        block_forward(&mut tape, &bound, "blk.0", 2, x, None, Some(&mut attn)).unwrap();
        assert_eq!(attn.len(), 2);
        for probs in attn {
            for row in tape.value(probs).chunks(5) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
