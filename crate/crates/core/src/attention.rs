//! Linear-complexity attention. Instead of forming token-by-token scores, the
//! query rows and key columns are normalized separately and combined through a
//! small feature-by-feature context matrix:
//!
//!   out = rho_q(Q) @ (rho_k(K)^T @ V)
//!
//! rho_q is a softmax across each token's features (rows sum to 1) and rho_k a
//! softmax across tokens (columns sum to 1). Cost is O(N * d^2); no N-by-N
//! buffer ever exists on this path. There is no 1/sqrt(d) score scaling here:
//! the two softmaxes already bound both factors.

use crate::error::{Error, Result};
use crate::numerics::{ops, Element, Tape, TapeId, Tensor};

fn check_qkv<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>) -> Result<()> {
    let (_, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if dq != dk || nk != nv {
        return Err(Error::shape(
            "efficient_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok(())
}

/// Forward-only evaluation on plain tensors.
pub fn efficient_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    check_qkv(q, k, v)?;
    let rq = ops::softmax(q, 1)?;
    let rk = ops::softmax(k, 0)?;
    let ctx = ops::matmul(&ops::transpose2(&rk)?, v)?;
    ops::matmul(&rq, &ctx)
}

/// Same normalization evaluated the quadratic way, materializing the full
/// token-by-token weight matrix rho_q(Q) @ rho_k(K)^T. Used as a numerical
/// cross-check and as the scaling baseline's twin; it must agree with
/// `efficient_attention` up to float reordering.
pub fn efficient_attention_quadratic<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    check_qkv(q, k, v)?;
    let rq = ops::softmax(q, 1)?;
    let rk = ops::softmax(k, 0)?;
    let w = ops::matmul(&rq, &ops::transpose2(&rk)?)?;
    ops::matmul(&w, v)
}

/// Classic dense softmax attention, softmax(Q K^T / sqrt(d)) V. This is the
/// quadratic baseline the runtime comparison times against.
pub fn dense_softmax_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    check_qkv(q, k, v)?;
    let (_, d) = q.dims2()?;
    let scores = ops::matmul(q, &ops::transpose2(k)?)?;
    let scale = E::from_f64(1.0 / (d as f64).sqrt());
    let scaled = Tensor::from_fn(scores.shape().to_vec(), |i| scores.data()[i] * scale);
    let probs = ops::softmax(&scaled, 1)?;
    ops::matmul(&probs, v)
}

/// Tape twin of `efficient_attention`.
pub fn efficient_attention_tape<E: Element>(
    tape: &mut Tape<E>,
    q: TapeId,
    k: TapeId,
    v: TapeId,
) -> Result<TapeId> {
    check_qkv(tape.value(q), tape.value(k), tape.value(v))?;
    let rq = tape.softmax(q, 1)?;
    let rk = tape.softmax(k, 0)?;
    let rkt = tape.transpose(rk)?;
    let ctx = tape.matmul(rkt, v)?;
    tape.matmul(rq, ctx)
}

/// Projection matrices for one multi-head layer. All four are C-by-C; the
/// channel extent is split evenly across heads.
#[derive(Clone, Debug)]
pub struct AttentionWeights<E: Element> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub wq: TapeId,
    pub wk: TapeId,
    pub wv: TapeId,
    pub wo: TapeId,
    pub heads: usize,
}

/// Multi-head layer on the tape: project, run each head's attention on its
/// column slice, concatenate, project out.
pub fn multi_head_tape<E: Element>(
    tape: &mut Tape<E>,
    x: TapeId,
    w: &AttentionIds,
) -> Result<TapeId> {
    let (_, c) = tape.value(x).dims2()?;
    if w.heads == 0 || c % w.heads != 0 {
        return Err(Error::shape(
            "multi_head",
            format!("{} heads do not divide {} channels", w.heads, c),
        ));
    }
    for (name, id) in [("wq", w.wq), ("wk", w.wk), ("wv", w.wv), ("wo", w.wo)] {
        if tape.shape(id) != [c, c] {
            return Err(Error::shape(
                "multi_head",
                format!("{name} has shape {:?}, expected [{c}, {c}]", tape.shape(id)),
            ));
        }
    }
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let d = c / w.heads;
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        outs.push(efficient_attention_tape(tape, qh, kh, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, w.wo)
}

/// Forward-only multi-head evaluation; runs a private tape and extracts the
/// value so there is exactly one implementation of the composition.
pub fn multi_head<E: Element>(x: &Tensor<E>, w: &AttentionWeights<E>) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let ids = AttentionIds {
        wq: tape.leaf(w.wq.clone(), false),
        wk: tape.leaf(w.wk.clone(), false),
        wv: tape.leaf(w.wv.clone(), false),
        wo: tape.leaf(w.wo.clone(), false),
        heads: w.heads,
    };
    let out = multi_head_tape(&mut tape, xi, &ids)?;
    Ok(tape.value(out).clone())
}

/// One pre-norm transformer block's parameters on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln1_g: TapeId,
    pub ln1_b: TapeId,
    pub attn: AttentionIds,
    pub ln2_g: TapeId,
    pub ln2_b: TapeId,
    pub mlp_w1: TapeId,
    pub mlp_b1: TapeId,
    pub mlp_w2: TapeId,
    pub mlp_b2: TapeId,
}

/// Pre-norm block: X + MHA(LN(X)), then + MLP(LN(.)). Returns the block output
/// and the attention branch output A (after the output projection, before the
/// residual add); A is what the cross-stage fusion consumes.
pub fn transformer_block_tape<E: Element>(
    tape: &mut Tape<E>,
    x: TapeId,
    p: &BlockIds,
    eps: f64,
) -> Result<(TapeId, TapeId)> {
    let n1 = tape.layer_norm(x, p.ln1_g, p.ln1_b, eps)?;
    let a = multi_head_tape(tape, n1, &p.attn)?;
    let x1 = tape.add(x, a)?;
    let n2 = tape.layer_norm(x1, p.ln2_g, p.ln2_b, eps)?;
    let h = tape.affine(n2, p.mlp_w1, p.mlp_b1)?;
    let h = tape.gelu(h);
    let m = tape.affine(h, p.mlp_w2, p.mlp_b2)?;
    let y = tape.add(x1, m)?;
    Ok((y, a))
}

#[derive(Clone, Debug)]
pub struct BlockWeights<E: Element> {
    pub ln1_g: Tensor<E>,
    pub ln1_b: Tensor<E>,
    pub attn: AttentionWeights<E>,
    pub ln2_g: Tensor<E>,
    pub ln2_b: Tensor<E>,
    pub mlp_w1: Tensor<E>,
    pub mlp_b1: Tensor<E>,
    pub mlp_w2: Tensor<E>,
    pub mlp_b2: Tensor<E>,
}

pub fn transformer_block<E: Element>(
    x: &Tensor<E>,
    w: &BlockWeights<E>,
    eps: f64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let ids = BlockIds {
        ln1_g: tape.leaf(w.ln1_g.clone(), false),
        ln1_b: tape.leaf(w.ln1_b.clone(), false),
        attn: AttentionIds {
            wq: tape.leaf(w.attn.wq.clone(), false),
            wk: tape.leaf(w.attn.wk.clone(), false),
            wv: tape.leaf(w.attn.wv.clone(), false),
            wo: tape.leaf(w.attn.wo.clone(), false),
            heads: w.attn.heads,
        },
        ln2_g: tape.leaf(w.ln2_g.clone(), false),
        ln2_b: tape.leaf(w.ln2_b.clone(), false),
        mlp_w1: tape.leaf(w.mlp_w1.clone(), false),
        mlp_b1: tape.leaf(w.mlp_b1.clone(), false),
        mlp_w2: tape.leaf(w.mlp_w2.clone(), false),
        mlp_b2: tape.leaf(w.mlp_b2.clone(), false),
    };
    let (y, a) = transformer_block_tape(&mut tape, xi, &ids, eps)?;
    Ok((tape.value(y).clone(), tape.value(a).clone()))
}
