//! Cross-stage context fusion. The three per-stage attention maps are brought
//! onto the coarsest stage's token grid and channel width, blended under
//! learned scalar gates, and projected back to each stage's native shape so
//! the result can ride the skip connections as a residual.
//!
//! The final per-stage projection starts at zero, so a freshly initialized
//! network computes exactly the same function as one built without this
//! module.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, TapeId, Tensor};
use crate::params::{BoundParams, ParamSet};

fn expect_shape<E: Element>(tape: &Tape<E>, id: TapeId, want: [usize; 2], what: &str) -> Result<()> {
    if tape.shape(id) != want {
        return Err(Error::shape(
            "iscf",
            format!("{what} has shape {:?}, config wants {:?}", tape.shape(id), want),
        ));
    }
    Ok(())
}

/// Brings stage `s` (1-based) attention output onto the coarse grid: a
/// channel-axis affine map, then a token-axis affine map applied through a
/// transpose. Stage 3 is already coarse and passes through untouched.
pub fn equalize_tape<E: Element>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    p: &BoundParams,
    s: usize,
    a: TapeId,
) -> Result<TapeId> {
    if !(1..=3).contains(&s) {
        return Err(Error::Argument(format!("stage index {s} out of range 1..=3")));
    }
    expect_shape(tape, a, [cfg.tokens(s - 1), cfg.stage_channels[s - 1]], "attention map")?;
    if s == 3 {
        return Ok(a);
    }
    let x = tape.affine(
        a,
        p.id(&format!("iscf.chan_eq{s}.w")),
        p.id(&format!("iscf.chan_eq{s}.b")),
    )?;
    let xt = tape.transpose(x)?;
    let yt = tape.affine(
        xt,
        p.id(&format!("iscf.token_eq{s}.w")),
        p.id(&format!("iscf.token_eq{s}.b")),
    )?;
    tape.transpose(yt)
}

/// Pools each equalized map to one scalar, then maps the three pooled values
/// through a small hidden layer to three sigmoid gates in (0, 1).
pub fn gates_tape<E: Element>(
    tape: &mut Tape<E>,
    p: &BoundParams,
    eq: &[TapeId; 3],
) -> Result<TapeId> {
    let shape0 = tape.shape(eq[0]).to_vec();
    for &id in &eq[1..] {
        if tape.shape(id) != shape0.as_slice() {
            return Err(Error::Argument(format!(
                "equalized maps disagree: {:?} vs {:?}",
                shape0,
                tape.shape(id)
            )));
        }
    }
    let pooled = [
        tape.mean_all(eq[0])?,
        tape.mean_all(eq[1])?,
        tape.mean_all(eq[2])?,
    ];
    let g = tape.concat_cols(&pooled)?;
    let h = tape.affine(g, p.id("iscf.gate.w1"), p.id("iscf.gate.b1"))?;
    let h = tape.gelu(h);
    let logits = tape.affine(h, p.id("iscf.gate.w2"), p.id("iscf.gate.b2"))?;
    Ok(tape.sigmoid(logits))
}

/// Scales each equalized map by its gate, then mixes the three with one
/// learned scalar weight apiece plus a shared scalar bias. Because the mixing
/// weights are channel-shared, operating on token matrices here equals
/// stacking the maps as images and convolving with a 3x1x1 kernel.
pub fn fuse_tape<E: Element>(
    tape: &mut Tape<E>,
    p: &BoundParams,
    eq: &[TapeId; 3],
    gates: TapeId,
) -> Result<TapeId> {
    if tape.value(gates).numel() != 3 {
        return Err(Error::shape("fuse", format!("gates have shape {:?}", tape.shape(gates))));
    }
    let shape0 = tape.shape(eq[0]).to_vec();
    for &id in &eq[1..] {
        if tape.shape(id) != shape0.as_slice() {
            return Err(Error::shape("fuse", "equalized maps disagree in shape"));
        }
    }
    let mix_w = p.id("iscf.fuse.w");
    let mut acc: Option<TapeId> = None;
    for s in 0..3 {
        let gate = tape.gather(gates, vec![s], vec![1, 1])?;
        let gated = tape.mul_scalar(eq[s], gate)?;
        let w = tape.gather(mix_w, vec![s], vec![1, 1])?;
        let term = tape.mul_scalar(gated, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.add_scalar(acc.expect("three terms"), p.id("iscf.fuse.b"))
}

/// Projects the fused coarse map back to every stage's native token count and
/// channel width, token axis first, channel axis second.
pub fn remap_tape<E: Element>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    p: &BoundParams,
    fused: TapeId,
) -> Result<[TapeId; 3]> {
    expect_shape(tape, fused, [cfg.tokens(2), cfg.stage_channels[2]], "fused map")?;
    let mut out = [fused; 3];
    for s in 1..=3 {
        let ft = tape.transpose(fused)?;
        let tt = tape.affine(
            ft,
            p.id(&format!("iscf.token_remap{s}.w")),
            p.id(&format!("iscf.token_remap{s}.b")),
        )?;
        let t = tape.transpose(tt)?;
        out[s - 1] = tape.affine(
            t,
            p.id(&format!("iscf.chan_remap{s}.w")),
            p.id(&format!("iscf.chan_remap{s}.b")),
        )?;
    }
    Ok(out)
}

/// Tape ids of the per-stage residuals plus the gate vector for inspection.
pub struct IscfIds {
    pub residuals: [TapeId; 3],
    pub gates: TapeId,
}

pub fn iscf_tape<E: Element>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    p: &BoundParams,
    attn: &[TapeId; 3],
) -> Result<IscfIds> {
    let eq = [
        equalize_tape(tape, cfg, p, 1, attn[0])?,
        equalize_tape(tape, cfg, p, 2, attn[1])?,
        equalize_tape(tape, cfg, p, 3, attn[2])?,
    ];
    let gates = gates_tape(tape, p, &eq)?;
    let fused = fuse_tape(tape, p, &eq, gates)?;
    let residuals = remap_tape(tape, cfg, p, fused)?;
    Ok(IscfIds { residuals, gates })
}

/// Runs the module outside any training graph and returns the three residuals.
pub fn iscf_forward<E: Element>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    attn: &[Tensor<E>; 3],
) -> Result<[Tensor<E>; 3]> {
    let mut tape = Tape::new();
    let ids = [
        tape.leaf(attn[0].clone(), false),
        tape.leaf(attn[1].clone(), false),
        tape.leaf(attn[2].clone(), false),
    ];
    let bound = params.bind(&mut tape, false);
    let out = iscf_tape(&mut tape, cfg, &bound, &ids)?;
    Ok([
        tape.value(out.residuals[0]).clone(),
        tape.value(out.residuals[1]).clone(),
        tape.value(out.residuals[2]).clone(),
    ])
}
