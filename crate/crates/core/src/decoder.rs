//! Expanding path and full-network forward. Token grids are upsampled by an
//! affine channel doubling followed by a pixel-shuffle rearrangement, skip
//! features are folded back in by concatenation plus projection, and a final
//! two-step expansion restores pixel resolution for the one-logit head.

use crate::config::ModelConfig;
use crate::encoder::{bound_block, encode_tape, expand_indices};
use crate::error::{Error, Result};
use crate::iscf::iscf_tape;
use crate::numerics::{Element, Tape, TapeId, Tensor, LAYER_NORM_EPS};
use crate::params::{BoundParams, ParamSet};

/// Doubles the grid side: affine C to 2C, then the channel quadruple of each
/// token becomes a 2x2 spatial block, so tokens quadruple and channels halve.
pub fn patch_expand_tape<E: Element>(
    tape: &mut Tape<E>,
    x: TapeId,
    grid: usize,
    w: TapeId,
    b: TapeId,
) -> Result<TapeId> {
    let (n, c) = tape.value(x).dims2()?;
    if n != grid * grid {
        return Err(Error::shape(
            "patch_expand",
            format!("{n} tokens cannot form a {grid}x{grid} grid"),
        ));
    }
    if c % 2 != 0 {
        return Err(Error::Argument(format!(
            "patch_expand needs an even channel count, got {c}"
        )));
    }
    let widened = tape.affine(x, w, b)?;
    tape.gather(widened, expand_indices(grid, 2 * c), vec![4 * n, c / 2])
}

/// Concatenates decoder and skip channels, decoder half first, and projects
/// back down to the common width.
pub fn skip_fuse_tape<E: Element>(
    tape: &mut Tape<E>,
    dec: TapeId,
    skip: TapeId,
    w: TapeId,
    b: TapeId,
) -> Result<TapeId> {
    if tape.shape(dec) != tape.shape(skip) {
        return Err(Error::Argument(format!(
            "skip_fuse halves disagree: {:?} vs {:?}",
            tape.shape(dec),
            tape.shape(skip)
        )));
    }
    let cat = tape.concat_cols(&[dec, skip])?;
    tape.affine(cat, w, b)
}

/// Tape handles for everything the training loop and diagnostics need.
pub struct ForwardIds {
    pub logits: TapeId,
    pub probs: TapeId,
    pub gates: Option<TapeId>,
}

pub fn forward_tape<E: Element>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    p: &BoundParams,
    image: TapeId,
) -> Result<ForwardIds> {
    let enc = encode_tape(tape, cfg, p, image)?;
    let (residuals, gates) = if cfg.iscf_enabled {
        let out = iscf_tape(tape, cfg, p, &enc.attn)?;
        (Some(out.residuals), Some(out.gates))
    } else {
        (None, None)
    };

    let skip_at = |tape: &mut Tape<E>, s: usize| -> Result<TapeId> {
        match &residuals {
            Some(r) => tape.add(enc.features[s], r[s]),
            None => Ok(enc.features[s]),
        }
    };

    let mut x = skip_at(tape, 2)?;
    for (lvl, stage) in [(2usize, 1usize), (1, 0)] {
        let pre = format!("dec.lvl{lvl}");
        x = patch_expand_tape(
            tape,
            x,
            cfg.grid_side(stage + 1),
            p.id(&format!("{pre}.expand.w")),
            p.id(&format!("{pre}.expand.b")),
        )?;
        let skip = skip_at(tape, stage)?;
        x = skip_fuse_tape(
            tape,
            x,
            skip,
            p.id(&format!("{pre}.fuse.w")),
            p.id(&format!("{pre}.fuse.b")),
        )?;
        let ids = bound_block(p, &format!("{pre}.blk0"), cfg.heads[stage]);
        let (y, _) = crate::attention::transformer_block_tape(tape, x, &ids, LAYER_NORM_EPS)?;
        x = y;
    }

    let grid = cfg.grid_side(0);
    x = patch_expand_tape(tape, x, grid, p.id("head.up1.w"), p.id("head.up1.b"))?;
    x = patch_expand_tape(tape, x, 2 * grid, p.id("head.up2.w"), p.id("head.up2.b"))?;
    let flat = tape.affine(x, p.id("head.out.w"), p.id("head.out.b"))?;
    let logits = tape.reshape(flat, vec![1, cfg.image_size, cfg.image_size])?;
    let probs = tape.sigmoid(logits);
    Ok(ForwardIds { logits, probs, gates })
}

/// Forward outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct Forward<E: Element> {
    pub probs: Tensor<E>,
    pub logits: Tensor<E>,
    pub gates: Option<Tensor<E>>,
}

pub fn forward<E: Element>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    image: &Tensor<E>,
) -> Result<Forward<E>> {
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone(), false);
    let bound = params.bind(&mut tape, false);
    let out = forward_tape(&mut tape, cfg, &bound, img)?;
    Ok(Forward {
        probs: tape.value(out.probs).clone(),
        logits: tape.value(out.logits).clone(),
        gates: out.gates.map(|g| tape.value(g).clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ops, FD_STEP, GRAD_TOL};
    use crate::rng::SplitMix64;

    fn rand_t(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal() * 0.5)
    }

    fn desk_grad_config() -> ModelConfig {
        let cfg = ModelConfig {
            image_size: 32,
            patch_size: 4,
            stage_channels: [8, 16, 32],
            depths: [1, 1, 1],
            heads: [2, 4, 8],
            mlp_ratio: 4,
            iscf_enabled: true,
            iscf_hidden: 4,
            seed: 0,
            lr: 1e-3,
            batch_size: 1,
            epochs: 1,
        };
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn expand_doubles_the_grid_and_halves_channels() {
        let mut rng = SplitMix64::new(1);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_t(vec![196, 256], &mut rng), false);
        let w = tape.leaf(rand_t(vec![256, 512], &mut rng), false);
        let b = tape.leaf(Tensor::zeros(vec![512]), false);
        let up = patch_expand_tape(&mut tape, x, 14, w, b).unwrap();
        assert_eq!(tape.shape(up), &[784, 128]);

        let w2 = tape.leaf(rand_t(vec![128, 256], &mut rng), false);
        let b2 = tape.leaf(Tensor::zeros(vec![256]), false);
        let up2 = patch_expand_tape(&mut tape, up, 28, w2, b2).unwrap();
        assert_eq!(tape.shape(up2), &[3136, 64]);
    }

    #[test]
    fn expand_rejects_odd_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![4, 3]), false);
        let w = tape.leaf(Tensor::zeros(vec![3, 6]), false);
        let b = tape.leaf(Tensor::zeros(vec![6]), false);
        assert!(matches!(
            patch_expand_tape(&mut tape, x, 2, w, b),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn skip_fuse_identity_on_the_decoder_half() {
        let c = 6;
        let mut rng = SplitMix64::new(2);
        let mut tape = Tape::new();
        let dec = tape.leaf(rand_t(vec![9, c], &mut rng), false);
        let skip = tape.leaf(Tensor::zeros(vec![9, c]), false);
        let w = tape.leaf(
            Tensor::from_fn(vec![2 * c, c], |i| {
                let (row, col) = (i / c, i % c);
                if row == col {
                    1.0
                } else {
                    0.0
                }
            }),
            false,
        );
        let b = tape.leaf(Tensor::zeros(vec![c]), false);
        let out = skip_fuse_tape(&mut tape, dec, skip, w, b).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(dec).data());
    }

    #[test]
    fn skip_fuse_matches_the_concat_affine_oracle() {
        let mut rng = SplitMix64::new(3);
        let dec_t = rand_t(vec![5, 4], &mut rng);
        let skip_t = rand_t(vec![5, 4], &mut rng);
        let w_t = rand_t(vec![8, 4], &mut rng);
        let b_t = rand_t(vec![4], &mut rng);
        let mut tape = Tape::new();
        let dec = tape.leaf(dec_t.clone(), false);
        let skip = tape.leaf(skip_t.clone(), false);
        let w = tape.leaf(w_t.clone(), false);
        let b = tape.leaf(b_t.clone(), false);
        let out = skip_fuse_tape(&mut tape, dec, skip, w, b).unwrap();

        let cat = Tensor::from_fn(vec![5, 8], |i| {
            let (row, col) = (i / 8, i % 8);
            if col < 4 {
                dec_t.data()[row * 4 + col]
            } else {
                skip_t.data()[row * 4 + col - 4]
            }
        });
        let mm = ops::matmul(&cat, &w_t).unwrap();
        let oracle = Tensor::from_fn(vec![5, 4], |i| mm.data()[i] + b_t.data()[i % 4]);
        assert!(tape.value(out).max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn desk_forward_emits_a_full_probability_map() {
        let cfg = ModelConfig::desk();
        let params: ParamSet<f32> = ParamSet::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(4);
        let img = Tensor::<f32>::from_fn(vec![3, 64, 64], |_| rng.next_f64() as f32);
        let out = forward(&cfg, &params, &img).unwrap();
        assert_eq!(out.probs.shape(), &[1, 64, 64]);
        assert_eq!(out.logits.shape(), &[1, 64, 64]);
        assert!(out.logits.all_finite());
        assert!(out.probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let g = out.gates.expect("fusion enabled");
        assert_eq!(g.shape(), &[1, 3]);
    }

    #[test]
    fn full_scale_forward_reaches_full_resolution() {
        let cfg = ModelConfig::default();
        let params: ParamSet<f32> = ParamSet::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(5);
        let img = Tensor::<f32>::from_fn(vec![3, 224, 224], |_| rng.next_f64() as f32);
        let out = forward(&cfg, &params, &img).unwrap();
        assert_eq!(out.probs.shape(), &[1, 224, 224]);
        assert!(out.probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::desk();
        let params: ParamSet<f32> = ParamSet::init(&cfg).unwrap();
        let img = Tensor::<f32>::from_fn(vec![3, 64, 64], |i| ((i * 7 % 11) as f32) / 11.0);
        let a = forward(&cfg, &params, &img).unwrap();
        let b = forward(&cfg, &params, &img).unwrap();
        assert_eq!(a.probs.data(), b.probs.data());
    }

    // The fusion branch's last projections start at zero, so turning the
    // module off must not change a fresh network's output in any bit.
    #[test]
    fn fresh_fusion_matches_the_plain_network_bitwise() {
        let mut with = ModelConfig::desk();
        with.iscf_enabled = true;
        let mut without = ModelConfig::desk();
        without.iscf_enabled = false;
        let pw: ParamSet<f32> = ParamSet::init(&with).unwrap();
        let po: ParamSet<f32> = ParamSet::init(&without).unwrap();
        let mut rng = SplitMix64::new(6);
        let img = Tensor::<f32>::from_fn(vec![3, 64, 64], |_| rng.next_f64() as f32);
        let a = forward(&with, &pw, &img).unwrap();
        let b = forward(&without, &po, &img).unwrap();
        let bits_a: Vec<u32> = a.probs.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.probs.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = desk_grad_config();
        let mut params: ParamSet<f64> = ParamSet::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(7);
        for s in 1..=3 {
            let cs = cfg.stage_channels[s - 1];
            params
                .set(
                    &format!("iscf.chan_remap{s}.w"),
                    Tensor::from_fn(vec![32, cs], |_| rng.normal() * 0.1),
                )
                .unwrap();
        }
        let mask = Tensor::from_fn(vec![1, 32, 32], |i| if (i * 13) % 5 < 2 { 1.0 } else { 0.0 });
        let img = rand_t(vec![3, 32, 32], &mut rng);
        let report = grad_check(
            |tape, inputs| {
                let bound = params.bind(tape, false);
                let out = forward_tape(tape, &cfg, &bound, inputs[0])?;
                tape.bce_with_logits(out.logits, &mask)
            },
            &[img],
            FD_STEP,
        )
        .unwrap();
        assert!(report.passes(GRAD_TOL), "max rel err {}", report.max_rel_err);
    }
}
