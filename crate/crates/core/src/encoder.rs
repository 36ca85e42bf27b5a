//! Three-stage encoder. Images become patch tokens, each stage runs its
//! transformer blocks, and a 2x2 token merge halves the grid between stages
//! while doubling channels. Every data movement is a precomputed gather map,
//! so the reverse pass needs no special cases.

use crate::attention::{transformer_block_tape, AttentionIds, BlockIds};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, TapeId, Tensor, LAYER_NORM_EPS};
use crate::params::{BoundParams, ParamSet};

/// Flat source indices turning a (3, H, W) image into (N, 3*p*p) patch rows.
/// Within a row the layout is channel-major, then y, then x.
pub fn patch_indices(image_size: usize, patch: usize) -> Vec<usize> {
    let grid = image_size / patch;
    let mut src = Vec::with_capacity(grid * grid * 3 * patch * patch);
    for pr in 0..grid {
        for pc in 0..grid {
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        src.push(c * image_size * image_size + (pr * patch + dy) * image_size + pc * patch + dx);
                    }
                }
            }
        }
    }
    src
}

/// Indices regrouping an (N, C) token grid of side `grid` into (N/4, 4C):
/// each output row concatenates the 2x2 neighborhood in (dy, dx) order.
pub fn merge_indices(grid: usize, channels: usize) -> Vec<usize> {
    debug_assert!(grid % 2 == 0);
    let half = grid / 2;
    let mut src = Vec::with_capacity(half * half * 4 * channels);
    for mr in 0..half {
        for mc in 0..half {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let row = (2 * mr + dy) * grid + 2 * mc + dx;
                for ch in 0..channels {
                    src.push(row * channels + ch);
                }
            }
        }
    }
    src
}

/// Inverse regrouping used by the decoder: an (N, W) grid of side `grid`
/// becomes (4N, W/4) on side 2*grid, quadrant q of each row landing at spatial
/// offset (q / 2, q % 2). Composing with `merge_indices(2*grid, W/4)` is the
/// identity.
pub fn expand_indices(grid: usize, width: usize) -> Vec<usize> {
    debug_assert!(width % 4 == 0);
    let w_out = width / 4;
    let side = 2 * grid;
    let mut src = Vec::with_capacity(grid * grid * width);
    for or in 0..side {
        for oc in 0..side {
            let (r, dy) = (or / 2, or % 2);
            let (c, dx) = (oc / 2, oc % 2);
            let q = dy * 2 + dx;
            let row = r * grid + c;
            for ch in 0..w_out {
                src.push(row * width + q * w_out + ch);
            }
        }
    }
    src
}

pub(crate) fn bound_block(p: &BoundParams, prefix: &str, heads: usize) -> BlockIds {
    BlockIds {
        ln1_g: p.id(&format!("{prefix}.ln1.g")),
        ln1_b: p.id(&format!("{prefix}.ln1.b")),
        attn: AttentionIds {
            wq: p.id(&format!("{prefix}.attn.wq")),
            wk: p.id(&format!("{prefix}.attn.wk")),
            wv: p.id(&format!("{prefix}.attn.wv")),
            wo: p.id(&format!("{prefix}.attn.wo")),
            heads,
        },
        ln2_g: p.id(&format!("{prefix}.ln2.g")),
        ln2_b: p.id(&format!("{prefix}.ln2.b")),
        mlp_w1: p.id(&format!("{prefix}.mlp.w1")),
        mlp_b1: p.id(&format!("{prefix}.mlp.b1")),
        mlp_w2: p.id(&format!("{prefix}.mlp.w2")),
        mlp_b2: p.id(&format!("{prefix}.mlp.b2")),
    }
}

/// Per-stage encoder outputs on the tape: the block-stack features F_s and the
/// last block's attention branch A_s.
pub struct EncodedIds {
    pub features: [TapeId; 3],
    pub attn: [TapeId; 3],
}

pub fn encode_tape<E: Element>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    p: &BoundParams,
    image: TapeId,
) -> Result<EncodedIds> {
    let expect = [3, cfg.image_size, cfg.image_size];
    if tape.shape(image) != expect {
        return Err(Error::shape(
            "encode",
            format!("image {:?}, config wants {:?}", tape.shape(image), expect),
        ));
    }

    let grid0 = cfg.grid_side(0);
    let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    let rows = tape.gather(image, patch_indices(cfg.image_size, cfg.patch_size), vec![grid0 * grid0, patch_dim])?;
    let proj = tape.affine(rows, p.id("embed.proj.w"), p.id("embed.proj.b"))?;
    let mut x = tape.layer_norm(proj, p.id("embed.norm.g"), p.id("embed.norm.b"), LAYER_NORM_EPS)?;

    let mut features = [x; 3];
    let mut attn = [x; 3];
    for s in 0..3 {
        if s > 0 {
            let grid = cfg.grid_side(s - 1);
            let c = cfg.stage_channels[s - 1];
            let merged = tape.gather(x, merge_indices(grid, c), vec![grid * grid / 4, 4 * c])?;
            x = tape.affine(
                merged,
                p.id(&format!("merge{s}.w")),
                p.id(&format!("merge{s}.b")),
            )?;
        }
        let mut last_attn = None;
        for b in 0..cfg.depths[s] {
            let ids = bound_block(p, &format!("enc.s{}.blk{b}", s + 1), cfg.heads[s]);
            let (y, a) = transformer_block_tape(tape, x, &ids, LAYER_NORM_EPS)?;
            x = y;
            last_attn = Some(a);
        }
        features[s] = x;
        attn[s] = last_attn.expect("depths are validated nonzero");
    }
    Ok(EncodedIds { features, attn })
}

/// Stage outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct StageBundle<E: Element> {
    pub features: [Tensor<E>; 3],
    pub attn: [Tensor<E>; 3],
}

pub fn encode<E: Element>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    image: &Tensor<E>,
) -> Result<StageBundle<E>> {
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone(), false);
    let bound = params.bind(&mut tape, false);
    let out = encode_tape(&mut tape, cfg, &bound, img)?;
    Ok(StageBundle {
        features: [
            tape.value(out.features[0]).clone(),
            tape.value(out.features[1]).clone(),
            tape.value(out.features[2]).clone(),
        ],
        attn: [
            tape.value(out.attn[0]).clone(),
            tape.value(out.attn[1]).clone(),
            tape.value(out.attn[2]).clone(),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use crate::rng::SplitMix64;

    // Filling the image with its own flat indices makes the gathered rows
    // literally spell out the index map.
    #[test]
    fn patch_rows_pick_the_right_pixels() {
        let size = 4;
        let img = Tensor::<f64>::from_fn(vec![3, size, size], |i| i as f64);
        let src = patch_indices(size, 2);
        let mut tape = Tape::new();
        let id = tape.leaf(img, false);
        let rows = tape.gather(id, src, vec![4, 12]).unwrap();
        let first: Vec<f64> = tape.value(rows).data()[..12].to_vec();
        // Token 0 = patch at (0..2, 0..2): per channel the pixels 0, 1, 4, 5.
        let expect = [0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0, 32.0, 33.0, 36.0, 37.0];
        assert_eq!(first, expect);
        // Token 1 starts at pixel column 2 of channel 0.
        assert_eq!(tape.value(rows).data()[12], 2.0);
    }

    #[test]
    fn merge_rows_concat_the_2x2_neighborhood() {
        let grid = 4;
        let x = Tensor::<f64>::from_fn(vec![grid * grid, 1], |i| i as f64);
        let mut tape = Tape::new();
        let id = tape.leaf(x, false);
        let m = tape.gather(id, merge_indices(grid, 1), vec![4, 4]).unwrap();
        assert_eq!(tape.value(m).data()[..4], [0.0, 1.0, 4.0, 5.0]);
        assert_eq!(tape.value(m).data()[4..8], [2.0, 3.0, 6.0, 7.0]);
        assert_eq!(tape.value(m).data()[12..16], [10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn expand_then_merge_is_identity() {
        let grid = 3;
        let width = 8;
        let mut rng = SplitMix64::new(2);
        let x = Tensor::<f64>::from_fn(vec![grid * grid, width], |_| rng.normal());
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone(), false);
        let up = tape
            .gather(id, expand_indices(grid, width), vec![4 * grid * grid, width / 4])
            .unwrap();
        let back = tape
            .gather(up, merge_indices(2 * grid, width / 4), vec![grid * grid, width])
            .unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }

    #[test]
    fn stage_shapes_follow_the_config() {
        let cfg = ModelConfig::desk();
        let params: ParamSet<f32> = ParamSet::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(1);
        let img = Tensor::<f32>::from_fn(vec![3, 64, 64], |_| rng.next_f64() as f32);
        let out = encode(&cfg, &params, &img).unwrap();
        assert_eq!(out.features[0].shape(), &[256, 16]);
        assert_eq!(out.features[1].shape(), &[64, 32]);
        assert_eq!(out.features[2].shape(), &[16, 64]);
        for s in 0..3 {
            assert_eq!(out.attn[s].shape(), out.features[s].shape());
            assert!(out.features[s].all_finite());
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = ModelConfig::desk();
        let params: ParamSet<f32> = ParamSet::init(&cfg).unwrap();
        let img = Tensor::<f32>::from_fn(vec![3, 64, 64], |i| ((i % 255) as f32) / 255.0);
        let a = encode(&cfg, &params, &img).unwrap();
        let b = encode(&cfg, &params, &img).unwrap();
        for s in 0..3 {
            assert_eq!(a.features[s].data(), b.features[s].data());
        }
    }

    // With every residual branch's output projection zeroed, each block is the
    // identity, so the encoder collapses to embed + merges. That collapsed
    // path is recomputed here from direct ops as an independent oracle.
    #[test]
    fn zeroed_blocks_reduce_to_embed_and_merges() {
        let cfg = ModelConfig::desk();
        let mut params: ParamSet<f64> = ParamSet::init(&cfg).unwrap();
        for s in 0..3 {
            for b in 0..cfg.depths[s] {
                let pre = format!("enc.s{}.blk{b}", s + 1);
                for name in [format!("{pre}.attn.wo"), format!("{pre}.mlp.w2")] {
                    let shape = params.get(&name).shape().to_vec();
                    params.set(&name, Tensor::zeros(shape)).unwrap();
                }
            }
        }
        let mut rng = SplitMix64::new(9);
        let img = Tensor::<f64>::from_fn(vec![3, 64, 64], |_| rng.normal());
        let got = encode(&cfg, &params, &img).unwrap();

        let grid0 = cfg.grid_side(0);
        let rows = {
            let src = patch_indices(64, 4);
            Tensor::from_fn(vec![grid0 * grid0, 48], |i| img.data()[src[i]])
        };
        let proj = ops::matmul(&rows, params.get("embed.proj.w")).unwrap();
        let proj = Tensor::from_fn(proj.shape().to_vec(), |i| {
            proj.data()[i] + params.get("embed.proj.b").data()[i % 16]
        });
        let mut x = ops::layer_norm(
            &proj,
            params.get("embed.norm.g"),
            params.get("embed.norm.b"),
            LAYER_NORM_EPS,
        )
        .unwrap();
        for s in 0..3 {
            if s > 0 {
                let grid = cfg.grid_side(s - 1);
                let c = cfg.stage_channels[s - 1];
                let src = merge_indices(grid, c);
                let merged = Tensor::from_fn(vec![grid * grid / 4, 4 * c], |i| x.data()[src[i]]);
                let w = params.get(&format!("merge{s}.w"));
                let b = params.get(&format!("merge{s}.b"));
                let m = ops::matmul(&merged, w).unwrap();
                x = Tensor::from_fn(m.shape().to_vec(), |i| m.data()[i] + b.data()[i % (2 * c)]);
            }
            assert!(
                got.features[s].max_abs_diff(&x) < 1e-6,
                "stage {s} diverges from the collapsed oracle"
            );
        }
    }
}
