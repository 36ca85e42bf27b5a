//! Finite-difference audit of the reverse pass. One named case per
//! differentiable tape operation, a few wiring composites, and a whole-network
//! case that perturbs the input image and a probe subset of parameters. Runs
//! in f64; each case repeats over independent seeds.

use crate::attention::{efficient_attention_tape, multi_head_tape, transformer_block_tape, AttentionIds, BlockIds};
use crate::config::ModelConfig;
use crate::decoder::{forward_tape, patch_expand_tape};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, GradReport, Tape, TapeId, Tensor, FD_STEP, GRAD_TOL, LAYER_NORM_EPS};
use crate::params::ParamSet;
use crate::rng::SplitMix64;

pub const DEFAULT_SEEDS: u64 = 20;

/// Name used to request the deliberately broken case. Excluded from
/// [`case_names`], so batch runs stay green; exists to prove the harness and
/// its callers actually detect a wrong derivative.
pub const FAULT_CASE: &str = "fault_fixture";

const CASES: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "scale",
    "mul_scalar",
    "add_scalar",
    "add_row_bias",
    "gather",
    "transpose",
    "slice_cols",
    "concat_cols",
    "reshape",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "mean_all",
    "bce_with_logits",
    "affine",
    "efficient_attention",
    "multi_head",
    "transformer_block",
    "patch_expand",
    "end_to_end",
];

/// All runnable case names, in execution order.
pub fn case_names() -> &'static [&'static str] {
    CASES
}

/// Result of one case across all its seeds.
#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: String,
    pub seeds: u64,
    /// Report of the seed with the largest relative error.
    pub worst: GradReport,
    pub passed: bool,
}

fn rand_t(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal() * 0.5)
}

/// Scalarizes an output through a fixed random weighting. A plain mean would
/// erase the gradient of anything with a constant sum, such as softmax rows.
fn weighted_mean(tape: &mut Tape<f64>, x: TapeId, w: &Tensor<f64>) -> Result<TapeId> {
    let wid = tape.leaf(w.clone(), false);
    let prod = tape.mul(x, wid)?;
    tape.mean_all(prod)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        stage_channels: [4, 8, 16],
        depths: [1, 1, 1],
        heads: [2, 2, 4],
        mlp_ratio: 2,
        iscf_enabled: true,
        iscf_hidden: 4,
        seed: 0,
        lr: 1e-3,
        batch_size: 1,
        epochs: 1,
    }
}

fn case_matmul(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[4, 2])];
    grad_check(
        |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            let g = tape.gelu(y);
            tape.mean_all(g)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_add(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4])];
    grad_check(
        |tape, ids| {
            let y = tape.add(ids[0], ids[1])?;
            let g = tape.gelu(y);
            tape.mean_all(g)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_mul(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4])];
    grad_check(
        |tape, ids| {
            let y = tape.mul(ids[0], ids[1])?;
            tape.mean_all(y)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_scale(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4])];
    grad_check(
        |tape, ids| {
            let y = tape.scale(ids[0], 1.7);
            let g = tape.gelu(y);
            tape.mean_all(g)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_mul_scalar(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[1, 1])];
    grad_check(
        |tape, ids| {
            let y = tape.mul_scalar(ids[0], ids[1])?;
            let g = tape.gelu(y);
            tape.mean_all(g)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_add_scalar(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[1, 1])];
    grad_check(
        |tape, ids| {
            let y = tape.add_scalar(ids[0], ids[1])?;
            let g = tape.gelu(y);
            tape.mean_all(g)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_add_row_bias(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[4])];
    grad_check(
        |tape, ids| {
            let y = tape.add_row_bias(ids[0], ids[1])?;
            let g = tape.gelu(y);
            tape.mean_all(g)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_gather(rng: &mut SplitMix64) -> Result<GradReport> {
    // Repeated source indices force the backward scatter to accumulate.
    let src = vec![0, 3, 1, 1, 5, 0, 2, 4];
    let inputs = [rand_t(rng, &[2, 3])];
    grad_check(
        move |tape, ids| {
            let y = tape.gather(ids[0], src.clone(), vec![4, 2])?;
            let g = tape.gelu(y);
            tape.mean_all(g)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_transpose(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[4, 3]);
    let inputs = [rand_t(rng, &[3, 4])];
    grad_check(
        move |tape, ids| {
            let y = tape.transpose(ids[0])?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_slice_cols(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[3, 3]);
    let inputs = [rand_t(rng, &[3, 5])];
    grad_check(
        move |tape, ids| {
            let y = tape.slice_cols(ids[0], 1, 3)?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_concat_cols(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[3, 6]);
    let inputs = [rand_t(rng, &[3, 2]), rand_t(rng, &[3, 1]), rand_t(rng, &[3, 3])];
    grad_check(
        move |tape, ids| {
            let y = tape.concat_cols(&[ids[0], ids[1], ids[2]])?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_reshape(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[2, 6]);
    let inputs = [rand_t(rng, &[3, 4])];
    grad_check(
        move |tape, ids| {
            let y = tape.reshape(ids[0], vec![2, 6])?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_softmax(rng: &mut SplitMix64) -> Result<GradReport> {
    let w_feat = rand_t(rng, &[4, 5]);
    let w_tok = rand_t(rng, &[4, 5]);
    let inputs = [rand_t(rng, &[4, 5]), rand_t(rng, &[4, 5])];
    grad_check(
        move |tape, ids| {
            let f = tape.softmax(ids[0], 1)?;
            let t = tape.softmax(ids[1], 0)?;
            let mf = weighted_mean(tape, f, &w_feat)?;
            let mt = weighted_mean(tape, t, &w_tok)?;
            tape.add(mf, mt)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_layer_norm(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[3, 4]);
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[4]), rand_t(rng, &[4])];
    grad_check(
        move |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], LAYER_NORM_EPS)?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_gelu(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4])];
    grad_check(
        |tape, ids| {
            let y = tape.gelu(ids[0]);
            tape.mean_all(y)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_sigmoid(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[3, 4]);
    let inputs = [rand_t(rng, &[3, 4])];
    grad_check(
        move |tape, ids| {
            let y = tape.sigmoid(ids[0]);
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_mean_all(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4])];
    grad_check(|tape, ids| tape.mean_all(ids[0]), &inputs, FD_STEP)
}

fn case_bce_with_logits(rng: &mut SplitMix64) -> Result<GradReport> {
    let target = Tensor::from_fn(vec![3, 4], |_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 });
    let inputs = [rand_t(rng, &[3, 4])];
    grad_check(
        move |tape, ids| tape.bce_with_logits(ids[0], &target),
        &inputs,
        FD_STEP,
    )
}

fn case_affine(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[4, 2]), rand_t(rng, &[2])];
    grad_check(
        |tape, ids| {
            let y = tape.affine(ids[0], ids[1], ids[2])?;
            let g = tape.gelu(y);
            tape.mean_all(g)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_efficient_attention(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[3, 4]);
    let inputs = [rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4])];
    grad_check(
        move |tape, ids| {
            let y = efficient_attention_tape(tape, ids[0], ids[1], ids[2])?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_multi_head(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[4, 4]);
    let inputs = [
        rand_t(rng, &[4, 4]),
        rand_t(rng, &[4, 4]),
        rand_t(rng, &[4, 4]),
        rand_t(rng, &[4, 4]),
        rand_t(rng, &[4, 4]),
    ];
    grad_check(
        move |tape, ids| {
            let proj = AttentionIds { wq: ids[1], wk: ids[2], wv: ids[3], wo: ids[4], heads: 2 };
            let y = multi_head_tape(tape, ids[0], &proj)?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_transformer_block(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[4, 4]);
    let inputs = [
        rand_t(rng, &[4, 4]),  // x
        rand_t(rng, &[4]),     // ln1 scale
        rand_t(rng, &[4]),     // ln1 shift
        rand_t(rng, &[4, 4]),  // wq
        rand_t(rng, &[4, 4]),  // wk
        rand_t(rng, &[4, 4]),  // wv
        rand_t(rng, &[4, 4]),  // wo
        rand_t(rng, &[4]),     // ln2 scale
        rand_t(rng, &[4]),     // ln2 shift
        rand_t(rng, &[4, 8]),  // mlp w1
        rand_t(rng, &[8]),     // mlp b1
        rand_t(rng, &[8, 4]),  // mlp w2
        rand_t(rng, &[4]),     // mlp b2
    ];
    grad_check(
        move |tape, ids| {
            let blk = BlockIds {
                ln1_g: ids[1],
                ln1_b: ids[2],
                attn: AttentionIds { wq: ids[3], wk: ids[4], wv: ids[5], wo: ids[6], heads: 2 },
                ln2_g: ids[7],
                ln2_b: ids[8],
                mlp_w1: ids[9],
                mlp_b1: ids[10],
                mlp_w2: ids[11],
                mlp_b2: ids[12],
            };
            let (y, _) = transformer_block_tape(tape, ids[0], &blk, LAYER_NORM_EPS)?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

fn case_patch_expand(rng: &mut SplitMix64) -> Result<GradReport> {
    let w = rand_t(rng, &[16, 2]);
    let inputs = [rand_t(rng, &[4, 4]), rand_t(rng, &[4, 8]), rand_t(rng, &[8])];
    grad_check(
        move |tape, ids| {
            let y = patch_expand_tape(tape, ids[0], 2, ids[1], ids[2])?;
            weighted_mean(tape, y, &w)
        },
        &inputs,
        FD_STEP,
    )
}

/// Parameters perturbed alongside the image in the whole-network case. Small
/// tensors drawn from every region of the graph; the image covers the rest of
/// the chain because its gradient flows through all of them.
const PROBE_PARAMS: &[&str] = &[
    "embed.proj.b",
    "enc.s1.blk0.attn.wo",
    "enc.s3.blk0.ln2.g",
    "merge1.b",
    "iscf.gate.w2",
    "iscf.fuse.w",
    "iscf.token_remap3.w",
    "iscf.chan_remap2.b",
    "dec.lvl1.fuse.b",
    "head.up2.w",
    "head.out.w",
    "head.out.b",
];

fn case_end_to_end(seed: u64) -> Result<GradReport> {
    let cfg = tiny_config();
    let mut params = ParamSet::<f64>::init(&cfg)?;
    // Refill every tensor with nonzero values; zero-initialized weights would
    // otherwise silence entire branches and make their checks vacuous.
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let shape = params.get(name).shape().to_vec();
        let mut r = SplitMix64::for_tag(seed, &format!("gradsuite.e2e.{name}"));
        params.set(name, Tensor::from_fn(shape, |_| r.normal() * 0.2))?;
    }
    let mut rng = SplitMix64::for_tag(seed, "gradsuite.e2e.data");
    let s = cfg.image_size;
    let image = Tensor::from_fn(vec![3, s, s], |_| rng.normal() * 0.5);
    let mask = Tensor::from_fn(vec![1, s, s], |_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 });

    let mut inputs = vec![image];
    for name in PROBE_PARAMS {
        inputs.push(params.get(name).clone());
    }
    grad_check(
        move |tape, ids| {
            let mut bound = params.bind(tape, false);
            for (i, name) in PROBE_PARAMS.iter().enumerate() {
                bound.override_id(name, ids[i + 1]);
            }
            let out = forward_tape(tape, &cfg, &bound, ids[0])?;
            tape.bce_with_logits(out.logits, &mask)
        },
        &inputs,
        FD_STEP,
    )
}

/// Analytic path sees identity; the forward value is tripled through a
/// detached copy, so the check must fail.
fn case_fault_fixture(rng: &mut SplitMix64) -> Result<GradReport> {
    let inputs = [rand_t(rng, &[2, 3])];
    grad_check(
        |tape, ids| {
            let doubled = tape.scale(ids[0], 2.0);
            let snapshot = tape.value(doubled).clone();
            let detached = tape.leaf(snapshot, false);
            let blend = tape.add(ids[0], detached)?;
            tape.mean_all(blend)
        },
        &inputs,
        FD_STEP,
    )
}

fn run_seed(name: &str, seed: u64) -> Result<GradReport> {
    let mut rng = SplitMix64::for_tag(seed, &format!("gradsuite.{name}"));
    match name {
        "matmul" => case_matmul(&mut rng),
        "add" => case_add(&mut rng),
        "mul" => case_mul(&mut rng),
        "scale" => case_scale(&mut rng),
        "mul_scalar" => case_mul_scalar(&mut rng),
        "add_scalar" => case_add_scalar(&mut rng),
        "add_row_bias" => case_add_row_bias(&mut rng),
        "gather" => case_gather(&mut rng),
        "transpose" => case_transpose(&mut rng),
        "slice_cols" => case_slice_cols(&mut rng),
        "concat_cols" => case_concat_cols(&mut rng),
        "reshape" => case_reshape(&mut rng),
        "softmax" => case_softmax(&mut rng),
        "layer_norm" => case_layer_norm(&mut rng),
        "gelu" => case_gelu(&mut rng),
        "sigmoid" => case_sigmoid(&mut rng),
        "mean_all" => case_mean_all(&mut rng),
        "bce_with_logits" => case_bce_with_logits(&mut rng),
        "affine" => case_affine(&mut rng),
        "efficient_attention" => case_efficient_attention(&mut rng),
        "multi_head" => case_multi_head(&mut rng),
        "transformer_block" => case_transformer_block(&mut rng),
        "patch_expand" => case_patch_expand(&mut rng),
        "end_to_end" => case_end_to_end(seed),
        FAULT_CASE => case_fault_fixture(&mut rng),
        other => Err(Error::Argument(format!(
            "unknown gradient case {other}; valid cases: {}",
            CASES.join(", ")
        ))),
    }
}

/// Runs one case over `seeds` seeds and keeps the worst report.
pub fn run_case(name: &str, seeds: u64) -> Result<CaseOutcome> {
    if seeds == 0 {
        return Err(Error::Argument("seed count must be at least 1".into()));
    }
    let mut worst: Option<GradReport> = None;
    for seed in 0..seeds {
        let rep = run_seed(name, seed)?;
        let replace = worst.as_ref().is_none_or(|w| rep.max_rel_err > w.max_rel_err);
        if replace {
            worst = Some(rep);
        }
    }
    let worst = worst.expect("at least one seed ran");
    let passed = worst.passes(GRAD_TOL);
    Ok(CaseOutcome { name: name.to_string(), seeds, worst, passed })
}

/// Runs the whole suite, or a single named case when `scope` is given.
pub fn run(scope: Option<&str>, seeds: u64) -> Result<Vec<CaseOutcome>> {
    match scope {
        Some(name) => Ok(vec![run_case(name, seeds)?]),
        None => CASES.iter().map(|name| run_case(name, seeds)).collect(),
    }
}
