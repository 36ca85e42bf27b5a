//! Training, checkpointing, and evaluation. The loop is single threaded and
//! fully seeded, so a rerun with the same config and data reproduces every
//! parameter bit for bit.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Sample;
use crate::decoder::{forward, forward_tape};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Tape, Tensor};
use crate::params::ParamSet;
use crate::rng::{shuffle, SplitMix64};

/// Probability cut for turning sigmoid outputs into a binary prediction.
pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Tallies pixels with prediction = probability >= threshold.
pub fn confusion(probs: &Tensor<f32>, mask: &Tensor<f32>, threshold: f32) -> Result<ConfusionCounts> {
    if probs.shape() != mask.shape() {
        return Err(Error::Argument(format!(
            "prediction {:?} and mask {:?} disagree",
            probs.shape(),
            mask.shape()
        )));
    }
    if probs.numel() == 0 {
        return Err(Error::Argument("cannot evaluate an empty map".into()));
    }
    let mut c = ConfusionCounts { true_pos: 0, false_pos: 0, true_neg: 0, false_neg: 0 };
    for (&p, &m) in probs.data().iter().zip(mask.data()) {
        if m != 0.0 && m != 1.0 {
            return Err(Error::Argument(format!("mask value {m} is not binary")));
        }
        match (p >= threshold, m == 1.0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub dsc: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
}

/// Derives the four reported scores. Ratios with an empty denominator score 1;
/// predicting an absent class correctly is counted as success.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Metrics {
        dsc: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg),
        se: ratio(c.true_pos, c.true_pos + c.false_neg),
        sp: ratio(c.true_neg, c.true_neg + c.false_pos),
        acc: ratio(c.true_pos + c.true_neg, c.total()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub per_image: Vec<(String, Metrics)>,
    pub mean: Metrics,
}

fn check_sample_dims(cfg: &ModelConfig, s: &Sample) -> Result<()> {
    let want = [3, cfg.image_size, cfg.image_size];
    if s.image.shape() != want {
        return Err(Error::Config(format!(
            "sample {} has image shape {:?}, config wants {:?}",
            s.id,
            s.image.shape(),
            want
        )));
    }
    Ok(())
}

/// Runs the network over a split in sorted-id order and aggregates per-image
/// metrics by arithmetic mean.
pub fn evaluate(cfg: &ModelConfig, params: &ParamSet<f32>, split: &[Sample]) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.sort_by(|&a, &b| split[a].id.cmp(&split[b].id));
    let mut per_image = Vec::with_capacity(split.len());
    let mut sums = [0.0f64; 4];
    for idx in order {
        let s = &split[idx];
        check_sample_dims(cfg, s)?;
        let out = forward(cfg, params, &s.image)?;
        let m = metrics(&confusion(&out.probs, &s.mask, THRESHOLD)?);
        sums[0] += m.dsc;
        sums[1] += m.se;
        sums[2] += m.sp;
        sums[3] += m.acc;
        per_image.push((s.id.clone(), m));
    }
    let n = per_image.len() as f64;
    Ok(MetricsReport {
        per_image,
        mean: Metrics { dsc: sums[0] / n, se: sums[1] / n, sp: sums[2] / n, acc: sums[3] / n },
    })
}

/// Everything needed to resume or evaluate a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub split_seed: u64,
    pub epoch: usize,
    pub best_val_dsc: f64,
    pub params: ParamSet<f32>,
}

const CKPT_MAGIC: &[u8; 8] = b"FSEGCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: ModelConfig,
    split_seed: u64,
    epoch: usize,
    best_val_dsc: f64,
    tensors: Vec<TensorEntry>,
}

/// File layout: magic, version (u32 LE), header length (u64 LE), JSON header,
/// then every tensor's values as little-endian f32 at its declared offset.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, t) in ckpt.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = CkptHeader {
        config: ckpt.config.clone(),
        split_seed: ckpt.split_seed,
        epoch: ckpt.epoch,
        best_val_dsc: ckpt.best_val_dsc,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header_bytes.len() + offset as usize);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in ckpt.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20 + header_len;
    if bytes.len() < payload_start {
        return Err(fail("truncated header".into()));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| fail(format!("unreadable header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut entries = IndexMap::new();
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(fail(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        let numel: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(fail(format!("tensor {} extends past the end of the file", t.name)));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
    }
    let params = ParamSet::from_entries(&header.config, entries)
        .map_err(|e| fail(format!("parameter manifest mismatch: {e}")))?;
    Ok(Checkpoint {
        config: header.config,
        split_seed: header.split_seed,
        epoch: header.epoch,
        best_val_dsc: header.best_val_dsc,
        params,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_dsc: f64,
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Optimizes BCE with Adam over seeded epoch shuffles. Gradients are averaged
/// over each batch, one optimizer step per batch. Validation runs after every
/// epoch; when the validation split is empty the train split stands in so
/// checkpoint selection still has a signal.
pub fn train(
    cfg: &ModelConfig,
    split_seed: u64,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training requires at least one sample".into()));
    }
    for s in train_set.iter().chain(val_set) {
        check_sample_dims(cfg, s)?;
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
    }
    let val_like: &[Sample] = if val_set.is_empty() { train_set } else { val_set };

    let mut params = ParamSet::<f32>::init(cfg)?;
    let mut adam: Vec<AdamState<f32>> =
        params.iter().map(|(_, t)| AdamState::new(t.numel(), cfg.lr)).collect();

    let snapshot = |params: &ParamSet<f32>, epoch: usize, dsc: f64| Checkpoint {
        config: cfg.clone(),
        split_seed,
        epoch,
        best_val_dsc: dsc,
        params: params.clone(),
    };

    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = SplitMix64::for_tag(cfg.seed, &format!("shuffle.epoch{epoch}"));
        shuffle(&mut order, &mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut grads: Vec<Vec<f32>> =
                params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            let mut batch_loss = 0.0f64;
            for &idx in chunk {
                let s = &train_set[idx];
                let mut tape = Tape::new();
                let img = tape.leaf(s.image.clone(), false);
                let bound = params.bind(&mut tape, true);
                let out = forward_tape(&mut tape, cfg, &bound, img)?;
                let loss = tape.bce_with_logits(out.logits, &s.mask)?;
                tape.backward(loss)?;
                batch_loss += tape.value(loss).data()[0] as f64;
                for (slot, (_, id)) in grads.iter_mut().zip(bound.iter()) {
                    if let Some(g) = tape.grad(id) {
                        for (a, &b) in slot.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
            }
            let mean_loss = batch_loss / chunk.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Divergence { step, value: mean_loss });
            }
            loss_sum += mean_loss;
            batches += 1;
            let scale = 1.0 / chunk.len() as f32;
            for ((slot, (_, tensor)), st) in
                grads.iter_mut().zip(params.iter_mut()).zip(adam.iter_mut())
            {
                for g in slot.iter_mut() {
                    *g *= scale;
                }
                adam_step(tensor.data_mut(), slot, st)?;
            }
        }

        let val_dsc = evaluate(cfg, &params, val_like)?.mean.dsc;
        log.push(EpochLog { epoch, mean_loss: loss_sum / batches as f64, val_dsc });
        if best.as_ref().is_none_or(|b| val_dsc > b.best_val_dsc) {
            best = Some(snapshot(&params, epoch, val_dsc));
        }
    }

    let last_dsc = match log.last() {
        Some(entry) => entry.val_dsc,
        None => evaluate(cfg, &params, val_like)?.mean.dsc,
    };
    let last = snapshot(&params, cfg.epochs, last_dsc);
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, log, steps: step })
}
