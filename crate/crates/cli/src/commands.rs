//! Subcommand bodies. Each returns the shared library error type; the caller
//! maps error variants onto the process exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fuseseg::attention::{dense_softmax_attention, efficient_attention, efficient_attention_quadratic};
use fuseseg::config::ModelConfig;
use fuseseg::data::{load_isic, resize_sample, split, synth_generate, write_isic, Sample, SplitSpec};
use fuseseg::decoder::forward;
use fuseseg::error::{Error, Result};
use fuseseg::gradsuite;
use fuseseg::numerics::Tensor;
use fuseseg::params::count_params;
use fuseseg::rng::SplitMix64;
use fuseseg::train_eval::{evaluate, load_checkpoint, save_checkpoint, train};

use crate::overlay;
use crate::run_config::RunConfig;

/// Loads the `images/` and `masks/` pair under `root` and brings every sample
/// to the model's resolution.
fn load_samples(root: &Path, size: usize) -> Result<Vec<Sample>> {
    let samples = load_isic(&root.join("images"), &root.join("masks"))?;
    samples
        .iter()
        .map(|s| {
            if s.image.shape()[1] == size && s.image.shape()[2] == size {
                Ok(s.clone())
            } else {
                resize_sample(s, size)
            }
        })
        .collect()
}

fn split_samples(
    samples: Vec<Sample>,
    split_seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let spec = SplitSpec::proportional(samples.len(), split_seed);
    split(samples, &spec)
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path)?;
    let rc = RunConfig::from_json(&text).map_err(Error::Config)?;
    let cfg = rc.model();
    cfg.validate()?;
    let samples = load_samples(&rc.data_dir, cfg.image_size)?;
    let n = samples.len();
    let (train_set, val_set, _) = split_samples(samples, rc.split_seed)?;
    println!(
        "training on {} samples ({} validation, {} held out) for {} epochs",
        train_set.len(),
        val_set.len(),
        n - train_set.len() - val_set.len(),
        cfg.epochs
    );
    let outcome = train(&cfg, rc.split_seed, &train_set, &val_set)?;

    fs::create_dir_all(&rc.out_dir)?;
    save_checkpoint(&rc.out_dir.join("best.ckpt"), &outcome.best)?;
    save_checkpoint(&rc.out_dir.join("last.ckpt"), &outcome.last)?;
    let mut log = String::from("epoch,mean_loss,val_dsc\n");
    for e in &outcome.log {
        writeln!(log, "{},{},{}", e.epoch, e.mean_loss, e.val_dsc).expect("string write");
    }
    fs::write(rc.out_dir.join("train.log"), log)?;
    let echo = serde_json::to_string_pretty(&rc).expect("run config serializes");
    fs::write(rc.out_dir.join("config.json"), echo + "\n")?;
    println!(
        "done: {} optimizer steps; best epoch {} with val DSC {:.4}; artifacts in {}",
        outcome.steps,
        outcome.best.epoch,
        outcome.best.best_val_dsc,
        rc.out_dir.display()
    );
    Ok(())
}

pub fn cmd_eval(ckpt_path: &Path, data_dir: &Path, split_name: &str, out_dir: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let samples = load_samples(data_dir, ckpt.config.image_size)?;
    let (train_set, val_set, test_set) = split_samples(samples, ckpt.split_seed)?;
    let set = match split_name {
        "train" => train_set,
        "val" => val_set,
        "test" => test_set,
        other => {
            return Err(Error::Argument(format!(
                "unknown split {other}; expected train, val, or test"
            )))
        }
    };
    let report = evaluate(&ckpt.config, &ckpt.params, &set)?;
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(&report).expect("metrics serialize");
    fs::write(out_dir.join("metrics.json"), json + "\n")?;
    println!(
        "DSC {:.4}  SE {:.4}  SP {:.4}  ACC {:.4}",
        report.mean.dsc, report.mean.se, report.mean.sp, report.mean.acc
    );
    Ok(())
}

/// Output path for the raw mask written next to a prediction overlay.
fn mask_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    out.with_file_name(format!("{stem}_mask.png"))
}

pub fn cmd_predict(
    ckpt_path: &Path,
    image_path: &Path,
    mask_path: Option<&Path>,
    out: &Path,
    threshold: f32,
) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Argument(format!("threshold {threshold} outside [0, 1]")));
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let size = ckpt.config.image_size;

    let rgb = image::open(image_path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut image_data = vec![0.0f32; 3 * plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            image_data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    let truth_data: Option<Vec<f32>> = match mask_path {
        Some(p) => {
            let gray = image::open(p)?.to_luma8();
            if (gray.width() as usize, gray.height() as usize) != (w, h) {
                return Err(Error::Data(format!(
                    "mask {} is {}x{} but the image is {w}x{h}",
                    p.display(),
                    gray.width(),
                    gray.height()
                )));
            }
            Some(gray.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect())
        }
        None => None,
    };
    let id = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    let sample = Sample {
        id,
        image: Tensor::new(vec![3, h, w], image_data)?,
        mask: Tensor::new(vec![1, h, w], truth_data.clone().unwrap_or_else(|| vec![0.0; plane]))?,
    };
    let sized = if (h, w) == (size, size) { sample } else { resize_sample(&sample, size)? };

    let fwd = forward(&ckpt.config, &ckpt.params, &sized.image)?;
    let pred: Vec<bool> = fwd.probs.data().iter().map(|&p| p >= threshold).collect();
    let truth: Option<Vec<bool>> =
        truth_data.map(|_| sized.mask.data().iter().map(|&v| v >= 0.5).collect());

    let base = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        let d = sized.image.data();
        let px = |c: usize| (d[c * size * size + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    let over = overlay::render(&base, &pred, truth.as_deref());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    over.save(out)?;
    let raw = mask_path_for(out);
    overlay::mask_image(&pred, size, size).save(&raw)?;
    println!("wrote {} and {}", out.display(), raw.display());
    Ok(())
}

pub fn cmd_synth_data(out_dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    let samples = synth_generate(count, size, seed)?;
    write_isic(out_dir, &samples)?;
    println!("wrote {count} samples at {size}x{size} under {}", out_dir.display());
    Ok(())
}

fn median_secs(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn qkv(n: usize, d: usize, seed: u64) -> [Tensor<f32>; 3] {
    let mut rng = SplitMix64::for_tag(seed, &format!("bench_{n}x{d}"));
    [(); 3].map(|_| Tensor::from_fn(vec![n, d], |_| rng.normal() as f32))
}

pub fn cmd_bench_attention(
    tokens: &[usize],
    dim: usize,
    repeats: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Argument("need at least one token count".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&n| n < 64) {
        return Err(Error::Argument(format!("token count {bad} below the minimum of 64")));
    }
    if dim == 0 || repeats == 0 {
        return Err(Error::Argument("dim and repeats must be positive".into()));
    }

    // Numerical cross-check before timing anything: the linear evaluation and
    // the materialized quadratic evaluation of the same normalization must
    // agree; they differ only in summation order.
    let [q, k, v] = qkv(64, dim.min(64), seed);
    let fast = efficient_attention(&q, &k, &v)?;
    let oracle = efficient_attention_quadratic(&q, &k, &v)?;
    let worst = fast
        .data()
        .iter()
        .zip(oracle.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    if worst > 1e-4 {
        return Err(Error::numeric("bench_attention", format!("cross-check diverged by {worst}")));
    }
    println!("# cross-check at N=64: linear vs quadratic evaluation agree within {worst:.2e}");

    let mut csv = String::from("N,median_efficient_s,median_dense_s\n");
    let mut medians = Vec::new();
    for &n in tokens {
        let [q, k, v] = qkv(n, dim, seed);
        efficient_attention(&q, &k, &v)?;
        dense_softmax_attention(&q, &k, &v)?;
        let mut eff = Vec::with_capacity(repeats);
        let mut dense = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            std::hint::black_box(efficient_attention(&q, &k, &v)?);
            eff.push(t.elapsed().as_secs_f64());
        }
        for _ in 0..repeats {
            let t = Instant::now();
            std::hint::black_box(dense_softmax_attention(&q, &k, &v)?);
            dense.push(t.elapsed().as_secs_f64());
        }
        let (me, md) = (median_secs(eff), median_secs(dense));
        writeln!(csv, "{n},{me:.9},{md:.9}").expect("string write");
        medians.push((n, me, md));
    }
    print!("{csv}");
    for pair in medians.windows(2) {
        let [(n0, e0, d0), (n1, e1, d1)] = [pair[0], pair[1]];
        println!(
            "# {n0} -> {n1} tokens: efficient x{:.2}, dense x{:.2}",
            e1 / e0,
            d1 / d0
        );
    }
    if let Some(path) = out {
        fs::write(path, &csv)?;
        println!("# csv written to {}", path.display());
    }
    Ok(())
}

pub fn cmd_gradcheck(scope: &str, seeds: u64) -> Result<()> {
    let scope_filter = if scope == "full" { None } else { Some(scope) };
    let outcomes = gradsuite::run(scope_filter, seeds)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "{:<22} seeds {:>3}  worst rel err {:.3e}  {}",
            o.name,
            o.seeds,
            o.worst.max_rel_err,
            if o.passed { "ok" } else { "FAIL" }
        );
        if !o.passed {
            failed.push(o.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Error::GradCheck(failed.join(", ")));
    }
    Ok(())
}

pub fn cmd_params(config_path: Option<&Path>) -> Result<()> {
    let base = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            RunConfig::from_json(&text).map_err(Error::Config)?.model()
        }
        None => ModelConfig::default(),
    };
    let with = count_params(&ModelConfig { iscf_enabled: true, ..base.clone() })?;
    let without = count_params(&ModelConfig { iscf_enabled: false, ..base })?;
    println!("parameters with fusion:    {}", with.total);
    println!("parameters without fusion: {}", without.total);
    println!("fusion module:             {}", with.total - without.total);
    println!("by module (with fusion):");
    for (group, n) in &with.by_group {
        println!("  {group:<6} {n}");
    }
    Ok(())
}
