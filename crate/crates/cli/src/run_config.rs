//! Flat JSON run description for `train`. Absent optional keys take the
//! full-scale defaults; unknown keys are rejected so typos fail loudly instead
//! of silently training a different model.

use std::path::PathBuf;

use fuseseg::config::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    data_dir: PathBuf,
    out_dir: PathBuf,
    image_size: Option<usize>,
    patch_size: Option<usize>,
    stage_channels: Option<[usize; 3]>,
    depths: Option<[usize; 3]>,
    heads: Option<[usize; 3]>,
    mlp_ratio: Option<usize>,
    iscf_enabled: Option<bool>,
    iscf_hidden: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    split_seed: Option<u64>,
    threshold: Option<f32>,
}

/// Fully resolved run description; serializing it writes every key back out,
/// so the saved copy records the defaults the run actually used.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub image_size: usize,
    pub patch_size: usize,
    pub stage_channels: [usize; 3],
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    pub mlp_ratio: usize,
    pub iscf_enabled: bool,
    pub iscf_hidden: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub split_seed: u64,
    pub threshold: f32,
}

impl RunConfig {
    /// Parses the flat JSON object, filling absent keys from the full-scale
    /// defaults. The split seed defaults to the main seed.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let raw: RawRunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let d = ModelConfig::default();
        let seed = raw.seed.unwrap_or(d.seed);
        Ok(RunConfig {
            data_dir: raw.data_dir,
            out_dir: raw.out_dir,
            image_size: raw.image_size.unwrap_or(d.image_size),
            patch_size: raw.patch_size.unwrap_or(d.patch_size),
            stage_channels: raw.stage_channels.unwrap_or(d.stage_channels),
            depths: raw.depths.unwrap_or(d.depths),
            heads: raw.heads.unwrap_or(d.heads),
            mlp_ratio: raw.mlp_ratio.unwrap_or(d.mlp_ratio),
            iscf_enabled: raw.iscf_enabled.unwrap_or(d.iscf_enabled),
            iscf_hidden: raw.iscf_hidden.unwrap_or(d.iscf_hidden),
            seed,
            lr: raw.lr.unwrap_or(d.lr),
            batch_size: raw.batch_size.unwrap_or(d.batch_size),
            epochs: raw.epochs.unwrap_or(d.epochs),
            split_seed: raw.split_seed.unwrap_or(seed),
            threshold: raw.threshold.unwrap_or(0.5),
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            stage_channels: self.stage_channels,
            depths: self.depths,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            iscf_enabled: self.iscf_enabled,
            iscf_hidden: self.iscf_hidden,
            seed: self.seed,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_full_scale_defaults() {
        let rc = RunConfig::from_json(r#"{"data_dir": "d", "out_dir": "o"}"#).unwrap();
        let d = ModelConfig::default();
        assert_eq!(rc.model(), d);
        assert_eq!(rc.split_seed, d.seed);
        assert_eq!(rc.threshold, 0.5);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = RunConfig::from_json(r#"{"data_dir": "d", "out_dir": "o", "learning_rate": 0.1}"#)
            .unwrap_err();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn missing_required_key_is_rejected_by_name() {
        let err = RunConfig::from_json(r#"{"out_dir": "o"}"#).unwrap_err();
        assert!(err.contains("data_dir"), "{err}");
    }

    #[test]
    fn split_seed_defaults_to_seed() {
        let rc =
            RunConfig::from_json(r#"{"data_dir": "d", "out_dir": "o", "seed": 7}"#).unwrap();
        assert_eq!(rc.split_seed, 7);
        let rc = RunConfig::from_json(
            r#"{"data_dir": "d", "out_dir": "o", "seed": 7, "split_seed": 9}"#,
        )
        .unwrap();
        assert_eq!(rc.split_seed, 9);
    }

    #[test]
    fn echo_round_trips_every_key() {
        let rc = RunConfig::from_json(r#"{"data_dir": "d", "out_dir": "o", "epochs": 3}"#).unwrap();
        let echoed = serde_json::to_string_pretty(&rc).unwrap();
        let back = RunConfig::from_json(&echoed).unwrap();
        assert_eq!(back.epochs, 3);
        assert_eq!(back.model(), rc.model());
        for key in [
            "data_dir",
            "out_dir",
            "image_size",
            "patch_size",
            "stage_channels",
            "depths",
            "heads",
            "mlp_ratio",
            "iscf_enabled",
            "iscf_hidden",
            "seed",
            "lr",
            "batch_size",
            "epochs",
            "split_seed",
            "threshold",
        ] {
            assert!(echoed.contains(&format!("\"{key}\"")), "echo lacks {key}");
        }
    }
}
