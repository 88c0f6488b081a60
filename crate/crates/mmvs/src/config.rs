//! Run configuration: a single JSON file covering data generation, training,
//! fine-tuning, fusion, and evaluation, with a full-scale default and a
//! desk-scale overlay for fast CPU runs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MvsError, Result};
use crate::fusion::FusionConfig;
use crate::losses::LossWeights;
use crate::meta::MetaConfig;
use crate::scene::{desk_domains, DatasetConfig, DomainSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = MvsError;
    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(MvsError::Config(format!(
                "unknown preset {other:?}, expected \"desk\" or \"paper\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub scenes_per_domain: usize,
    pub val_scenes_per_domain: usize,
    pub views_per_scene: usize,
    /// Neighbour views per sample during training.
    pub num_neighbors: usize,
    /// Neighbour views per sample at test time.
    pub test_neighbors: usize,
    pub train_domains: Vec<DomainSpec>,
    pub target_domain: DomainSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Feature channels after the extractor.
    pub channels: usize,
    /// Depth hypotheses in the plane sweep.
    pub num_depths: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSection {
    pub lr: f64,
    pub steps: usize,
    /// Keep confidence-mask parameters fixed during adaptation.
    pub freeze_tau: bool,
    pub batch_size: usize,
    /// Adam instead of plain SGD for adaptation.
    pub use_adam: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub pixel_thresh: f64,
    pub depth_thresh: f64,
    pub conf_thresh: f64,
    pub min_views: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Outlier cutoff for accuracy/completeness, in scene units.
    pub max_dist: f64,
    /// F-score distance thresholds.
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataSection,
    pub network: NetworkSection,
    pub meta: MetaConfig,
    pub fine_tune: FineTuneSection,
    pub fusion: FusionSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Full-scale defaults: 640x512 inputs, 256 depth hypotheses, 2 train /
    /// 4 test neighbours, inner and outer lr 1e-4, fine-tune lr 1e-7,
    /// outer batch 4, loss weights (5, 1, 0.01), 3 inner steps, fusion
    /// thresholds 1 px / 1% depth / 0.8 confidence with 3 views minimum.
    pub fn paper() -> RunConfig {
        let (train_domains, target_domain) = desk_domains();
        RunConfig {
            preset: Preset::Paper,
            seed: 0,
            data: DataSection {
                width: 640,
                height: 512,
                focal: 880.0,
                scenes_per_domain: 32,
                val_scenes_per_domain: 4,
                views_per_scene: 16,
                num_neighbors: 2,
                test_neighbors: 4,
                train_domains,
                target_domain,
            },
            network: NetworkSection {
                channels: 32,
                num_depths: 256,
            },
            meta: MetaConfig {
                k: 3,
                alpha: 1e-4,
                beta: 1e-4,
                outer_batch: 4,
                max_iters: 10_000,
                patience: 400,
                smooth_window: 20,
                checkpoint_every: 100,
                seed: 0,
                num_depths: 256,
                weights: LossWeights {
                    gamma_photo: 5.0,
                    gamma_ssim: 1.0,
                    gamma_smooth: 0.01,
                    mask_reg: 0.01,
                    average_views: true,
                },
                distinct_domains: true,
                use_adam: false,
            },
            fine_tune: FineTuneSection {
                lr: 1e-7,
                steps: 1000,
                freeze_tau: true,
                batch_size: 1,
                use_adam: false,
            },
            fusion: FusionSection {
                pixel_thresh: 1.0,
                depth_thresh: 0.01,
                conf_thresh: 0.8,
                min_views: 3,
            },
            eval: EvalSection {
                max_dist: 20.0,
                taus: vec![0.05, 0.1],
            },
        }
    }

    /// Desk-scale overlay on the full-scale defaults: 80x64 inputs, 16 depth
    /// hypotheses, 8 feature channels, small dataset, larger fine-tune lr,
    /// 2-view fusion minimum.
    pub fn desk() -> RunConfig {
        let mut cfg = RunConfig::paper();
        cfg.preset = Preset::Desk;
        cfg.data.width = 80;
        cfg.data.height = 64;
        cfg.data.focal = 110.0;
        cfg.data.scenes_per_domain = 4;
        cfg.data.val_scenes_per_domain = 1;
        cfg.data.views_per_scene = 6;
        cfg.data.test_neighbors = 2;
        cfg.network.channels = 8;
        cfg.network.num_depths = 16;
        cfg.meta.num_depths = 16;
        cfg.meta.max_iters = 50;
        cfg.meta.patience = 25;
        cfg.meta.smooth_window = 5;
        cfg.meta.checkpoint_every = 10;
        cfg.meta.outer_batch = 2;
        cfg.fine_tune.lr = 1e-3;
        cfg.fine_tune.steps = 200;
        cfg.fine_tune.use_adam = true;
        cfg.fusion.min_views = 2;
        // With only 16 depth hypotheses the 4-bin probability mass sits much
        // lower than at 256 hypotheses, and desk-scale depth is coarser.
        cfg.fusion.conf_thresh = 0.3;
        cfg.fusion.depth_thresh = 0.03;
        cfg.eval.max_dist = 2.0;
        cfg
    }

    pub fn preset(p: Preset) -> RunConfig {
        match p {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        }
    }

    pub fn from_json(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| MvsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MvsError::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Hash of the canonical JSON form; identical configs hash identically
    /// regardless of source-file formatting.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?.as_bytes());
        Ok(digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = fmt::Write::write_fmt(&mut s, format_args!("{b:02x}"));
            s
        }))
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.meta.weights.validate()?;
        for d in &self.data.train_domains {
            d.validate()?;
        }
        self.data.target_domain.validate()?;
        self.dataset_config().validate()?;
        if self.network.num_depths != self.meta.num_depths {
            return Err(MvsError::Config(format!(
                "network.num_depths {} != meta.num_depths {}",
                self.network.num_depths, self.meta.num_depths
            )));
        }
        if self.network.channels == 0 {
            return Err(MvsError::Config("network.channels must be > 0".into()));
        }
        if !(self.fine_tune.lr > 0.0) {
            return Err(MvsError::Config("fine_tune.lr must be > 0".into()));
        }
        if self.fine_tune.batch_size == 0 {
            return Err(MvsError::Config("fine_tune.batch_size must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fusion.conf_thresh) {
            return Err(MvsError::Config(format!(
                "fusion.conf_thresh must be in [0,1], got {}",
                self.fusion.conf_thresh
            )));
        }
        if !(self.fusion.pixel_thresh > 0.0) || !(self.fusion.depth_thresh > 0.0) {
            return Err(MvsError::Config(
                "fusion pixel/depth thresholds must be > 0".into(),
            ));
        }
        if !(self.eval.max_dist > 0.0) {
            return Err(MvsError::Config("eval.max_dist must be > 0".into()));
        }
        if self.eval.taus.iter().any(|&t| !(t > 0.0)) {
            return Err(MvsError::Config("eval.taus must all be > 0".into()));
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            train_domains: self.data.train_domains.clone(),
            target_domain: self.data.target_domain.clone(),
            scenes_per_domain: self.data.scenes_per_domain,
            val_scenes_per_domain: self.data.val_scenes_per_domain,
            views_per_scene: self.data.views_per_scene,
            num_neighbors: self.data.num_neighbors,
            width: self.data.width,
            height: self.data.height,
            focal: self.data.focal,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        let mut m = self.meta.clone();
        m.seed = self.seed;
        m
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            pixel_thresh: self.fusion.pixel_thresh,
            depth_thresh: self.fusion.depth_thresh,
            conf_thresh: self.fusion.conf_thresh,
            min_views: self.fusion.min_views,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults_match_the_stated_values() {
        let cfg = RunConfig::paper();
        assert_eq!(cfg.data.num_neighbors, 2);
        assert_eq!(cfg.data.test_neighbors, 4);
        assert_eq!(cfg.network.num_depths, 256);
        assert_eq!(cfg.meta.alpha, 1e-4);
        assert_eq!(cfg.meta.beta, 1e-4);
        assert_eq!(cfg.meta.k, 3);
        assert_eq!(cfg.meta.outer_batch, 4);
        assert_eq!(cfg.fine_tune.lr, 1e-7);
        let w = cfg.meta.weights;
        assert_eq!((w.gamma_photo, w.gamma_ssim, w.gamma_smooth), (5.0, 1.0, 0.01));
        assert_eq!(cfg.fusion.pixel_thresh, 1.0);
        assert_eq!(cfg.fusion.depth_thresh, 0.01);
        assert_eq!(cfg.fusion.conf_thresh, 0.8);
        assert_eq!(cfg.fusion.min_views, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn desk_overlay_changes_scale_not_method() {
        let desk = RunConfig::desk();
        let paper = RunConfig::paper();
        assert_eq!(desk.network.num_depths, 16);
        assert_eq!((desk.data.width, desk.data.height), (80, 64));
        assert_eq!(desk.network.channels, 8);
        assert_eq!(desk.fine_tune.lr, 1e-3);
        assert!(desk.fine_tune.use_adam);
        assert_eq!(desk.fusion.min_views, 2);
        // method-level knobs stay at the full-scale values
        assert_eq!(desk.meta.k, paper.meta.k);
        assert_eq!(desk.meta.alpha, paper.meta.alpha);
        assert_eq!(desk.meta.weights.gamma_photo, paper.meta.weights.gamma_photo);
        desk.validate().unwrap();
    }

    #[test]
    fn json_roundtrip_preserves_the_hash() {
        let cfg = RunConfig::desk();
        let json = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
        // reformatting the file must not change the hash
        let compact = serde_json::to_string(&cfg).unwrap();
        let again = RunConfig::from_json(&compact).unwrap();
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut json: serde_json::Value =
            serde_json::from_str(&RunConfig::desk().to_json().unwrap()).unwrap();
        json["meta"]["weights"]["gamm_photo"] = serde_json::json!(5.0);
        let err = RunConfig::from_json(&json.to_string()).unwrap_err();
        assert!(err.to_string().contains("gamm_photo"), "{err}");

        let mut json2: serde_json::Value =
            serde_json::from_str(&RunConfig::desk().to_json().unwrap()).unwrap();
        json2["learning_rate"] = serde_json::json!(0.1);
        let err2 = RunConfig::from_json(&json2.to_string()).unwrap_err();
        assert!(err2.to_string().contains("learning_rate"), "{err2}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.fusion.conf_thresh = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.network.num_depths = 8; // disagrees with meta.num_depths
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.eval.taus = vec![0.1, -0.2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn preset_string_parsing() {
        assert_eq!("desk".parse::<Preset>().unwrap(), Preset::Desk);
        assert_eq!("paper".parse::<Preset>().unwrap(), Preset::Paper);
        assert!("dtu".parse::<Preset>().is_err());
    }
}
