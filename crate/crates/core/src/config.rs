//! Run configuration: one TOML file plus a seed reproduces a run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::branches::FusionMode;
use crate::data::{
    DatasetKind, DatasetSpec, SyntheticActionConfig, SyntheticCaptionConfig,
    SyntheticDetectionConfig,
};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Step at which the learning rate is multiplied by 0.1.
    pub decay_step: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
}

fn default_weight_decay() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: default_weight_decay(),
            decay_step: u64::MAX,
            beta1: default_beta1(),
            beta2: default_beta2(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(default = "default_focal_alpha")]
    pub focal_alpha: f64,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
    #[serde(default = "default_no_object_weight")]
    pub no_object_weight: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_focal_alpha() -> f64 {
    0.25
}
fn default_focal_gamma() -> f64 {
    2.0
}
fn default_no_object_weight() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    0.07
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal_alpha: default_focal_alpha(),
            focal_gamma: default_focal_gamma(),
            no_object_weight: default_no_object_weight(),
            temperature: default_temperature(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    #[serde(default = "default_two")]
    pub detection: u32,
    #[serde(default = "default_one")]
    pub action: u32,
    #[serde(default = "default_one")]
    pub caption: u32,
}

fn default_two() -> u32 {
    2
}
fn default_one() -> u32 {
    1
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { batch_size: 8, detection: 2, action: 1, caption: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DnConfig {
    pub enabled: bool,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_flip_prob")]
    pub label_flip_prob: f64,
}

fn default_noise_scale() -> f64 {
    0.4
}
fn default_flip_prob() -> f64 {
    0.2
}

impl Default for DnConfig {
    fn default() -> Self {
        Self { enabled: false, noise_scale: default_noise_scale(), label_flip_prob: default_flip_prob() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionBankConfig {
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_per_cluster")]
    pub per_cluster: usize,
    /// Optional prebuilt bank; built from the run's caption data otherwise.
    #[serde(default)]
    pub bank_path: Option<PathBuf>,
}

fn default_clusters() -> usize {
    100
}
fn default_per_cluster() -> usize {
    10
}

impl Default for CaptionBankConfig {
    fn default() -> Self {
        Self { clusters: default_clusters(), per_cluster: default_per_cluster(), bank_path: None }
    }
}

/// One dataset entry: declared spec plus exactly one source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub spec: DatasetSpec,
    #[serde(default)]
    pub synthetic_detection: Option<SyntheticDetectionConfig>,
    #[serde(default)]
    pub synthetic_action: Option<SyntheticActionConfig>,
    #[serde(default)]
    pub synthetic_caption: Option<SyntheticCaptionConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub total_steps: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Batches before this step contain detection samples only.
    #[serde(default)]
    pub action_start_step: u64,
    #[serde(default = "default_fusion")]
    pub fusion_mode: FusionMode,
    #[serde(default)]
    pub detach_rpq: bool,
    /// Frames sampled per video (`N_f`).
    #[serde(default = "default_n_frames")]
    pub video_frames: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub dn: DnConfig,
    #[serde(default)]
    pub caption_bank: CaptionBankConfig,
    /// External manifests; each contributes its declared datasets.
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
    /// Synthetic datasets.
    #[serde(default)]
    pub datasets: Vec<DatasetConfig>,
}

fn default_checkpoint_every() -> u64 {
    1000
}
fn default_fusion() -> FusionMode {
    FusionMode::Max
}
fn default_n_frames() -> usize {
    4
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize: {e}")))
    }

    /// Hash of the canonical serialized form, embedded in run logs so a log
    /// can be traced back to its exact configuration.
    pub fn config_hash(&self) -> Result<String> {
        let canon = self.to_toml()?;
        let digest = Sha256::digest(canon.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// The single person class index shared by every dataset that declares
    /// one.
    pub fn person_class(&self) -> Result<usize> {
        let mut person = None;
        for d in &self.datasets {
            if let Some(p) = d.spec.person_class_id {
                match person {
                    None => person = Some(p),
                    Some(prev) if prev != p => {
                        return Err(Error::Config(format!(
                            "datasets disagree on the person class ({prev} vs {p})"
                        )))
                    }
                    _ => {}
                }
            }
        }
        person.ok_or_else(|| Error::Config("no dataset declares a person class".into()))
    }

    /// Every violated constraint, exhaustively.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.model.validate();
        if self.total_steps == 0 {
            errs.push("total_steps must be positive".into());
        }
        if self.batch.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if self.batch.detection == 0 && self.batch.action == 0 && self.batch.caption == 0 {
            errs.push("batch plan must activate at least one group".into());
        }
        if self.optimizer.learning_rate <= 0.0 {
            errs.push("learning_rate must be positive".into());
        }
        if self.loss.temperature <= 0.0 {
            errs.push("temperature must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.loss.focal_alpha) {
            errs.push("focal_alpha must lie in [0,1]".into());
        }
        if self.video_frames == 0 {
            errs.push("video_frames must be positive".into());
        }
        if self.dn.enabled && !(0.0..=1.0).contains(&self.dn.label_flip_prob) {
            errs.push("label_flip_prob must lie in [0,1]".into());
        }
        if self.datasets.is_empty() && self.manifests.is_empty() {
            errs.push("at least one dataset or manifest is required".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if !names.insert(d.spec.name.clone()) {
                errs.push(format!("duplicate dataset name {:?}", d.spec.name));
            }
            let sources = [
                d.synthetic_detection.is_some(),
                d.synthetic_action.is_some(),
                d.synthetic_caption.is_some(),
            ]
            .iter()
            .filter(|&&s| s)
            .count();
            if sources != 1 {
                errs.push(format!(
                    "dataset {:?} must declare exactly one synthetic source",
                    d.spec.name
                ));
            }
            match d.spec.kind {
                DatasetKind::Detection if d.synthetic_detection.is_none() => {
                    errs.push(format!("dataset {:?}: detection kind needs synthetic_detection", d.spec.name))
                }
                DatasetKind::ActionImage | DatasetKind::ActionVideo
                    if d.synthetic_action.is_none() =>
                {
                    errs.push(format!("dataset {:?}: action kind needs synthetic_action", d.spec.name))
                }
                DatasetKind::Caption if d.synthetic_caption.is_none() => {
                    errs.push(format!("dataset {:?}: caption kind needs synthetic_caption", d.spec.name))
                }
                _ => {}
            }
            for &v in &d.spec.verb_class_ids {
                if v >= self.model.num_verb_classes {
                    errs.push(format!(
                        "dataset {:?} declares verb id {v} outside C_a = {}",
                        d.spec.name, self.model.num_verb_classes
                    ));
                }
            }
            if let Some(a) = &d.synthetic_action {
                for v in &a.verb_ids {
                    if !d.spec.verb_class_ids.contains(v) {
                        errs.push(format!(
                            "dataset {:?}: generator verb id {v} outside declared set",
                            d.spec.name
                        ));
                    }
                }
            }
        }
        if self.person_class().is_err() && !self.datasets.is_empty() {
            errs.push("datasets must agree on exactly one person class".into());
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_toml() -> String {
        r#"
seed = 0
output_dir = "runs/demo"
total_steps = 10

[model]
embed_dim = 32
num_queries = 6
num_encoder_layers = 1
num_decoder_layers = 2
num_heads = 4
num_object_classes = 3
num_verb_classes = 4
rpq_threshold = 0.9
ffn_hidden_dim = 64
patch_size = 8
caption_proj_dim = 64

[optimizer]
learning_rate = 1e-3
decay_step = 8

[batch]
batch_size = 8
detection = 1
action = 1
caption = 0

[[datasets]]
name = "det"
kind = "detection"
person_class_id = 0

[datasets.synthetic_detection]
n_images = 4
n_boxes_range = [1, 2]
canvas = [32, 32]
num_object_classes = 3
person_class_id = 0
seed = 0

[[datasets]]
name = "act"
kind = "action_image"
verb_class_ids = [0, 1, 2, 3]
person_class_id = 0

[datasets.synthetic_action]
n_samples = 4
verb_ids = [0, 1]
n_frames = 1
persons_range = [1, 1]
canvas = [32, 32]
person_class_id = 0
seed = 1
"#
        .to_string()
    }

    #[test]
    fn parses_and_validates_demo_config() {
        let cfg = RunConfig::from_toml_str(&demo_toml()).unwrap();
        assert_eq!(cfg.model.num_queries, 6);
        assert_eq!(cfg.batch.caption, 0);
        let errs = cfg.validate();
        assert!(errs.is_empty(), "{errs:?}");
        assert_eq!(cfg.person_class().unwrap(), 0);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::from_toml_str(&demo_toml()).unwrap();
        let b = RunConfig::from_toml_str(&demo_toml()).unwrap();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        let mut c = RunConfig::from_toml_str(&demo_toml()).unwrap();
        c.seed = 7;
        assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
    }

    #[test]
    fn validation_collects_all_errors() {
        let mut cfg = RunConfig::from_toml_str(&demo_toml()).unwrap();
        cfg.total_steps = 0;
        cfg.optimizer.learning_rate = -1.0;
        cfg.loss.temperature = 0.0;
        let errs = cfg.validate();
        assert!(errs.len() >= 3, "{errs:?}");
    }

    #[test]
    fn verb_ids_outside_global_space_are_rejected() {
        let mut cfg = RunConfig::from_toml_str(&demo_toml()).unwrap();
        cfg.datasets[1].spec.verb_class_ids = vec![0, 99];
        assert!(cfg.validate().iter().any(|e| e.contains("outside C_a")));
    }

    #[test]
    fn bad_toml_is_a_config_error() {
        assert!(matches!(RunConfig::from_toml_str("= nonsense"), Err(Error::Config(_))));
    }
}
