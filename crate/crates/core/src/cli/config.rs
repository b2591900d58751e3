//! The run configuration file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::backbone::{BackboneKind, FinetuneConfig, PretrainConfig};
use crate::dataset::{AugmentConfig, BenchmarkConfig, Split};
use crate::imaging::DetectionConfig;
use crate::nn::{Grid, TrainConfig, DEFAULT_HIDDEN};
use crate::uncertainty::FlagThresholds;

/// Every knob of every command. Missing keys take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `0` uses every core.
    pub threads: usize,
    pub paths: PathsConfig,
    pub synth: BenchmarkConfig,
    pub detection: DetectionConfig,
    pub split: SplitConfig,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub grid: Grid,
    pub finetune: FinetuneConfig,
    pub mc: McConfig,
}

/// File locations. Empty entries resolve to fixed names under `--out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Plate photographs, optionally in one sub-directory per class.
    pub plates: String,
    /// Specimen crops, in one sub-directory per class.
    pub specimens: String,
    pub manifest: String,
    pub backbone_checkpoint: String,
    pub head_checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Interchange file of the pretrained kind.
    pub model_path: String,
    /// Training of the built-in kind when no checkpoint exists yet.
    pub pretrain: PretrainConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::BuiltinSmall,
            model_path: String::new(),
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub passes: usize,
    /// Split analysed by `mc-dropout` and `evaluate`.
    pub split: Split,
    pub confidence: f64,
    pub margin: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        let t = FlagThresholds::default();
        Self {
            passes: 100,
            split: Split::Test,
            confidence: t.confidence,
            margin: t.margin,
        }
    }
}

impl McConfig {
    pub fn thresholds(&self) -> FlagThresholds {
        FlagThresholds {
            confidence: self.confidence,
            margin: self.margin,
        }
    }
}

/// Dotted paths of keys in `given` that the defaults do not have.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (known.get(k), v) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(gt)) => unknown_keys(gt, kt, &path, out),
            _ => {}
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let given: toml::Table = text.parse().map_err(|e| invalid(format!("config: {e}")))?;
        let known = toml::Table::try_from(Self::default()).map_err(invalid)?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::Validation(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.split;
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9 || [s.train, s.val, s.test].iter().any(|f| *f < 0.0) {
            return Err(invalid(format!(
                "split fractions must be non-negative and sum to 1, got {} + {} + {}",
                s.train, s.val, s.test
            )));
        }
        self.augment.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        self.finetune.validate().map_err(invalid)?;
        self.synth.validate().map_err(invalid)?;
        if !(0.0..1.0).contains(&self.head.dropout_rate) {
            return Err(invalid("head.dropout_rate must be in [0, 1)"));
        }
        if self.head.hidden.contains(&0) {
            return Err(invalid("head.hidden widths must be positive"));
        }
        if self.mc.passes == 0 {
            return Err(invalid("mc.passes must be at least 1"));
        }
        if self.mc.split == Split::Unassigned {
            return Err(invalid("mc.split must be train, val or test"));
        }
        let blocks: BTreeSet<usize> = self.finetune.trainable_blocks.iter().copied().collect();
        if blocks.iter().any(|b| !(1..=crate::backbone::NUM_BLOCKS).contains(b)) {
            return Err(invalid("finetune.trainable_blocks must be block ids 1 to 5"));
        }
        if self.backbone.kind == BackboneKind::PretrainedInterchange && self.backbone.model_path.is_empty() {
            return Err(invalid("backbone.model_path is required for the pretrained kind"));
        }
        if self.detection.min_area == 0 || !(self.detection.sigma > 0.0) {
            return Err(invalid("detection.min_area and detection.sigma must be positive"));
        }
        Ok(())
    }
}

/// Concrete artifact locations under the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub out: PathBuf,
    pub plates: PathBuf,
    pub specimens: PathBuf,
    pub manifest: PathBuf,
    pub backbone: PathBuf,
    pub head: PathBuf,
}

impl Layout {
    pub fn new(out: &Path, paths: &PathsConfig) -> Self {
        let pick = |given: &str, default: &str| {
            if given.is_empty() {
                out.join(default)
            } else {
                PathBuf::from(given)
            }
        };
        Self {
            out: out.to_path_buf(),
            plates: pick(&paths.plates, "plates"),
            specimens: pick(&paths.specimens, "specimens"),
            manifest: pick(&paths.manifest, "manifest.json"),
            backbone: pick(&paths.backbone_checkpoint, "backbone.ckpt"),
            head: pick(&paths.head_checkpoint, "head.ckpt"),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn defaults_mirror_the_published_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.finetune.backbone_lr, 1e-7);
        assert_eq!(cfg.detection.min_area, 1024);
        assert_eq!((cfg.split.train, cfg.split.val, cfg.split.test), (0.8, 0.1, 0.1));
        assert_eq!(cfg.mc.passes, 100);
        assert_eq!(cfg.grid.entries(1e-4).len(), 72);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::from_toml("sede = 1\n[train]\nbatch = 3\nbatch_size = 8\n[nope]\nx = 1\n").unwrap_err();
        let msg = err.to_string();
        for key in ["sede", "train.batch", "nope"] {
            assert!(msg.contains(key), "{msg}");
        }
        assert!(!msg.contains("batch_size"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn partial_config_keeps_other_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[train]\nmax_epochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.max_epochs, 2);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let err = RunConfig::from_toml("[split]\ntrain = 0.7\nval = 0.1\ntest = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("sum to 1"));
        assert!(RunConfig::from_toml("[mc]\npasses = 0\n").is_err());
        assert!(RunConfig::from_toml("[backbone]\nkind = \"pretrained_interchange\"\n").is_err());
    }

    #[test]
    fn layout_resolves_empty_paths_under_out() {
        let l = Layout::new(
            Path::new("run"),
            &PathsConfig {
                head_checkpoint: "elsewhere/h.ckpt".into(),
                ..PathsConfig::default()
            },
        );
        assert_eq!(l.manifest, Path::new("run/manifest.json"));
        assert_eq!(l.head, Path::new("elsewhere/h.ckpt"));
    }
}
