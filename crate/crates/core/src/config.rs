//! Flat dotted-key run configuration.
//!
//! The config file is plain text, one `key = value` per line, `#` comments.
//! Unknown keys are rejected and every value is type-checked. The canonical
//! serialization (all keys, sorted) is hashed into a 16-hex-digit id that is
//! stamped into every artifact; `out_dir` is excluded from the hash so moving
//! outputs does not orphan checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::augment::{StrongAugmentConfig, WeakAugmentConfig};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::pcsw::{RatioMode, WindowBand};
use crate::trainer::{AdamWConfig, PromptMode, TrainerConfig};
use crate::volumes::SynthConfig;

macro_rules! config_keys {
    ($(($field:ident, $key:literal, $ty:ty, $default:expr),)*) => {
        /// Every tunable of the pipeline, addressable by dotted key.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key,)*];

            /// Sets one key from its textual value, type-checked.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = parse_value::<$ty>(key, value)?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }

            fn get(&self, key: &str) -> String {
                match key {
                    $($key => format_value(&self.$field),)*
                    _ => unreachable!("key list is exhaustive"),
                }
            }
        }
    };
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse(value).map_err(|e| Error::Config(format!("key `{key}`: {e}")))
}

fn format_value<T: ConfigValue>(v: &T) -> String {
    v.format()
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn format(&self) -> String;
}

impl ConfigValue for u64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.trim().parse().map_err(|_| format!("`{s}` is not an unsigned integer"))
    }
    fn format(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.trim().parse().map_err(|_| format!("`{s}` is not an unsigned integer"))
    }
    fn format(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
        if !v.is_finite() {
            return Err(format!("`{s}` is not finite"));
        }
        Ok(v)
    }
    fn format(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(format!("`{other}` is not a boolean")),
        }
    }
    fn format(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(s.trim().to_string())
    }
    fn format(&self) -> String {
        self.clone()
    }
}

config_keys! {
    (seed, "seed", u64, 7),
    (out_dir, "out_dir", String, String::from("runs/default")),
    (data_manifest, "data.manifest", String, String::new()),
    (data_count, "data.count", usize, 40),
    (data_test_count, "data.test_count", usize, 8),
    (data_slices, "data.slices", usize, 12),
    (data_height, "data.height", usize, 64),
    (data_width, "data.width", usize, 64),
    (data_num_classes, "data.num_classes", usize, 2),
    (data_labeled_fraction, "data.labeled_fraction", f64, 0.1),
    (data_lesion_contrast, "data.lesion_contrast", f64, 0.30),
    (data_noise, "data.noise", f64, 0.05),
    (data_distractors_min, "data.distractors_min", usize, 6),
    (data_distractors_max, "data.distractors_max", usize, 12),
    (augment_crop_size, "augment.crop_size", usize, 64),
    (augment_scale_min, "augment.scale_min", f64, 0.5),
    (augment_scale_max, "augment.scale_max", f64, 2.0),
    (augment_flip_prob, "augment.flip_prob", f64, 0.5),
    (augment_jitter_prob, "augment.jitter_prob", f64, 0.8),
    (augment_brightness, "augment.brightness", f64, 0.15),
    (augment_contrast, "augment.contrast", f64, 0.2),
    (augment_gamma, "augment.gamma", f64, 0.2),
    (augment_grayscale_prob, "augment.grayscale_prob", f64, 0.2),
    (augment_blur_prob, "augment.blur_prob", f64, 0.5),
    (augment_blur_sigma_min, "augment.blur_sigma_min", f64, 0.3),
    (augment_blur_sigma_max, "augment.blur_sigma_max", f64, 1.2),
    (augment_cutmix_prob, "augment.cutmix_prob", f64, 0.5),
    (augment_cutmix_frac_min, "augment.cutmix_frac_min", f64, 0.25),
    (augment_cutmix_frac_max, "augment.cutmix_frac_max", f64, 0.5),
    (augment_dropout_p, "augment.dropout_p", f64, 0.5),
    (backbone_channels, "backbone.channels", String, String::from("8,16,24")),
    (backbone_leak, "backbone.leak", f64, 0.1),
    (dfe_enabled, "dfe.enabled", bool, true),
    (pcsw_enabled, "pcsw.enabled", bool, true),
    (pcsw_tau, "pcsw.tau", f64, 0.8),
    (pcsw_open_band, "pcsw.open_band", bool, false),
    (pcsw_union_ratio, "pcsw.union_ratio", bool, false),
    (pcsw_refresh_interval, "pcsw.refresh_interval", u64, 50),
    (trainer_steps, "trainer.steps", u64, 400),
    (trainer_warmup_steps, "trainer.warmup_steps", u64, 40),
    (trainer_peak_lr, "trainer.peak_lr", f64, 1e-4),
    (trainer_beta1, "trainer.beta1", f64, 0.9),
    (trainer_beta2, "trainer.beta2", f64, 0.999),
    (trainer_weight_decay, "trainer.weight_decay", f64, 1e-4),
    (trainer_eps, "trainer.eps", f64, 1e-8),
    (trainer_batch_labeled, "trainer.batch_labeled", usize, 2),
    (trainer_batch_unlabeled, "trainer.batch_unlabeled", usize, 2),
    (trainer_ema_max, "trainer.ema_max", f64, 0.999),
    (trainer_pseudo_from_teacher, "trainer.pseudo_from_teacher", bool, true),
    (trainer_head_loss_weight, "trainer.head_loss_weight", f64, 1.0),
    (trainer_supervised_only, "trainer.supervised_only", bool, false),
    (trainer_prompt_labeled, "trainer.prompt_labeled", bool, true),
    (trainer_checkpoint_interval, "trainer.checkpoint_interval", u64, 200),
    (eval_prompt_mode, "eval.prompt_mode", String, String::from("auto")),
    (sweep_taus, "sweep.taus", String, String::from("0,0.2,0.4,0.6,0.8,1.0")),
    (sweep_seeds, "sweep.seeds", String, String::from("7,8,9")),
}

impl RunConfig {
    /// Parses a config file; later lines override earlier ones.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one `--set key=value` override.
    pub fn apply_set(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::Config(format!("--set expects `key=value`, got `{assignment}`")));
        };
        self.set(key.trim(), value.trim())
    }

    /// Canonical serialization: every key, sorted, one per line.
    pub fn to_canonical_string(&self) -> String {
        let mut keys: Vec<&str> = Self::KEYS.to_vec();
        keys.sort_unstable();
        let mut out = String::new();
        for key in keys {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// 16-hex-digit hash of the canonical config, excluding `out_dir`.
    pub fn hash(&self) -> String {
        let mut keys: Vec<&str> = Self::KEYS.iter().copied().filter(|k| *k != "out_dir").collect();
        keys.sort_unstable();
        let mut hasher = Sha256::new();
        for key in keys {
            hasher.update(key.as_bytes());
            hasher.update(b"=");
            hasher.update(self.get(key).as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |key: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("`{key}` = {v} must be in [0,1]")));
            }
            Ok(())
        };
        prob("pcsw.tau", self.pcsw_tau)?;
        prob("augment.flip_prob", self.augment_flip_prob)?;
        prob("augment.jitter_prob", self.augment_jitter_prob)?;
        prob("augment.grayscale_prob", self.augment_grayscale_prob)?;
        prob("augment.blur_prob", self.augment_blur_prob)?;
        prob("augment.cutmix_prob", self.augment_cutmix_prob)?;
        prob("trainer.ema_max", self.trainer_ema_max)?;
        if !(self.augment_dropout_p >= 0.0 && self.augment_dropout_p < 1.0) {
            return Err(Error::Config("`augment.dropout_p` must be in [0,1)".into()));
        }
        if !(self.data_labeled_fraction > 0.0 && self.data_labeled_fraction <= 1.0) {
            return Err(Error::Config("`data.labeled_fraction` must be in (0,1]".into()));
        }
        if self.augment_scale_min > self.augment_scale_max || self.augment_scale_min <= 0.0 {
            return Err(Error::Config("augment scale range is invalid".into()));
        }
        if self.trainer_warmup_steps >= self.trainer_steps {
            return Err(Error::Config("`trainer.warmup_steps` must be below `trainer.steps`".into()));
        }
        if self.trainer_batch_labeled < 1 {
            return Err(Error::Config("`trainer.batch_labeled` must be >= 1".into()));
        }
        if !matches!(self.eval_prompt_mode.as_str(), "auto" | "pcsw" | "raw" | "none") {
            return Err(Error::Config(format!(
                "`eval.prompt_mode` must be auto|pcsw|raw|none, got `{}`",
                self.eval_prompt_mode
            )));
        }
        self.backbone()?;
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.data_slices, self.data_height, self.data_width)
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let mut channels = Vec::new();
        for part in self.backbone_channels.split(',') {
            let c: usize = part
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("`backbone.channels`: bad entry `{part}`")))?;
            channels.push(c);
        }
        let cfg = BackboneConfig {
            in_channels: 1,
            num_classes: self.data_num_classes,
            level_channels: channels,
            leak: self.backbone_leak,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            lesion_contrast: self.data_lesion_contrast,
            noise: self.data_noise,
            distractors: (self.data_distractors_min, self.data_distractors_max),
        }
    }

    pub fn weak(&self) -> WeakAugmentConfig {
        WeakAugmentConfig {
            scale_min: self.augment_scale_min,
            scale_max: self.augment_scale_max,
            crop_size: self.augment_crop_size,
            flip_prob: self.augment_flip_prob,
        }
    }

    pub fn strong(&self) -> StrongAugmentConfig {
        StrongAugmentConfig {
            jitter_prob: self.augment_jitter_prob,
            brightness: self.augment_brightness,
            contrast: self.augment_contrast,
            gamma: self.augment_gamma,
            grayscale_prob: self.augment_grayscale_prob,
            blur_prob: self.augment_blur_prob,
            blur_sigma_min: self.augment_blur_sigma_min,
            blur_sigma_max: self.augment_blur_sigma_max,
            cutmix_prob: self.augment_cutmix_prob,
            cutmix_frac_min: self.augment_cutmix_frac_min,
            cutmix_frac_max: self.augment_cutmix_frac_max,
        }
    }

    pub fn band(&self) -> WindowBand {
        if self.pcsw_open_band { WindowBand::Open } else { WindowBand::Closed }
    }

    pub fn ratio_mode(&self) -> RatioMode {
        if self.pcsw_union_ratio { RatioMode::UnionForeground } else { RatioMode::PerClass }
    }

    pub fn prompt_mode(&self) -> PromptMode {
        match self.eval_prompt_mode.as_str() {
            "pcsw" => PromptMode::Pcsw,
            "raw" => PromptMode::Raw,
            "none" => PromptMode::None,
            _ => {
                if self.pcsw_enabled {
                    PromptMode::Pcsw
                } else {
                    PromptMode::Raw
                }
            }
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            steps: self.trainer_steps,
            warmup_steps: self.trainer_warmup_steps,
            peak_lr: self.trainer_peak_lr,
            adamw: AdamWConfig {
                beta1: self.trainer_beta1,
                beta2: self.trainer_beta2,
                eps: self.trainer_eps,
                weight_decay: self.trainer_weight_decay,
            },
            batch_labeled: self.trainer_batch_labeled,
            batch_unlabeled: self.trainer_batch_unlabeled,
            ema_max: self.trainer_ema_max,
            pseudo_from_teacher: self.trainer_pseudo_from_teacher,
            head_loss_weight: self.trainer_head_loss_weight,
            supervised_only: self.trainer_supervised_only,
            prompt_labeled: self.trainer_prompt_labeled,
            dropout_p: self.augment_dropout_p,
            dfe_enabled: self.dfe_enabled,
            checkpoint_interval: self.trainer_checkpoint_interval,
            weak: self.weak(),
            strong: self.strong(),
            pcsw_enabled: self.pcsw_enabled,
            tau: self.pcsw_tau,
            refresh_interval: self.pcsw_refresh_interval,
            band: self.band(),
            ratio_mode: self.ratio_mode(),
            eval_prompt_mode: self.prompt_mode(),
        }
    }

    pub fn sweep_taus(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for part in self.sweep_taus.split(',') {
            let v: f64 = part
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("`sweep.taus`: bad entry `{part}`")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("`sweep.taus`: {v} outside [0,1]")));
            }
            out.push(v);
        }
        if out.is_empty() {
            return Err(Error::Config("`sweep.taus` is empty".into()));
        }
        Ok(out)
    }

    pub fn sweep_seeds(&self) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for part in self.sweep_seeds.split(',') {
            let v: u64 = part
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("`sweep.seeds`: bad entry `{part}`")))?;
            out.push(v);
        }
        if out.is_empty() {
            return Err(Error::Config("`sweep.seeds` is empty".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("trainer.qux", "1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn type_errors_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("trainer.steps", "banana").unwrap_err();
        assert!(err.to_string().contains("trainer.steps"));
    }

    #[test]
    fn hash_ignores_out_dir_but_tracks_semantics() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        b.set("out_dir", "elsewhere").unwrap();
        assert_eq!(a.hash(), b.hash());
        a.set("pcsw.tau", "0.6").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn paper_defaults_are_pinned() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pcsw_tau, 0.8);
        assert_eq!(cfg.trainer_peak_lr, 1e-4);
        assert_eq!(cfg.trainer_beta1, 0.9);
        assert_eq!(cfg.trainer_beta2, 0.999);
        assert_eq!(cfg.augment_dropout_p, 0.5);
        assert_eq!(cfg.augment_scale_min, 0.5);
        assert_eq!(cfg.augment_scale_max, 2.0);
        assert_eq!(cfg.sweep_taus().unwrap(), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("pcsw.tau = 0.5\ntrainer.steps = 99 # comment\n\n# full line comment\n").unwrap();
        assert_eq!(cfg.pcsw_tau, 0.5);
        assert_eq!(cfg.trainer_steps, 99);
        let canon = cfg.to_canonical_string();
        let mut re = RunConfig::default();
        re.apply_text(&canon).unwrap();
        assert_eq!(re, cfg);
        assert_eq!(re.hash(), cfg.hash());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = RunConfig::default();
        cfg.set("pcsw.tau", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
