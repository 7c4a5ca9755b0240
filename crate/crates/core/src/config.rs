//! Flat `key = value` run configuration shared by every mode.
//!
//! Resolution order: built-in defaults (the published hyperparameters), then
//! the `desk` preset if selected, then the config file, then overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SimilarityHead};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Synth,
    Features,
    Pretrain,
    Probe,
    Finetune,
    Eval,
    Ablate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Synth => "synth",
            Mode::Features => "features",
            Mode::Pretrain => "pretrain",
            Mode::Probe => "probe",
            Mode::Finetune => "finetune",
            Mode::Eval => "eval",
            Mode::Ablate => "ablate",
        }
    }

    /// Keys that must be set explicitly for this mode.
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            Mode::Synth => &[],
            Mode::Features => &["input"],
            Mode::Pretrain => &["pretrain_manifest"],
            Mode::Probe | Mode::Finetune => &["checkpoint", "train_manifest", "num_classes"],
            Mode::Eval => &["checkpoint", "test_manifest"],
            Mode::Ablate => &["pretrain_manifest", "train_manifest", "test_manifest", "num_classes"],
        }
    }
}

impl FromStr for Mode {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Ok(match s {
            "synth" => Mode::Synth,
            "features" => Mode::Features,
            "pretrain" => Mode::Pretrain,
            "probe" => Mode::Probe,
            "finetune" => Mode::Finetune,
            "eval" => Mode::Eval,
            "ablate" => Mode::Ablate,
            _ => return Err(()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Published hyperparameters.
    Paper,
    /// Scaled down to train on a CPU in minutes.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Bilinear,
    Cosine,
}

impl SimilarityKind {
    fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::Bilinear => "bilinear",
            SimilarityKind::Cosine => "cosine",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(SimilarityKind::Bilinear),
            "cosine" => Some(SimilarityKind::Cosine),
            _ => None,
        }
    }
}

/// How segment predictions are combined into a clip prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    Probabilities,
    Logits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub preset: Preset,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub similarity: SimilarityKind,
    pub temperature: f64,
    pub symmetric_loss: bool,
    pub encoder_channels: Vec<usize>,
    pub projection_dim: usize,
    pub num_classes: Option<usize>,
    pub prediction_average: Averaging,
    /// Write an intermediate checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub pretrain_manifest: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// WAV file or manifest for `features`.
    pub input: Option<PathBuf>,
    pub probe_epochs: usize,
    pub probe_batch_size: usize,
    pub probe_learning_rate: f64,
    pub ablation_batch_sizes: Vec<usize>,
    pub ablation_similarities: Vec<SimilarityKind>,
    pub synth_classes: usize,
    pub synth_clips_per_class: usize,
    pub synth_unlabeled_clips: usize,
    pub synth_clip_seconds: f64,
}

/// Every accepted key with a description of its type.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "one of synth|features|pretrain|probe|finetune|eval|ablate"),
    ("preset", "one of paper|desk"),
    ("seed", "a non-negative integer"),
    ("epochs", "a non-negative integer"),
    ("batch_size", "a positive integer"),
    ("learning_rate", "a positive real number"),
    ("similarity", "one of bilinear|cosine"),
    ("temperature", "a positive real number"),
    ("symmetric_loss", "true or false"),
    ("encoder_channels", "a comma-separated list of positive integers"),
    ("projection_dim", "a positive integer"),
    ("num_classes", "a positive integer"),
    ("prediction_average", "one of probabilities|logits"),
    ("checkpoint_every", "a non-negative integer"),
    ("pretrain_manifest", "a path"),
    ("train_manifest", "a path"),
    ("test_manifest", "a path"),
    ("checkpoint", "a path"),
    ("input", "a path"),
    ("probe_epochs", "a non-negative integer"),
    ("probe_batch_size", "a positive integer"),
    ("probe_learning_rate", "a positive real number"),
    ("ablation_batch_sizes", "a comma-separated list of positive integers"),
    ("ablation_similarities", "a comma-separated list of bilinear|cosine"),
    ("synth_classes", "a positive integer"),
    ("synth_clips_per_class", "a positive integer"),
    ("synth_unlabeled_clips", "a non-negative integer"),
    ("synth_clip_seconds", "a positive real number"),
];

impl RunConfig {
    /// Defaults for `mode` under `preset`.
    pub fn defaults(mode: Mode, preset: Preset) -> Self {
        let supervised = matches!(mode, Mode::Probe | Mode::Finetune | Mode::Eval);
        let mut cfg = RunConfig {
            mode,
            preset,
            seed: 0,
            epochs: if supervised { 100 } else { 500 },
            batch_size: if supervised { 64 } else { 1024 },
            learning_rate: if supervised { 1e-3 } else { 1e-4 },
            similarity: SimilarityKind::Bilinear,
            temperature: 0.2,
            symmetric_loss: false,
            encoder_channels: vec![32, 64, 128, 256],
            projection_dim: 512,
            num_classes: None,
            prediction_average: Averaging::Probabilities,
            checkpoint_every: 0,
            pretrain_manifest: None,
            train_manifest: None,
            test_manifest: None,
            checkpoint: None,
            input: None,
            probe_epochs: 100,
            probe_batch_size: 64,
            probe_learning_rate: 1e-3,
            ablation_batch_sizes: vec![256, 512, 1024, 2048],
            ablation_similarities: vec![SimilarityKind::Bilinear, SimilarityKind::Cosine],
            synth_classes: 4,
            synth_clips_per_class: 64,
            synth_unlabeled_clips: 256,
            synth_clip_seconds: 4.0,
        };
        if preset == Preset::Desk {
            cfg.encoder_channels = DESK_CHANNELS.to_vec();
            cfg.projection_dim = 64;
            if !supervised {
                cfg.epochs = 50;
                cfg.batch_size = 64;
            }
            cfg.ablation_batch_sizes = vec![16, 64, 128];
        }
        cfg
    }

    pub fn head(&self) -> SimilarityHead {
        match self.similarity {
            SimilarityKind::Bilinear => SimilarityHead::Bilinear,
            SimilarityKind::Cosine => SimilarityHead::Cosine {
                temperature: self.temperature,
            },
        }
    }

    pub fn model_config(&self, input_shape: [usize; 2]) -> ModelConfig {
        ModelConfig {
            input_shape,
            encoder_channels: self.encoder_channels.clone(),
            projection_dim: self.projection_dim,
            num_classes: None,
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || {
            let expected = KEYS.iter().find(|(k, _)| *k == key).map_or("?", |(_, t)| t);
            Error::Config(format!(
                "config key `{key}`: expected {expected}, got `{value}`"
            ))
        };
        let int = || value.parse::<usize>().map_err(|_| bad());
        let pos_int = || int().and_then(|v| if v > 0 { Ok(v) } else { Err(bad()) });
        let pos_real = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(bad)
        };
        let int_list = || {
            value
                .split(',')
                .map(|s| s.trim().parse::<usize>().ok().filter(|&v| v > 0))
                .collect::<Option<Vec<_>>>()
                .filter(|v| !v.is_empty())
                .ok_or_else(bad)
        };
        let path = || Ok::<_, Error>(Some(PathBuf::from(value)));
        match key {
            "mode" => self.mode = value.parse().map_err(|_| bad())?,
            "preset" => {
                self.preset = match value {
                    "paper" => Preset::Paper,
                    "desk" => Preset::Desk,
                    _ => return Err(bad()),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "epochs" => self.epochs = int()?,
            "batch_size" => self.batch_size = pos_int()?,
            "learning_rate" => self.learning_rate = pos_real()?,
            "similarity" => self.similarity = SimilarityKind::parse(value).ok_or_else(bad)?,
            "temperature" => self.temperature = pos_real()?,
            "symmetric_loss" => self.symmetric_loss = value.parse().map_err(|_| bad())?,
            "encoder_channels" => self.encoder_channels = int_list()?,
            "projection_dim" => self.projection_dim = pos_int()?,
            "num_classes" => self.num_classes = Some(pos_int()?),
            "prediction_average" => {
                self.prediction_average = match value {
                    "probabilities" => Averaging::Probabilities,
                    "logits" => Averaging::Logits,
                    _ => return Err(bad()),
                }
            }
            "checkpoint_every" => self.checkpoint_every = int()?,
            "pretrain_manifest" => self.pretrain_manifest = path()?,
            "train_manifest" => self.train_manifest = path()?,
            "test_manifest" => self.test_manifest = path()?,
            "checkpoint" => self.checkpoint = path()?,
            "input" => self.input = path()?,
            "probe_epochs" => self.probe_epochs = int()?,
            "probe_batch_size" => self.probe_batch_size = pos_int()?,
            "probe_learning_rate" => self.probe_learning_rate = pos_real()?,
            "ablation_batch_sizes" => self.ablation_batch_sizes = int_list()?,
            "ablation_similarities" => {
                self.ablation_similarities = value
                    .split(',')
                    .map(|s| SimilarityKind::parse(s.trim()))
                    .collect::<Option<Vec<_>>>()
                    .filter(|v| !v.is_empty())
                    .ok_or_else(bad)?
            }
            "synth_classes" => self.synth_classes = pos_int()?,
            "synth_clips_per_class" => self.synth_clips_per_class = pos_int()?,
            "synth_unlabeled_clips" => self.synth_unlabeled_clips = int()?,
            "synth_clip_seconds" => self.synth_clip_seconds = pos_real()?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("mode", self.mode.as_str().into());
        put(
            "preset",
            match self.preset {
                Preset::Paper => "paper",
                Preset::Desk => "desk",
            }
            .into(),
        );
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", format!("{:e}", self.learning_rate));
        put("similarity", self.similarity.as_str().into());
        put("temperature", self.temperature.to_string());
        put("symmetric_loss", self.symmetric_loss.to_string());
        put("encoder_channels", list(&self.encoder_channels));
        put("projection_dim", self.projection_dim.to_string());
        if let Some(c) = self.num_classes {
            put("num_classes", c.to_string());
        }
        put(
            "prediction_average",
            match self.prediction_average {
                Averaging::Probabilities => "probabilities",
                Averaging::Logits => "logits",
            }
            .into(),
        );
        put("checkpoint_every", self.checkpoint_every.to_string());
        for (k, v) in [
            ("pretrain_manifest", &self.pretrain_manifest),
            ("train_manifest", &self.train_manifest),
            ("test_manifest", &self.test_manifest),
            ("checkpoint", &self.checkpoint),
            ("input", &self.input),
        ] {
            if let Some(p) = v {
                put(k, p.display().to_string());
            }
        }
        put("probe_epochs", self.probe_epochs.to_string());
        put("probe_batch_size", self.probe_batch_size.to_string());
        put("probe_learning_rate", format!("{:e}", self.probe_learning_rate));
        put("ablation_batch_sizes", list(&self.ablation_batch_sizes));
        put(
            "ablation_similarities",
            self.ablation_similarities
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("synth_classes", self.synth_classes.to_string());
        put("synth_clips_per_class", self.synth_clips_per_class.to_string());
        put("synth_unlabeled_clips", self.synth_unlabeled_clips.to_string());
        put("synth_clip_seconds", self.synth_clip_seconds.to_string());
        out
    }
}

/// Encoder channels of the desk preset.
pub const DESK_CHANNELS: [usize; 4] = [8, 16, 16, 32];

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected `key = value`, got `{raw}`", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Resolves a configuration from file text plus overrides (applied last).
pub fn parse_config_text(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut entries = parse_lines(text)?;
    entries.extend(overrides.iter().cloned());
    for (k, _) in &entries {
        if !KEYS.iter().any(|(key, _)| key == k) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
    }
    let last = |key: &str| entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

    let mut probe = RunConfig::defaults(Mode::Pretrain, Preset::Paper);
    if let Some(m) = last("mode") {
        probe.set("mode", m)?;
    } else {
        return Err(Error::Config("missing required config keys: mode".into()));
    }
    if let Some(p) = last("preset") {
        probe.set("preset", p)?;
    }
    let mut cfg = RunConfig::defaults(probe.mode, probe.preset);
    for (k, v) in &entries {
        cfg.set(k, v)?;
    }

    let missing: Vec<&str> = cfg
        .mode
        .required_keys()
        .iter()
        .copied()
        .filter(|k| last(k).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing required config keys for {}: {}",
            cfg.mode.as_str(),
            missing.join(", ")
        )));
    }
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_text(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    const PRETRAIN: &str = "mode = pretrain\npretrain_manifest = data/p.jsonl\n";

    #[test]
    fn override_takes_precedence() {
        let text = format!("{PRETRAIN}batch_size = 64\n");
        let cfg = parse_config_text(&text, &ov(&[("batch_size", "128")])).unwrap();
        assert_eq!(cfg.batch_size, 128);
        let cfg = parse_config_text(&text, &[]).unwrap();
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn type_errors_name_the_expected_type() {
        let err = parse_config_text(&format!("{PRETRAIN}learning_rate = fast\n"), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("positive real"), "{msg}");
        assert!(parse_config_text(PRETRAIN, &ov(&[("batch_size", "0")])).is_err());
        assert!(parse_config_text(PRETRAIN, &ov(&[("encoder_channels", "8,x")])).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config_text(&format!("{PRETRAIN}batchsize = 3\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("`batchsize`"));
        let err = parse_config_text(PRETRAIN, &ov(&[("nope", "1")])).unwrap_err();
        assert!(err.to_string().contains("`nope`"));
    }

    #[test]
    fn missing_mode_keys_are_listed() {
        let err = parse_config_text("mode = probe\nnum_classes = 3\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("checkpoint") && msg.contains("train_manifest"), "{msg}");
        assert!(!msg.contains("num_classes"), "{msg}");
    }

    #[test]
    fn defaults_follow_published_values_and_desk_shrinks_scale() {
        let paper = parse_config_text(PRETRAIN, &[]).unwrap();
        assert_eq!(paper.learning_rate, 1e-4);
        assert_eq!(paper.epochs, 500);
        assert_eq!(paper.projection_dim, 512);
        assert_eq!(paper.encoder_channels, vec![32, 64, 128, 256]);

        let desk = parse_config_text(&format!("{PRETRAIN}preset = desk\n"), &[]).unwrap();
        assert_eq!(desk.learning_rate, 1e-4);
        assert_eq!(desk.batch_size, 64);
        assert_eq!(desk.projection_dim, 64);

        let probe = parse_config_text(
            "mode = probe\ncheckpoint = c\ntrain_manifest = t\nnum_classes = 4\n",
            &[],
        )
        .unwrap();
        assert_eq!(probe.learning_rate, 1e-3);
        assert_eq!(probe.batch_size, 64);
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "mode = ablate\npreset = desk\nseed = 9\npretrain_manifest = a b/p.jsonl\n\
                    train_manifest = t\ntest_manifest = e\nnum_classes = 4\nsimilarity = cosine\n\
                    learning_rate = 0.00025 # comment\nablation_similarities = cosine\n";
        let cfg = parse_config_text(text, &[]).unwrap();
        let again = parse_config_text(&cfg.to_text(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.learning_rate, 2.5e-4);
        assert_eq!(cfg.pretrain_manifest, Some(PathBuf::from("a b/p.jsonl")));
    }
}
