//! Run configuration: published hyperparameter defaults, `key = value`
//! config-file parsing, and the mapping onto a model profile.

use crate::cscm::HeadKind;
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::text::BpeVocab;

/// Everything that defines a training run. Serialized verbatim into
/// checkpoints and reports so a run is reproducible from its artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Per-epoch exponential decay factor.
    pub gamma: f64,
    pub weight_decay: f64,
    /// SGD momentum; the published recipe names plain SGD, so 0 by default.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fixed similarity scale inside the loss (1.0 = the loss equation as
    /// written).
    pub scale: f64,
    /// Learn a CLIP-style log-scale instead of keeping `scale` fixed.
    pub learnable_scale: bool,
    /// Prompt template; `{}` marks the label.
    pub template: String,
    /// Model profile: "desk" or "full".
    pub profile: String,
    pub mel: MelConfig,
    /// Pad/crop every clip to this many seconds before mel extraction;
    /// 0 leaves clips untouched.
    pub clip_secs: f64,
    /// Dataset name: "synth", "esc50", or "us8k".
    pub dataset: String,
    /// 1-based fold held out for evaluation.
    pub eval_fold: usize,
    /// Synthetic dataset shape (ignored for file-backed datasets).
    pub synth_classes: usize,
    pub synth_clips_per_class: usize,
    /// Audio head: the convolutional similarity head or the mean-pool
    /// ablation baseline.
    pub head: HeadKind,
}

fn desk_mel() -> MelConfig {
    MelConfig {
        n_fft: 256,
        hop: 128,
        n_mels: 32,
        fmin: 50.0,
        fmax: 3800.0,
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 8e-5,
            gamma: 0.96,
            weight_decay: 5e-4,
            momentum: 0.0,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            scale: 1.0,
            learnable_scale: false,
            template: "an audio clip of {}".into(),
            profile: "desk".into(),
            mel: desk_mel(),
            clip_secs: 0.0,
            dataset: "synth".into(),
            eval_fold: 2,
            synth_classes: 4,
            synth_clips_per_class: 32,
            head: HeadKind::Cscm,
        }
    }
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment; later keys win.
    /// A `profile` line resets the mel defaults for that profile, so put
    /// it before any mel overrides.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {:?}", i + 1, raw))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {:?} for {}", value, key)))
        }
        match key {
            "lr0" => self.lr0 = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "learnable_scale" => self.learnable_scale = num(key, value)?,
            "template" => self.template = value.to_string(),
            "profile" => {
                self.profile = value.to_string();
                self.mel = match value {
                    "desk" => desk_mel(),
                    "full" => MelConfig::default(),
                    other => return Err(Error::Config(format!("unknown profile {:?}", other))),
                };
            }
            "mel_n_fft" => self.mel.n_fft = num(key, value)?,
            "mel_hop" => self.mel.hop = num(key, value)?,
            "mel_bins" => self.mel.n_mels = num(key, value)?,
            "mel_fmin" => self.mel.fmin = num(key, value)?,
            "mel_fmax" => self.mel.fmax = num(key, value)?,
            "clip_secs" => self.clip_secs = num(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "eval_fold" => self.eval_fold = num(key, value)?,
            "synth_classes" => self.synth_classes = num(key, value)?,
            "synth_clips_per_class" => self.synth_clips_per_class = num(key, value)?,
            "head" => self.head = HeadKind::parse(value)?,
            other => return Err(Error::Config(format!("unknown key {:?}", other))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || self.weight_decay < 0.0 || self.scale <= 0.0 {
            return Err(Error::Config("lr0 and scale must be positive".into()));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_fold == 0 {
            return Err(Error::Config("folds are 1-based; eval_fold 0 is invalid".into()));
        }
        match self.profile.as_str() {
            "desk" | "full" => Ok(()),
            other => Err(Error::Config(format!("unknown profile {:?}", other))),
        }
    }

    /// Canonical serialization; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        format!(
            "profile = {}\nlr0 = {}\ngamma = {}\nweight_decay = {}\nmomentum = {}\n\
             batch_size = {}\nepochs = {}\nseed = {}\nscale = {}\nlearnable_scale = {}\n\
             template = {}\nmel_n_fft = {}\nmel_hop = {}\nmel_bins = {}\nmel_fmin = {}\n\
             mel_fmax = {}\nclip_secs = {}\ndataset = {}\neval_fold = {}\n\
             synth_classes = {}\nsynth_clips_per_class = {}\nhead = {}\n",
            self.profile,
            self.lr0,
            self.gamma,
            self.weight_decay,
            self.momentum,
            self.batch_size,
            self.epochs,
            self.seed,
            self.scale,
            self.learnable_scale,
            self.template,
            self.mel.n_fft,
            self.mel.hop,
            self.mel.n_mels,
            self.mel.fmin,
            self.mel.fmax,
            self.clip_secs,
            self.dataset,
            self.eval_fold,
            self.synth_classes,
            self.synth_clips_per_class,
            self.head.as_str(),
        )
    }

    /// Instantiate the model profile, taking the text vocabulary size
    /// from the loaded vocabulary.
    pub fn model_config(&self, vocab: &BpeVocab) -> Result<ModelConfig> {
        let mut model = match self.profile.as_str() {
            "desk" => ModelConfig::desk(),
            "full" => ModelConfig::full_scale(),
            other => return Err(Error::Config(format!("unknown profile {:?}", other))),
        };
        model.text.vocab_size = vocab.size();
        model.audio.mel_bins = self.mel.n_mels;
        model.head = self.head;
        model.validate()?;
        Ok(model)
    }
}

/// Learning rate after `epoch` full decay steps: lr0 * gamma^epoch.
pub fn lr_at_epoch(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}
