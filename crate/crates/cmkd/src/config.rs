//! `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Every key has a default, so an empty document is a complete config.
//! [`RunConfig::to_text`] emits every key in sorted order and parses back to
//! an equal value.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use cmkd_core::distill::DistillOptions;
use cmkd_core::segmenter::{EncoderConfig, ModelOptions, NUM_STAGES};
use cmkd_core::train::TrainConfig;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("key `{0}` has an invalid value")]
    TypeError(String),
    #[error("key `{0}` appears more than once")]
    DuplicateKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("config is not valid UTF-8")]
    Encoding,
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::UnknownKey { .. } => "E_CONFIG_UNKNOWN_KEY",
            ConfigError::Syntax { .. } => "E_CONFIG_SYNTAX",
            ConfigError::TypeError(_) => "E_CONFIG_TYPE",
            ConfigError::DuplicateKey(_) => "E_CONFIG_DUPLICATE_KEY",
            ConfigError::Invalid(_) => "E_CONFIG_INVALID",
            ConfigError::Encoding => "E_CONFIG_ENCODING",
        }
    }
}

/// Which network a checkpoint or command refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    /// `seed` is ignored here; each run takes its seed from [`Self::seeds`].
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub softmax_norm: bool,
    pub gram_normalize: bool,
    pub count_padded: bool,
    pub appearance_only: bool,
    pub canvas: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub train_data_seed: u64,
    pub val_data_seed: u64,
    pub train_path: PathBuf,
    pub val_path: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            teacher: EncoderConfig::teacher(),
            student: EncoderConfig::student(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            softmax_norm: false,
            gram_normalize: false,
            count_padded: false,
            appearance_only: false,
            canvas: 64,
            train_count: 2000,
            val_count: 500,
            train_data_seed: 1,
            val_data_seed: 2,
            train_path: PathBuf::from("train.cmkd"),
            val_path: PathBuf::from("val.cmkd"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::TypeError(key.to_string()))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[usize; N], ConfigError> {
    parse_list::<usize>(key, value)?
        .try_into()
        .map_err(|_| ConfigError::TypeError(key.to_string()))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a document, filling unspecified keys with defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: line_no })?;
            let key = key.trim();
            if !Self::keys().iter().any(|k| k == key) {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                });
            }
            if seen.insert(key.to_string(), line_no).is_some() {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_bytes(bytes: &[u8]) -> Result<Self, ConfigError> {
        Self::parse(std::str::from_utf8(bytes).map_err(|_| ConfigError::Encoding)?)
    }

    /// All recognised keys, sorted.
    pub fn keys() -> Vec<String> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "appearance_only" => self.appearance_only = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "beta1" => t.betas.0 = parse(key, v)?,
            "beta2" => t.betas.1 = parse(key, v)?,
            "canvas" => self.canvas = parse(key, v)?,
            "count_padded" => self.count_padded = parse(key, v)?,
            "decay_epoch" => t.decay_epoch = parse(key, v)?,
            "decay_factor" => t.decay_factor = parse(key, v)?,
            "decoder_width" => {
                let w = parse(key, v)?;
                self.teacher.decoder_width = w;
                self.student.decoder_width = w;
            }
            "epochs" => t.epochs = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "fusion_dim" => {
                let d = parse(key, v)?;
                self.teacher.fusion_dim = d;
                self.student.fusion_dim = d;
            }
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "gram_normalize" => self.gram_normalize = parse(key, v)?,
            "lambda1" => t.lambda1 = parse(key, v)?,
            "lambda2" => t.lambda2 = parse(key, v)?,
            "lr0" => t.lr0 = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "softmax_norm" => self.softmax_norm = parse(key, v)?,
            "stage_strides" => {
                let s: [usize; NUM_STAGES] = parse_array(key, v)?;
                self.teacher.stage_strides = s;
                self.student.stage_strides = s;
            }
            "train_count" => self.train_count = parse(key, v)?,
            "train_data_seed" => self.train_data_seed = parse(key, v)?,
            "train_path" => self.train_path = PathBuf::from(v),
            "val_count" => self.val_count = parse(key, v)?,
            "val_data_seed" => self.val_data_seed = parse(key, v)?,
            "val_path" => self.val_path = PathBuf::from(v),
            "weight_decay" => t.weight_decay = parse(key, v)?,
            _ => {
                let (role, field) = key.split_once('.').ok_or(ConfigError::TypeError(key.to_string()))?;
                let enc = match role {
                    "teacher" => &mut self.teacher,
                    "student" => &mut self.student,
                    _ => return Err(ConfigError::TypeError(key.to_string())),
                };
                match field {
                    "blocks_per_stage" => enc.blocks_per_stage = parse(key, v)?,
                    "text_dim" => enc.text_dim = parse(key, v)?,
                    "text_layers" => enc.text_layers = parse(key, v)?,
                    "visual_widths" => enc.visual_widths = parse_array(key, v)?,
                    _ => return Err(ConfigError::TypeError(key.to_string())),
                }
            }
        }
        Ok(())
    }

    /// `(key, canonical value)` pairs in sorted key order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let mut out: Vec<(String, String)> = [
            ("appearance_only", self.appearance_only.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("beta1", t.betas.0.to_string()),
            ("beta2", t.betas.1.to_string()),
            ("canvas", self.canvas.to_string()),
            ("count_padded", self.count_padded.to_string()),
            ("decay_epoch", t.decay_epoch.to_string()),
            ("decay_factor", t.decay_factor.to_string()),
            ("decoder_width", self.student.decoder_width.to_string()),
            ("epochs", t.epochs.to_string()),
            ("eps", t.eps.to_string()),
            ("fusion_dim", self.student.fusion_dim.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("gram_normalize", self.gram_normalize.to_string()),
            ("lambda1", t.lambda1.to_string()),
            ("lambda2", t.lambda2.to_string()),
            ("lr0", t.lr0.to_string()),
            ("seeds", join(&self.seeds)),
            ("softmax_norm", self.softmax_norm.to_string()),
            ("stage_strides", join(&self.student.stage_strides)),
            ("train_count", self.train_count.to_string()),
            ("train_data_seed", self.train_data_seed.to_string()),
            ("train_path", self.train_path.display().to_string()),
            ("val_count", self.val_count.to_string()),
            ("val_data_seed", self.val_data_seed.to_string()),
            ("val_path", self.val_path.display().to_string()),
            ("weight_decay", t.weight_decay.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (role, enc) in [("student", &self.student), ("teacher", &self.teacher)] {
            out.push((format!("{role}.blocks_per_stage"), enc.blocks_per_stage.to_string()));
            out.push((format!("{role}.text_dim"), enc.text_dim.to_string()));
            out.push((format!("{role}.text_layers"), enc.text_layers.to_string()));
            out.push((format!("{role}.visual_widths"), join(&enc.visual_widths)));
        }
        out.sort();
        out
    }

    /// Canonical text: every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: cmkd_core::Error| ConfigError::Invalid(e.to_string());
        self.teacher.validate().map_err(invalid)?;
        self.student.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.train.lr0.is_nan() || self.train.lr0 <= 0.0 {
            return Err(ConfigError::Invalid("lr0 must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if !cmkd_core::data::CANVAS_SIZES.contains(&self.canvas) {
            return Err(ConfigError::Invalid(format!(
                "canvas must be one of {:?}",
                cmkd_core::data::CANVAS_SIZES
            )));
        }
        if !self.canvas.is_multiple_of(self.student.total_stride()) {
            return Err(ConfigError::Invalid("canvas must be divisible by the total stride".into()));
        }
        if self.train_count == 0 || self.val_count == 0 {
            return Err(ConfigError::Invalid("dataset counts must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder(&self, role: Role) -> &EncoderConfig {
        match role {
            Role::Teacher => &self.teacher,
            Role::Student => &self.student,
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            softmax_norm: self.softmax_norm,
        }
    }

    pub fn distill_options(&self) -> DistillOptions {
        self.train.distill_options(self.gram_normalize, self.count_padded)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// SHA-256 over the architecture of `role`: its encoder keys, the shared
    /// widths and strides, and the fusion normalisation flag.
    ///
    /// Training hyper-parameters are excluded so that a run can be resumed
    /// with a larger epoch budget.
    pub fn fingerprint(&self, role: Role) -> [u8; 32] {
        let enc = self.encoder(role);
        let text = format!(
            "role = {}\nblocks_per_stage = {}\ntext_dim = {}\ntext_layers = {}\nvisual_widths = {}\n\
             decoder_width = {}\nfusion_dim = {}\nstage_strides = {}\nsoftmax_norm = {}\n",
            role.name(),
            enc.blocks_per_stage,
            enc.text_dim,
            enc.text_layers,
            join(&enc.visual_widths),
            enc.decoder_width,
            enc.fusion_dim,
            join(&enc.stage_strides),
            self.softmax_norm,
        );
        Sha256::digest(text.as_bytes()).into()
    }

    /// Dataset flavour label used in reports.
    pub fn flavor(&self) -> &'static str {
        if self.appearance_only {
            "appearance_only"
        } else {
            "with_location"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_unique_and_sorted() {
        let keys = RunConfig::keys();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = RunConfig::parse("# header\n\nepochs = 3 # short run\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn missing_equals_is_a_syntax_error() {
        assert_eq!(RunConfig::parse("epochs 3"), Err(ConfigError::Syntax { line: 1 }));
    }
}
