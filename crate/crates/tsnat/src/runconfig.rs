//! Run configuration: flat `key = value` text with `[section]` headers.
//! Unknown keys are rejected so experiment files stay diffable and honest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::TaskConfig;
use crate::inference::DecodeConfig;
use crate::model::{FrontendKind, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {what}")]
    Syntax { line: usize, what: String },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key}")]
    DuplicateKey { line: usize, key: String },
    #[error("{key}: {what}")]
    BadValue { key: String, what: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    Toy,
    Small,
    Middle,
    Big,
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelPreset::Toy => "toy",
            ModelPreset::Small => "small",
            ModelPreset::Middle => "middle",
            ModelPreset::Big => "big",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub train_corpus: Option<PathBuf>,
    pub dev_corpus: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything one experiment needs, resolved from a config file plus the
/// optional `TSNAT_SEED` environment override.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub preset: ModelPreset,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Parse, resolve presets/overrides, propagate the seed, and validate.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut section = String::new();
        let mut seen: HashSet<String> = HashSet::new();
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        what: "unterminated section header".into(),
                    });
                };
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    what: format!("expected key = value, got {line:?}"),
                });
            };
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            if !seen.insert(full.clone()) {
                return Err(ConfigError::DuplicateKey {
                    line: line_no,
                    key: full,
                });
            }
            entries.push((line_no, full, value.trim().to_string()));
        }
        Self::resolve(&entries)
    }

    fn resolve(entries: &[(usize, String, String)]) -> Result<RunConfig, ConfigError> {
        let mut seed: u64 = 17;
        let mut task = TaskConfig::default();
        let mut preset = ModelPreset::Toy;
        let mut train = TrainConfig::default();
        let mut decode = DecodeConfig::default();
        let mut paths = Paths::default();

        // model overrides applied after the preset resolves
        let mut m_over: Vec<(&str, String)> = Vec::new();

        for (line, key, value) in entries {
            let parse_err = |what: &dyn fmt::Display| ConfigError::BadValue {
                key: key.clone(),
                what: what.to_string(),
            };
            macro_rules! num {
                ($t:ty) => {
                    value.parse::<$t>().map_err(|e| parse_err(&e))?
                };
            }
            match key.as_str() {
                "seed" => seed = num!(u64),
                "task.vocab_size" => task.vocab_size = num!(usize),
                "task.feature_dim" => task.feature_dim = num!(usize),
                "task.min_len" => task.min_len = num!(usize),
                "task.max_len" => task.max_len = num!(usize),
                "task.min_dur" => task.min_dur = num!(usize),
                "task.max_dur" => task.max_dur = num!(usize),
                "task.noise_sigma" => task.noise_sigma = num!(f64),
                "model.preset" => {
                    preset = match value.as_str() {
                        "toy" => ModelPreset::Toy,
                        "small" => ModelPreset::Small,
                        "middle" => ModelPreset::Middle,
                        "big" => ModelPreset::Big,
                        other => {
                            return Err(parse_err(&format!(
                                "unknown preset {other:?} (toy|small|middle|big)"
                            )))
                        }
                    }
                }
                "model.n_enc_layers" | "model.n_dec_layers" | "model.d_model" | "model.d_ff"
                | "model.n_heads" | "model.max_decode_len" | "model.frontend"
                | "model.dropout" => {
                    m_over.push((key.strip_prefix("model.").unwrap(), value.clone()));
                    // validated below once the preset base exists
                    let _ = line;
                }
                "train.alpha" => train.alpha = num!(f64),
                "train.warmup_steps" => train.warmup_steps = num!(u64),
                "train.epochs" => train.epochs = num!(usize),
                "train.batch_size" => train.batch_size = num!(usize),
                "train.avg_last_k" => train.avg_last_k = num!(usize),
                "train.lr_scale" => train.lr_scale = num!(f64),
                "train.n_time_masks" => train.augment.n_time_masks = num!(usize),
                "train.n_freq_masks" => train.augment.n_freq_masks = num!(usize),
                "decode.n_best" => decode.n_best = num!(usize),
                "decode.beam_width" => decode.beam_width = num!(usize),
                "decode.rescore_weight" => decode.rescore_weight = num!(f64),
                "paths.train_corpus" => paths.train_corpus = Some(PathBuf::from(value)),
                "paths.dev_corpus" => paths.dev_corpus = Some(PathBuf::from(value)),
                "paths.checkpoint_dir" => paths.checkpoint_dir = Some(PathBuf::from(value)),
                "paths.out_dir" => paths.out_dir = Some(PathBuf::from(value)),
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line: *line,
                        key: key.clone(),
                    })
                }
            }
        }

        task.seed = seed;
        train.seed = seed;
        let vocab_size = task.vocab_size + 5;
        // rows for the longest transcript plus its terminating EOS
        let max_decode_len = task.max_len + 1;
        let mut model = match preset {
            ModelPreset::Toy => ModelConfig::toy(vocab_size, task.feature_dim, max_decode_len),
            ModelPreset::Small => ModelConfig::small(vocab_size, task.feature_dim, max_decode_len),
            ModelPreset::Middle => ModelConfig::middle(vocab_size, task.feature_dim, max_decode_len),
            ModelPreset::Big => ModelConfig::big(vocab_size, task.feature_dim, max_decode_len),
        };
        for (key, value) in m_over {
            let err = |what: &dyn fmt::Display| ConfigError::BadValue {
                key: format!("model.{key}"),
                what: what.to_string(),
            };
            match key {
                "n_enc_layers" => model.n_enc_layers = value.parse().map_err(|e| err(&e))?,
                "n_dec_layers" => model.n_dec_layers = value.parse().map_err(|e| err(&e))?,
                "d_model" => model.d_model = value.parse().map_err(|e| err(&e))?,
                "d_ff" => model.d_ff = value.parse().map_err(|e| err(&e))?,
                "n_heads" => model.n_heads = value.parse().map_err(|e| err(&e))?,
                "max_decode_len" => model.max_decode_len = value.parse().map_err(|e| err(&e))?,
                "dropout" => model.dropout = value.parse().map_err(|e| err(&e))?,
                "frontend" => {
                    model.frontend = match value.as_str() {
                        "conv" => FrontendKind::Conv,
                        "splice" => FrontendKind::LinearSplice,
                        other => return Err(err(&format!("unknown frontend {other:?} (conv|splice)"))),
                    }
                }
                _ => unreachable!("filtered above"),
            }
        }

        let cfg = RunConfig {
            seed,
            task,
            model,
            preset,
            train,
            decode,
            paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.decode
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.max_decode_len < self.task.max_len + 1 {
            return Err(ConfigError::Invalid(format!(
                "model.max_decode_len {} cannot cover task.max_len {} plus <EOS>",
                self.model.max_decode_len, self.task.max_len
            )));
        }
        Ok(())
    }

    /// Apply the `TSNAT_SEED` environment override, if set.
    pub fn apply_env_seed(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var("TSNAT_SEED") {
            let seed: u64 = v.parse().map_err(|e| ConfigError::BadValue {
                key: "TSNAT_SEED".into(),
                what: format!("{e}"),
            })?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.task.seed = seed;
        self.train.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
seed = 42

[task]
vocab_size = 8
feature_dim = 10
max_len = 9

[model]
preset = toy
d_model = 32

[train]
alpha = 0.5
epochs = 3
avg_last_k = 2

[decode]
n_best = 5

[paths]
train_corpus = /tmp/train.tsnc
";

    #[test]
    fn sample_parses_and_resolves() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.task.vocab_size, 8);
        assert_eq!(cfg.task.seed, 42);
        assert_eq!(cfg.model.vocab_size, 13);
        assert_eq!(cfg.model.d_model, 32); // override on top of the preset
        assert_eq!(cfg.model.n_enc_layers, 2);
        assert_eq!(cfg.model.max_decode_len, 10);
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.decode.n_best, 5);
        assert_eq!(
            cfg.paths.train_corpus.as_deref(),
            Some(Path::new("/tmp/train.tsnc"))
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[task]\nvocab_sise = 8\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }), "{err}");
        let err = RunConfig::parse("speed = 7\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = RunConfig::parse("[train]\nalpha = 0.3\nalpha = 0.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { .. }));
    }

    #[test]
    fn alpha_bounds_are_validated_with_field_name() {
        let err = RunConfig::parse("[train]\nalpha = 1.2\n").unwrap_err();
        assert!(err.to_string().contains("train.alpha"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# top\nseed = 1 # trailing\n\n[task] # section\nvocab_size = 4\n").unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.task.vocab_size, 4);
    }

    #[test]
    fn set_seed_propagates() {
        let mut cfg = RunConfig::parse(SAMPLE).unwrap();
        cfg.set_seed(7);
        assert_eq!(cfg.task.seed, 7);
        assert_eq!(cfg.train.seed, 7);
    }
}
