//! Flat `key=value` run configuration covering analysis geometry, sequence
//! windowing, training hyperparameters, and reconstruction settings.
//!
//! The same file format is written next to every checkpoint so a separation
//! run can rebuild the exact geometry a model was trained with. Parsing is
//! strict: every key must appear exactly once, unknown keys are errors, and
//! the schema version is checked.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SequenceConfig;
use crate::error::{Error, Result};
use crate::masker::{EncoderAlignment, MaskerConfig};
use crate::signal::StftConfig;
use crate::training::{ModelConfig, TrainConfig};
use crate::twinnet::{TwinBackprop, TwinOptions};

/// Version tag written as the first key of every config file.
pub const SCHEMA_VERSION: u64 = 1;

/// Conventional file name, stored beside checkpoints.
pub const CONFIG_FILE: &str = "config.txt";

/// Complete description of one run: geometry plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stft: StftConfig,
    pub seq: SequenceConfig,
    /// Bins kept by the masker's low-frequency trim (`F`).
    pub trim_bins: usize,
    pub train: TrainConfig,
    /// Phase-refinement iterations used when resynthesizing audio.
    pub griffin_lim_iterations: usize,
    pub alignment: EncoderAlignment,
    pub twin: TwinOptions,
}

impl RunConfig {
    /// Small geometry that trains in seconds on a laptop CPU.
    pub fn desk() -> Self {
        RunConfig {
            stft: StftConfig {
                frame_length: 512,
                fft_length: 512,
                hop: 128,
                sample_rate: 8000,
            },
            seq: SequenceConfig {
                total_len: 24,
                context: 4,
            },
            trim_bins: 96,
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            griffin_lim_iterations: 10,
            alignment: EncoderAlignment::Realigned,
            twin: TwinOptions::default(),
        }
    }

    /// Full-scale geometry for 44.1 kHz material. Training at this size is a
    /// long-running job, not a desk experiment.
    pub fn full_scale() -> Self {
        RunConfig {
            stft: StftConfig::default(),
            seq: SequenceConfig::default(),
            trim_bins: 744,
            train: TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
            griffin_lim_iterations: 10,
            alignment: EncoderAlignment::Realigned,
            twin: TwinOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.train.validate()?;
        self.model().validate()
    }

    /// Network geometry implied by this run configuration.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            masker: MaskerConfig {
                n_bins: self.stft.retained_bins(),
                trim_bins: self.trim_bins,
                seq: self.seq,
                alignment: self.alignment,
            },
            twin: self.twin,
        }
    }

    /// Renders every key in a fixed order. `parse` inverts this exactly.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let mut put = |key: &str, value: String| {
            writeln!(out, "{key}={value}").expect("writing to a String cannot fail");
        };
        put("schema_version", SCHEMA_VERSION.to_string());
        put("sample_rate", self.stft.sample_rate.to_string());
        put("frame_length", self.stft.frame_length.to_string());
        put("fft_length", self.stft.fft_length.to_string());
        put("hop", self.stft.hop.to_string());
        put("total_len", self.seq.total_len.to_string());
        put("context", self.seq.context.to_string());
        put("trim_bins", self.trim_bins.to_string());
        put("learning_rate", self.train.learning_rate.to_string());
        put("batch_size", self.train.batch_size.to_string());
        put("grad_clip", self.train.grad_clip.to_string());
        put("lambda_diag", self.train.lambda_diag.to_string());
        put("lambda_dec", self.train.lambda_dec.to_string());
        put("epochs", self.train.epochs.to_string());
        put("seed", self.train.seed.to_string());
        put(
            "griffin_lim_iterations",
            self.griffin_lim_iterations.to_string(),
        );
        put(
            "encoder_alignment",
            match self.alignment {
                EncoderAlignment::Literal => "literal".to_string(),
                EncoderAlignment::Realigned => "realigned".to_string(),
            },
        );
        put("twin_enabled", self.twin.enabled.to_string());
        put(
            "twin_backprop",
            match self.twin.backprop {
                TwinBackprop::Stop => "stop".to_string(),
                TwinBackprop::Full => "full".to_string(),
            },
        );
        put(
            "twin_shares_projection",
            self.twin.shares_projection.to_string(),
        );
        out
    }

    /// Parses the `key=value` format. Blank lines and `#` comments are
    /// allowed; every schema key must appear exactly once.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut fields = Fields::collect(text)?;
        let schema: u64 = fields.take("schema_version")?;
        if schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {schema} (expected {SCHEMA_VERSION})"
            )));
        }
        let config = RunConfig {
            stft: StftConfig {
                sample_rate: fields.take("sample_rate")?,
                frame_length: fields.take("frame_length")?,
                fft_length: fields.take("fft_length")?,
                hop: fields.take("hop")?,
            },
            seq: SequenceConfig {
                total_len: fields.take("total_len")?,
                context: fields.take("context")?,
            },
            trim_bins: fields.take("trim_bins")?,
            train: TrainConfig {
                learning_rate: fields.take("learning_rate")?,
                batch_size: fields.take("batch_size")?,
                grad_clip: fields.take("grad_clip")?,
                lambda_diag: fields.take("lambda_diag")?,
                lambda_dec: fields.take("lambda_dec")?,
                epochs: fields.take("epochs")?,
                max_steps: None,
                seed: fields.take("seed")?,
            },
            griffin_lim_iterations: fields.take("griffin_lim_iterations")?,
            alignment: match fields.take_raw("encoder_alignment")?.as_str() {
                "literal" => EncoderAlignment::Literal,
                "realigned" => EncoderAlignment::Realigned,
                other => {
                    return Err(Error::Config(format!(
                        "encoder_alignment must be literal or realigned, got {other:?}"
                    )))
                }
            },
            twin: TwinOptions {
                enabled: fields.take("twin_enabled")?,
                backprop: match fields.take_raw("twin_backprop")?.as_str() {
                    "stop" => TwinBackprop::Stop,
                    "full" => TwinBackprop::Full,
                    other => {
                        return Err(Error::Config(format!(
                            "twin_backprop must be stop or full, got {other:?}"
                        )))
                    }
                },
                shares_projection: fields.take("twin_shares_projection")?,
            },
        };
        fields.finish()?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

/// Key/value pairs pulled from a config file, consumed as they are read.
struct Fields {
    map: std::collections::BTreeMap<String, String>,
}

impl Fields {
    fn collect(text: &str) -> Result<Fields> {
        let mut map = std::collections::BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {line:?}",
                    idx + 1
                )));
            };
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    idx + 1
                )));
            }
        }
        Ok(Fields { map })
    }

    fn take_raw(&mut self, key: &str) -> Result<String> {
        self.map
            .remove(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.take_raw(key)?;
        raw.parse()
            .map_err(|e| Error::Config(format!("key {key}: cannot parse {raw:?}: {e}")))
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        Ok(())
    }
}
