//! Flat `key=value` training configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::ConvNetShape;
use crate::optim::AdamConfig;

/// What the critic sees as "real" text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Softmax reconstructions from the autoencoder.
    #[serde(rename = "textkd")]
    TextKd,
    /// One-hot encoded sentences.
    Iwgan,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::TextKd, Mode::Iwgan];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TextKd => "textkd",
            Mode::Iwgan => "iwgan",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; valid modes are textkd, iwgan"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seq_len: usize,
    pub batch_size: usize,
    pub critic_iters: usize,
    pub iterations: u64,
    pub lambda: f64,
    pub ae_lr: f64,
    pub ae_beta1: f64,
    pub ae_beta2: f64,
    pub gan_lr: f64,
    pub gan_beta1: f64,
    pub gan_beta2: f64,
    pub hidden: usize,
    pub noise_dim: usize,
    pub channels: usize,
    pub res_blocks: usize,
    pub kernel_size: usize,
    pub residual_scale: f64,
    pub max_chars: usize,
    pub lowercase: bool,
    pub teacher_forcing: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::TextKd,
            seq_len: 32,
            batch_size: 64,
            critic_iters: 5,
            iterations: 200_000,
            lambda: 10.0,
            ae_lr: 1e-3,
            ae_beta1: 0.9,
            ae_beta2: 0.9,
            gan_lr: 1e-4,
            gan_beta1: 0.5,
            gan_beta2: 0.9,
            hidden: 512,
            noise_dim: 128,
            channels: 512,
            res_blocks: 5,
            kernel_size: 5,
            residual_scale: 0.3,
            max_chars: 100,
            lowercase: false,
            teacher_forcing: false,
            seed: 0,
            checkpoint_every: 10_000,
            eval_every: 1_000,
            eval_samples: 640,
        }
    }
}

fn parse_value<T>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("cannot parse {value:?} as a value for `{key}`: {e}"))
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        impl TrainConfig {
            /// Every recognised key, in echo order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// `(key, value)` pairs for every field.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string())),*]
            }
        }
    };
}

config_keys!(
    mode,
    seq_len,
    batch_size,
    critic_iters,
    iterations,
    lambda,
    ae_lr,
    ae_beta1,
    ae_beta2,
    gan_lr,
    gan_beta1,
    gan_beta2,
    hidden,
    noise_dim,
    channels,
    res_blocks,
    kernel_size,
    residual_scale,
    max_chars,
    lowercase,
    teacher_forcing,
    seed,
    checkpoint_every,
    eval_every,
    eval_samples,
);

/// Short spellings accepted in place of the field names.
const ALIASES: &[(&str, &str)] = &[("k", "critic_iters"), ("m", "batch_size"), ("T", "seq_len")];

fn split_assignment(text: &str) -> std::result::Result<(&str, &str), String> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| format!("expected `key=value`, found {text:?}"))?;
    let k = k.trim();
    let k = ALIASES.iter().find(|(a, _)| *a == k).map_or(k, |(_, full)| full);
    Ok((k, v.trim()))
}

impl TrainConfig {
    /// Parses `key=value` lines. Blank lines and `#` comments are ignored;
    /// omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = || format!("line {}", i + 1);
            let (k, v) = split_assignment(line).map_err(|message| Error::Config {
                location: location(),
                message,
            })?;
            cfg.set(k, v).map_err(|message| Error::Config {
                location: location(),
                message,
            })?;
            cfg.check_key(k).map_err(|message| Error::Config {
                location: location(),
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { location, message } => Error::Config {
                location: format!("{}:{location}", path.display()),
                message,
            },
            other => other,
        })
    }

    /// Applies a `key=value` override given outside the config file.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let location = || format!("override {assignment:?}");
        let (k, v) = split_assignment(assignment).map_err(|message| Error::Config {
            location: location(),
            message,
        })?;
        self.set(k, v)
            .and_then(|_| self.check_key(k))
            .map_err(|message| Error::Config {
                location: location(),
                message,
            })
    }

    fn check_key(&self, key: &str) -> std::result::Result<(), String> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let beta = |v: f64| (0.0..1.0).contains(&v);
        let ok = match key {
            "seq_len" => self.seq_len > 0,
            "batch_size" => self.batch_size > 0,
            "critic_iters" => self.critic_iters >= 1,
            "lambda" => positive(self.lambda),
            "ae_lr" => positive(self.ae_lr),
            "gan_lr" => positive(self.gan_lr),
            "ae_beta1" => beta(self.ae_beta1),
            "ae_beta2" => beta(self.ae_beta2),
            "gan_beta1" => beta(self.gan_beta1),
            "gan_beta2" => beta(self.gan_beta2),
            "hidden" => self.hidden > 0,
            "noise_dim" => self.noise_dim > 0,
            "channels" => self.channels > 0,
            "kernel_size" => self.kernel_size % 2 == 1,
            "residual_scale" => positive(self.residual_scale),
            "max_chars" => self.max_chars > 0,
            "checkpoint_every" => self.checkpoint_every > 0,
            "eval_every" => self.eval_every > 0,
            "eval_samples" => self.eval_samples > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{key} = {} violates {}", self.value_of(key), requirement(key)))
        }
    }

    fn value_of(&self, key: &str) -> String {
        self.entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        for key in Self::KEYS {
            self.check_key(key).map_err(|message| Error::Config {
                location: format!("key `{key}`"),
                message,
            })?;
        }
        Ok(())
    }

    /// The effective configuration in the same format [`TrainConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn ae_adam(&self) -> AdamConfig {
        AdamConfig::new(self.ae_lr, self.ae_beta1, self.ae_beta2)
    }

    pub fn gan_adam(&self) -> AdamConfig {
        AdamConfig::new(self.gan_lr, self.gan_beta1, self.gan_beta2)
    }

    pub fn net_shape(&self, vocab_size: usize) -> ConvNetShape {
        ConvNetShape {
            seq_len: self.seq_len,
            vocab_size,
            channels: self.channels,
            res_blocks: self.res_blocks,
            kernel_size: self.kernel_size,
            residual_scale: self.residual_scale,
        }
    }
}

fn requirement(key: &str) -> &'static str {
    match key {
        "critic_iters" => "k >= 1",
        "kernel_size" => "odd kernel size",
        k if k.contains("beta") => "0 <= beta < 1",
        _ => "must be positive",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = TrainConfig::parse("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.seq_len, c.batch_size, c.critic_iters, c.iterations), (32, 64, 5, 200_000));
        assert_eq!((c.ae_lr, c.ae_beta1, c.ae_beta2), (1e-3, 0.9, 0.9));
        assert_eq!((c.gan_lr, c.gan_beta1, c.gan_beta2), (1e-4, 0.5, 0.9));
        assert_eq!(c.lambda, 10.0);
    }

    #[test]
    fn comments_blank_lines_and_values() {
        let c = TrainConfig::parse("# run\n\nmode = iwgan  # baseline\nseq_len=16\nlowercase=true\n").unwrap();
        assert_eq!(c.mode, Mode::Iwgan);
        assert_eq!(c.seq_len, 16);
        assert!(c.lowercase);
    }

    #[test]
    fn k_zero_is_rejected_with_line() {
        let e = TrainConfig::parse("seq_len=8\ncritic_iters=0\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 2") && msg.contains("k >= 1"), "{msg}");
    }

    #[test]
    fn unknown_mode_lists_valid_modes() {
        let msg = TrainConfig::parse("mode=arae").unwrap_err().to_string();
        assert!(msg.contains("unknown mode") && msg.contains("textkd") && msg.contains("iwgan"), "{msg}");
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let msg = TrainConfig::parse("\nlearning_rate=1").unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("unknown key"), "{msg}");
        let msg = TrainConfig::parse("seq_len=abc").unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("abc"), "{msg}");
        assert!(TrainConfig::parse("seq_len").is_err());
    }

    #[test]
    fn echo_round_trips_and_overrides_win() {
        let mut c = TrainConfig::parse("seq_len=12\nseed=7").unwrap();
        c.apply_override("gan_lr=0.002").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_text().lines().count(), TrainConfig::KEYS.len());
        assert!(c.apply_override("beta=1").is_err());
        assert!(c.apply_override("batch_size=0").is_err());
    }
}
