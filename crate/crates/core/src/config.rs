//! Run configuration: `key = value` files with `#` comments.
//!
//! Later assignments override earlier ones, so command-line overrides are
//! applied after the file with [`RunConfig::set`].

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Toggles};
use crate::shift::PatternKind;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub volume_size: usize,
    pub depth: usize,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub aware: bool,
    pub shift: bool,
    /// Explicit placements; `None` uses layers `1..E-1` and `E`.
    pub aware_layers: Option<Vec<usize>>,
    pub shift_layers: Option<Vec<usize>>,
    pub pattern: PatternKind,
    pub augment: bool,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Number of cases written by `gen-data`.
    pub cases: usize,
    pub noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::desk();
        Self {
            volume_size: b.volume_size,
            depth: b.depth,
            channels: b.channels,
            heads: 4,
            tau: 1.0,
            learning_rate: 1e-4,
            warmup_steps: 10,
            total_steps: 300,
            batch_size: 2,
            seed: 0,
            aware: true,
            shift: true,
            aware_layers: None,
            shift_layers: None,
            pattern: PatternKind::Mosaic,
            augment: true,
            checkpoint_every: 100,
            cases: 2,
            noise: 0.05,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "volume_size" => self.volume_size = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "aware" => self.aware = parse_bool(key, value)?,
            "shift" => self.shift = parse_bool(key, value)?,
            "aware_layers" => self.aware_layers = Some(parse_list(key, value)?),
            "shift_layers" => self.shift_layers = Some(parse_list(key, value)?),
            "pattern" => {
                self.pattern = match value {
                    "mosaic" => PatternKind::Mosaic,
                    "identity" => PatternKind::Identity,
                    _ => return Err(Error::Config(format!("pattern: unknown {value:?}"))),
                }
            }
            "augment" => self.augment = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "cases" => self.cases = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            volume_size: self.volume_size,
            depth: self.depth,
            channels: self.channels.clone(),
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            aware: self.aware,
            shift: self.shift,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.backbone(), self.toggles());
        if self.aware {
            if let Some(l) = &self.aware_layers {
                m.aware_layers = l.clone();
            }
        }
        if self.shift {
            if let Some(l) = &self.shift_layers {
                m.shift_layers = l.clone();
            }
        }
        m.heads = self.heads;
        m.tau = self.tau;
        m.pattern = self.pattern;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {}", self.learning_rate)));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "volume_size = {}", self.volume_size);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "channels = {}", join(&self.channels));
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "aware = {}", self.aware);
        let _ = writeln!(s, "shift = {}", self.shift);
        if let Some(l) = &self.aware_layers {
            let _ = writeln!(s, "aware_layers = {}", join(l));
        }
        if let Some(l) = &self.shift_layers {
            let _ = writeln!(s, "shift_layers = {}", join(l));
        }
        let pattern = match self.pattern {
            PatternKind::Mosaic => "mosaic",
            PatternKind::Identity => "identity",
        };
        let _ = writeln!(s, "pattern = {pattern}");
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "cases = {}", self.cases);
        let _ = writeln!(s, "noise = {}", self.noise);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\ndepth = 2 # trailing\nchannels = 8, 16\nvolume_size=8\naware=false\n")
            .unwrap();
        assert_eq!(c.channels, vec![8, 16]);
        assert!(!c.aware);
        assert!(c.validate().is_ok());
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("depth").is_err());
        assert!(c.apply_text("depth = x").is_err());
        c.set("depth", "3").unwrap();
        assert!(c.validate().is_err());
    }
}
