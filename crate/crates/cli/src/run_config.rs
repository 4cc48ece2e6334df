use std::fs;
use std::path::{Path, PathBuf};

use tagshot::config::{parse_pairs, parse_value, render_pairs, Pairs, Settings};
use tagshot::eval::TaskConfig;
use tagshot::pretrain::PretrainConfig;
use tagshot::prompting::TuneConfig;
use tagshot::tag::SynthConfig;
use tagshot::{Error, Result};

/// Every knob of every command in one flat namespace.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub model: PathBuf,
    pub out: PathBuf,
    pub gradcheck_eps: f64,
    pub gradcheck_seeds: u64,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub tune: TuneConfig,
    pub task: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: PathBuf::from("data"),
            model: PathBuf::from("model"),
            out: PathBuf::from("out"),
            gradcheck_eps: 1e-5,
            gradcheck_seeds: 3,
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            tune: TuneConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_all(&parse_pairs(&body)?)?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, items: &[String]) -> Result<()> {
        for item in items {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item.as_str(), "expected KEY=VALUE"))?;
            if !self.set(k.trim(), v.trim())? {
                return Err(Error::config(k.trim(), "unknown key"));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        render_pairs(&self.entries())
    }
}

impl Settings for RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => {
                self.seed = parse_value(key, value)?;
                self.pretrain.seed = self.seed;
            }
            "data" => self.data = PathBuf::from(value),
            "model" => self.model = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "gradcheck_eps" => self.gradcheck_eps = parse_value(key, value)?,
            "gradcheck_seeds" => self.gradcheck_seeds = parse_value(key, value)?,
            _ => {
                return Ok(self.synth.set(key, value)?
                    || self.pretrain.set(key, value)?
                    || self.tune.set(key, value)?
                    || self.task.set(key, value)?)
            }
        }
        Ok(true)
    }

    fn entries(&self) -> Pairs {
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("data".to_string(), self.data.display().to_string()),
            ("model".to_string(), self.model.display().to_string()),
            ("out".to_string(), self.out.display().to_string()),
            ("gradcheck_eps".to_string(), self.gradcheck_eps.to_string()),
            ("gradcheck_seeds".to_string(), self.gradcheck_seeds.to_string()),
        ];
        out.extend(self.synth.entries());
        out.extend(self.pretrain.entries().into_iter().filter(|(k, _)| k != "seed"));
        out.extend(self.tune.entries());
        out.extend(self.task.entries());
        out
    }
}
