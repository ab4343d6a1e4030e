//! Run configuration and its flat `key = value` file format.
//!
//! Lines are `key = value`; `#` starts a comment. A `profile` line selects
//! the starting point (`paper` or `desk`) and must come before other keys.
//! Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, CycleSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub num_cycles: usize,
    pub base_epochs: usize,
    pub growth: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Turns off both distillation terms (cross-entropy only) when false.
    pub distill: bool,
    pub optimizer: AdamWConfig,
    pub eta_min: f64,
    pub augment_factor: usize,
    /// Held-out subjects to run; empty means every subject.
    pub folds: Vec<u8>,
    /// Synthetic dataset shape used by `synth` and by `train` when no data
    /// directory is given.
    pub synth_subjects: usize,
    pub synth_trials: usize,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Full protocol: 4 cycles from 10 epochs growing by 1.5, batch
    /// 512, 64-frame windows, T = 3, 40× augmentation, all 20 folds.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            data: None,
            out: PathBuf::from("runs/paper"),
            seed: 0,
            num_cycles: 4,
            base_epochs: 10,
            growth: 1.5,
            batch_size: 512,
            temperature: 3.0,
            distill: true,
            optimizer: AdamWConfig::default(),
            eta_min: 0.0,
            augment_factor: 40,
            folds: Vec::new(),
            synth_subjects: 20,
            synth_trials: 5,
            model: ModelConfig::full(),
        }
    }

    /// Synthetic 4-class, 6-subject profile that trains three folds on one
    /// CPU core in a few minutes.
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            out: PathBuf::from("runs/desk"),
            base_epochs: 3,
            batch_size: 32,
            augment_factor: 5,
            folds: vec![1, 2, 3],
            synth_subjects: 6,
            synth_trials: 5,
            model: ModelConfig::desk(),
            ..Self::paper()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn window(&self) -> usize {
        self.model.seq_len
    }

    pub fn schedule(&self) -> CycleSchedule {
        CycleSchedule {
            base_epochs: self.base_epochs,
            growth: self.growth,
            num_cycles: self.num_cycles,
            eta_max: self.optimizer.alpha,
            eta_min: self.eta_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule().lengths()?;
        if self.model.num_classes > crate::dataset::GESTURES.len() {
            return Err(Error::Config(format!(
                "{} classes exceed the {}-gesture taxonomy",
                self.model.num_classes,
                crate::dataset::GESTURES.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.augment_factor == 0 {
            return Err(Error::Config("augment_factor must be at least 1".into()));
        }
        if self.model.seq_len < 2 {
            return Err(Error::Config("window must be at least 2 frames".into()));
        }
        if !(0.0..=self.optimizer.alpha).contains(&self.eta_min) {
            return Err(Error::Config(format!("eta_min {} outside [0, alpha]", self.eta_min)));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let m = &mut self.model;
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "cycles" => self.num_cycles = num(key, value)?,
            "base_epochs" | "epochs" => self.base_epochs = num(key, value)?,
            "growth" => self.growth = num(key, value)?,
            "batch" | "batch_size" => self.batch_size = num(key, value)?,
            "window" => m.seq_len = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "distill" => self.distill = num(key, value)?,
            "alpha" => self.optimizer.alpha = num(key, value)?,
            "beta1" => self.optimizer.beta1 = num(key, value)?,
            "beta2" => self.optimizer.beta2 = num(key, value)?,
            "epsilon" => self.optimizer.epsilon = num(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = num(key, value)?,
            "eta_min" => self.eta_min = num(key, value)?,
            "augment_factor" => self.augment_factor = num(key, value)?,
            "folds" => {
                self.folds = if value == "all" || value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "synth_subjects" => self.synth_subjects = num(key, value)?,
            "synth_trials" => self.synth_trials = num(key, value)?,
            "classes" => m.num_classes = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "ff_dim" => m.ff_dim = num(key, value)?,
            "blocks" => m.transformer_blocks = num(key, value)?,
            "lstm_hidden" => m.lstm_hidden = num(key, value)?,
            "chunk_size" => m.chunk_size = num(key, value)?,
            "head_width" => m.head_width = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "bn_eps" => m.bn_eps = num(key, value)?,
            "bn_momentum" => m.bn_momentum = num(key, value)?,
            "profile" => return Err(Error::Config("profile must be the first setting".into())),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<Self> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "profile" {
                if cfg.is_some() {
                    return Err(Error::Config(format!("line {}: profile must come first", i + 1)));
                }
                cfg = Some(Self::for_profile(match v {
                    "paper" => Profile::Paper,
                    "desk" => Profile::Desk,
                    _ => return Err(Error::Config(format!("line {}: unknown profile {v:?}", i + 1))),
                }));
                continue;
            }
            cfg.get_or_insert_with(Self::desk)
                .set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg.unwrap_or_else(Self::desk))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Renders every field in the file format; `parse(render())` round-trips.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let o = &self.optimizer;
        let profile = match self.profile {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        };
        let folds = if self.folds.is_empty() {
            "all".to_string()
        } else {
            self.folds.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",")
        };
        let data = self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("profile", profile.into()),
            ("data", data),
            ("out", self.out.display().to_string()),
            ("seed", self.seed.to_string()),
            ("cycles", self.num_cycles.to_string()),
            ("base_epochs", self.base_epochs.to_string()),
            ("growth", self.growth.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("window", m.seq_len.to_string()),
            ("temperature", self.temperature.to_string()),
            ("distill", self.distill.to_string()),
            ("alpha", o.alpha.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("epsilon", o.epsilon.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("eta_min", self.eta_min.to_string()),
            ("augment_factor", self.augment_factor.to_string()),
            ("folds", folds),
            ("synth_subjects", self.synth_subjects.to_string()),
            ("synth_trials", self.synth_trials.to_string()),
            ("classes", m.num_classes.to_string()),
            ("heads", m.heads.to_string()),
            ("ff_dim", m.ff_dim.to_string()),
            ("blocks", m.transformer_blocks.to_string()),
            ("lstm_hidden", m.lstm_hidden.to_string()),
            ("chunk_size", m.chunk_size.to_string()),
            ("head_width", m.head_width.to_string()),
            ("dropout", m.dropout.to_string()),
            ("bn_eps", m.bn_eps.to_string()),
            ("bn_momentum", m.bn_momentum.to_string()),
        ];
        for (k, v) in rows {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = RunConfig::paper();
        assert_eq!(c.schedule().lengths().unwrap(), vec![10, 15, 23, 35]);
        assert_eq!(c.schedule().total_epochs().unwrap(), 83);
        assert_eq!(c.batch_size, 512);
        assert_eq!(c.window(), 64);
        assert_eq!(c.temperature, 3.0);
        assert_eq!(c.optimizer.alpha, 0.001);
        assert_eq!(c.augment_factor, 40);
        assert!(c.folds.is_empty());
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn render_parse_round_trip() {
        for mut c in [RunConfig::paper(), RunConfig::desk()] {
            c.data = Some(PathBuf::from("/tmp/x"));
            c.growth = 1.25;
            assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        }
    }

    #[test]
    fn parse_overrides_and_errors() {
        let c = RunConfig::parse("profile = paper\n# comment\nbatch = 8 # trailing\nfolds = 3,4\n").unwrap();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.folds, vec![3, 4]);
        assert_eq!(c.model, ModelConfig::full());
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("seed = 1\nprofile = desk").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::desk());
    }
}
