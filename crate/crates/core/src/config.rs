//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! CLI `--set key=value` overrides go through [`RunConfig::set`] and the
//! `GRADREP_SEED` environment variable overrides `seed`.
//!
//! | key              | default    | meaning                                              |
//! |------------------|------------|------------------------------------------------------|
//! | model            | desk       | preset: desk, b1, b2, l1, l2                         |
//! | stem_channels    | preset     | stem width                                           |
//! | stages           | preset     | `layers x channels` list, e.g. `2x8,2x16,2x32`        |
//! | dataset          | synthetic  | synthetic, cifar10-substitute, cifar10, cifar100      |
//! | data_path        |            | CIFAR training file(s), comma separated              |
//! | test_path        |            | CIFAR test file                                      |
//! | train_samples    | 2000       | training records used                                |
//! | test_samples     | 500        | test records used                                    |
//! | classes          | 10         | synthetic class count                                |
//! | resolution       | 32         | synthetic image size                                 |
//! | data_seed        | 0          | seed of the synthetic generator                      |
//! | seed             | 0          | initialization / data order seed                     |
//! | lr               | 0.1        | base learning rate                                   |
//! | momentum         | 0.9        |                                                      |
//! | weight_decay     | 4e-5       |                                                      |
//! | warmup_epochs    | 1          |                                                      |
//! | epochs           | 10         |                                                      |
//! | batch_size       | 64         |                                                      |
//! | label_smoothing  | 0.1        |                                                      |
//! | augment          | true       | flip + pad-4 crop                                    |
//! | optimizer        | sgd        | sgd, repopt, adamw                                   |
//! | scales_mode      | searched   | searched, all-ones, hs-init, channel-mean            |
//! | reinit           | true       | RepOpt: equivalent-kernel initialization             |
//! | gradmult         | true       | RepOpt: multiply gradients                           |
//! | equiv_steps      | 100        | verify-equivalence steps                             |
//! | equiv_channels   | 8          | verify-equivalence block width                       |
//! | calibration      | 4          | PTQ calibration batches                              |

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{gen_cifar_substitute, gen_synthetic, load_cifar, load_cifar_files, CifarVariant, Dataset};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, StageSpec};
use crate::optim::{OptimizerConfig, ScheduleKind};

pub const SEED_ENV: &str = "GRADREP_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Repopt,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    pub stem_channels: Option<usize>,
    pub stages: Option<Vec<StageSpec>>,
    pub dataset: String,
    pub data_path: Vec<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub resolution: usize,
    pub data_seed: u64,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub augment: bool,
    pub optimizer: OptimizerChoice,
    pub scales_mode: String,
    pub reinit: bool,
    pub gradmult: bool,
    pub equiv_steps: usize,
    pub equiv_channels: usize,
    pub calibration: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "desk".into(),
            stem_channels: None,
            stages: None,
            dataset: "synthetic".into(),
            data_path: Vec::new(),
            test_path: None,
            train_samples: 2000,
            test_samples: 500,
            classes: 10,
            resolution: 32,
            data_seed: 0,
            seed: 0,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 4e-5,
            warmup_epochs: 1,
            epochs: 10,
            batch_size: 64,
            label_smoothing: 0.1,
            augment: true,
            optimizer: OptimizerChoice::Sgd,
            scales_mode: "searched".into(),
            reinit: true,
            gradmult: true,
            equiv_steps: 100,
            equiv_channels: 8,
            calibration: 4,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = '{value}': expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn parse_stages(value: &str) -> Result<Vec<StageSpec>> {
    value
        .split(',')
        .map(|part| {
            let (l, c) = part.trim().split_once('x').ok_or_else(|| bad("stages", value, "layers x channels pairs"))?;
            Ok(StageSpec {
                layers: num("stages", l.trim(), "an integer layer count")?,
                channels: num("stages", c.trim(), "an integer width")?,
            })
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => {
                ModelSpec::preset(value)?;
                self.model = value.into();
            }
            "stem_channels" => self.stem_channels = Some(num(key, value, "a positive integer")?),
            "stages" => self.stages = Some(parse_stages(value)?),
            "dataset" => match value {
                "synthetic" | "cifar10-substitute" | "cifar10" | "cifar100" => self.dataset = value.into(),
                _ => return Err(bad(key, value, "synthetic, cifar10-substitute, cifar10 or cifar100")),
            },
            "data_path" => self.data_path = value.split(',').map(|p| PathBuf::from(p.trim())).collect(),
            "test_path" => self.test_path = Some(PathBuf::from(value)),
            "train_samples" => self.train_samples = num(key, value, "an integer")?,
            "test_samples" => self.test_samples = num(key, value, "an integer")?,
            "classes" => self.classes = num(key, value, "an integer")?,
            "resolution" => self.resolution = num(key, value, "an integer")?,
            "data_seed" => self.data_seed = num(key, value, "an unsigned integer")?,
            "seed" => self.seed = num(key, value, "an unsigned integer")?,
            "lr" => self.lr = num(key, value, "a number")?,
            "momentum" => self.momentum = num(key, value, "a number")?,
            "weight_decay" => self.weight_decay = num(key, value, "a number")?,
            "warmup_epochs" => self.warmup_epochs = num(key, value, "an integer")?,
            "epochs" => self.epochs = num(key, value, "an integer")?,
            "batch_size" => self.batch_size = num(key, value, "an integer")?,
            "label_smoothing" => self.label_smoothing = num(key, value, "a number")?,
            "augment" => self.augment = boolean(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerChoice::Sgd,
                    "repopt" => OptimizerChoice::Repopt,
                    "adamw" => OptimizerChoice::Adamw,
                    _ => return Err(bad(key, value, "sgd, repopt or adamw")),
                }
            }
            "scales_mode" => match value {
                "searched" | "all-ones" | "hs-init" | "channel-mean" => self.scales_mode = value.into(),
                _ => return Err(bad(key, value, "searched, all-ones, hs-init or channel-mean")),
            },
            "reinit" => self.reinit = boolean(key, value)?,
            "gradmult" => self.gradmult = boolean(key, value)?,
            "equiv_steps" => self.equiv_steps = num(key, value, "an integer")?,
            "equiv_channels" => self.equiv_channels = num(key, value, "an integer")?,
            "calibration" => self.calibration = num(key, value, "an integer")?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Override `seed` from `GRADREP_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = num(SEED_ENV, v.trim(), "an unsigned integer")?;
        }
        Ok(())
    }

    /// Model for `num_classes` classes at `input_hw`.
    pub fn model_spec(&self, num_classes: usize, input_hw: usize) -> Result<ModelSpec> {
        let base = ModelSpec::preset(&self.model)?;
        let spec = ModelSpec {
            stem_channels: self.stem_channels.unwrap_or(base.stem_channels),
            stages: self.stages.clone().unwrap_or(base.stages),
            num_classes,
            input_hw,
            ..base
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        let c = OptimizerConfig {
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            schedule: ScheduleKind::Cosine,
            label_smoothing: self.label_smoothing,
            batch_size: self.batch_size,
        };
        c.validate()?;
        Ok(c)
    }

    /// (train, test) datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (n_train, n_test) = (self.train_samples, self.test_samples);
        if n_train == 0 || n_test == 0 {
            return Err(Error::Config("train_samples and test_samples must be positive".into()));
        }
        let split = |all: Dataset| -> Result<(Dataset, Dataset)> { Ok((all.slice(0, n_train)?, all.slice(n_train, n_train + n_test)?)) };
        match self.dataset.as_str() {
            "synthetic" => split(gen_synthetic(n_train + n_test, self.resolution, self.classes, self.data_seed)?),
            "cifar10-substitute" => split(gen_cifar_substitute(n_train + n_test, self.data_seed)?),
            name => {
                let variant = if name == "cifar100" { CifarVariant::Cifar100 } else { CifarVariant::Cifar10 };
                if self.data_path.is_empty() {
                    return Err(Error::Config(format!("dataset {name} needs data_path")));
                }
                let paths: Vec<&std::path::Path> = self.data_path.iter().map(|p| p.as_path()).collect();
                let train = load_cifar_files(&paths, variant)?;
                match &self.test_path {
                    Some(p) => Ok((train.slice(0, n_train)?, load_cifar(p, variant)?.slice(0, n_test)?)),
                    None => split(train),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let c = RunConfig::parse("# desk run\nlr = 0.05\nstages = 1x4, 2x8\noptimizer=repopt\naugment = false\n").unwrap();
        assert_eq!(c.lr, 0.05);
        assert_eq!(c.stages.as_ref().unwrap()[1], StageSpec { layers: 2, channels: 8 });
        assert_eq!(c.optimizer, OptimizerChoice::Repopt);
        assert!(!c.augment);
    }

    #[test]
    fn rejects_unknown_keys_with_line() {
        let err = RunConfig::parse("lr = 0.1\nlearning_rate = 0.2\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("optimizer = lion").is_err());
        assert!(RunConfig::parse("model = b9").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set_pair("seed=42").unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.set_pair("seed").is_err());
    }

    #[test]
    fn builds_spec_and_data() {
        let c = RunConfig::parse("stages = 1x4\nstem_channels = 4\ntrain_samples = 6\ntest_samples = 3\nresolution = 8\nclasses = 2").unwrap();
        let (tr, te) = c.datasets().unwrap();
        assert_eq!((tr.len(), te.len()), (6, 3));
        let spec = c.model_spec(tr.num_classes, tr.resolution).unwrap();
        assert_eq!(spec.stages.len(), 1);
        assert_eq!(spec.input_hw, 8);
    }
}
