use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layer::Normalizer;
use crate::nn::Milestone;
use crate::norm::{DEFAULT_ALPHA, DEFAULT_EPS};

/// Where training images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10(PathBuf),
}

/// Every knob of a run. Defaults follow the reference recipe: SGD with
/// momentum 0.9 from LR 0.1 with two ÷10 drops, batch 8, ε 1e-5, α 0.9.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub normalizer: Normalizer,
    pub groups: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many SGD steps; 0 means no cap.
    pub max_steps: usize,
    pub lr: f64,
    pub milestones: Vec<Milestone>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iota_weight_decay: bool,
    pub eps: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Number of consecutive seeds, starting at `seed`, for multi-seed commands.
    pub seeds: usize,
    pub data: DataSource,
    pub classes: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub noise: f64,
    pub separation: f64,
    pub pattern_amplitude: f64,
    pub sizes: Vec<usize>,
    pub gradcheck_tol: f64,
    pub gradcheck_step: f64,
    pub fault: Fault,
    /// Epsilon for the second layer of each equivalence pair; defaults to `eps`.
    pub paired_eps: Option<f64>,
    pub out_dir: PathBuf,
}

/// Deliberate gradient corruption for exercising the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    IotaSign,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            normalizer: Normalizer::Bcn,
            groups: 4,
            batch_size: 8,
            epochs: 30,
            max_steps: 0,
            lr: 0.1,
            milestones: vec![
                Milestone { epoch: 20, factor: 0.1 },
                Milestone { epoch: 25, factor: 0.1 },
            ],
            momentum: 0.9,
            weight_decay: 0.0,
            iota_weight_decay: false,
            eps: DEFAULT_EPS,
            alpha: DEFAULT_ALPHA,
            seed: 1,
            seeds: 3,
            data: DataSource::Synthetic,
            classes: 4,
            image_size: 8,
            train_samples: 2000,
            val_samples: 400,
            test_samples: 400,
            noise: 0.15,
            separation: 0.5,
            pattern_amplitude: 0.2,
            sizes: vec![128, 16, 8, 4, 2],
            gradcheck_tol: 1e-4,
            gradcheck_step: 1e-5,
            fault: Fault::None,
            paired_eps: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "normalizer",
    "groups",
    "batch_size",
    "epochs",
    "max_steps",
    "lr",
    "milestones",
    "momentum",
    "weight_decay",
    "iota_weight_decay",
    "eps",
    "alpha",
    "seed",
    "seeds",
    "data",
    "cifar_dir",
    "classes",
    "image_size",
    "train_samples",
    "val_samples",
    "test_samples",
    "noise",
    "separation",
    "pattern_amplitude",
    "sizes",
    "gradcheck_tol",
    "gradcheck_step",
    "fault",
    "paired_eps",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(key, format!("expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// `epoch:factor` pairs separated by commas; `none` or empty for a flat rate.
pub fn parse_milestones(value: &str) -> Result<Vec<Milestone>> {
    if value.trim().is_empty() || value.trim() == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|item| {
            let (e, f) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::invalid("milestones", format!("expected epoch:factor, got {item:?}")))?;
            Ok(Milestone {
                epoch: parse("milestones", e.trim())?,
                factor: parse("milestones", f.trim())?,
            })
        })
        .collect()
}

impl ExperimentConfig {
    /// Sets one key. Dashes in the key are treated as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "normalizer" => self.normalizer = value.parse()?,
            "groups" => self.groups = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "max_steps" => self.max_steps = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "milestones" => self.milestones = parse_milestones(value)?,
            "momentum" => self.momentum = parse(k, value)?,
            "weight_decay" => self.weight_decay = parse(k, value)?,
            "iota_weight_decay" => self.iota_weight_decay = parse_bool(k, value)?,
            "eps" => self.eps = parse(k, value)?,
            "alpha" => self.alpha = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "seeds" => self.seeds = parse(k, value)?,
            "data" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic,
                    "cifar10" => DataSource::Cifar10(match &self.data {
                        DataSource::Cifar10(p) => p.clone(),
                        DataSource::Synthetic => PathBuf::from("cifar-10-batches-bin"),
                    }),
                    _ => {
                        return Err(Error::invalid(
                            k,
                            format!("expected synthetic or cifar10, got {value:?}"),
                        ))
                    }
                }
            }
            "cifar_dir" => self.data = DataSource::Cifar10(PathBuf::from(value)),
            "classes" => self.classes = parse(k, value)?,
            "image_size" => self.image_size = parse(k, value)?,
            "train_samples" => self.train_samples = parse(k, value)?,
            "val_samples" => self.val_samples = parse(k, value)?,
            "test_samples" => self.test_samples = parse(k, value)?,
            "noise" => self.noise = parse(k, value)?,
            "separation" => self.separation = parse(k, value)?,
            "pattern_amplitude" => self.pattern_amplitude = parse(k, value)?,
            "sizes" => self.sizes = parse_list(k, value)?,
            "gradcheck_tol" => self.gradcheck_tol = parse(k, value)?,
            "gradcheck_step" => self.gradcheck_step = parse(k, value)?,
            "fault" => {
                self.fault = match value {
                    "none" => Fault::None,
                    "iota_sign" => Fault::IotaSign,
                    _ => return Err(Error::invalid(k, format!("expected none or iota_sign, got {value:?}"))),
                }
            }
            "paired_eps" => self.paired_eps = Some(parse(k, value)?),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::invalid(k, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}", i + 1), "expected key = value"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Defaults, then the optional file, then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::invalid(name, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("groups", self.groups)?;
        positive("batch_size", self.batch_size)?;
        positive("seeds", self.seeds)?;
        positive("classes", self.classes)?;
        positive("image_size", self.image_size)?;
        positive("train_samples", self.train_samples)?;
        positive("val_samples", self.val_samples)?;
        positive("test_samples", self.test_samples)?;
        if self.sizes.contains(&0) || self.sizes.is_empty() {
            return Err(Error::invalid("sizes", "need at least one size, each >= 1"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        if let Some(p) = self.paired_eps {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::invalid("paired_eps", "must be positive"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::invalid("noise", "must be >= 0"));
        }
        if !(self.gradcheck_tol > 0.0 && self.gradcheck_step > 0.0) {
            return Err(Error::invalid("gradcheck", "tolerance and step must be positive"));
        }
        if self
            .milestones
            .iter()
            .any(|m| !(m.factor > 0.0 && m.factor.is_finite()))
        {
            return Err(Error::invalid("milestones", "factors must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_recipe() {
        let c = ExperimentConfig::default();
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.alpha, 0.9);
        assert_eq!(c.eps, 1e-5);
        assert_eq!(c.lr, 0.1);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.milestones.len(), 2);
        assert!(c.milestones.iter().all(|m| m.factor == 0.1));
        c.validate().unwrap();
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nnormalizer = bn\nbatch_size=4  # trailing\n\nmilestones = 2:0.5\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &[("batch-size".into(), "2".into())]).unwrap();
        assert_eq!(cfg.normalizer, Normalizer::Bn);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.milestones, vec![Milestone { epoch: 2, factor: 0.5 }]);
    }

    #[test]
    fn bad_input_is_rejected() {
        let mut c = ExperimentConfig::default();
        assert!(c.set("no_such_key", "1").is_err());
        assert!(c.set("epochs", "many").is_err());
        assert!(c.set("normalizer", "xn").is_err());
        assert!(c.apply_text("just words").is_err());
        assert!(parse_milestones("20-0.1").is_err());
        assert!(parse_milestones("none").unwrap().is_empty());
        c.set("momentum", "1.0").unwrap();
        assert!(c.validate().is_err());
        let missing = ExperimentConfig::load(Some(Path::new("/nonexistent/cfg")), &[]).unwrap_err();
        assert!(missing.is_io());
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("normalizer", "gn"),
            ("fault", "iota_sign"),
            ("data", "synthetic"),
            ("cifar_dir", "/tmp/x"),
            ("milestones", "1:0.1"),
            ("sizes", "4,2"),
            ("iota_weight_decay", "true"),
            ("out_dir", "/tmp/out"),
        ];
        for key in KEYS {
            let value = samples.iter().find(|(k, _)| k == key).map_or("3", |(_, v)| v);
            ExperimentConfig::default()
                .set(key, value)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
