use std::path::Path;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::{self, epoch_seed, gen_synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::layer::{NormLayer, Normalizer};
use crate::nn::{argmax_rows, softmax_cross_entropy, ModelSpec, SgdState, SmallCnn};
use crate::norm::{Epsilon, Mode};

use super::config::{DataSource, ExperimentConfig};
use super::{create_out_dir, derive_seed, fmt_f, Stream};

const EVAL_CHUNK: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Builds train/val/test splits. Synthetic data depends only on the seed
/// and the data keys; the normalizer plays no part.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.data {
        DataSource::Synthetic => {
            let total = cfg.train_samples + cfg.val_samples + cfg.test_samples;
            let spec = SyntheticSpec {
                means: SyntheticSpec::default_means(cfg.classes, cfg.separation),
                pattern_amplitude: cfg.pattern_amplitude,
                noise: cfg.noise,
                ..SyntheticSpec::new(
                    cfg.classes,
                    cfg.image_size,
                    cfg.image_size,
                    total.div_ceil(cfg.classes),
                    derive_seed(cfg.seed, Stream::Data),
                )
            };
            let all = gen_synthetic(&spec)?;
            Ok(Splits {
                train: all.slice(0, cfg.train_samples)?,
                val: all.slice(cfg.train_samples, cfg.val_samples)?,
                test: all.slice(cfg.train_samples + cfg.val_samples, cfg.test_samples)?,
            })
        }
        DataSource::Cifar10(dir) => {
            let parts = (1..=5)
                .map(|i| data::load_cifar10(dir.join(format!("data_batch_{i}.bin"))))
                .collect::<Result<Vec<_>>>()?;
            let train_all = Dataset::concat(&parts)?;
            let test_all = data::load_cifar10(dir.join("test_batch.bin"))?;
            if cfg.val_samples >= train_all.len() {
                return Err(Error::invalid("val_samples", "leaves no training data"));
            }
            let avail = train_all.len() - cfg.val_samples;
            Ok(Splits {
                train: train_all.slice(0, cfg.train_samples.min(avail))?,
                val: train_all.slice(avail, cfg.val_samples)?,
                test: test_all.slice(0, cfg.test_samples.min(test_all.len()))?,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Running accuracy over the epoch's train-mode batches.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean train loss over the epoch's steps.
    pub loss: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IotaSummary {
    pub layer: String,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl IotaSummary {
    pub fn of(layer: &str, iota: &[f64]) -> Self {
        IotaSummary {
            layer: layer.to_string(),
            min: iota.iter().copied().fold(f64::INFINITY, f64::min),
            mean: iota.iter().sum::<f64>() / iota.len() as f64,
            max: iota.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub normalizer: Normalizer,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    /// `None` when no training happened and eval statistics are undefined.
    pub test_acc: Option<f64>,
    pub iota: Vec<IotaSummary>,
    /// Mean |iota - 1| per BCN layer.
    pub iota_drift: Vec<f64>,
}

impl RunRecord {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn best_train_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max)
    }
}

pub fn model_spec(cfg: &ExperimentConfig, classes: usize) -> Result<ModelSpec> {
    Ok(ModelSpec {
        in_channels: 3,
        classes,
        normalizer: cfg.normalizer,
        groups: cfg.groups,
        eps: Epsilon::new(cfg.eps)?,
        alpha: cfg.alpha,
    })
}

pub fn accuracy(model: &mut SmallCnn, ds: &Dataset) -> Result<f64> {
    let mut correct = 0;
    let mut start = 0;
    while start < ds.len() {
        let count = EVAL_CHUNK.min(ds.len() - start);
        let part = ds.slice(start, count)?;
        let (logits, _) = model.forward(part.images(), Mode::Eval)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(part.labels())
            .filter(|(p, l)| p == l)
            .count();
        start += count;
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn iota_summaries(model: &SmallCnn) -> Vec<IotaSummary> {
    model
        .norm_layers()
        .into_iter()
        .filter_map(|(name, layer)| layer.mix.as_ref().map(|m| IotaSummary::of(name, &m.iota)))
        .collect()
}

/// Trains the reference CNN. Data order, initialization and shuffling
/// each use their own seed stream, so swapping the normalizer changes
/// nothing else.
pub fn train_model(cfg: &ExperimentConfig, splits: &Splits) -> Result<(RunRecord, SmallCnn)> {
    cfg.validate()?;
    let classes = splits.train.classes();
    let mut model = SmallCnn::new(&model_spec(cfg, classes)?, derive_seed(cfg.seed, Stream::Init))?;
    let mut sgd = SgdState::new(cfg.lr, cfg.momentum, cfg.milestones.clone(), cfg.weight_decay)?;
    let shuffle_seed = derive_seed(cfg.seed, Stream::Shuffle);
    let mut record = RunRecord {
        normalizer: cfg.normalizer,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        steps: 0,
        epochs: Vec::new(),
        test_acc: None,
        iota: Vec::new(),
        iota_drift: Vec::new(),
    };
    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut correct, mut seen, mut loss_sum, mut steps) = (0usize, 0usize, 0.0, 0usize);
        for (x, labels) in data::batches(&splits.train, cfg.batch_size, epoch_seed(shuffle_seed, epoch), true)? {
            if cfg.max_steps > 0 && record.steps >= cfg.max_steps {
                if steps == 0 {
                    break 'epochs;
                }
                break;
            }
            let (logits, cache) = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: record.steps + 1,
                });
            }
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
            loss_sum += loss;
            steps += 1;
            record.steps += 1;
            let grads = model.backward(&cache, &dlogits)?;
            sgd.step(&mut model.params_mut(cfg.iota_weight_decay), &grads, epoch)?;
        }
        let val_acc = accuracy(&mut model, &splits.val)?;
        record.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            loss: loss_sum / steps as f64,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }
    if !record.epochs.is_empty() {
        record.test_acc = Some(accuracy(&mut model, &splits.test)?);
    }
    record.iota = iota_summaries(&model);
    record.iota_drift = model
        .norm_layers()
        .into_iter()
        .filter_map(|(_, l)| l.mix.as_ref())
        .map(|m| m.iota.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / m.iota.len() as f64)
        .collect();
    Ok((record, model))
}

pub const CURVE_HEADER: [&str; 4] = ["epoch", "train_acc", "val_acc", "loss"];
pub const SUMMARY_HEADER: [&str; 13] = [
    "normalizer",
    "batch_size",
    "seed",
    "epochs",
    "steps",
    "train_acc",
    "val_acc",
    "test_acc",
    "loss",
    "iota_min",
    "iota_mean",
    "iota_max",
    "iota_drift",
];

pub fn write_curve(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CURVE_HEADER)?;
    for e in &record.epochs {
        w.write_record([e.epoch.to_string(), fmt_f(e.train_acc), fmt_f(e.val_acc), fmt_f(e.loss)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn summary_row(record: &RunRecord) -> Vec<String> {
    let last = record.final_epoch();
    let opt = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();
    let some = |v: f64| (!record.iota.is_empty()).then_some(v);
    let iota_min = some(record.iota.iter().map(|s| s.min).fold(f64::INFINITY, f64::min));
    let iota_max = some(record.iota.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max));
    let iota_mean = some(record.iota.iter().map(|s| s.mean).sum::<f64>() / record.iota.len().max(1) as f64);
    let drift = some(record.iota_drift.iter().copied().fold(0.0, f64::max));
    vec![
        record.normalizer.to_string(),
        record.batch_size.to_string(),
        record.seed.to_string(),
        record.epochs.len().to_string(),
        record.steps.to_string(),
        opt(last.map(|e| e.train_acc)),
        opt(last.map(|e| e.val_acc)),
        opt(record.test_acc),
        opt(last.map(|e| e.loss)),
        opt(iota_min),
        opt(iota_mean),
        opt(iota_max),
        opt(drift),
    ]
}

/// Trains once and writes `curve.csv`, `summary.csv` and `model.ckpt`
/// under the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let splits = load_splits(cfg)?;
    let (record, model) = train_model(cfg, &splits)?;
    let dir = create_out_dir(&cfg.out_dir)?;
    write_curve(&record, &dir.join("curve.csv"))?;
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SUMMARY_HEADER)?;
    w.write_record(summary_row(&record))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    model.to_checkpoint().save(dir.join("model.ckpt"))?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub normalizer: Normalizer,
    pub batch_size: usize,
    pub runs: Vec<RunRecord>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&RunRecord) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_train_acc(&self) -> f64 {
        self.mean(|r| r.final_epoch().map_or(0.0, |e| e.train_acc))
    }

    pub fn mean_val_acc(&self) -> f64 {
        self.mean(|r| r.final_epoch().map_or(0.0, |e| e.val_acc))
    }

    pub fn mean_test_acc(&self) -> f64 {
        self.mean(|r| r.test_acc.unwrap_or(0.0))
    }
}

pub const ABLATION_HEADER: [&str; 6] = ["normalizer", "batch_size", "seeds", "train_acc", "val_acc", "test_acc"];

/// Trains BN and BCN at every configured batch size over `seeds`
/// consecutive seeds. Runs are sequential and share nothing.
pub fn run_ablation(cfg: &ExperimentConfig, normalizers: &[Normalizer]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let splits: Vec<Splits> = (0..cfg.seeds)
        .map(|i| {
            load_splits(&ExperimentConfig {
                seed: cfg.seed + i as u64,
                ..cfg.clone()
            })
        })
        .collect::<Result<_>>()?;
    for &normalizer in normalizers {
        for &batch_size in &cfg.sizes {
            let mut runs = Vec::new();
            for (i, s) in splits.iter().enumerate() {
                let run_cfg = ExperimentConfig {
                    normalizer,
                    batch_size,
                    seed: cfg.seed + i as u64,
                    ..cfg.clone()
                };
                runs.push(train_model(&run_cfg, s)?.0);
            }
            rows.push(AblationRow {
                normalizer,
                batch_size,
                runs,
            });
        }
    }
    Ok(rows)
}

/// Writes `ablation.csv` (seed means per normalizer and batch size) and
/// `ablation_runs.csv` (one summary row per run).
pub fn cmd_ablate_batch(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let rows = run_ablation(cfg, &[Normalizer::Bn, Normalizer::Bcn])?;
    let dir = create_out_dir(&cfg.out_dir)?;
    let path = dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(ABLATION_HEADER)?;
    for r in &rows {
        w.write_record([
            r.normalizer.to_string(),
            r.batch_size.to_string(),
            r.runs.len().to_string(),
            fmt_f(r.mean_train_acc()),
            fmt_f(r.mean_val_acc()),
            fmt_f(r.mean_test_acc()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("ablation_runs.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SUMMARY_HEADER)?;
    for run in rows.iter().flat_map(|r| &r.runs) {
        w.write_record(summary_row(run))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub const IOTA_HEADER: [&str; 4] = ["layer", "min", "mean", "max"];

/// Reads a model checkpoint and reports iota statistics per BCN layer;
/// writes `iota.csv` when `out_dir` is given.
pub fn cmd_dump_iota(checkpoint: &Path, out_dir: Option<&Path>) -> Result<Vec<IotaSummary>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut out = Vec::new();
    for prefix in ["norm1", "norm2"] {
        if ckpt.get(&format!("{prefix}.kind")).is_some() {
            let layer = NormLayer::load(prefix, &ckpt)?;
            if let Some(m) = &layer.mix {
                out.push(IotaSummary::of(prefix, &m.iota));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("checkpoint", "contains no BCN layers"));
    }
    if let Some(dir) = out_dir {
        let dir = create_out_dir(dir)?;
        let path = dir.join("iota.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(IOTA_HEADER)?;
        for s in &out {
            w.write_record([s.layer.clone(), fmt_f(s.min), fmt_f(s.mean), fmt_f(s.max)])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(out)
}
