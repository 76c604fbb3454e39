//! Run configuration, the training loop and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{load_idx, make_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::executor::{Cluster, ExecutionMode};
use crate::model::{HsvitModel, ModelConfig};
use crate::nn::{cosine_lr, AdamW};
use crate::tensor::{ops, Tensor};

pub const METRICS_HEADER: &str = "epoch,step,lr,loss,accuracy";

fn default_epochs() -> usize {
    300
}
fn default_batch() -> usize {
    64
}
fn default_workers() -> usize {
    1
}
fn default_lr() -> f64 {
    0.001
}
fn default_wd() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_wd(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        num_classes: usize,
        samples: usize,
        size: usize,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataConfig::Synthetic {
                num_classes,
                samples,
                size,
                seed,
            } => make_synthetic(*num_classes, *samples, *size, *seed),
            DataConfig::Idx { images, labels } => load_idx(images, labels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub mode: ExecutionMode,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let run: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        run.validate()?;
        Ok(run)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut run: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut run.output_dir);
        if let DataConfig::Idx { images, labels } = &mut run.data {
            rebase(images);
            rebase(labels);
        }
        run.validate()?;
        Ok(run)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.optimizer.lr)));
        }
        crate::executor::plan_partition(&self.model, self.workers)?;
        if let DataConfig::Idx { images, labels } = &self.data {
            for p in [images, labels] {
                if !p.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the last step (the base rate for epoch 0).
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.loss, self.accuracy
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Epoch 0 holds the metrics of the initial model on the full training
    /// set; later rows average over that epoch's mini-batches.
    pub epochs: Vec<EpochMetrics>,
    /// Accuracy of the final model on the full training set.
    pub final_accuracy: f64,
    pub checkpoint_dir: PathBuf,
    pub checkpoint_hash: String,
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn accuracy(logits: &[Tensor], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| ops::argmax(l.data()) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn check_extents(config: &ModelConfig, data: &Dataset) -> Result<()> {
    let (c, h, w) = data.extents();
    if (c, [h, w]) != (config.in_channels, config.input_size) {
        return Err(Error::Config(format!(
            "dataset images are {c}x{h}x{w} but the model expects {}x{}x{}",
            config.in_channels, config.input_size[0], config.input_size[1]
        )));
    }
    if data.num_classes > config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            data.num_classes, config.num_classes
        )));
    }
    Ok(())
}

/// Mean loss and accuracy over the whole dataset, in chunks of `batch`.
fn full_pass(cluster: &mut Cluster, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (xs, ys) = data.batch(chunk);
        for (logits, &y) in cluster.predict(&xs)?.iter().zip(&ys) {
            loss += ops::softmax_cross_entropy(logits, y)?.0;
            hits += usize::from(ops::argmax(logits.data()) == y);
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Trains with per-step cosine annealing over `epochs * ceil(n / batch)`
/// steps, writing `metrics.csv` and `checkpoint/` under the output directory.
pub fn train(run: &RunConfig) -> Result<RunReport> {
    let data = run.data.load()?;
    train_on(run, &data)
}

/// [`train`] with an already loaded dataset.
pub fn train_on(run: &RunConfig, data: &Dataset) -> Result<RunReport> {
    run.model.validate()?;
    check_extents(&run.model, data)?;
    fs::create_dir_all(&run.output_dir)?;
    fs::write(run.output_dir.join("run.toml"), run.to_toml())?;
    let model = HsvitModel::new(run.model.clone(), run.seed)?;
    let optimizer = AdamW::new(run.optimizer.lr, run.optimizer.weight_decay);
    let mut cluster = Cluster::new(model, run.workers, run.mode, optimizer)?;

    let mut csv = BufWriter::new(File::create(run.output_dir.join("metrics.csv"))?);
    writeln!(csv, "{METRICS_HEADER}")?;
    let (loss, acc) = full_pass(&mut cluster, data, run.batch_size)?;
    let mut rows = vec![EpochMetrics {
        epoch: 0,
        step: 0,
        lr: run.optimizer.lr,
        loss,
        accuracy: acc,
    }];
    writeln!(csv, "{}", rows[0].csv_row())?;
    csv.flush()?;

    let steps_per_epoch = data.len().div_ceil(run.batch_size);
    let total = run.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=run.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hit_sum, mut lr) = (0.0, 0.0, run.optimizer.lr);
        for chunk in order.chunks(run.batch_size) {
            lr = cosine_lr(step, total, run.optimizer.lr);
            let (xs, ys) = data.batch(chunk);
            let m = cluster.train_step(&xs, &ys, lr).map_err(|e| match e {
                Error::NonFinite { worker, param, .. } => Error::NonFinite { step, worker, param },
                other => other,
            })?;
            loss_sum += m.loss * chunk.len() as f64;
            hit_sum += m.accuracy * chunk.len() as f64;
            step += 1;
        }
        let row = EpochMetrics {
            epoch,
            step,
            lr,
            loss: loss_sum / data.len() as f64,
            accuracy: hit_sum / data.len() as f64,
        };
        writeln!(csv, "{}", row.csv_row())?;
        csv.flush()?;
        rows.push(row);
    }

    let final_accuracy = if run.epochs == 0 {
        rows[0].accuracy
    } else {
        full_pass(&mut cluster, data, run.batch_size)?.1
    };
    let model = cluster.to_model();
    let checkpoint_dir = run.output_dir.join("checkpoint");
    let checkpoint_hash = checkpoint::save(&model, step as u64, &checkpoint_dir)?;
    Ok(RunReport {
        epochs: rows,
        final_accuracy,
        checkpoint_dir,
        checkpoint_hash,
    })
}

/// Top-1 accuracy of `model` on `data` using `workers` workers.
pub fn evaluate_model(model: &HsvitModel, data: &Dataset, workers: usize, mode: ExecutionMode) -> Result<f64> {
    check_extents(model.config(), data)?;
    let mut cluster = Cluster::new(model.clone(), workers, mode, AdamW::default())?;
    Ok(full_pass(&mut cluster, data, 64)?.1)
}

/// Loads a checkpoint directory and evaluates it on `data`.
pub fn evaluate(checkpoint_dir: &Path, data: &Dataset, workers: usize, mode: ExecutionMode) -> Result<f64> {
    let (model, _) = checkpoint::load(checkpoint_dir)?;
    evaluate_model(&model, data, workers, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn run_config(out: &Path, epochs: usize) -> RunConfig {
        let mut model = ModelConfig::tiny(2);
        model.in_channels = 3;
        RunConfig {
            seed: 5,
            epochs,
            batch_size: 8,
            workers: 2,
            mode: ExecutionMode::SequentialSim,
            output_dir: out.to_path_buf(),
            optimizer: OptimizerConfig::default(),
            model,
            data: DataConfig::Synthetic {
                num_classes: 2,
                samples: 24,
                size: 8,
                seed: 1,
            },
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let dir = tempdir().unwrap();
        let run = run_config(dir.path(), 3);
        let text = run.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), run);
        assert!(RunConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
        let no_seed: String = text
            .lines()
            .filter(|l| !l.starts_with("seed"))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(RunConfig::from_toml(&no_seed).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempdir().unwrap();
        let mut run = run_config(Path::new("out"), 1);
        run.data = DataConfig::Idx {
            images: "d/images.idx".into(),
            labels: "d/labels.idx".into(),
        };
        let path = dir.path().join("run.toml");
        fs::write(&path, run.to_toml()).unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(Error::Config(_))));
        fs::create_dir(dir.path().join("d")).unwrap();
        let ds = make_synthetic(2, 4, 8, 0).unwrap();
        crate::data::write_idx(&ds, &dir.path().join("d/images.idx"), &dir.path().join("d/labels.idx")).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(loaded.output_dir, dir.path().join("out"));
    }

    #[test]
    fn zero_epochs_reports_init_and_saves_init() {
        let dir = tempdir().unwrap();
        let run = run_config(dir.path(), 0);
        let report = train(&run).unwrap();
        assert_eq!(report.epochs.len(), 1);
        let init = HsvitModel::new(run.model.clone(), run.seed).unwrap();
        assert_eq!(report.checkpoint_hash, checkpoint::model_hash(&init));
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn training_is_reproducible_byte_for_byte() {
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        let ra = train(&run_config(a.path(), 2)).unwrap();
        let rb = train(&run_config(b.path(), 2)).unwrap();
        assert_eq!(ra.checkpoint_hash, rb.checkpoint_hash);
        assert_eq!(
            fs::read(a.path().join("metrics.csv")).unwrap(),
            fs::read(b.path().join("metrics.csv")).unwrap()
        );
        assert_eq!(ra.epochs.last().unwrap().step, 6);
    }

    #[test]
    fn non_finite_loss_aborts_with_a_diagnostic() {
        let dir = tempdir().unwrap();
        let mut run = run_config(dir.path(), 1);
        run.optimizer.lr = 1e300;
        match train(&run) {
            Err(Error::NonFinite { param, .. }) => assert!(!param.is_empty()),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn accuracy_of_one_hot_logits_is_one() {
        let labels = vec![2, 0, 1, 1];
        let logits: Vec<Tensor> = labels
            .iter()
            .map(|&y| Tensor::from_fn(&[3], |i| f64::from(u8::from(i == y))))
            .collect();
        assert_eq!(accuracy(&logits, &labels), 1.0);
        let tied = vec![Tensor::zeros(&[3]); 2];
        assert_eq!(accuracy(&tied, &[0, 1]), 0.5);
    }

    #[test]
    fn evaluation_checks_extents_and_agrees_across_workers() {
        let dir = tempdir().unwrap();
        let run = run_config(dir.path(), 1);
        let report = train(&run).unwrap();
        let data = run.data.load().unwrap();
        let one = evaluate(&report.checkpoint_dir, &data, 1, ExecutionMode::SequentialSim).unwrap();
        let two = evaluate(&report.checkpoint_dir, &data, 2, ExecutionMode::Concurrent).unwrap();
        assert_eq!(one, two);
        assert_eq!(one, report.final_accuracy);
        let wrong = make_synthetic(2, 4, 16, 0).unwrap();
        assert!(matches!(
            evaluate(&report.checkpoint_dir, &wrong, 1, ExecutionMode::SequentialSim),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn idx_files_train_identically_on_one_and_two_workers() {
        let root = tempdir().unwrap();
        let data = crate::data::make_synthetic(2, 24, 8, 2).unwrap();
        let images = root.path().join("images.idx");
        let labels = root.path().join("labels.idx");
        crate::data::write_idx(&data, &images, &labels).unwrap();
        let mut hashes = Vec::new();
        for (k, mode) in [(1, ExecutionMode::SequentialSim), (2, ExecutionMode::Concurrent)] {
            let mut run = run_config(&root.path().join(format!("k{k}")), 2);
            run.workers = k;
            run.mode = mode;
            run.data = DataConfig::Idx {
                images: images.clone(),
                labels: labels.clone(),
            };
            let report = train(&run).unwrap();
            let loaded = run.data.load().unwrap();
            let acc = evaluate(&report.checkpoint_dir, &loaded, 1, ExecutionMode::SequentialSim).unwrap();
            assert_eq!(acc, report.final_accuracy);
            hashes.push(report.checkpoint_hash);
        }
        assert_eq!(hashes[0], hashes[1]);
    }
}
