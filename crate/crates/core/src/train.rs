//! Minibatch training, evaluation and resumable checkpoints.
//!
//! Everything that influences the trajectory is a function of the seed: the
//! train/val/test partition, the per-epoch shuffle (seeded from the seed and
//! the epoch number, so a resumed run replays it) and the initial parameters.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use gncde_autodiff::{clip_global_norm, Adam, AdamConfig, AutodiffError, Tape, Tensor, TensorFile};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ForecastSample};
use crate::error::{CoreError, Result};
use crate::model::{count_params, Gncde, ModelConfig, Params};

/// Stream reserved for the split permutation; epoch shuffles use
/// `EPOCH_STREAM_BASE + epoch`.
const SPLIT_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Train / validation / test fractions, split by series.
    pub split: [f64; 3],
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Set the model's observation scale from the training inputs.
    pub auto_obs_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            split: [0.8, 0.1, 0.1],
            patience: None,
            clip_norm: Some(10.0),
            auto_obs_scale: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad(format!("split fractions must lie in [0, 1], got {:?}", self.split));
        }
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must sum to 1, got {total}"));
        }
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr >= 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
        {
            return bad("invalid optimizer hyperparameters".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Sample indices of each partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation cut into train / val / test. The training share is
/// rounded down but kept non-empty; validation is rounded down; the test
/// split takes the remainder.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64 * fractions[0]).floor() as usize).max(1).min(n);
    let n_val = ((n as f64 * fractions[1]).floor() as usize).min(n - n_train);
    Split {
        test: idx[n_train + n_val..].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        train: {
            idx.truncate(n_train);
            idx
        },
    }
}

/// Order in which an epoch visits the training indices.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM_BASE + epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Mean absolute error of two equally shaped buffers.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(CoreError::Config(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(CoreError::Config("MAE of empty buffers".into()));
    }
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// `1 / mean |y|` over the input windows, or 1 when they are all zero.
pub fn observation_scale(samples: &[&ForecastSample]) -> f64 {
    let (sum, count) = samples
        .iter()
        .flat_map(|s| s.input.iter())
        .fold((0.0, 0usize), |(s, c), y| (s + y.abs(), c + 1));
    if count == 0 || sum == 0.0 {
        1.0
    } else {
        count as f64 / sum
    }
}

/// Mean of per-sample MAEs, in the given order, evaluated in batches.
pub fn evaluate(model: &Gncde, params: &Params, samples: &[&ForecastSample], batch_size: usize) -> Result<f64> {
    let per_sample = per_sample_mae(model, params, samples, batch_size)?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

pub fn per_sample_mae(
    model: &Gncde,
    params: &Params,
    samples: &[&ForecastSample],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(CoreError::Dataset("cannot evaluate on an empty split".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let vars = model.bind_constant(&mut tape, params)?;
        let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.input.as_slice()).collect();
        let pred = model.forward(&mut tape, &vars, &inputs)?;
        let pred = tape.value(pred).data();
        let per = pred.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            out.push(mae(&pred[i * per..(i + 1) * per], &s.target)?);
        }
    }
    if let Some(i) = out.iter().position(|m| !m.is_finite()) {
        return Err(CoreError::Numeric(format!("non-finite evaluation MAE for sample {i}")));
    }
    Ok(out)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub mae: f64,
    /// Seconds since training started; excluded from determinism checks.
    pub wall_time: f64,
}

impl MetricRecord {
    /// Equality of everything except the wall-clock time, bitwise on MAE.
    pub fn same_values(&self, other: &MetricRecord) -> bool {
        self.epoch == other.epoch && self.split == other.split && self.mae.to_bits() == other.mae.to_bits()
    }
}

pub fn write_metrics(records: &[MetricRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Training progress that a checkpoint captures.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Params,
    pub best_params: Params,
    pub best_val: f64,
    pub best_epoch: usize,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<MetricRecord>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    best_val: f64,
    best_epoch: usize,
    stopped_early: bool,
    log: Vec<MetricRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    /// Parameters with the best validation MAE.
    pub best_params: Params,
    pub final_params: Params,
    pub log: Vec<MetricRecord>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub test_mae: f64,
    pub epochs_to_threshold: usize,
    pub epochs_run: usize,
    pub n_params: usize,
    pub wall_time: f64,
}

/// First epoch whose validation MAE is within 1.25x of the best one.
pub fn epochs_to_threshold(log: &[MetricRecord]) -> usize {
    let val: Vec<&MetricRecord> = log.iter().filter(|r| r.split == "val").collect();
    let best = val.iter().map(|r| r.mae).fold(f64::INFINITY, f64::min);
    val.iter().find(|r| r.mae <= 1.25 * best).map_or(0, |r| r.epoch)
}

/// A training run bound to a dataset.
pub struct Trainer<'a> {
    model: Gncde,
    config: TrainConfig,
    data: &'a Dataset,
    split: Split,
    state: TrainState,
    started: Instant,
    time_offset: f64,
}

impl<'a> Trainer<'a> {
    /// Starts from `params`, or from a seeded initialisation when `None`.
    /// With `auto_obs_scale` the model's observation scale is replaced by
    /// the training-split statistic before anything is evaluated.
    pub fn new(
        mut model_config: ModelConfig,
        params: Option<Params>,
        data: &'a Dataset,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(CoreError::Dataset("cannot train on an empty dataset".into()));
        }
        if data.n_vertices() != model_config.n_vertices {
            return Err(CoreError::Config(format!(
                "dataset has {} vertices, model expects {}",
                data.n_vertices(),
                model_config.n_vertices
            )));
        }
        let split = split_indices(data.len(), config.split, config.seed);
        if config.auto_obs_scale {
            let train: Vec<&ForecastSample> = split.train.iter().map(|&i| &data.samples[i]).collect();
            model_config.obs_scale = observation_scale(&train);
        }
        let model = Gncde::new(model_config)?;
        let params = match params {
            Some(p) => {
                if p.layout() != model.layout() {
                    return Err(CoreError::Config(
                        "initial parameters do not match the model configuration".into(),
                    ));
                }
                p
            }
            None => model.init_params(config.seed),
        };
        let adam = Adam::new(config.adam, params.tensors());
        let mut trainer = Self {
            model,
            config,
            data,
            split,
            state: TrainState {
                best_params: params.clone(),
                params,
                best_val: f64::INFINITY,
                best_epoch: 0,
                adam,
                epoch: 0,
                log: Vec::new(),
                stopped_early: false,
            },
            started: Instant::now(),
            time_offset: 0.0,
        };
        // epoch 0 records the untrained model, so the best parameters are
        // never worse than the initial ones
        if !trainer.split.val.is_empty() {
            let val = trainer.evaluate_split(&trainer.split.val, &trainer.state.params)?;
            trainer.record(0, "val", val);
            trainer.state.best_val = val;
        }
        Ok(trainer)
    }

    /// Rebuilds a run from a checkpoint; the model and training
    /// configurations come from the checkpoint itself.
    pub fn from_checkpoint(mut file: TensorFile, data: &'a Dataset) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| CoreError::Checkpoint(format!("malformed metadata: {e}")))?;
        let model = Gncde::new(meta.model.clone())?;
        if data.n_vertices() != meta.model.n_vertices {
            return Err(CoreError::Checkpoint(format!(
                "dataset has {} vertices, checkpoint model expects {}",
                data.n_vertices(),
                meta.model.n_vertices
            )));
        }
        let layout = model.layout().to_vec();
        let mut take_all = |prefix: &str| -> Result<Vec<Tensor>> {
            layout
                .iter()
                .map(|s| {
                    file.take(&format!("{prefix}/{}", s.name), &s.shape)
                        .map_err(|e| CoreError::Checkpoint(e.to_string()))
                })
                .collect()
        };
        let params = Params::from_tensors(&meta.model, take_all("param")?)?;
        let best_params = Params::from_tensors(&meta.model, take_all("best")?)?;
        let m = take_all("adam_m")?;
        let v = take_all("adam_v")?;
        let adam = Adam::from_state(meta.train.adam, file.step, m, v)?;
        let split = split_indices(data.len(), meta.train.split, meta.train.seed);
        let time_offset = meta.log.last().map_or(0.0, |r| r.wall_time);
        Ok(Self {
            model,
            config: meta.train,
            data,
            split,
            state: TrainState {
                params,
                best_params,
                best_val: meta.best_val,
                best_epoch: meta.best_epoch,
                adam,
                epoch: meta.epoch,
                log: meta.log,
                stopped_early: meta.stopped_early,
            },
            started: Instant::now(),
            time_offset,
        })
    }

    pub fn model(&self) -> &Gncde {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Extends the planned number of epochs (for resuming past the original
    /// budget).
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    fn elapsed(&self) -> f64 {
        self.time_offset + self.started.elapsed().as_secs_f64()
    }

    fn record(&mut self, epoch: usize, split: &str, mae: f64) {
        let wall_time = self.elapsed();
        self.state.log.push(MetricRecord {
            epoch,
            split: split.to_string(),
            mae,
            wall_time,
        });
    }

    fn samples(&self, idx: &[usize]) -> Vec<&'a ForecastSample> {
        idx.iter().map(|&i| &self.data.samples[i]).collect()
    }

    fn evaluate_split(&self, idx: &[usize], params: &Params) -> Result<f64> {
        evaluate(&self.model, params, &self.samples(idx), self.config.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs || self.state.stopped_early
    }

    /// Runs one epoch; returns `(train MAE, validation MAE)`.
    pub fn run_epoch(&mut self) -> Result<(f64, Option<f64>)> {
        let epoch = self.state.epoch + 1;
        let order = epoch_order(&self.split.train, self.config.seed, epoch);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&ForecastSample> = self.samples(chunk);
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, &self.state.params)?;
            let step = self.state.adam.step_count() + 1;
            let diag = |what: &str| format!("{what} at epoch {epoch}, batch {b}, optimizer step {step}");
            let (_, loss) = self.model.forward_loss(&mut tape, &vars, &batch).map_err(|e| match e {
                CoreError::Numeric(m) => CoreError::Numeric(format!("{} ({m})", diag("non-finite state"))),
                other => other,
            })?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(CoreError::Numeric(format!("{}: {loss_value}", diag("non-finite loss"))));
            }
            tape.backward(loss)?;
            let mut grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
            if let Some(max) = self.config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            self.state
                .adam
                .step(self.state.params.tensors_mut(), &grads)
                .map_err(|e| match e {
                    AutodiffError::NonFiniteGradient { index } => CoreError::Numeric(format!(
                        "{} (parameter `{}`)",
                        diag("non-finite gradient"),
                        self.model.layout()[index].name
                    )),
                    other => other.into(),
                })?;
            weighted += loss_value * chunk.len() as f64;
        }
        let train_mae = weighted / order.len() as f64;
        self.state.epoch = epoch;
        self.record(epoch, "train", train_mae);

        let val = if self.split.val.is_empty() {
            // without a validation split the latest parameters are the best
            self.state.best_params = self.state.params.clone();
            self.state.best_epoch = epoch;
            None
        } else {
            let val = self.evaluate_split(&self.split.val, &self.state.params)?;
            self.record(epoch, "val", val);
            if val < self.state.best_val {
                self.state.best_val = val;
                self.state.best_epoch = epoch;
                self.state.best_params = self.state.params.clone();
            } else if let Some(p) = self.config.patience {
                if epoch - self.state.best_epoch >= p {
                    self.state.stopped_early = true;
                }
            }
            Some(val)
        };
        Ok((train_mae, val))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&TrainState) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
            on_epoch(&self.state)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<TensorFile> {
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            train: self.config.clone(),
            epoch: self.state.epoch,
            best_val: self.state.best_val,
            best_epoch: self.state.best_epoch,
            stopped_early: self.state.stopped_early,
            log: self.state.log.clone(),
        };
        let mut file = TensorFile::new(self.state.adam.step_count(), serde_json::to_value(meta)?);
        let groups: [(&str, &[Tensor]); 4] = [
            ("param", self.state.params.tensors()),
            ("best", self.state.best_params.tensors()),
            ("adam_m", self.state.adam.first_moments()),
            ("adam_v", self.state.adam.second_moments()),
        ];
        for (prefix, tensors) in groups {
            for (spec, t) in self.model.layout().iter().zip(tensors) {
                file.push(format!("{prefix}/{}", spec.name), t.clone());
            }
        }
        Ok(file)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.checkpoint()?.save(path)?)
    }

    /// Test MAE of the best parameters and the run summary.
    pub fn finish(self) -> Result<TrainOutcome> {
        let test_mae = if self.split.test.is_empty() {
            f64::NAN
        } else {
            self.evaluate_split(&self.split.test, &self.state.best_params)?
        };
        let wall_time = self.elapsed();
        let cfg = self.model.config().clone();
        Ok(TrainOutcome {
            n_params: count_params(&cfg),
            model: cfg,
            epochs_to_threshold: epochs_to_threshold(&self.state.log),
            best_params: self.state.best_params,
            final_params: self.state.params,
            log: self.state.log,
            best_val: self.state.best_val,
            best_epoch: self.state.best_epoch,
            test_mae,
            epochs_run: self.state.epoch,
            wall_time,
        })
    }
}

/// Trains from `params` (or a seeded initialisation) for the configured
/// number of epochs.
pub fn train(
    model_config: ModelConfig,
    params: Option<Params>,
    data: &Dataset,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_config, params, data, config)?;
    trainer.run(|_| Ok(()))?;
    trainer.finish()
}
