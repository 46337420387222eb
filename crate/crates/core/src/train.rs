//! The optimizer loop: augment, build ground truth, forward, loss, Adam.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, DatasetManifest, Sample};
use crate::density::{sum_pool_downsample, KernelMode};
use crate::error::{Error, Result};
use crate::losses::{attention_vector_var, euclidean_loss_var, total_loss_var, variance_loss_var, DEFAULT_EPSILON};
use crate::model::{build_model, save_checkpoint, ModelConfig, PsnetModel, OUTPUT_STRIDE};
use crate::tensor::{AdamConfig, AdamState, SeededRng, Tape, Tensor, Var};

// RNG stream ids derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_SAMPLES: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    /// Weight of the variance loss; 0 trains on the Euclidean loss alone.
    pub lambda: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gt_mode: KernelMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            lambda: 1.0,
            epsilon: DEFAULT_EPSILON,
            lr: AdamConfig::default().lr,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            gt_mode: KernelMode::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_e: f64,
    pub l_m: f64,
    pub l: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PsnetModel<f32>,
    pub history: Vec<StepRecord>,
    /// Weights before the first update.
    pub initial_checkpoint: PathBuf,
    /// Weights after the last completed epoch.
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Augmented image plus its density target at output resolution.
pub fn training_pair(sample: &Sample, run: &RunConfig, rng: &mut SeededRng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let aug = augment(sample, &run.augment, rng)?;
    let density = run.gt_mode.density(&aug.annotations)?;
    let small = sum_pool_downsample(&density, OUTPUT_STRIDE)?;
    let target = Tensor::new(&[1, small.height(), small.width()], small.into_values())?;
    Ok((aug.image, target))
}

/// Loss terms of one batch recorded on `tape`: (L_E, L_M, L).
pub fn batch_loss(
    tape: &mut Tape<f32>,
    model: &PsnetModel<f32>,
    bound: &crate::model::Bound,
    pairs: &[(Tensor<f32>, Tensor<f32>)],
    lambda: f64,
    epsilon: f64,
) -> Result<(Var, Var, Var)> {
    let mut preds = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    let mut groups = Vec::new();
    for (image, target) in pairs {
        let x = tape.constant(image.clone());
        let out = model.forward(tape, bound, x)?;
        preds.push(out.density);
        targets.push(tape.constant(target.clone()));
        for branches in out.branches {
            let group = branches
                .into_iter()
                .map(|b| attention_vector_var(tape, b))
                .collect::<Result<Vec<_>>>()?;
            groups.push(group);
        }
    }
    let l_e = euclidean_loss_var(tape, &preds, &targets)?;
    let l_m = variance_loss_var(tape, &groups, epsilon)?;
    let l = if lambda == 0.0 { l_e } else { total_loss_var(tape, l_e, l_m, lambda)? };
    Ok((l_e, l_m, l))
}

fn write_atomically(model: &PsnetModel<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    save_checkpoint(model, &tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))
}

/// Trains from scratch. Writes `init.ckpt`, `checkpoint.ckpt` (refreshed
/// every epoch) and `train_log.jsonl` to `out_dir`. The checkpoint is fully
/// determined by the configuration and the data.
pub fn train(run: &RunConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome> {
    run.validate()?;
    if manifest.is_empty() {
        return Err(Error::Config("training manifest is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let samples = (0..manifest.len())
        .map(|i| manifest.load_sample(i))
        .collect::<Result<Vec<_>>>()?;

    let mut model: PsnetModel<f32> = build_model(&run.model, &mut SeededRng::derive(run.seed, STREAM_INIT))?;
    let initial_checkpoint = out_dir.join("init.ckpt");
    let checkpoint = out_dir.join("checkpoint.ckpt");
    let log = out_dir.join("train_log.jsonl");
    write_atomically(&model, &initial_checkpoint)?;
    let mut log_file = fs::File::create(&log).map_err(|e| Error::io(format!("creating {}", log.display()), e))?;

    let adam = AdamConfig {
        lr: run.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::from_shapes(model.params().iter().map(|p| p.tensor.shape()));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut order_rng = SeededRng::derive(run.seed, STREAM_ORDER);
    let start = Instant::now();
    let mut history = Vec::new();
    let mut step = 0;

    for epoch in 0..run.epochs {
        order_rng.shuffle(&mut order);
        for (b, batch) in order.chunks(run.batch_size).enumerate() {
            let pairs = batch
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let draw = (epoch * samples.len() + b * run.batch_size + j) as u64;
                    training_pair(&samples[i], run, &mut SeededRng::derive(run.seed, STREAM_SAMPLES + draw))
                })
                .collect::<Result<Vec<_>>>()?;

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let (l_e, l_m, l) = batch_loss(&mut tape, &model, &bound, &pairs, run.lambda, run.epsilon)?;
            let (e, m, total) = (
                tape.value(l_e).item() as f64,
                tape.value(l_m).item() as f64,
                tape.value(l).item() as f64,
            );
            if !(e.is_finite() && m.is_finite() && total.is_finite()) {
                return Err(Error::NonFiniteLoss { step, l_e: e, l_m: m });
            }
            let mut grads = tape.backward(l)?;
            let grads: Vec<Tensor<f32>> = bound
                .vars
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
                .collect();
            state.update(model.params_mut().iter_mut().map(|p| &mut p.tensor), &grads, &adam)?;

            let record = StepRecord {
                step,
                epoch,
                l_e: e,
                l_m: m,
                l: total,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            writeln!(log_file, "{}", serde_json::to_string(&record)?)
                .map_err(|e| Error::io(format!("writing {}", log.display()), e))?;
            history.push(record);
            step += 1;
        }
        write_atomically(&model, &checkpoint)?;
    }

    Ok(TrainOutcome {
        model,
        history,
        initial_checkpoint,
        checkpoint,
        log,
    })
}
