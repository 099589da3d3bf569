//! Mini-batch CTC training: Adam with gradient clipping, per-epoch
//! validation, early stopping, and loss-curve emission.

pub mod checkpoint;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ctc::{attach_ctc_loss, ctc_greedy_decode, ctc_loss, CtcError};
use crate::data::{augment, mix_seed, AugmentationConfig, DataError, Sample};
use crate::eval::{char_accuracy, word_accuracy, EvalError};
use crate::model::{self, forward, insert_params, ModelError, ModelParams};
use crate::tensor::{Graph, Tensor, TensorError};

use checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error(
        "every sample in epoch {epoch} was skipped: no label fits in {time_steps} \
         time steps; widen the input image or shorten the labels"
    )]
    AllInfeasible { epoch: usize, time_steps: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub early_stop_patience: usize,
    pub gradient_clip_norm: f64,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            early_stop_patience: 10,
            gradient_clip_norm: 5.0,
            seed: 0,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return fail(format!("{name} must be in [0, 1), got {beta}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.gradient_clip_norm > 0.0) {
            return fail(format!(
                "gradient clip norm must be positive, got {}",
                self.gradient_clip_norm
            ));
        }
        Ok(())
    }
}

/// Adam moments plus the step counter, kept separate from the optimizer's
/// hyper-parameters so checkpoints can carry it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, clipped: bool },
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    clip_norm: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(config: &TrainConfig, shapes: &[Vec<usize>]) -> Self {
        Self::with_state(config, AdamState::zeros(shapes))
    }

    pub fn with_state(config: &TrainConfig, state: AdamState) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            clip_norm: config.gradient_clip_norm,
            state,
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One optimizer step. The global gradient norm is clipped to
    /// `clip_norm` before the moments are updated; a non-finite gradient
    /// skips the step entirely, leaving parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> StepOutcome {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        let mut sq_sum = 0.0;
        for g in grads {
            for &v in g.data() {
                sq_sum += v * v;
            }
        }
        let norm = sq_sum.sqrt();
        if !norm.is_finite() {
            return StepOutcome::SkippedNonFinite;
        }
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };

        self.state.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.state.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.state.step as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for (i, grad) in grads.iter().enumerate() {
            let gd = grad.data();
            let m = self.state.m[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(gd) {
                *mj = b1 * *mj + (1.0 - b1) * (gj * scale);
            }
            let v = self.state.v[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(gd) {
                let g = gj * scale;
                *vj = b2 * *vj + (1.0 - b2) * g * g;
            }
            let p = params[i].data_mut();
            let m = self.state.m[i].data();
            let v = self.state.v[i].data();
            for j in 0..p.len() {
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        }
        StepOutcome::Applied {
            grad_norm: norm,
            clipped: scale < 1.0,
        }
    }
}

/// Everything the loop carries between epochs; resume restores it from a
/// checkpoint.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    pub completed_epochs: usize,
    pub best_val_loss: f64,
}

impl TrainState {
    pub fn fresh(params: ModelParams, config: &TrainConfig) -> Self {
        let shapes = param_shapes(&params);
        TrainState {
            adam: Adam::new(config, &shapes),
            params,
            completed_epochs: 0,
            best_val_loss: f64::INFINITY,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, config: &TrainConfig) -> Self {
        let shapes = param_shapes(&ckpt.params);
        let adam = match ckpt.adam {
            Some(state) => Adam::with_state(config, state),
            None => Adam::new(config, &shapes),
        };
        TrainState {
            params: ckpt.params,
            adam,
            completed_epochs: ckpt.epoch as usize,
            best_val_loss: ckpt.best_val_loss,
        }
    }
}

fn param_shapes(params: &ModelParams) -> Vec<Vec<usize>> {
    params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_char_accuracy: f64,
    pub val_word_accuracy: f64,
    pub seconds: f64,
    pub skipped_infeasible: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    /// Optimizer state captured at that same epoch.
    pub adam: AdamState,
    /// 1-based epoch number of the snapshot; 0 when no epoch improved.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochStats>,
}

fn sample_gradients(
    params: &ModelParams,
    sample: &Sample,
    aug: &AugmentationConfig,
    seed: u64,
    blank: usize,
) -> Result<Option<(f64, Vec<Tensor>)>, TrainError> {
    let image = augment(&sample.image, aug, seed)?;
    let mut g = Graph::new();
    let nodes = insert_params(&mut g, params);
    let lp = forward(&mut g, &nodes, &params.config, &image)?;
    let (root, loss) = match attach_ctc_loss(&mut g, lp, &sample.label, blank) {
        Ok(pair) => pair,
        Err(CtcError::InfiniteLoss) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut grads = g.backward(root)?;
    let ordered = nodes
        .in_named_order()
        .iter()
        .zip(params.named_tensors())
        .map(|(&id, (_, t))| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    Ok(Some((loss, ordered)))
}

fn validate_epoch(
    params: &ModelParams,
    val_set: &[Sample],
    blank: usize,
) -> Result<(f64, f64, f64), TrainError> {
    let decoded: Vec<(f64, crate::ctc::LabelSequence)> = val_set
        .par_iter()
        .map(|sample| {
            let lp = model::log_probs(params, &sample.image)?;
            let loss = ctc_loss(&lp, &sample.label, blank)?.loss;
            let pred = ctc_greedy_decode(&lp, blank)?;
            Ok::<_, TrainError>((loss, pred))
        })
        .collect::<Result<_, _>>()?;

    let mut loss_sum = 0.0;
    let mut n_finite = 0usize;
    let mut preds = Vec::with_capacity(val_set.len());
    for (loss, pred) in decoded {
        if loss.is_finite() {
            loss_sum += loss;
            n_finite += 1;
        }
        preds.push(pred);
    }
    let refs: Vec<_> = val_set.iter().map(|s| s.label.clone()).collect();
    let val_loss = if n_finite > 0 {
        loss_sum / n_finite as f64
    } else {
        f64::INFINITY
    };
    Ok((
        val_loss,
        char_accuracy(&refs, &preds)?,
        word_accuracy(&refs, &preds)?,
    ))
}

/// Run the training loop from `state`, reporting each completed epoch
/// through `on_epoch`. Gradients are averaged over each mini-batch;
/// samples whose label cannot be aligned within the model's time steps
/// are skipped and counted. The returned parameters are the best-by-
/// validation-loss snapshot, never a later, worse one.
pub fn train<F: FnMut(&EpochStats)>(
    mut state: TrainState,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let time_steps = state.params.config.time_steps();
    let blank = state.params.config.alphabet_size;

    let entry_params = state.params.clone();
    let entry_adam = state.adam.state().clone();
    let mut best: Option<(ModelParams, AdamState)> = None;
    let mut best_epoch = state.completed_epochs;
    let mut best_val_loss = state.best_val_loss;
    let mut since_improvement = 0usize;
    let mut history = Vec::new();

    let mut grad_acc = param_shapes(&state.params)
        .into_iter()
        .map(Tensor::zeros)
        .collect::<Vec<_>>();

    for epoch in (state.completed_epochs + 1)..=config.epochs {
        let started = Instant::now();
        let epoch_seed = mix_seed(config.seed, epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let mut loss_sum = 0.0;
        let mut n_effective = 0usize;
        let mut skipped = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Option<(f64, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&idx| {
                    sample_gradients(
                        &state.params,
                        &train_set[idx],
                        &config.augmentation,
                        mix_seed(epoch_seed, idx as u64),
                        blank,
                    )
                })
                .collect::<Result<_, _>>()?;

            for acc in &mut grad_acc {
                acc.data_mut().fill(0.0);
            }
            let mut batch_effective = 0usize;
            for result in results {
                match result {
                    Some((loss, grads)) => {
                        loss_sum += loss;
                        batch_effective += 1;
                        for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                    }
                    None => skipped += 1,
                }
            }
            if batch_effective == 0 {
                continue;
            }
            n_effective += batch_effective;
            let inv = 1.0 / batch_effective as f64;
            for acc in &mut grad_acc {
                for a in acc.data_mut() {
                    *a *= inv;
                }
            }
            let mut tensors: Vec<&mut Tensor> = state
                .params
                .named_tensors_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            state.adam.step(&mut tensors, &grad_acc);
        }
        if n_effective == 0 {
            return Err(TrainError::AllInfeasible { epoch, time_steps });
        }

        let (val_loss, val_char, val_word) = validate_epoch(&state.params, val_set, blank)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n_effective as f64,
            val_loss,
            val_char_accuracy: val_char,
            val_word_accuracy: val_word,
            seconds: started.elapsed().as_secs_f64(),
            skipped_infeasible: skipped,
        };

        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best = Some((state.params.clone(), state.adam.state().clone()));
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }

        on_epoch(&stats);
        history.push(stats);

        if since_improvement >= config.early_stop_patience.max(1) {
            break;
        }
    }

    let (params, adam) = best.unwrap_or((entry_params, entry_adam));
    Ok(TrainOutcome {
        params,
        adam,
        best_epoch,
        best_val_loss,
        history,
    })
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_char_acc,val_word_acc,seconds";

pub fn metrics_row(stats: &EpochStats) -> String {
    format!(
        "{},{},{},{},{},{:.3}",
        stats.epoch,
        stats.train_loss,
        stats.val_loss,
        stats.val_char_accuracy,
        stats.val_word_accuracy,
        stats.seconds
    )
}

/// Incremental `metrics.csv` writer: header on creation, one flushed row
/// per epoch so partial runs still leave a readable curve.
pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, stats: &EpochStats) -> std::io::Result<()> {
        writeln!(self.file, "{}", metrics_row(stats))?;
        self.file.flush()
    }
}
