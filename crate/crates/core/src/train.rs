//! Fine-tuning loop with validation-loss checkpoint selection and timing
//! instrumentation.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{checkpoint_bytes, save_checkpoint, CheckpointError};
use crate::corpus::{CommitRecord, Corpus};
use crate::encode::{BackboneName, BackboneWeights, EncodedCommit};
use crate::head::{bce_logit_grad, bce_with_logit, head_backward, head_forward, HeadError, HeadParams};
use crate::metrics::{confusion, PredictionResult};
use crate::model::JitModel;
use crate::scalar::cast;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty but {0} epochs were requested")]
    EmptyFit(usize),
    #[error("validation set is empty; min-validation-loss selection needs records")]
    EmptyValidation,
    #[error("non-finite {what} loss at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub freeze_backbone: bool,
    /// Decision threshold for accuracy/recall snapshots.
    pub threshold: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Loss weight of defective commits; `None` trains unweighted.
    pub positive_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            freeze_backbone: false,
            threshold: 0.5,
            max_grad_norm: Some(1.0),
            positive_weight: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the learning rate for `backbone`: 1e-5 when a
    /// pre-trained backbone is fine-tuned, 1e-3 for head-only or scratch.
    pub fn for_backbone(backbone: BackboneName, backbone_trainable: bool) -> Self {
        let learning_rate = if backbone.is_pretrained() && backbone_trainable {
            1e-5
        } else {
            1e-3
        };
        TrainConfig {
            learning_rate,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(TrainError::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return Err(TrainError::Config("max_grad_norm must be positive".into()));
        }
        if matches!(self.positive_weight, Some(w) if !(w > 0.0)) {
            return Err(TrainError::Config("positive_weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    /// Global step, 1-based.
    pub step: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

/// Accuracy and recall on a monitor set at an epoch boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub seconds: f64,
    pub accuracy: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub steps: Vec<StepLoss>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint; `None` for the untrained model.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub wall_seconds: f64,
    pub param_count: usize,
    pub checkpoint_bytes: Option<u64>,
    pub snapshots: Vec<Snapshot>,
    pub selection: Selection,
}

impl TrainingTrace {
    /// Columnar loss trace: `step split loss seconds`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tsplit\tloss\tseconds\n");
        let mut epochs = self.epochs.iter().peekable();
        for s in &self.steps {
            let _ = writeln!(out, "{}\ttrain\t{}\t{}", s.step, s.loss, s.seconds);
            // a validation row follows the last step of its epoch
            while let Some(e) = epochs.peek() {
                let last_of_epoch = self
                    .steps
                    .iter()
                    .filter(|x| x.epoch == e.epoch)
                    .map(|x| x.step)
                    .max();
                if last_of_epoch == Some(s.step) {
                    if let Some(v) = e.val_loss {
                        let _ = writeln!(out, "{}\tval\t{}\t{}", s.step, v, e.seconds);
                    }
                    epochs.next();
                } else {
                    break;
                }
            }
        }
        out
    }
}

/// How the returned checkpoint is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    MinValidationLoss,
    LastEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRecord {
    pub seconds: f64,
    pub param_count: usize,
    pub checkpoint_bytes: u64,
}

/// Training time, parameter count, and serialized size of `model`.
pub fn measure<F: Scalar>(model: &JitModel<F>, trace: &TrainingTrace) -> EfficiencyRecord {
    EfficiencyRecord {
        seconds: trace.wall_seconds,
        param_count: model.parameter_count(),
        checkpoint_bytes: trace
            .checkpoint_bytes
            .unwrap_or_else(|| checkpoint_bytes(model, "").len() as u64),
    }
}

/// Observation points inside the loop.
pub trait TrainHooks<F> {
    /// Lets a caller replace the validation loss of an epoch.
    fn validation_loss(&mut self, _epoch: usize, computed: f64) -> f64 {
        computed
    }

    fn epoch_end(&mut self, _epoch: usize, _model: &JitModel<F>) {}
}

/// Hooks that change nothing.
pub struct NoHooks;

impl<F> TrainHooks<F> for NoHooks {}

// Adam state over every trainable tensor
struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    t: i32,
    m_head: HeadParams<F>,
    v_head: HeadParams<F>,
    m_table: Option<Array2<F>>,
    v_table: Option<Array2<F>>,
}

impl<F: Scalar> Adam<F> {
    fn new(lr: f64, head: &HeadParams<F>, table: Option<&Array2<F>>) -> Self {
        Adam {
            lr: cast(lr),
            beta1: cast(0.9),
            beta2: cast(0.999),
            eps: cast(1e-8),
            t: 0,
            m_head: head.zeros_like(),
            v_head: head.zeros_like(),
            m_table: table.map(|t| Array2::zeros(t.dim())),
            v_table: table.map(|t| Array2::zeros(t.dim())),
        }
    }

    fn update(
        param: &mut [F],
        grad: &[F],
        m: &mut [F],
        v: &mut [F],
        (beta1, beta2, eps, step, c1, c2): (F, F, F, F, F, F),
    ) {
        for (((p, g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (F::one() - beta1) * *g;
            *v = beta2 * *v + (F::one() - beta2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= step * m_hat / (v_hat.sqrt() + eps);
        }
    }

    fn step(&mut self, head: &mut HeadParams<F>, head_grad: &HeadParams<F>, table: Option<(&mut Array2<F>, &Array2<F>)>) {
        self.t += 1;
        let c1 = F::one() - self.beta1.powi(self.t);
        let c2 = F::one() - self.beta2.powi(self.t);
        let hyper = (self.beta1, self.beta2, self.eps, self.lr, c1, c2);
        let mut grads = Vec::new();
        head_grad.for_each_tensor(|_, g| grads.push(g.to_vec()));
        let mut ms = Vec::new();
        self.m_head.for_each_tensor(|_, m| ms.push(m.to_vec()));
        let mut vs = Vec::new();
        self.v_head.for_each_tensor(|_, v| vs.push(v.to_vec()));
        let mut i = 0;
        head.for_each_tensor_mut(|_, p| {
            Self::update(p, &grads[i], &mut ms[i], &mut vs[i], hyper);
            i += 1;
        });
        let mut i = 0;
        self.m_head.for_each_tensor_mut(|_, m| {
            m.copy_from_slice(&ms[i]);
            i += 1;
        });
        let mut i = 0;
        self.v_head.for_each_tensor_mut(|_, v| {
            v.copy_from_slice(&vs[i]);
            i += 1;
        });
        if let (Some((weights, grad)), Some(m), Some(v)) = (table, &mut self.m_table, &mut self.v_table) {
            Self::update(
                weights.as_slice_mut().expect("standard layout"),
                grad.as_slice().expect("standard layout"),
                m.as_slice_mut().expect("standard layout"),
                v.as_slice_mut().expect("standard layout"),
                hyper,
            );
        }
    }
}

/// Builder for one training run.
pub struct Trainer<'a, F> {
    cfg: TrainConfig,
    validation: Option<&'a Corpus>,
    monitor: Option<&'a Corpus>,
    checkpoint: Option<(PathBuf, String)>,
    hooks: Option<&'a mut dyn TrainHooks<F>>,
}

// per-sample gradient contribution
struct SampleGrad<F> {
    loss: f64,
    head: HeadParams<F>,
    // (token ids, gradient of the pooled vector) per encoded sequence
    table: Vec<(Vec<usize>, Array1<F>)>,
}

enum Inputs<'a, F> {
    Frozen(&'a [EncodedCommit<F>]),
    Live,
}

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn sample_grad<F: Scalar>(
    model: &JitModel<F>,
    record: &CommitRecord,
    encoded: Option<&EncodedCommit<F>>,
    rng_seed: u64,
    positive_weight: F,
    trains_backbone: bool,
) -> Result<SampleGrad<F>, HeadError> {
    let owned;
    let encoded = match encoded {
        Some(e) => e,
        None => {
            owned = model.encode(record);
            &owned
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let trace = head_forward(
        &model.head,
        encoded,
        model.branches(),
        Some((model.config.dropout, &mut rng)),
    )?;
    let target: F = cast(record.label.target());
    let loss = bce_with_logit(trace.logit, target, positive_weight);
    let mut head = model.head.zeros_like();
    let grad_logit = bce_logit_grad(trace.logit, target, positive_weight);
    let (g_code, g_msg) = head_backward(&model.head, encoded, &trace, grad_logit, &mut head);
    let mut table = Vec::new();
    if let (true, BackboneWeights::Scratch(t)) = (trains_backbone, &model.backbone.weights) {
        let tokens = model.backbone.commit_token_slots(record, model.config.window);
        let ids = |seq: &[String]| seq.iter().map(|tok| t.vocab.id(tok)).collect::<Vec<_>>();
        if model.branches().uses_code() {
            for (slot, seq) in tokens.patches.iter().enumerate() {
                if !seq.is_empty() {
                    table.push((ids(seq), g_code.row(slot).to_owned()));
                }
            }
        }
        if model.branches().uses_message() && !tokens.message.is_empty() {
            table.push((ids(&tokens.message), g_msg));
        }
    }
    Ok(SampleGrad {
        loss: loss.to_f64_lossy(),
        head,
        table,
    })
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(cfg: TrainConfig) -> Self {
        Trainer {
            cfg,
            validation: None,
            monitor: None,
            checkpoint: None,
            hooks: None,
        }
    }

    /// Select the epoch with minimal loss on `val` (otherwise the last epoch).
    pub fn validation(mut self, val: &'a Corpus) -> Self {
        self.validation = Some(val);
        self
    }

    /// Record accuracy/recall on `corpus` after every epoch.
    pub fn monitor(mut self, corpus: &'a Corpus) -> Self {
        self.monitor = Some(corpus);
        self
    }

    /// Write the selected model to `path` whenever it improves.
    pub fn checkpoint(mut self, path: impl Into<PathBuf>, config_hash: impl Into<String>) -> Self {
        self.checkpoint = Some((path.into(), config_hash.into()));
        self
    }

    pub fn hooks(mut self, hooks: &'a mut dyn TrainHooks<F>) -> Self {
        self.hooks = Some(hooks);
        self
    }

    fn positive_weight(&self) -> F {
        cast(self.cfg.positive_weight.unwrap_or(1.0))
    }

    fn backbone_trains(&self, model: &JitModel<F>) -> bool {
        model.backbone.is_trainable() && !self.cfg.freeze_backbone
    }

    /// Mean loss over `corpus` in inference mode.
    fn eval_loss(&self, model: &JitModel<F>, corpus: &Corpus, frozen: Option<&[EncodedCommit<F>]>) -> Result<f64, HeadError> {
        let w = self.positive_weight();
        let losses: Vec<f64> = corpus
            .records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let owned;
                let e = match frozen {
                    Some(f) => &f[i],
                    None => {
                        owned = model.encode(r);
                        &owned
                    }
                };
                let trace = head_forward(&model.head, e, model.branches(), None)?;
                Ok(bce_with_logit(trace.logit, cast(r.label.target()), w).to_f64_lossy())
            })
            .collect::<Result<_, HeadError>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn snapshot(&self, model: &JitModel<F>, corpus: &Corpus, epoch: usize, seconds: f64) -> Result<Snapshot, TrainError> {
        let preds: Vec<PredictionResult> = model.predict(corpus)?;
        let c = confusion(&preds, self.cfg.threshold).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(Snapshot {
            epoch,
            seconds,
            accuracy: c.accuracy().value,
            recall: c.recall().value,
        })
    }

    /// Trains `model` on `fit` and returns the selected checkpoint.
    pub fn run(mut self, mut model: JitModel<F>, fit: &Corpus) -> Result<(JitModel<F>, TrainingTrace), TrainError> {
        self.cfg.validate()?;
        let selection = if self.validation.is_some() {
            Selection::MinValidationLoss
        } else {
            Selection::LastEpoch
        };
        let mut trace = TrainingTrace {
            selection,
            param_count: model.parameter_count(),
            ..TrainingTrace::default()
        };
        if self.cfg.epochs == 0 {
            return Ok((model, trace));
        }
        if fit.is_empty() {
            return Err(TrainError::EmptyFit(self.cfg.epochs));
        }
        if matches!(self.validation, Some(v) if v.is_empty()) {
            return Err(TrainError::EmptyValidation);
        }

        let trains_backbone = self.backbone_trains(&model);
        let precompute = |c: &Corpus, m: &JitModel<F>| -> Vec<EncodedCommit<F>> {
            c.records.par_iter().map(|r| m.encode(r)).collect()
        };
        let fit_frozen = (!trains_backbone).then(|| precompute(fit, &model));
        let val_frozen = match (trains_backbone, self.validation) {
            (false, Some(v)) => Some(precompute(v, &model)),
            _ => None,
        };
        let inputs = match &fit_frozen {
            Some(f) => Inputs::Frozen(f),
            None => Inputs::Live,
        };

        let table_dim = match &model.backbone.weights {
            BackboneWeights::Scratch(t) if trains_backbone => Some(t.weights.clone()),
            _ => None,
        };
        let mut adam = Adam::new(self.cfg.learning_rate, &model.head, table_dim.as_ref());
        drop(table_dim);
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut best: Option<(f64, JitModel<F>)> = None;
        let mut global_step = 0;
        let start = Instant::now();

        for epoch in 1..=self.cfg.epochs {
            let mut order: Vec<usize> = (0..fit.len()).collect();
            order.shuffle(&mut order_rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(self.cfg.batch_size) {
                global_step += 1;
                let (pos_w, seed, model_ref) = (self.positive_weight(), self.cfg.seed, &model);
                let samples: Vec<SampleGrad<F>> = batch
                    .par_iter()
                    .map(|&i| {
                        let enc = match &inputs {
                            Inputs::Frozen(f) => Some(&f[i]),
                            Inputs::Live => None,
                        };
                        sample_grad(model_ref, &fit.records[i], enc, sample_seed(seed, epoch, i), pos_w, trains_backbone)
                    })
                    .collect::<Result<_, HeadError>>()?;
                let inv_n: F = cast(1.0 / batch.len() as f64);
                let mut head_grad = model.head.zeros_like();
                let mut batch_loss = 0.0;
                for s in &samples {
                    batch_loss += s.loss;
                    head_grad.zip_tensors_mut(&s.head, |acc, g| {
                        acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b * inv_n)
                    });
                }
                batch_loss /= batch.len() as f64;
                if !batch_loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: "training",
                        epoch,
                        step: global_step,
                    });
                }
                let mut table_grad = match (&model.backbone.weights, trains_backbone) {
                    (BackboneWeights::Scratch(t), true) => {
                        let mut g = Array2::<F>::zeros(t.weights.dim());
                        for s in &samples {
                            for (ids, grad) in &s.table {
                                let share = grad.mapv(|v| v * inv_n / cast::<F>(ids.len() as f64));
                                for &id in ids {
                                    let mut row = g.row_mut(id);
                                    row += &share;
                                }
                            }
                        }
                        Some(g)
                    }
                    _ => None,
                };
                if let Some(max_norm) = self.cfg.max_grad_norm {
                    let mut sq = head_grad.squared_norm();
                    if let Some(g) = &table_grad {
                        sq += g.iter().map(|v| *v * *v).sum::<F>();
                    }
                    let norm = sq.sqrt().to_f64_lossy();
                    if norm > max_norm {
                        let factor: F = cast(max_norm / norm);
                        head_grad.scale(factor);
                        if let Some(g) = &mut table_grad {
                            g.mapv_inplace(|v| v * factor);
                        }
                    }
                }
                let table = match (&mut model.backbone.weights, &table_grad) {
                    (BackboneWeights::Scratch(t), Some(g)) => Some((&mut t.weights, g)),
                    _ => None,
                };
                adam.step(&mut model.head, &head_grad, table);
                epoch_loss += batch_loss * batch.len() as f64;
                trace.steps.push(StepLoss {
                    epoch,
                    step: global_step,
                    loss: batch_loss,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            if !model.head.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "parameter",
                    epoch,
                    step: global_step,
                });
            }

            let val_loss = match self.validation {
                Some(val) => {
                    let computed = self.eval_loss(&model, val, val_frozen.as_deref())?;
                    let v = match self.hooks.as_mut() {
                        Some(h) => h.validation_loss(epoch, computed),
                        None => computed,
                    };
                    if !v.is_finite() {
                        return Err(TrainError::NonFinite {
                            what: "validation",
                            epoch,
                            step: global_step,
                        });
                    }
                    Some(v)
                }
                None => None,
            };
            let improved = match (val_loss, &best) {
                (None, _) => true,
                (Some(_), None) => true,
                (Some(v), Some((b, _))) => v < *b,
            };
            if improved {
                best = Some((val_loss.unwrap_or(f64::NAN), model.clone()));
                trace.best_epoch = Some(epoch);
                trace.best_val_loss = val_loss;
                if let Some((path, hash)) = &self.checkpoint {
                    trace.checkpoint_bytes = Some(save_checkpoint(&model, hash, path)?);
                }
            }
            let seconds = start.elapsed().as_secs_f64();
            trace.epochs.push(EpochRecord {
                epoch,
                train_loss: epoch_loss / fit.len() as f64,
                val_loss,
                seconds,
            });
            if let Some(monitor) = self.monitor {
                let snap = self.snapshot(&model, monitor, epoch, seconds)?;
                trace.snapshots.push(snap);
            }
            if let Some(h) = self.hooks.as_mut() {
                h.epoch_end(epoch, &model);
            }
        }
        trace.wall_seconds = start.elapsed().as_secs_f64();
        let (_, best_model) = best.expect("at least one epoch ran");
        Ok((best_model, trace))
    }
}

/// Trains with min-validation-loss selection on `val`.
pub fn train<F: Scalar>(
    model: JitModel<F>,
    fit: &Corpus,
    val: &Corpus,
    cfg: &TrainConfig,
) -> Result<(JitModel<F>, TrainingTrace), TrainError> {
    if cfg.epochs > 0 && val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    Trainer::new(*cfg).validation(val).run(model, fit)
}

/// Mean validation loss of `model` on `corpus`, computed exactly as the
/// trainer does.
pub fn validation_loss<F: Scalar>(model: &JitModel<F>, corpus: &Corpus, cfg: &TrainConfig) -> Result<f64, HeadError> {
    let trainer = Trainer::<F>::new(*cfg);
    let frozen: Option<Vec<EncodedCommit<F>>> = (!trainer.backbone_trains(model))
        .then(|| corpus.records.par_iter().map(|r| model.encode(r)).collect());
    trainer.eval_loss(model, corpus, frozen.as_deref())
}
