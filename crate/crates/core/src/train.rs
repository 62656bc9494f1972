//! Training loop: batches of (sample, affordance word) pairs, mean
//! cross-entropy, Adam, per-epoch validation and best-checkpoint selection.

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Graph;
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{Dataset, DatasetError, PointCloudSample, Split};
use crate::eval::{self, EvalError};
use crate::head;
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::nn::{Mode, BN_MOMENTUM};
use crate::optim::Adam;
use crate::tensor::{Tensor, TensorError};
use crate::text::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training log: {0}")]
    Log(#[source] std::io::Error),
    #[error("loss became {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// One line of the training log, written after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_miou: f64,
    pub val_acc: f64,
    pub val_macc: f64,
}

/// The words one sample contributes to a batch: one applicable word drawn
/// uniformly and, with probability `negative_prob`, one non-applicable
/// word drawn uniformly.
pub fn draw_words(sample: &PointCloudSample, negative_prob: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let applicable = sample.applicable();
    let rest: Vec<&str> = sample
        .affordances
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| !applicable.contains(n))
        .collect();
    let mut words = Vec::with_capacity(2);
    if let Some(w) = applicable.choose(rng) {
        words.push(w.to_string());
    }
    if rng.random_bool(negative_prob) {
        if let Some(w) = rest.choose(rng) {
            words.push(w.to_string());
        }
    }
    words
}

/// A model under training with its optimizer state and sampling stream.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: RunConfig,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    steps: usize,
    last_grad_norm: f64,
}

impl Trainer {
    pub fn new(config: &RunConfig, vocabulary: Vocabulary) -> Result<Self, TrainError> {
        let model_cfg = config.model_config(vocabulary)?;
        let model = Model::new(model_cfg, config.seed)?;
        let mut adam = Adam::new(config.optimizer);
        adam.checked = config.checked;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            config: config.clone(),
            adam,
            rng,
            steps: 0,
            last_grad_norm: 0.0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Global gradient norm of the latest step, before clipping.
    pub fn last_grad_norm(&self) -> f64 {
        self.last_grad_norm
    }

    pub fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.steps < m)
    }

    /// One optimizer step on the mean loss over every (sample, word) pair.
    pub fn step(&mut self, batch: &[(&PointCloudSample, Vec<String>)]) -> Result<f64, TrainError> {
        let mut g = Graph::<f32>::new().with_checked(self.config.checked);
        let queries = batch
            .iter()
            .map(|(_, words)| {
                words
                    .iter()
                    .map(|w| self.model.tokenize(w).map_err(|e| TrainError::Invalid(e.to_string())))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let items: Vec<_> = batch.iter().zip(&queries).map(|((s, _), q)| (&s.pc, q.as_slice())).collect();
        let logits = self.model.forward_batch(&mut g, &items, Mode::Train)?;
        let mut losses = Vec::new();
        for ((sample, words), sample_logits) in batch.iter().zip(logits) {
            for (w, l) in words.iter().zip(sample_logits) {
                let mask = sample
                    .mask(w)
                    .ok_or_else(|| TrainError::Invalid(format!("sample has no mask for `{w}`")))?;
                losses.push(head::loss(&mut g, l, mask)?);
            }
        }
        let Some((&first, rest)) = losses.split_first() else {
            return Err(TrainError::Invalid("empty batch".into()));
        };
        let mut total = first;
        for &l in rest {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, 1.0 / losses.len() as f32)?;
        self.steps += 1;
        let value = g.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                step: self.steps,
                loss: value,
            });
        }
        let grads = g.backward(loss)?;
        let mut grads = g.param_grads(&grads);
        let norm = grads
            .values()
            .flat_map(|t: &Tensor<f32>| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(TrainError::Diverged {
                step: self.steps,
                loss: f64::NAN,
            });
        }
        self.last_grad_norm = norm;
        if let Some(clip) = self.config.grad_clip {
            if norm > clip {
                let f = (clip / norm) as f32;
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= f);
                }
            }
        }
        let stats = g.take_batch_stats();
        self.model.params.apply_batch_stats(&stats, BN_MOMENTUM)?;
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(value)
    }

    /// One pass over `samples` in a freshly shuffled order. Returns the
    /// mean step loss, or `None` when the step budget was already spent.
    pub fn epoch(&mut self, samples: &[PointCloudSample]) -> Result<Option<f64>, TrainError> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            if !self.budget_left() {
                break;
            }
            let batch: Vec<(&PointCloudSample, Vec<String>)> = chunk
                .iter()
                .map(|&i| (&samples[i], draw_words(&samples[i], self.config.negative_prob, &mut self.rng)))
                .filter(|(_, w)| !w.is_empty())
                .collect();
            if batch.is_empty() {
                continue;
            }
            sum += self.step(&batch)?;
            n += 1;
        }
        Ok((n > 0).then(|| sum / n as f64))
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation mIoU.
    pub best: Model<f32>,
    pub best_val: MetricsReport,
    pub log: Vec<LogEntry>,
    pub steps: usize,
}

/// Trains on the train split and validates on the val split after every
/// epoch, both under the configured task. Each log line is written to `log`
/// as it is produced; the best checkpoint is saved to `checkpoint_out` as
/// soon as it improves.
pub fn train(
    config: &RunConfig,
    dataset: &Dataset,
    threads: usize,
    checkpoint_out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    let vocabulary = Vocabulary::from_words(&dataset.manifest.affordances)
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
    let partial = config.task.is_partial();
    let train_set = dataset.load_split(Split::Train, partial)?;
    let val_set = dataset.load_split(Split::Val, partial)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Invalid("train and val splits must be nonempty".into()));
    }
    let words = &dataset.manifest.affordances;
    let mut trainer = Trainer::new(config, vocabulary)?;
    let mut best: Option<(Model<f32>, MetricsReport)> = None;
    let mut entries = Vec::new();
    for _ in 0..config.epochs {
        let Some(loss) = trainer.epoch(&train_set)? else { break };
        let val = eval::evaluate_samples(&trainer.model, &val_set, words, threads)?;
        let entry = LogEntry {
            step: trainer.steps(),
            loss,
            val_miou: val.miou,
            val_acc: val.acc,
            val_macc: val.macc,
        };
        let line = serde_json::to_string(&entry).expect("log entry serializes");
        writeln!(log, "{line}").map_err(TrainError::Log)?;
        entries.push(entry);
        if best.as_ref().is_none_or(|(_, b)| val.miou > b.miou) {
            if let Some(path) = checkpoint_out {
                checkpoint::save(&trainer.model, path)?;
            }
            best = Some((trainer.model.clone(), val));
        }
    }
    let (best, best_val) = best.ok_or_else(|| TrainError::Invalid("no training step was taken".into()))?;
    Ok(TrainOutcome {
        best,
        best_val,
        log: entries,
        steps: trainer.steps(),
    })
}
