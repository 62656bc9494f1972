//! Split evaluation: every sample in index order, every vocabulary word per
//! sample, accumulated into one confusion table.

use thiserror::Error;

use crate::config::Task;
use crate::dataset::{Dataset, DatasetError, PointCloudSample, Split};
use crate::metrics::{ConfusionAccumulator, MetricsError, MetricsReport};
use crate::model::Model;
use crate::tensor::{Element, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("the model vocabulary is missing {0:?}")]
    VocabularyMismatch(Vec<String>),
    #[error("sample has no mask for `{0}`")]
    MissingMask(String),
}

/// Anything that labels the points of a sample for a list of words.
pub trait Predictor: Sync {
    fn predict_labels(&self, sample: &PointCloudSample, words: &[&str]) -> Result<Vec<Vec<bool>>, EvalError>;
}

impl<T: Element> Predictor for Model<T> {
    fn predict_labels(&self, sample: &PointCloudSample, words: &[&str]) -> Result<Vec<Vec<bool>>, EvalError> {
        Ok(self.predict_words(&sample.pc, words)?.into_iter().map(|p| p.labels).collect())
    }
}

/// Mock model that answers with the ground-truth masks.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict_labels(&self, sample: &PointCloudSample, words: &[&str]) -> Result<Vec<Vec<bool>>, EvalError> {
        words
            .iter()
            .map(|w| {
                let m = sample.mask(w).ok_or_else(|| EvalError::MissingMask(w.to_string()))?;
                Ok(m.iter().map(|&b| b == 1).collect())
            })
            .collect()
    }
}

/// Mock model that labels every point the same way.
pub struct ConstantPredictor(pub bool);

impl Predictor for ConstantPredictor {
    fn predict_labels(&self, sample: &PointCloudSample, words: &[&str]) -> Result<Vec<Vec<bool>>, EvalError> {
        Ok(words.iter().map(|_| vec![self.0; sample.len()]).collect())
    }
}

/// Words of `wanted` that `model_words` lacks.
pub fn missing_words(model_words: &[String], wanted: &[String]) -> Vec<String> {
    wanted.iter().filter(|w| !model_words.contains(w)).cloned().collect()
}

fn accumulate_sample<P: Predictor + ?Sized>(
    acc: &mut ConfusionAccumulator,
    p: &P,
    sample: &PointCloudSample,
    words: &[&str],
) -> Result<(), EvalError> {
    let labels = p.predict_labels(sample, words)?;
    for (w, pred) in words.iter().zip(&labels) {
        let gt = sample.mask(w).ok_or_else(|| EvalError::MissingMask(w.to_string()))?;
        acc.accumulate(w, pred, gt)?;
    }
    Ok(())
}

/// Metrics over in-memory samples, querying each with every word. Samples
/// are sharded over `threads` workers; the report does not depend on the
/// worker count.
pub fn evaluate_samples<P: Predictor + ?Sized>(
    p: &P,
    samples: &[PointCloudSample],
    words: &[String],
    threads: usize,
) -> Result<MetricsReport, EvalError> {
    let words: Vec<&str> = words.iter().map(String::as_str).collect();
    let shard = |part: &[PointCloudSample]| -> Result<ConfusionAccumulator, EvalError> {
        let mut acc = ConfusionAccumulator::with_classes(&words);
        for s in part {
            accumulate_sample(&mut acc, p, s, &words)?;
        }
        Ok(acc)
    };
    let threads = threads.clamp(1, samples.len().max(1));
    let shards: Vec<Result<ConfusionAccumulator, EvalError>> = if threads == 1 {
        vec![shard(samples)]
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = samples.chunks(chunk).map(|c| s.spawn(move || shard(c))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut total = ConfusionAccumulator::with_classes(&words);
    for acc in shards {
        total.merge(&acc?);
    }
    Ok(total.finalize()?)
}

/// Metrics for one split of `dataset`.
pub fn evaluate<P: Predictor + ?Sized>(
    p: &P,
    dataset: &Dataset,
    split: Split,
    task: Task,
    threads: usize,
) -> Result<MetricsReport, EvalError> {
    let samples = dataset.load_split(split, task.is_partial())?;
    evaluate_samples(p, &samples, &dataset.manifest.affordances, threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_sample, AFFORDANCES};

    fn words() -> Vec<String> {
        AFFORDANCES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn oracle_scores_one() {
        let samples: Vec<_> = ["bottle", "hat"].iter().map(|c| generate_sample(c, 3, 64).unwrap()).collect();
        let r = evaluate_samples(&OraclePredictor, &samples, &words(), 1).unwrap();
        assert_eq!((r.miou, r.acc, r.macc), (1.0, 1.0, 1.0));
        // bottles and hats carry neither `cut` nor `support`
        assert_eq!(r.skipped, vec!["cut".to_string(), "support".to_string()]);
    }

    #[test]
    fn constant_negative_acc_is_negative_share() {
        let samples: Vec<_> = ["mug", "knife"].iter().map(|c| generate_sample(c, 9, 80).unwrap()).collect();
        let r = evaluate_samples(&ConstantPredictor(false), &samples, &words(), 1).unwrap();
        let (mut zeros, mut total) = (0usize, 0usize);
        for s in &samples {
            for (_, m) in &s.affordances {
                zeros += m.iter().filter(|&&b| b == 0).count();
                total += m.len();
            }
        }
        assert_eq!(r.acc, zeros as f64 / total as f64);
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn missing_vocabulary_words() {
        let have = vec!["grasp".to_string()];
        assert_eq!(missing_words(&have, &words()).len(), 5);
        assert!(missing_words(&words(), &have).is_empty());
    }
}
