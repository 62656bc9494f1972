//! Point-level confusion counts per affordance and the derived mIoU, overall
//! accuracy and class-mean accuracy.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction has {pred} points but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("ground-truth value {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("no predictions were accumulated")]
    Empty,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Per-affordance confusion counts. Merging is associative and commutative.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    classes: IndexMap<String, Confusion>,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulator with `names` registered up front, fixing report order.
    pub fn with_classes<S: AsRef<str>>(names: &[S]) -> Self {
        ConfusionAccumulator {
            classes: names.iter().map(|n| (n.as_ref().to_string(), Confusion::default())).collect(),
        }
    }

    pub fn accumulate(&mut self, affordance: &str, pred: &[bool], gt: &[u8]) -> Result<(), MetricsError> {
        if pred.len() != gt.len() {
            return Err(MetricsError::LengthMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, 1) => c.tp += 1,
                (true, 0) => c.fp += 1,
                (false, 1) => c.fn_ += 1,
                (false, 0) => c.tn += 1,
                (_, b) => return Err(MetricsError::BadLabel(b)),
            }
        }
        self.classes.entry(affordance.to_string()).or_default().add(&c);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (name, c) in &other.classes {
            self.classes.entry(name.clone()).or_default().add(c);
        }
    }

    pub fn get(&self, affordance: &str) -> Option<&Confusion> {
        self.classes.get(affordance)
    }

    pub fn finalize(&self) -> Result<MetricsReport, MetricsError> {
        let total: u64 = self.classes.values().map(Confusion::total).sum();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let mut per_class = IndexMap::new();
        let mut skipped = Vec::new();
        let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n, mut correct) = (0.0, 0usize, 0.0, 0usize, 0u64);
        for (name, c) in &self.classes {
            let union = c.tp + c.fp + c.fn_;
            let iou = if union > 0 {
                let v = c.tp as f64 / union as f64;
                iou_sum += v;
                iou_n += 1;
                Some(v)
            } else {
                skipped.push(name.clone());
                None
            };
            let acc = if c.total() > 0 {
                let v = (c.tp + c.tn) as f64 / c.total() as f64;
                acc_sum += v;
                acc_n += 1;
                Some(v)
            } else {
                None
            };
            correct += c.tp + c.tn;
            per_class.insert(
                name.clone(),
                ClassReport {
                    iou,
                    acc,
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                    tn: c.tn,
                },
            );
        }
        let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
        Ok(MetricsReport {
            miou: mean(iou_sum, iou_n),
            acc: correct as f64 / total as f64,
            macc: mean(acc_sum, acc_n),
            per_class,
            skipped,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// `None` when the class has an empty union.
    pub iou: Option<f64>,
    /// `None` when the class was never evaluated.
    pub acc: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub acc: f64,
    pub macc: f64,
    pub per_class: IndexMap<String, ClassReport>,
    /// Classes left out of mIoU because nothing was predicted or labelled.
    pub skipped: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_example() {
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate("grasp", &[true, true, false, false], &[0, 1, 1, 0]).unwrap();
        let c = acc.get("grasp").unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        let r = acc.finalize().unwrap();
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.per_class["grasp"].acc, Some(0.5));
    }

    #[test]
    fn empty_union_is_skipped() {
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate("support", &[false; 3], &[0, 0, 0]).unwrap();
        acc.accumulate("grasp", &[false; 3], &[1, 0, 0]).unwrap();
        let r = acc.finalize().unwrap();
        assert_eq!(r.skipped, vec!["support".to_string()]);
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.per_class["grasp"].iou, Some(0.0));
        assert!((r.macc - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut acc = ConfusionAccumulator::new();
        assert_eq!(acc.finalize(), Err(MetricsError::Empty));
        assert!(matches!(
            acc.accumulate("a", &[true], &[1, 0]),
            Err(MetricsError::LengthMismatch { pred: 1, gt: 2 })
        ));
        assert_eq!(acc.accumulate("a", &[true], &[2]), Err(MetricsError::BadLabel(2)));
    }

    #[test]
    fn json_keys() {
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate("cut", &[true, false], &[1, 0]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&acc.finalize().unwrap().to_json()).unwrap();
        for k in ["miou", "acc", "macc", "per_class", "skipped"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        let cut = &v["per_class"]["cut"];
        for k in ["iou", "acc", "tp", "fp", "fn", "tn"] {
            assert!(cut.get(k).is_some(), "missing {k}");
        }
    }
}
