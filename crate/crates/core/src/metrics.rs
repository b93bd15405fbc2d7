//! Scene completion (occupied vs empty) and per-class semantic completion
//! metrics, accumulated as confusion counts so batches can be merged.

use std::fmt::Write as _;

use crate::error::{shape_err, Result};
use crate::loss::{EvalMask, EMPTY, UNKNOWN};

/// Short column names of the non-empty classes, in label order 1..=11.
pub const CLASS_NAMES: [&str; 11] = [
    "ceil.", "floor", "wall", "win.", "chair", "bed", "sofa", "table", "tvs", "furn.", "objs.",
];

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryCounts {
    pub fn merge(&mut self, o: &BinaryCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn metrics(&self) -> ScMetrics {
        ScMetrics {
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            counts: *self,
        }
    }
}

/// Rates are `None` when their denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iou: Option<f64>,
    pub counts: BinaryCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SscMetrics {
    /// IoU of classes 1..classes; `None` when the class is absent from both
    /// prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Ground-truth voxel count per class 1..classes.
    pub support: Vec<u64>,
}

/// Per-class confusion counts (`[gt][pred]`) plus binary occupancy counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    matrix: Vec<u64>,
    sc: BinaryCounts,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            matrix: vec![0; classes * classes],
            sc: BinaryCounts::default(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.matrix[gt * self.classes + pred]
    }

    pub fn sc_counts(&self) -> BinaryCounts {
        self.sc
    }

    /// Add one prediction/ground-truth pair. Unknown labels are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], mask: &EvalMask) -> Result<()> {
        if pred.len() != gt.len() || mask.in_sc.len() != gt.len() || mask.in_ssc.len() != gt.len() {
            return shape_err(format!(
                "prediction {} / ground truth {} / mask {} lengths differ",
                pred.len(),
                gt.len(),
                mask.in_sc.len()
            ));
        }
        for i in 0..gt.len() {
            let (p, t) = (pred[i], gt[i]);
            if t == UNKNOWN || p as usize >= self.classes || t as usize >= self.classes {
                continue;
            }
            if mask.in_sc[i] {
                match (p != EMPTY, t != EMPTY) {
                    (true, true) => self.sc.tp += 1,
                    (true, false) => self.sc.fp += 1,
                    (false, true) => self.sc.fn_ += 1,
                    (false, false) => self.sc.tn += 1,
                }
            }
            if mask.in_ssc[i] {
                self.matrix[t as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Associative, commutative merge of two accumulators.
    pub fn merge(&mut self, o: &Confusion) -> Result<()> {
        if o.classes != self.classes {
            return shape_err(format!("merging {} with {} classes", o.classes, self.classes));
        }
        for (a, b) in self.matrix.iter_mut().zip(&o.matrix) {
            *a += b;
        }
        self.sc.merge(&o.sc);
        Ok(())
    }

    pub fn sc(&self) -> ScMetrics {
        self.sc.metrics()
    }

    pub fn ssc(&self) -> SscMetrics {
        let n = self.classes;
        let mut per_class = Vec::with_capacity(n - 1);
        let mut support = Vec::with_capacity(n - 1);
        for c in 1..n {
            let tp = self.count(c, c);
            let gt: u64 = (0..n).map(|p| self.count(c, p)).sum();
            let pred: u64 = (0..n).map(|t| self.count(t, c)).sum();
            per_class.push(ratio(tp, gt + pred - tp));
            support.push(gt);
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        SscMetrics {
            per_class,
            mean,
            support,
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            sc: self.sc(),
            ssc: self.ssc(),
        }
    }
}

pub fn sc_metrics(pred: &[u8], gt: &[u8], mask: &EvalMask) -> Result<ScMetrics> {
    let mut c = Confusion::new(256);
    c.add(pred, gt, mask)?;
    Ok(c.sc())
}

pub fn ssc_metrics(pred: &[u8], gt: &[u8], mask: &EvalMask, classes: usize) -> Result<SscMetrics> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt, mask)?;
    Ok(c.ssc())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sc: ScMetrics,
    pub ssc: SscMetrics,
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

fn num(v: Option<f64>) -> String {
    v.map_or("nan".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn class_names(&self) -> Vec<String> {
        (0..self.ssc.per_class.len())
            .map(|i| CLASS_NAMES.get(i).map_or(format!("c{}", i + 1), |s| s.to_string()))
            .collect()
    }

    /// Header plus one row in percent: prec., recall, IoU, classes, avg.
    pub fn table(&self) -> String {
        let mut cols = vec!["prec.".to_string(), "recall".into(), "IoU".into()];
        cols.extend(self.class_names());
        cols.push("avg.".into());
        let mut vals = vec![pct(self.sc.precision), pct(self.sc.recall), pct(self.sc.iou)];
        vals.extend(self.ssc.per_class.iter().map(|&v| pct(v)));
        vals.push(pct(self.ssc.mean));
        let line = |v: &[String]| v.iter().map(|s| format!("{s:>7}")).collect::<String>();
        format!("{}\n{}\n", line(&cols), line(&vals))
    }

    /// `key=value` lines; undefined rates print as `nan`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let c = &self.sc.counts;
        let _ = writeln!(s, "sc.precision={}", num(self.sc.precision));
        let _ = writeln!(s, "sc.recall={}", num(self.sc.recall));
        let _ = writeln!(s, "sc.iou={}", num(self.sc.iou));
        let _ = writeln!(s, "sc.tp={}\nsc.fp={}\nsc.fn={}\nsc.tn={}", c.tp, c.fp, c.fn_, c.tn);
        for (i, name) in self.class_names().iter().enumerate() {
            let key = name.trim_end_matches('.');
            let _ = writeln!(s, "ssc.iou.{key}={}", num(self.ssc.per_class[i]));
            let _ = writeln!(s, "ssc.support.{key}={}", self.ssc.support[i]);
        }
        let _ = writeln!(s, "ssc.mean_iou={}", num(self.ssc.mean));
        s
    }
}
