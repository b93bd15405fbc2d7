//! Class-weighted softmax cross-entropy restricted to the field of view.

use std::fmt;
use std::str::FromStr;

use grf_tensor::{Graph, NodeId};

use crate::error::{config_err, shape_err, Error, Result};
use crate::projection::{Visibility, VisibilityGrid};

/// Label of a voxel whose class is unknown; excluded from loss and metrics.
pub const UNKNOWN: u8 = 255;
pub const EMPTY: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
}

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return config_err(format!("class weights must be finite and non-negative: {w:?}"));
        }
        Ok(Self { w })
    }

    pub fn uniform(classes: usize) -> Self {
        Self { w: vec![1.0; classes] }
    }

    pub fn get(&self, class: usize) -> f64 {
        self.w[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.w.iter().map(|v| v * k).collect())
    }
}

/// `0.05 * (1 + floor(epoch / 40))`.
pub fn empty_weight(epoch: usize) -> f64 {
    0.05 * (1 + epoch / 40) as f64
}

/// Scheduled empty-class weight followed by the fixed non-empty weights.
pub fn weight_schedule(epoch: usize, nonempty: &[f64]) -> Result<ClassWeights> {
    let mut w = Vec::with_capacity(nonempty.len() + 1);
    w.push(empty_weight(epoch));
    w.extend_from_slice(nonempty);
    ClassWeights::new(w)
}

/// Which in-view voxels the scene-completion metrics count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScRegion {
    #[default]
    Occluded,
    InView,
}

impl fmt::Display for ScRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScRegion::Occluded => "occluded",
            ScRegion::InView => "in_view",
        })
    }
}

impl FromStr for ScRegion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occluded" => Ok(ScRegion::Occluded),
            "in_view" => Ok(ScRegion::InView),
            other => config_err(format!("unknown SC region {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalMask {
    pub in_loss: Vec<bool>,
    pub in_sc: Vec<bool>,
    pub in_ssc: Vec<bool>,
}

impl EvalMask {
    /// Every voxel counts everywhere.
    pub fn all(n: usize) -> Self {
        Self {
            in_loss: vec![true; n],
            in_sc: vec![true; n],
            in_ssc: vec![true; n],
        }
    }

    /// In-view voxels with a known label enter the loss and SSC; SC takes
    /// the subset selected by `sc`.
    pub fn from_visibility(vis: &VisibilityGrid, labels: &[u8], sc: ScRegion) -> Result<Self> {
        if vis.labels.len() != labels.len() {
            return shape_err(format!(
                "{} visibility labels for {} voxels",
                vis.labels.len(),
                labels.len()
            ));
        }
        let n = labels.len();
        let mut m = Self {
            in_loss: Vec::with_capacity(n),
            in_sc: Vec::with_capacity(n),
            in_ssc: Vec::with_capacity(n),
        };
        for (&v, &l) in vis.labels.iter().zip(labels) {
            let known = v.in_view() && l != UNKNOWN;
            m.in_loss.push(known);
            m.in_ssc.push(known);
            m.in_sc.push(
                known
                    && match sc {
                        ScRegion::Occluded => v == Visibility::Occluded,
                        ScRegion::InView => true,
                    },
            );
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.in_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_loss.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.in_loss.len();
        if self.in_sc.len() != n || self.in_ssc.len() != n {
            return shape_err("mask components differ in length");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by the number of voxels in the loss.
    #[default]
    Mean,
    Sum,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Mean => "mean",
            Normalization::Sum => "sum",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Normalization::Mean),
            "sum" => Ok(Normalization::Sum),
            other => config_err(format!("unknown loss normalization {other:?}")),
        }
    }
}

/// Targets for the graph cross-entropy: `None` for masked or unknown voxels.
pub fn loss_targets(labels: &[u8], mask: &EvalMask, classes: usize) -> Result<Vec<Option<usize>>> {
    mask.check()?;
    if labels.len() != mask.len() {
        return shape_err(format!("{} labels for a mask of {}", labels.len(), mask.len()));
    }
    labels
        .iter()
        .zip(&mask.in_loss)
        .map(|(&l, &m)| {
            if l == UNKNOWN || !m {
                Ok(None)
            } else if (l as usize) < classes {
                Ok(Some(l as usize))
            } else {
                Err(Error::LabelOutOfRange(l))
            }
        })
        .collect()
}

/// Weighted cross-entropy over channels-last `logits` with one label per voxel.
pub fn weighted_ce(
    g: &mut Graph,
    logits: NodeId,
    labels: &[u8],
    weights: &ClassWeights,
    mask: &EvalMask,
    norm: Normalization,
) -> Result<NodeId> {
    let classes = g.value(logits).channels();
    if weights.len() != classes {
        return shape_err(format!("{} class weights for {classes} logit channels", weights.len()));
    }
    let rows = g.value(logits).len() / classes;
    if labels.len() != rows {
        return shape_err(format!("{} labels for {rows} voxels", labels.len()));
    }
    let targets = loss_targets(labels, mask, classes)?;
    let row_w: Vec<f64> = targets.iter().map(|t| t.map_or(0.0, |c| weights.get(c))).collect();
    let count = targets.iter().filter(|t| t.is_some()).count();
    let normalizer = match norm {
        Normalization::Mean => count.max(1) as f64,
        Normalization::Sum => 1.0,
    };
    Ok(g.softmax_xent(logits, targets, row_w, normalizer)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use grf_tensor::Tensor;

    #[test]
    fn schedule_steps_every_forty_epochs() {
        assert_eq!(empty_weight(0), 0.05);
        assert_eq!(empty_weight(39), 0.05);
        assert!((empty_weight(40) - 0.10).abs() < 1e-15);
        assert!((empty_weight(120) - 0.20).abs() < 1e-15);
        let w = weight_schedule(40, &[1.0; 11]).unwrap();
        assert_eq!(w.len(), 12);
        assert!((w.get(0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_is_rejected() {
        assert!(ClassWeights::new(vec![1.0, -0.5]).is_err());
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 1, 12]));
        let l = weighted_ce(&mut g, x, &[3], &ClassWeights::uniform(12), &EvalMask::all(1), Normalization::Mean)
            .unwrap();
        assert!((g.value(l).item() - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 4]));
        let err = weighted_ce(&mut g, x, &[12], &ClassWeights::uniform(4), &EvalMask::all(1), Normalization::Mean)
            .unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange(12)));
    }

    #[test]
    fn unknown_and_masked_voxels_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
        let mut mask = EvalMask::all(3);
        mask.in_loss[1] = false;
        let l = weighted_ce(&mut g, x, &[2, 1, UNKNOWN], &ClassWeights::uniform(4), &mask, Normalization::Sum)
            .unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.wrt(x).unwrap().data();
        assert!(gx[4..].iter().all(|&v| v == 0.0));
        assert!(gx[..4].iter().any(|&v| v != 0.0));
    }
}
