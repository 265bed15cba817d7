//! Training objectives: the soft Dice overlap with its closed-form gradient,
//! and a class-re-weighted multinomial logistic loss used as the baseline.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

/// Added to numerator and denominator of the training Dice so the empty/empty
/// case is defined (D = 1) with a zero gradient.
pub const DICE_SMOOTHING: f64 = 1e-6;

/// Probabilities are clamped here before taking the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiceLossResult {
    /// Smoothed Dice coefficient in `[0, 1]`.
    pub dice: f64,
    /// `1 - dice`.
    pub loss: f64,
    /// `dD/dp_j` (gradient of the coefficient, not of the loss).
    pub grad: Vec<f64>,
}

fn check_dice_inputs(p: &[f64], g: &[u8]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::Shape(format!(
            "prediction has {} voxels, ground truth {}",
            p.len(),
            g.len()
        )));
    }
    if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "probability {} at voxel {i} outside [0, 1]",
            p[i]
        )));
    }
    if let Some(i) = g.iter().position(|&v| v > 1) {
        return Err(Error::NonBinaryLabel {
            field: "ground truth".into(),
            index: i,
            value: g[i] as f64,
        });
    }
    Ok(())
}

struct DiceSums {
    intersection: f64,
    p_sq: f64,
    g_sq: f64,
}

fn dice_sums(p: &[f64], g: &[u8]) -> DiceSums {
    let mut s = DiceSums {
        intersection: 0.0,
        p_sq: 0.0,
        g_sq: 0.0,
    };
    for (&pi, &gi) in p.iter().zip(g) {
        let gi = gi as f64;
        s.intersection += pi * gi;
        s.p_sq += pi * pi;
        s.g_sq += gi * gi;
    }
    s
}

/// `D = (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)` with `eps = DICE_SMOOTHING`.
pub fn dice_forward(p: &[f64], g: &[u8]) -> Result<DiceLossResult> {
    check_dice_inputs(p, g)?;
    let s = dice_sums(p, g);
    let num = 2.0 * s.intersection + DICE_SMOOTHING;
    let den = s.p_sq + s.g_sq + DICE_SMOOTHING;
    let dice = num / den;
    Ok(DiceLossResult {
        dice,
        loss: 1.0 - dice,
        grad: dice_grad(p, g, num, den),
    })
}

/// `(2 sum p g + eps) / (sum p^2 + sum g^2 + eps)` for any `eps >= 0`; a
/// zero denominator (both empty, `eps = 0`) gives 1.
pub fn dice_coefficient(p: &[f64], g: &[u8], eps: f64) -> Result<f64> {
    check_dice_inputs(p, g)?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing must be >= 0, got {eps}"
        )));
    }
    let s = dice_sums(p, g);
    let den = s.p_sq + s.g_sq + eps;
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * s.intersection + eps) / den)
}

/// Gradient of the smoothed Dice with respect to each prediction voxel:
/// `dD/dp_j = 2 [g_j (sum p^2 + sum g^2) - 2 p_j sum p g] / (sum p^2 + sum g^2)^2`,
/// with the smoothing term carried through numerator and denominator.
pub fn dice_backward(p: &[f64], g: &[u8]) -> Result<Vec<f64>> {
    check_dice_inputs(p, g)?;
    let s = dice_sums(p, g);
    let num = 2.0 * s.intersection + DICE_SMOOTHING;
    let den = s.p_sq + s.g_sq + DICE_SMOOTHING;
    Ok(dice_grad(p, g, num, den))
}

fn dice_grad(p: &[f64], g: &[u8], num: f64, den: f64) -> Vec<f64> {
    let den_sq = den * den;
    p.iter()
        .zip(g)
        .map(|(&pj, &gj)| 2.0 * (gj as f64 * den - pj * num) / den_sq)
        .collect()
}

/// Per-class weights of the logistic baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub background: f64,
    pub foreground: f64,
}

impl ClassWeights {
    pub fn new(background: f64, foreground: f64) -> Result<Self> {
        let valid = |w: f64| w.is_finite() && w >= 0.0;
        if !valid(background) || !valid(foreground) || background + foreground == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "class weights must be non-negative and not both zero: ({background}, {foreground})"
            )));
        }
        Ok(Self {
            background,
            foreground,
        })
    }

    pub const fn uniform() -> Self {
        Self {
            background: 1.0,
            foreground: 1.0,
        }
    }

    /// `w_c = N / (2 N_c)`, so both classes carry equal total weight. A class
    /// absent from `labels` gets weight 0.
    pub fn inverse_frequency(labels: &[u8]) -> Self {
        let n = labels.len() as f64;
        let fg = labels.iter().filter(|&&v| v == 1).count() as f64;
        let bg = n - fg;
        let w = |count: f64| if count > 0.0 { n / (2.0 * count) } else { 0.0 };
        Self {
            background: w(bg),
            foreground: w(fg),
        }
    }

    fn of(&self, label: u8) -> f64 {
        if label == 1 {
            self.foreground
        } else {
            self.background
        }
    }
}

/// Re-weighted multinomial logistic loss over a two-channel probability
/// field `probs` (`(n, 2, d, h, w)`, channel 1 = foreground).
///
/// Returns `-(1/N) sum_i w_{g_i} log p_{i, g_i}` averaged over all `N`
/// voxels of the batch, and its gradient with respect to the logits that
/// produced `probs` through a softmax: `(1/N) w_{g_i} (p_{i,c} - [c = g_i])`.
pub fn weighted_logistic(
    probs: &Tensor5,
    labels: &[u8],
    weights: ClassWeights,
) -> Result<(f64, Tensor5)> {
    if probs.channels() != 2 {
        return Err(Error::Shape(format!(
            "logistic loss needs 2 channels, got {}",
            probs.channels()
        )));
    }
    let plane = probs.spatial_len();
    if labels.len() != probs.batch() * plane {
        return Err(Error::Shape(format!(
            "{} labels for {} voxels",
            labels.len(),
            probs.batch() * plane
        )));
    }
    if let Some(i) = probs.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "probability {} at index {i} outside [0, 1]",
            probs.data()[i]
        )));
    }
    let n_total = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor5::zeros(probs.shape());
    for n in 0..probs.batch() {
        let base = n * 2 * plane;
        for i in 0..plane {
            let label = labels[n * plane + i];
            if label > 1 {
                return Err(Error::NonBinaryLabel {
                    field: "ground truth".into(),
                    index: n * plane + i,
                    value: label as f64,
                });
            }
            let w = weights.of(label);
            let p = [probs.data()[base + i], probs.data()[base + plane + i]];
            let target = label as usize;
            if w != 0.0 {
                loss -= w * p[target].max(LOG_CLAMP).ln();
            }
            let scale = w / n_total;
            let gd = grad.data_mut();
            gd[base + i] = scale * (p[0] - if target == 0 { 1.0 } else { 0.0 });
            gd[base + plane + i] = scale * (p[1] - if target == 1 { 1.0 } else { 0.0 });
        }
    }
    Ok((loss / n_total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Dice,
    WeightedLogistic,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "weighted_logistic" => Ok(LossKind::WeightedLogistic),
            other => Err(Error::Config {
                key: "loss".into(),
                detail: format!("expected dice|weighted_logistic, got {other:?}"),
            }),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Dice => "dice",
            LossKind::WeightedLogistic => "weighted_logistic",
        })
    }
}

/// How per-volume Dice values of a minibatch are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiceReduction {
    /// Average of one coefficient per volume.
    #[default]
    MeanPerVolume,
    /// One coefficient over the concatenated voxels of the batch.
    Pooled,
}

impl FromStr for DiceReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_per_volume" => Ok(DiceReduction::MeanPerVolume),
            "pooled" => Ok(DiceReduction::Pooled),
            other => Err(Error::Config {
                key: "dice_reduction".into(),
                detail: format!("expected mean_per_volume|pooled, got {other:?}"),
            }),
        }
    }
}

impl fmt::Display for DiceReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiceReduction::MeanPerVolume => "mean_per_volume",
            DiceReduction::Pooled => "pooled",
        })
    }
}
