//! Scalar training objectives and their analytic gradients.
//!
//! Every `*_grad` function returns the loss value together with the gradient
//! with respect to its tensor (or score) inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMask, Tensor3, NUM_CLASSES};

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adv_enc: f64,
    pub lambda_adv_dec: f64,
    pub lambda_mse_enc: f64,
    pub lambda_mse_dec: f64,
    /// EMA decay of the teacher.
    pub ema_decay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv_enc: 0.002,
            lambda_adv_dec: 0.002,
            lambda_mse_enc: 0.1,
            lambda_mse_dec: 0.1,
            ema_decay: 0.99,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adv_enc", self.lambda_adv_enc),
            ("lambda_adv_dec", self.lambda_adv_dec),
            ("lambda_mse_enc", self.lambda_mse_enc),
            ("lambda_mse_dec", self.lambda_mse_dec),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay = {} must lie in [0, 1)",
                self.ema_decay
            )));
        }
        Ok(())
    }

    /// Copy with every adaptation weight set to zero.
    pub fn source_only(&self) -> Self {
        Self {
            lambda_adv_enc: 0.0,
            lambda_adv_dec: 0.0,
            lambda_mse_enc: 0.0,
            lambda_mse_dec: 0.0,
            ema_decay: self.ema_decay,
        }
    }
}

/// How the segmentation network is pushed to fool a discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// Minimize `-ln D(P_s)`.
    #[default]
    NonSaturating,
    /// Minimize `ln(1 - D(P_s))`, the saturating min-max form.
    Saturating,
}

/// The student-side terms combined into the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub seg: f64,
    pub adv_enc: f64,
    pub adv_dec: f64,
    pub mse_enc: f64,
    pub mse_dec: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub adv_enc: f64,
    pub adv_dec: f64,
    pub disc_enc: f64,
    pub disc_dec: f64,
    pub mse_enc: f64,
    pub mse_dec: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "iteration,seg,adv_enc,adv_dec,disc_enc,disc_dec,mse_enc,mse_dec,total";

    pub fn components(&self) -> LossComponents {
        LossComponents {
            seg: self.seg,
            adv_enc: self.adv_enc,
            adv_dec: self.adv_dec,
            mse_enc: self.mse_enc,
            mse_dec: self.mse_dec,
        }
    }

    /// One CSV row (without trailing newline).
    pub fn csv_row(&self, iteration: u64) -> String {
        format!(
            "{iteration},{},{},{},{},{},{},{},{}",
            self.seg,
            self.adv_enc,
            self.adv_dec,
            self.disc_enc,
            self.disc_dec,
            self.mse_enc,
            self.mse_dec,
            self.total
        )
    }

    /// Names the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("seg", self.seg),
            ("adv_enc", self.adv_enc),
            ("adv_dec", self.adv_dec),
            ("disc_enc", self.disc_enc),
            ("disc_dec", self.disc_dec),
            ("mse_enc", self.mse_enc),
            ("mse_dec", self.mse_dec),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn check_dice_shapes(pred: &Tensor3, mask: &LabelMask) -> Result<()> {
    if pred.channels() != NUM_CLASSES
        || pred.height() != mask.height()
        || pred.width() != mask.width()
    {
        return Err(Error::Input(format!(
            "prediction {}x{}x{} vs mask {}x{}",
            pred.channels(),
            pred.height(),
            pred.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Per-class sums `(Σ p·g, Σ p, Σ g)`.
fn dice_sums(pred: &Tensor3, mask: &LabelMask) -> [(f64, f64, f64); NUM_CLASSES] {
    let n = pred.plane_len();
    let mut sums = [(0.0, 0.0, 0.0); NUM_CLASSES];
    for (c, s) in sums.iter_mut().enumerate() {
        let plane = &pred.data()[c * n..(c + 1) * n];
        for (&p, &l) in plane.iter().zip(mask.labels()) {
            let g = if l as usize == c { 1.0 } else { 0.0 };
            s.0 += p * g;
            s.1 += p;
            s.2 += g;
        }
    }
    sums
}

/// Soft multi-class Dice loss, averaged over all three classes.
pub fn dice_loss(pred: &Tensor3, mask: &LabelMask) -> Result<f64> {
    check_dice_shapes(pred, mask)?;
    let sums = dice_sums(pred, mask);
    let mean = sums
        .iter()
        .map(|&(i, p, g)| (2.0 * i + DICE_SMOOTH) / (p + g + DICE_SMOOTH))
        .sum::<f64>()
        / NUM_CLASSES as f64;
    Ok(1.0 - mean)
}

pub fn dice_loss_grad(pred: &Tensor3, mask: &LabelMask) -> Result<(f64, Tensor3)> {
    let loss = dice_loss(pred, mask)?;
    let sums = dice_sums(pred, mask);
    let n = pred.plane_len();
    let mut grad = Tensor3::zeros(pred.channels(), pred.height(), pred.width());
    let k = NUM_CLASSES as f64;
    for (c, &(i, p, g)) in sums.iter().enumerate() {
        let den = p + g + DICE_SMOOTH;
        let num = 2.0 * i + DICE_SMOOTH;
        let plane = &mut grad.data_mut()[c * n..(c + 1) * n];
        for (gv, &l) in plane.iter_mut().zip(mask.labels()) {
            let gi = if l as usize == c { 1.0 } else { 0.0 };
            *gv = -(2.0 * gi * den - num) / (den * den * k);
        }
    }
    Ok((loss, grad))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Student-side fooling loss on discriminator scores of source-derived features.
pub fn adversarial_fool_loss(source_scores: &[f64]) -> f64 {
    adversarial_loss(source_scores, AdversarialForm::NonSaturating)
}

pub fn adversarial_loss(source_scores: &[f64], form: AdversarialForm) -> f64 {
    match form {
        AdversarialForm::NonSaturating => mean(&source_scores.iter().map(|s| -s.ln()).collect::<Vec<_>>()),
        AdversarialForm::Saturating => mean(&source_scores.iter().map(|s| (1.0 - s).ln()).collect::<Vec<_>>()),
    }
}

pub fn adversarial_loss_grad(source_scores: &[f64], form: AdversarialForm) -> (f64, Vec<f64>) {
    let n = source_scores.len().max(1) as f64;
    let grad = source_scores
        .iter()
        .map(|&s| match form {
            AdversarialForm::NonSaturating => -1.0 / (s * n),
            AdversarialForm::Saturating => -1.0 / ((1.0 - s) * n),
        })
        .collect();
    (adversarial_loss(source_scores, form), grad)
}

/// Binary cross-entropy with target label 1 and source label 0.
pub fn domain_classification_loss(target_scores: &[f64], source_scores: &[f64]) -> f64 {
    let t = mean(&target_scores.iter().map(|s| -s.ln()).collect::<Vec<_>>());
    let s = mean(&source_scores.iter().map(|s| -(1.0 - s).ln()).collect::<Vec<_>>());
    t + s
}

/// Loss plus gradients w.r.t. target and source scores.
pub fn domain_classification_loss_grad(
    target_scores: &[f64],
    source_scores: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let nt = target_scores.len().max(1) as f64;
    let ns = source_scores.len().max(1) as f64;
    let gt = target_scores.iter().map(|&s| -1.0 / (s * nt)).collect();
    let gs = source_scores.iter().map(|&s| 1.0 / ((1.0 - s) * ns)).collect();
    (domain_classification_loss(target_scores, source_scores), gt, gs)
}

/// Mean squared difference over every element of two same-shape tensors.
pub fn consistency_mse(a: impl AsRef<Tensor3>, b: impl AsRef<Tensor3>) -> Result<f64> {
    let (a, b) = (a.as_ref(), b.as_ref());
    if !a.same_shape(b) {
        return Err(Error::Input(format!(
            "consistency shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// Loss plus gradient w.r.t. `a` (the gradient w.r.t. `b` is its negation).
pub fn consistency_mse_grad(a: &Tensor3, b: &Tensor3) -> Result<(f64, Tensor3)> {
    let loss = consistency_mse(a, b)?;
    let scale = 2.0 / a.len().max(1) as f64;
    let mut g = a.clone();
    for (gv, &y) in g.data_mut().iter_mut().zip(b.data()) {
        *gv = scale * (*gv - y);
    }
    Ok((loss, g))
}

/// Weighted sum of the student-side terms.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("seg", c.seg),
        ("adv_enc", c.adv_enc),
        ("adv_dec", c.adv_dec),
        ("mse_enc", c.mse_enc),
        ("mse_dec", c.mse_dec),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(c.seg
        + w.lambda_adv_enc * c.adv_enc
        + w.lambda_adv_dec * c.adv_dec
        + w.lambda_mse_enc * c.mse_enc
        + w.lambda_mse_dec * c.mse_dec)
}

impl AsRef<Tensor3> for Tensor3 {
    fn as_ref(&self) -> &Tensor3 {
        self
    }
}

impl AsRef<Tensor3> for crate::tensor::SoftPrediction {
    fn as_ref(&self) -> &Tensor3 {
        self.tensor()
    }
}

impl AsRef<Tensor3> for crate::tensor::EncoderFeature {
    fn as_ref(&self) -> &Tensor3 {
        self.tensor()
    }
}

impl AsRef<Tensor3> for crate::tensor::ImageTensor {
    fn as_ref(&self) -> &Tensor3 {
        self.tensor()
    }
}
