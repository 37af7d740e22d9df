//! Segmentation metrics: cup and disc Dice, vertical cup-to-disc ratio.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{is_cup, is_disc, ImageTensor, LabelMask, SoftPrediction, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Labels 1 and 2.
    Disc,
    /// Label 2.
    Cup,
}

impl Structure {
    fn contains(self, label: u8) -> bool {
        match self {
            Structure::Disc => is_disc(label),
            Structure::Cup => is_cup(label),
        }
    }
}

/// Per-pixel argmax; ties go to the lower class index.
pub fn hard_mask(pred: &SoftPrediction) -> LabelMask {
    let t = pred.tensor();
    let n = t.plane_len();
    let d = t.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(t.height(), t.width(), labels).expect("labels below NUM_CLASSES")
}

/// Binary Dice `2|A∩B| / (|A|+|B|)` of one structure. Two empty regions score
/// 1, exactly one empty region scores 0.
pub fn dice_coefficient(pred: &LabelMask, gt: &LabelMask, structure: Structure) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Input(format!(
            "mask shapes {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (ip, ig) = (structure.contains(p), structure.contains(g));
        a += ip as u64;
        b += ig as u64;
        both += (ip && ig) as u64;
    }
    Ok(match (a, b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (a + b) as f64,
    })
}

fn row_extent(mask: &LabelMask, structure: Structure) -> Option<usize> {
    let w = mask.width();
    let rows: Vec<usize> = mask
        .labels()
        .chunks(w)
        .enumerate()
        .filter(|(_, row)| row.iter().any(|&l| structure.contains(l)))
        .map(|(r, _)| r)
        .collect();
    Some(rows.last()? - rows.first()? + 1)
}

/// Bounding-box height of the cup over that of the disc. An empty cup gives 0.
pub fn vertical_cdr(mask: &LabelMask) -> Result<f64> {
    let disc = row_extent(mask, Structure::Disc)
        .ok_or_else(|| Error::Metric("vertical CDR of a mask without disc pixels".into()))?;
    let cup = row_extent(mask, Structure::Cup).unwrap_or(0);
    Ok(cup as f64 / disc as f64)
}

/// Anything mapping an image to class probabilities.
pub trait Predictor: Sync {
    fn predict(&self, image: &ImageTensor) -> Result<SoftPrediction>;
}

/// A backbone with fixed weights, normally the trained teacher.
pub struct NetworkPredictor {
    backbone: Backbone,
    params: ParameterSet,
}

impl NetworkPredictor {
    pub fn new(config: BackboneConfig, params: ParameterSet) -> Result<Self> {
        let backbone = Backbone::new(config)?;
        backbone.check_params(&params)?;
        Ok(Self { backbone, params })
    }
}

impl Predictor for NetworkPredictor {
    fn predict(&self, image: &ImageTensor) -> Result<SoftPrediction> {
        Ok(self.backbone.forward(&self.params, image)?.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cup_dice: f64,
    pub disc_dice: f64,
    /// `None` when every sample was excluded.
    pub cdr_mae: Option<f64>,
    pub n_samples: usize,
    pub n_cdr_excluded: usize,
}

impl EvalReport {
    /// Mean of cup and disc Dice.
    pub fn mean_dice(&self) -> f64 {
        0.5 * (self.cup_dice + self.disc_dice)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self =
            serde_json::from_str(text).map_err(|e| Error::Input(format!("eval record: {e}")))?;
        let dice_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !dice_ok(r.cup_dice) || !dice_ok(r.disc_dice) || r.cdr_mae.is_some_and(|m| !(m >= 0.0)) {
            return Err(Error::Input("eval record values out of range".into()));
        }
        Ok(r)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let cdr = self
            .cdr_mae
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "{:<16}{:>10}", "metric", "value");
        let _ = writeln!(s, "{:<16}{:>10.4}", "cup dice", self.cup_dice);
        let _ = writeln!(s, "{:<16}{:>10.4}", "disc dice", self.disc_dice);
        let _ = writeln!(s, "{:<16}{:>10}", "cdr mae", cdr);
        let _ = writeln!(
            s,
            "{:<16}{:>10}",
            "samples",
            format!("{} ({} cdr excl.)", self.n_samples, self.n_cdr_excluded)
        );
        s
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

struct SampleScore {
    cup: f64,
    disc: f64,
    cdr_err: Option<f64>,
}

/// Scores `model` on every test sample without augmentation.
pub fn evaluate(model: &dyn Predictor, test: &LabeledDataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let scores: Vec<SampleScore> = test
        .images
        .par_iter()
        .zip(&test.masks)
        .enumerate()
        .map(|(i, (img, gt))| -> Result<SampleScore> {
            let pred = hard_mask(&model.predict(img)?);
            let cdr_err = match (vertical_cdr(&pred), vertical_cdr(gt)) {
                (Ok(p), Ok(g)) => Some((p - g).abs()),
                (p, g) => {
                    let why = p.err().or(g.err()).expect("one side failed");
                    log::warn!("sample {i} excluded from CDR: {why}");
                    None
                }
            };
            Ok(SampleScore {
                cup: dice_coefficient(&pred, gt, Structure::Cup)?,
                disc: dice_coefficient(&pred, gt, Structure::Disc)?,
                cdr_err,
            })
        })
        .collect::<Result<_>>()?;
    let n = scores.len();
    let cdr: Vec<f64> = scores.iter().filter_map(|s| s.cdr_err).collect();
    Ok(EvalReport {
        cup_dice: compensated_sum(scores.iter().map(|s| s.cup)) / n as f64,
        disc_dice: compensated_sum(scores.iter().map(|s| s.disc)) / n as f64,
        cdr_mae: (!cdr.is_empty()).then(|| compensated_sum(cdr.iter().copied()) / cdr.len() as f64),
        n_samples: n,
        n_cdr_excluded: n - cdr.len(),
    })
}
