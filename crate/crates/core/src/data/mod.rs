//! Dataset ingestion, preprocessing, batching, and the synthetic two-camera
//! benchmark.

mod batch;
mod manifest;
mod preprocess;
mod synth;

pub use batch::{PairedBatch, PairedBatches, PairedIndices};
pub use manifest::{
    load_labeled, load_unlabeled, mask_reads, read_image_png, read_manifest, read_mask_png,
    write_image_png, write_manifest, write_mask_png, CropSettings, ManifestRecord,
};
pub use preprocess::{locate_center, preprocess};
pub use synth::{
    render_sample, synth_generate, write_synth_dataset, AppearanceProfile, DiscGeometry,
    ShapeJitter, SynthConfig, SynthDatasets,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// Images with ground-truth masks (source training data or a labeled test set).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub masks: Vec<LabelMask>,
}

impl LabeledDataset {
    pub fn new(images: Vec<ImageTensor>, masks: Vec<LabelMask>) -> Result<Self> {
        if images.len() != masks.len() {
            return Err(Error::Input(format!(
                "{} images but {} masks",
                images.len(),
                masks.len()
            )));
        }
        for (i, (img, m)) in images.iter().zip(&masks).enumerate() {
            if img.height() != m.height() || img.width() != m.width() {
                return Err(Error::Input(format!("sample {i}: image and mask sizes differ")));
            }
        }
        Ok(Self { images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Drops the masks.
    pub fn into_unlabeled(self) -> UnlabeledDataset {
        UnlabeledDataset {
            images: self.images,
        }
    }
}

/// Images only. Target-domain training data always travels in this form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnlabeledDataset {
    pub images: Vec<ImageTensor>,
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
