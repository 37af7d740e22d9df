//! Dense channel-major tensors and the image-domain value types built on them.
//!
//! Every spatial tensor is stored as `channels × height × width` in a flat
//! `Vec<f64>` (row-major inside each channel plane).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation classes: background, disc rim, cup.
pub const NUM_CLASSES: usize = 3;

/// Label values for [`LabelMask`].
pub const BACKGROUND: u8 = 0;
pub const DISC_RIM: u8 = 1;
pub const CUP: u8 = 2;

/// Minimum spatial extent accepted for input images.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Input(format!(
                "tensor data length {} does not match shape {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor3, b: &Tensor3) -> Tensor3 {
        debug_assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor3 {
            channels: a.channels + b.channels,
            height: a.height,
            width: a.width,
            data,
        }
    }

    /// Inverse of [`Tensor3::concat_channels`]: the first `channels` planes and the rest.
    pub fn split_channels(&self, channels: usize) -> (Tensor3, Tensor3) {
        let cut = channels * self.plane_len();
        (
            Tensor3 {
                channels,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            Tensor3 {
                channels: self.channels - channels,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

/// Normalized input image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor(Tensor3);

impl ImageTensor {
    pub fn new(tensor: Tensor3) -> Result<Self> {
        let (c, h, w) = tensor.shape();
        if c == 0 {
            return Err(Error::Input("image has no channels".into()));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Input(format!(
                "image {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if let Some(v) = tensor
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Input(format!("image value {v} outside [0,1]")));
        }
        Ok(Self(tensor))
    }

    /// Builds an image by clamping every value into `[0, 1]`.
    pub fn from_clamped(mut tensor: Tensor3) -> Result<Self> {
        for v in tensor.data_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(tensor)
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }
}

/// Per-pixel class probabilities (`NUM_CLASSES` channels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPrediction(Tensor3);

impl SoftPrediction {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(tensor: Tensor3) -> Result<Self> {
        if tensor.channels() != NUM_CLASSES {
            return Err(Error::Input(format!(
                "prediction has {} channels, expected {NUM_CLASSES}",
                tensor.channels()
            )));
        }
        let n = tensor.plane_len();
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..NUM_CLASSES {
                let v = tensor.data()[c * n + i];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Input(format!("probability {v} outside [0,1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::Input(format!(
                    "class probabilities at pixel {i} sum to {sum}"
                )));
            }
        }
        Ok(Self(tensor))
    }

    /// One-hot encoding of a label mask.
    pub fn one_hot(mask: &LabelMask) -> Self {
        let mut t = Tensor3::zeros(NUM_CLASSES, mask.height(), mask.width());
        let n = t.plane_len();
        for (i, &l) in mask.labels().iter().enumerate() {
            let c = (l as usize).min(NUM_CLASSES - 1);
            t.data_mut()[c * n + i] = 1.0;
        }
        Self(t)
    }

    pub(crate) fn from_tensor_unchecked(tensor: Tensor3) -> Self {
        Self(tensor)
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }
}

/// Bottleneck representation produced by the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderFeature(Tensor3);

impl EncoderFeature {
    pub fn new(tensor: Tensor3) -> Result<Self> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite {
                term: "encoder feature".into(),
            });
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }
}

/// Ground-truth or predicted label map.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Input(format!(
                "mask has {} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    /// Pixels labeled rim or cup.
    pub fn disc_region_len(&self) -> usize {
        self.labels.iter().filter(|&&l| is_disc(l)).count()
    }
}

#[inline]
pub fn is_disc(label: u8) -> bool {
    label == DISC_RIM || label == CUP
}

#[inline]
pub fn is_cup(label: u8) -> bool {
    label == CUP
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRule {
    /// Label outside `{0, 1, 2}`.
    LabelSet,
    /// Cup pixel touching background or the image border.
    CupEnclosure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskViolation {
    pub row: usize,
    pub col: usize,
    pub rule: MaskRule,
}

impl std::fmt::Display for MaskViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let rule = match self.rule {
            MaskRule::LabelSet => "label outside {0,1,2}",
            MaskRule::CupEnclosure => "cup pixel not enclosed by disc",
        };
        write!(f, "({}, {}): {rule}", self.row, self.col)
    }
}

/// Lists every pixel breaking the label-set or cup-enclosure rule.
///
/// A cup pixel is enclosed when all four of its neighbours exist and belong
/// to the disc region.
pub fn validate_mask(mask: &LabelMask) -> Vec<MaskViolation> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let l = mask.get(row, col);
            if l > CUP {
                out.push(MaskViolation {
                    row,
                    col,
                    rule: MaskRule::LabelSet,
                });
                continue;
            }
            if l != CUP {
                continue;
            }
            let enclosed = row > 0
                && col > 0
                && row + 1 < h
                && col + 1 < w
                && [
                    mask.get(row - 1, col),
                    mask.get(row + 1, col),
                    mask.get(row, col - 1),
                    mask.get(row, col + 1),
                ]
                .iter()
                .all(|&n| is_disc(n));
            if !enclosed {
                out.push(MaskViolation {
                    row,
                    col,
                    rule: MaskRule::CupEnclosure,
                });
            }
        }
    }
    out
}
