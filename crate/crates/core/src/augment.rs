//! Pixel-level perturbations and exact grid transforms shared by the student
//! input and the teacher output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{EncoderFeature, ImageTensor, LabelMask, SoftPrediction, Tensor3};

/// Largest translation (pixels, per axis) in the transform family.
pub const MAX_SHIFT: i32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelAugmentConfig {
    pub noise_sigma: f64,
    /// Multiplicative brightness range `[lo, hi]`.
    pub brightness_range: [f64; 2],
    /// Additive intensity range `[lo, hi]`.
    pub intensity_shift: [f64; 2],
}

impl Default for PixelAugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            brightness_range: [0.9, 1.1],
            intensity_shift: [-0.05, 0.05],
        }
    }
}

impl PixelAugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            brightness_range: [1.0, 1.0],
            intensity_shift: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0
            && self.brightness_range[0] <= self.brightness_range[1]
            && self.intensity_shift[0] <= self.intensity_shift[1]
            && self.brightness_range.iter().all(|v| v.is_finite())
            && self.intensity_shift.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid pixel augmentation {self:?}")))
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Brightness scaling, intensity shift, and Gaussian noise, re-clamped to `[0, 1]`.
pub fn pixel_augment(image: &ImageTensor, config: &PixelAugmentConfig, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = uniform(&mut rng, config.brightness_range);
    let shift = uniform(&mut rng, config.intensity_shift);
    let mut t = image.tensor().clone();
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("sigma validated non-negative");
        for v in t.data_mut() {
            *v = (gain * *v + shift + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    } else {
        for v in t.data_mut() {
            *v = (gain * *v + shift).clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(t).expect("clamped values stay in range")
}

/// Horizontal flip, then counter-clockwise quarter turns, then cyclic shift.
///
/// Every member of the family is a permutation of the pixel grid, so it is
/// exactly invertible and moves channel values without altering them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub hflip: bool,
    pub quarter_turns: u8,
    /// `(rows, cols)` cyclic translation.
    pub shift: (i32, i32),
}

impl Default for SpatialTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SpatialTransform {
    pub const IDENTITY: SpatialTransform = SpatialTransform {
        hflip: false,
        quarter_turns: 0,
        shift: (0, 0),
    };

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.quarter_turns.is_multiple_of(4) && self.shift == (0, 0)
    }

    /// The same flip and rotation with the translation dropped.
    pub fn symmetry_only(&self) -> Self {
        Self {
            shift: (0, 0),
            ..*self
        }
    }

    /// The transform as seen on a grid down-sampled by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor.max(1) as f64;
        let r = |v: i32| (v as f64 / f).round() as i32;
        Self {
            shift: (r(self.shift.0), r(self.shift.1)),
            ..*self
        }
    }

    fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(Error::Input(format!(
                "quarter-turn rotation needs a square grid, got {h}x{w}"
            )));
        }
        Ok((h, w))
    }

    /// Destination of source pixel `(y, x)` on an `h × w` grid.
    #[inline]
    fn dest(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        if self.hflip {
            x = w - 1 - x;
        }
        match self.quarter_turns % 4 {
            1 => (y, x) = (w - 1 - x, y),
            2 => (y, x) = (h - 1 - y, w - 1 - x),
            3 => (y, x) = (x, h - 1 - y),
            _ => {}
        }
        let yy = (y as i64 + self.shift.0 as i64).rem_euclid(h as i64) as usize;
        let xx = (x as i64 + self.shift.1 as i64).rem_euclid(w as i64) as usize;
        (yy, xx)
    }

    /// Flat destination index for every source pixel.
    pub fn permutation(&self, h: usize, w: usize) -> Result<Vec<usize>> {
        self.output_dims(h, w)?;
        let mut perm = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = self.dest(y, x, h, w);
                perm.push(dy * w + dx);
            }
        }
        Ok(perm)
    }

    pub fn apply_tensor(&self, t: &Tensor3) -> Result<Tensor3> {
        let (c, h, w) = t.shape();
        if self.is_identity() {
            return Ok(t.clone());
        }
        let perm = self.permutation(h, w)?;
        let n = h * w;
        let mut out = Tensor3::zeros(c, h, w);
        for ch in 0..c {
            let src = &t.data()[ch * n..(ch + 1) * n];
            let dst = &mut out.data_mut()[ch * n..(ch + 1) * n];
            for (i, &d) in perm.iter().enumerate() {
                dst[d] = src[i];
            }
        }
        Ok(out)
    }

    pub fn apply_inverse_tensor(&self, t: &Tensor3) -> Result<Tensor3> {
        let (c, h, w) = t.shape();
        if self.is_identity() {
            return Ok(t.clone());
        }
        let perm = self.permutation(h, w)?;
        let n = h * w;
        let mut out = Tensor3::zeros(c, h, w);
        for ch in 0..c {
            let src = &t.data()[ch * n..(ch + 1) * n];
            let dst = &mut out.data_mut()[ch * n..(ch + 1) * n];
            for (i, &d) in perm.iter().enumerate() {
                dst[i] = src[d];
            }
        }
        Ok(out)
    }
}

/// Draws uniformly from the transform family: 2 flips × 4 rotations ×
/// `(2·MAX_SHIFT + 1)²` translations.
pub fn sample_spatial_transform(seed: u64) -> SpatialTransform {
    sample_spatial_transform_with(seed, MAX_SHIFT)
}

/// As [`sample_spatial_transform`] with translations limited to `max_shift`.
pub fn sample_spatial_transform_with(seed: u64, max_shift: i32) -> SpatialTransform {
    let m = max_shift.clamp(0, MAX_SHIFT);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpatialTransform {
        hflip: rng.gen_bool(0.5),
        quarter_turns: rng.gen_range(0..4),
        shift: (rng.gen_range(-m..=m), rng.gen_range(-m..=m)),
    }
}

/// Values a [`SpatialTransform`] can be applied to.
pub trait Transformable: Sized {
    fn transformed(&self, t: &SpatialTransform) -> Result<Self>;
    fn inverse_transformed(&self, t: &SpatialTransform) -> Result<Self>;
}

impl Transformable for Tensor3 {
    fn transformed(&self, t: &SpatialTransform) -> Result<Self> {
        t.apply_tensor(self)
    }

    fn inverse_transformed(&self, t: &SpatialTransform) -> Result<Self> {
        t.apply_inverse_tensor(self)
    }
}

impl Transformable for ImageTensor {
    fn transformed(&self, t: &SpatialTransform) -> Result<Self> {
        ImageTensor::new(t.apply_tensor(self.tensor())?)
    }

    fn inverse_transformed(&self, t: &SpatialTransform) -> Result<Self> {
        ImageTensor::new(t.apply_inverse_tensor(self.tensor())?)
    }
}

impl Transformable for SoftPrediction {
    fn transformed(&self, t: &SpatialTransform) -> Result<Self> {
        Ok(SoftPrediction::from_tensor_unchecked(t.apply_tensor(self.tensor())?))
    }

    fn inverse_transformed(&self, t: &SpatialTransform) -> Result<Self> {
        Ok(SoftPrediction::from_tensor_unchecked(
            t.apply_inverse_tensor(self.tensor())?,
        ))
    }
}

impl Transformable for EncoderFeature {
    fn transformed(&self, t: &SpatialTransform) -> Result<Self> {
        EncoderFeature::new(t.apply_tensor(self.tensor())?)
    }

    fn inverse_transformed(&self, t: &SpatialTransform) -> Result<Self> {
        EncoderFeature::new(t.apply_inverse_tensor(self.tensor())?)
    }
}

impl Transformable for LabelMask {
    fn transformed(&self, t: &SpatialTransform) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        let perm = t.permutation(h, w)?;
        let mut out = vec![0u8; h * w];
        for (i, &d) in perm.iter().enumerate() {
            out[d] = self.labels()[i];
        }
        LabelMask::new(h, w, out)
    }

    fn inverse_transformed(&self, t: &SpatialTransform) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        let perm = t.permutation(h, w)?;
        let out = perm.iter().map(|&d| self.labels()[d]).collect();
        LabelMask::new(h, w, out)
    }
}

/// Applies `t` to any transformable value.
pub fn apply_transform<T: Transformable>(t: &SpatialTransform, x: &T) -> Result<T> {
    x.transformed(t)
}

/// Applies `t` to an encoder feature on a grid `factor` times coarser than
/// the input: flips and rotations carry over, translation is scaled and rounded.
pub fn apply_transform_to_feature(
    t: &SpatialTransform,
    feature: &EncoderFeature,
    factor: usize,
) -> Result<EncoderFeature> {
    feature.transformed(&t.scaled(factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, n: usize) -> Tensor3 {
        let data = (0..c * n * n).map(|i| i as f64 / (c * n * n) as f64).collect();
        Tensor3::from_vec(c, n, n, data).unwrap()
    }

    #[test]
    fn identity_augment_is_identity() {
        let img = ImageTensor::new(ramp(3, 8)).unwrap();
        assert_eq!(pixel_augment(&img, &PixelAugmentConfig::identity(), 9), img);
    }

    #[test]
    fn augment_is_seeded() {
        let img = ImageTensor::new(ramp(3, 8)).unwrap();
        let cfg = PixelAugmentConfig::default();
        assert_eq!(pixel_augment(&img, &cfg, 4), pixel_augment(&img, &cfg, 4));
        assert_ne!(pixel_augment(&img, &cfg, 4), pixel_augment(&img, &cfg, 5));
        let out = pixel_augment(&img, &cfg, 4);
        assert!(out.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn quarter_turn_moves_top_right_to_top_left() {
        let t = SpatialTransform {
            hflip: false,
            quarter_turns: 1,
            shift: (0, 0),
        };
        let mut x = Tensor3::zeros(1, 4, 4);
        x.set(0, 0, 3, 1.0);
        let y = t.apply_tensor(&x).unwrap();
        assert_eq!(y.get(0, 0, 0), 1.0);
    }

    #[test]
    fn inverse_restores_every_member() {
        let x = ramp(2, 12);
        for hflip in [false, true] {
            for q in 0..4 {
                for shift in [(0, 0), (3, -5), (-8, 8)] {
                    let t = SpatialTransform {
                        hflip,
                        quarter_turns: q,
                        shift,
                    };
                    let y = t.apply_tensor(&x).unwrap();
                    assert_eq!(t.apply_inverse_tensor(&y).unwrap(), x);
                    let mut perm = t.permutation(12, 12).unwrap();
                    perm.sort_unstable();
                    assert_eq!(perm, (0..144).collect::<Vec<_>>());
                }
            }
        }
    }

    #[test]
    fn odd_rotation_on_rectangle_rejected() {
        let t = SpatialTransform {
            hflip: false,
            quarter_turns: 1,
            shift: (0, 0),
        };
        assert!(matches!(
            t.apply_tensor(&Tensor3::zeros(1, 4, 6)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn scaled_translation_rounds() {
        let t = SpatialTransform {
            hflip: true,
            quarter_turns: 3,
            shift: (7, -4),
        };
        let s = t.scaled(8);
        assert_eq!(s.shift, (1, -1));
        assert_eq!((s.hflip, s.quarter_turns), (true, 3));
        assert_eq!(t.symmetry_only().shift, (0, 0));
    }
}
