//! Synthetic fundus crops from two simulated cameras.
//!
//! Each sample is a textured, vignetted background with a few dark vessels,
//! a bright elliptical optic disc, and a brighter cup ellipse strictly inside
//! it. Target-camera images then pass through an appearance shift (hue
//! rotation about the gray axis, contrast, brightness, sensor noise); the
//! masks never see that shift.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_image_png, write_manifest, write_mask_png, ManifestRecord};
use super::{Domain, LabeledDataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{ImageTensor, LabelMask, Tensor3, BACKGROUND, CUP, DISC_RIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceProfile {
    /// Additive offset after contrast.
    pub brightness_delta: f64,
    /// Rotation about the gray axis, degrees.
    pub hue_rotation_deg: f64,
    /// Contrast about mid-gray; 1 leaves it unchanged.
    pub contrast_factor: f64,
    /// Std of additive Gaussian sensor noise.
    pub noise_level: f64,
}

impl Default for AppearanceProfile {
    fn default() -> Self {
        Self {
            brightness_delta: -0.15,
            hue_rotation_deg: 60.0,
            contrast_factor: 0.7,
            noise_level: 0.03,
        }
    }
}

impl AppearanceProfile {
    pub fn identity() -> Self {
        Self {
            brightness_delta: 0.0,
            hue_rotation_deg: 0.0,
            contrast_factor: 1.0,
            noise_level: 0.0,
        }
    }

    /// Rodrigues rotation about `(1,1,1)/√3`.
    fn hue_matrix(&self) -> [[f64; 3]; 3] {
        let t = self.hue_rotation_deg.to_radians();
        let (c, s) = (t.cos(), t.sin());
        let k = 1.0 / 3.0_f64.sqrt();
        let a = (1.0 - c) / 3.0;
        let d = c + a;
        let (p, q) = (a - s * k, a + s * k);
        [[d, p, q], [q, d, p], [p, q, d]]
    }

    fn apply(&self, img: &mut Tensor3, rng: &mut ChaCha8Rng) {
        let m = self.hue_matrix();
        let n = img.plane_len();
        let noise = (self.noise_level > 0.0)
            .then(|| Normal::new(0.0, self.noise_level).expect("non-negative noise level"));
        let data = img.data_mut();
        for i in 0..n {
            let rgb = [data[i], data[n + i], data[2 * n + i]];
            for (c, row) in m.iter().enumerate() {
                let rot = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
                let mut v = 0.5 + self.contrast_factor * (rot - 0.5) + self.brightness_delta;
                if let Some(nd) = &noise {
                    v += nd.sample(rng);
                }
                data[c * n + i] = v.clamp(0.0, 1.0);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeJitter {
    /// Horizontal disc semi-axis as a fraction of the image side.
    pub disc_radius: [f64; 2],
    /// Vertical / horizontal semi-axis ratio of the disc.
    pub aspect: [f64; 2],
    /// Cup semi-axes as a fraction of the disc's.
    pub cup_ratio: [f64; 2],
    /// Disc center offset from the image center, fraction of the side.
    pub center_jitter: f64,
}

impl Default for ShapeJitter {
    fn default() -> Self {
        Self {
            disc_radius: [0.16, 0.22],
            aspect: [0.9, 1.15],
            cup_ratio: [0.3, 0.7],
            center_jitter: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub n_target_test: usize,
    pub image_size: usize,
    /// Sensor noise of the source camera.
    pub source_noise: f64,
    /// Appearance of the target camera relative to the source camera.
    pub shift_profile: AppearanceProfile,
    pub shape_jitter: ShapeJitter,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_source: 200,
            n_target: 200,
            n_target_test: 100,
            image_size: 64,
            source_noise: 0.01,
            shift_profile: AppearanceProfile::default(),
            shape_jitter: ShapeJitter::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 {
            return Err(Error::Config("n_source must be positive".into()));
        }
        if self.n_target == 0 {
            return Err(Error::Config("n_target must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} below 16",
                self.image_size
            )));
        }
        let j = &self.shape_jitter;
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !(ordered(j.disc_radius) && ordered(j.aspect) && ordered(j.cup_ratio)) {
            return Err(Error::Config(format!("invalid shape ranges {j:?}")));
        }
        if j.cup_ratio[1] >= 0.85 {
            return Err(Error::Config("cup_ratio must stay below 0.85".into()));
        }
        if j.disc_radius[1] * j.aspect[1] + j.center_jitter >= 0.45 {
            return Err(Error::Config("disc may leave the image".into()));
        }
        let p = &self.shift_profile;
        if !(p.contrast_factor > 0.0 && p.noise_level >= 0.0 && self.source_noise >= 0.0) {
            return Err(Error::Config("invalid appearance profile".into()));
        }
        Ok(())
    }
}

/// Disc and cup ellipses in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscGeometry {
    /// `(row, col)`.
    pub center: (f64, f64),
    /// `(vertical, horizontal)` semi-axes.
    pub disc_axes: (f64, f64),
    /// Cup center offset from the disc center, `(row, col)`.
    pub cup_offset: (f64, f64),
    pub cup_ratio: f64,
}

impl DiscGeometry {
    /// Draws a geometry for an `h × w` image. The cup offset is limited so
    /// that `|offset|_disc + ratio ≤ 0.85`, keeping the cup strictly inside.
    pub fn sample(h: usize, w: usize, jitter: &ShapeJitter, rng: &mut ChaCha8Rng) -> Self {
        let side = h.min(w) as f64;
        let range = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
            if r[1] > r[0] {
                rng.gen_range(r[0]..r[1])
            } else {
                r[0]
            }
        };
        let ax = range(rng, jitter.disc_radius) * side;
        let ay = ax * range(rng, jitter.aspect);
        let j = jitter.center_jitter * side;
        let center = (
            h as f64 / 2.0 + rng.gen_range(-j..=j),
            w as f64 / 2.0 + rng.gen_range(-j..=j),
        );
        let cup_ratio = range(rng, jitter.cup_ratio);
        let slack = (0.85 - cup_ratio).max(0.0) * 0.5;
        let ang = rng.gen_range(0.0..2.0 * PI);
        let mag = rng.gen_range(0.0..=slack);
        DiscGeometry {
            center,
            disc_axes: (ay, ax),
            cup_offset: (mag * ang.sin() * ay, mag * ang.cos() * ax),
            cup_ratio,
        }
    }

    fn disc_rho(&self, y: f64, x: f64) -> f64 {
        (((y - self.center.0) / self.disc_axes.0).powi(2)
            + ((x - self.center.1) / self.disc_axes.1).powi(2))
        .sqrt()
    }

    fn cup_rho(&self, y: f64, x: f64) -> f64 {
        let cy = self.center.0 + self.cup_offset.0;
        let cx = self.center.1 + self.cup_offset.1;
        (((y - cy) / (self.disc_axes.0 * self.cup_ratio)).powi(2)
            + ((x - cx) / (self.disc_axes.1 * self.cup_ratio)).powi(2))
        .sqrt()
    }

    pub fn mask(&self, h: usize, w: usize) -> LabelMask {
        let mut m = LabelMask::filled(h, w, BACKGROUND);
        let inside = |r: isize, c: isize| {
            r >= 0
                && c >= 0
                && (r as usize) < h
                && (c as usize) < w
                && self.disc_rho(r as f64, c as f64) <= 1.0
        };
        for r in 0..h {
            for c in 0..w {
                let (ri, ci) = (r as isize, c as isize);
                if !inside(ri, ci) {
                    continue;
                }
                let enclosed = inside(ri - 1, ci)
                    && inside(ri + 1, ci)
                    && inside(ri, ci - 1)
                    && inside(ri, ci + 1);
                let label = if enclosed && self.cup_rho(r as f64, c as f64) <= 1.0 {
                    CUP
                } else {
                    DISC_RIM
                };
                m.set(r, c, label);
            }
        }
        m
    }
}

fn smoothstep_alpha(rho: f64, radius_px: f64, ramp_px: f64) -> f64 {
    // signed distance (approximately, in pixels) to the ellipse boundary
    let sd = (rho - 1.0) * radius_px;
    (0.5 - sd / ramp_px).clamp(0.0, 1.0)
}

/// Renders one source-camera sample with the given geometry.
pub fn render_sample(
    h: usize,
    w: usize,
    geom: &DiscGeometry,
    sensor_noise: f64,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, LabelMask) {
    let side = h.min(w) as f64;
    let scale = side / 64.0;

    // low-frequency background texture
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.gen_range(0.3..1.0) * side;
            let ang = rng.gen_range(0.0..PI);
            let k = 2.0 * PI / period;
            (k * ang.cos(), k * ang.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.01..0.035))
        })
        .collect();
    let bg_tint = [
        0.62 + rng.gen_range(-0.04..0.04),
        0.30 + rng.gen_range(-0.03..0.03),
        0.16 + rng.gen_range(-0.02..0.02),
    ];

    // vessels radiating from the disc
    let mut vessel = vec![0.0f64; h * w];
    let n_vessels = rng.gen_range(4..7);
    for _ in 0..n_vessels {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let bend = rng.gen_range(-0.02..0.02) / scale;
        let width = rng.gen_range(0.7..1.4) * scale;
        let length = rng.gen_range(0.5..0.9) * side;
        let mut s = 0.0;
        while s < length {
            let a = theta + bend * s;
            let py = geom.center.0 + s * a.sin();
            let px = geom.center.1 + s * a.cos();
            let r = width.ceil() as isize + 1;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (py.round() as isize + dy, px.round() as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let d = ((yy as f64 - py).powi(2) + (xx as f64 - px).powi(2)).sqrt();
                    let a = (1.0 - (d - width * 0.5).max(0.0)).clamp(0.0, 1.0);
                    let cell = &mut vessel[yy as usize * w + xx as usize];
                    *cell = cell.max(a);
                }
            }
            s += 0.5;
        }
    }

    let disc_col = [0.93, 0.64, 0.36];
    let cup_col = [1.0, 0.97, 0.90];
    let vessel_col = [0.32, 0.07, 0.05];
    let rmin = geom.disc_axes.0.min(geom.disc_axes.1);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let vign_r = 0.75 * side;
    let noise = (sensor_noise > 0.0).then(|| Normal::new(0.0, sensor_noise).expect("valid std"));

    let mut t = Tensor3::zeros(3, h, w);
    let n = h * w;
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let d2 = ((fy - cy).powi(2) + (fx - cx).powi(2)) / (vign_r * vign_r);
            let vign = 1.0 - 0.5 * d2;
            let tex: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin())
                .sum();
            let rho_d = geom.disc_rho(fy, fx);
            let rho_c = geom.cup_rho(fy, fx);
            let a_disc = smoothstep_alpha(rho_d, rmin, 2.0 * scale);
            let a_cup = smoothstep_alpha(rho_c, rmin * geom.cup_ratio, 1.5 * scale);
            let a_ves = vessel[y * w + x] * (0.75 - 0.25 * a_disc - 0.3 * a_cup);
            let i = y * w + x;
            for c in 0..3 {
                let mut v = bg_tint[c] * vign + tex;
                v = v * (1.0 - a_disc) + disc_col[c] * (1.0 - 0.12 * rho_d.min(1.0)) * a_disc;
                v = v * (1.0 - a_cup) + cup_col[c] * a_cup;
                v = v * (1.0 - a_ves) + vessel_col[c] * a_ves;
                if let Some(nd) = &noise {
                    v += nd.sample(rng);
                }
                t.data_mut()[c * n + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    let image = ImageTensor::new(t).expect("values clamped to [0,1]");
    (image, geom.mask(h, w))
}

/// The three generated splits, each with masks. Target training data should
/// be handed to the trainer via [`LabeledDataset::into_unlabeled`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDatasets {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub target_test: LabeledDataset,
    /// Rounded disc centers of the target and target-test samples.
    pub target_centers: Vec<(usize, usize)>,
    pub target_test_centers: Vec<(usize, usize)>,
}

const SOURCE_TAG: u64 = 11;
const TARGET_TAG: u64 = 12;
const TEST_TAG: u64 = 13;

fn generate_split(
    config: &SynthConfig,
    tag: u64,
    count: usize,
    shifted: bool,
) -> (LabeledDataset, Vec<(usize, usize)>) {
    let s = config.image_size;
    let mut images = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    let mut centers = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[tag, i as u64]));
        let geom = DiscGeometry::sample(s, s, &config.shape_jitter, &mut rng);
        let (img, mask) = render_sample(s, s, &geom, config.source_noise, &mut rng);
        let img = if shifted {
            let mut t = img.into_tensor();
            config.shift_profile.apply(&mut t, &mut rng);
            ImageTensor::new(t).expect("shift clamps to [0,1]")
        } else {
            img
        };
        centers.push((
            (geom.center.0.round() as usize).min(s - 1),
            (geom.center.1.round() as usize).min(s - 1),
        ));
        images.push(img);
        masks.push(mask);
    }
    (
        LabeledDataset::new(images, masks).expect("generated sizes agree"),
        centers,
    )
}

/// Generates source, target, and target-test splits; deterministic in `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthDatasets> {
    config.validate()?;
    let (source, _) = generate_split(config, SOURCE_TAG, config.n_source, false);
    let (target, target_centers) = generate_split(config, TARGET_TAG, config.n_target, true);
    let (target_test, target_test_centers) =
        generate_split(config, TEST_TAG, config.n_target_test, true);
    Ok(SynthDatasets {
        source,
        target,
        target_test,
        target_centers,
        target_test_centers,
    })
}

/// Writes `<root>/{source,target,target_test}/{images,masks}` and a
/// `manifest.jsonl` per split; returns the three manifest paths.
pub fn write_synth_dataset(root: &Path, data: &SynthDatasets) -> Result<[PathBuf; 3]> {
    let splits: [(&str, &LabeledDataset, Domain, Option<&[(usize, usize)]>); 3] = [
        ("source", &data.source, Domain::Source, None),
        ("target", &data.target, Domain::Target, Some(&data.target_centers)),
        (
            "target_test",
            &data.target_test,
            Domain::Target,
            Some(&data.target_test_centers),
        ),
    ];
    let mut manifests = Vec::with_capacity(3);
    for (name, ds, domain, centers) in splits {
        let dir = root.join(name);
        for sub in ["images", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut records = Vec::with_capacity(ds.len());
        for (i, (img, mask)) in ds.images.iter().zip(&ds.masks).enumerate() {
            let img_rel = PathBuf::from(format!("images/{i:05}.png"));
            let mask_rel = PathBuf::from(format!("masks/{i:05}.png"));
            write_image_png(&dir.join(&img_rel), img)?;
            write_mask_png(&dir.join(&mask_rel), mask)?;
            records.push(ManifestRecord {
                image_path: img_rel,
                mask_path: Some(mask_rel),
                domain,
                disc_center: centers.map(|c| c[i]),
            });
        }
        let manifest = dir.join("manifest.jsonl");
        write_manifest(&manifest, &records)?;
        manifests.push(manifest);
    }
    Ok(manifests.try_into().expect("three splits"))
}
