use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::preprocess::preprocess;
use super::{Domain, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMask, Tensor3, CUP};

/// One line of a JSON-lines dataset manifest. Relative paths resolve against
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub domain: Domain,
    /// `(row, col)` of the optic disc in the full-size image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_center: Option<(usize, usize)>,
}

/// Crop window side and output side used when loading a manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSettings {
    pub crop_size: usize,
    pub out_size: usize,
}

static SOURCE_MASK_READS: AtomicU64 = AtomicU64::new(0);
static TARGET_MASK_READS: AtomicU64 = AtomicU64::new(0);

/// Number of mask files decoded so far for records of `domain`.
pub fn mask_reads(domain: Domain) -> u64 {
    match domain {
        Domain::Source => SOURCE_MASK_READS.load(Ordering::SeqCst),
        Domain::Target => TARGET_MASK_READS.load(Ordering::SeqCst),
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.domain == Domain::Source && rec.mask_path.is_none() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: "source record without mask_path".into(),
            });
        }
        rec.image_path = base.join(&rec.image_path);
        rec.mask_path = rec.mask_path.map(|m| base.join(m));
        out.push(rec);
    }
    Ok(out)
}

/// Writes records one JSON object per line, paths as given.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("manifest records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_image_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor3::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    ImageTensor::new(t)
}

pub fn write_image_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let t = image.tensor();
    let buf = image::RgbImage::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        let px = |c: usize| {
            let v = t.get(c.min(t.channels() - 1), y as usize, x as usize);
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes a single-channel label PNG, counting the read against `domain`.
pub fn read_mask_png(path: &Path, domain: Domain) -> Result<LabelMask> {
    match domain {
        Domain::Source => SOURCE_MASK_READS.fetch_add(1, Ordering::SeqCst),
        Domain::Target => TARGET_MASK_READS.fetch_add(1, Ordering::SeqCst),
    };
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img.into_raw();
    if let Some(bad) = labels.iter().find(|&&l| l > CUP) {
        return Err(Error::Input(format!(
            "{}: label {bad} outside {{0,1,2}}",
            path.display()
        )));
    }
    LabelMask::new(h, w, labels)
}

pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let buf = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.labels().to_vec(),
    )
    .expect("mask buffer matches its dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var("CFEA_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Loads every record with its mask, cropping around the manifest center or
/// the mask's disc centroid.
pub fn load_labeled(manifest: &Path, crop: CropSettings) -> Result<LabeledDataset> {
    let records = read_manifest(manifest)?;
    let pool = worker_pool()?;
    let samples: Vec<(ImageTensor, LabelMask)> = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let mask_path = r.mask_path.as_ref().ok_or_else(|| {
                    Error::Input(format!("{} has no mask_path", r.image_path.display()))
                })?;
                let image = read_image_png(&r.image_path)?;
                let mask = read_mask_png(mask_path, r.domain)?;
                let (img, m) =
                    preprocess(&image, Some(&mask), r.disc_center, crop.crop_size, crop.out_size)?;
                Ok((img, m.expect("mask given")))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (images, masks) = samples.into_iter().unzip();
    LabeledDataset::new(images, masks)
}

/// Loads images only; `mask_path` entries are never opened. Records without
/// a `disc_center` are cropped around the image center.
pub fn load_unlabeled(manifest: &Path, crop: CropSettings) -> Result<UnlabeledDataset> {
    let records = read_manifest(manifest)?;
    let pool = worker_pool()?;
    let images = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let image = read_image_png(&r.image_path)?;
                let center = r.disc_center.unwrap_or_else(|| {
                    let c = (image.height() / 2, image.width() / 2);
                    if crop.crop_size < image.height().min(image.width()) {
                        log::warn!(
                            "{}: no disc_center, cropping around image center",
                            r.image_path.display()
                        );
                    }
                    c
                });
                let (img, _) = preprocess(&image, None, Some(center), crop.crop_size, crop.out_size)?;
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(UnlabeledDataset { images })
}
