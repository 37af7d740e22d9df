use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::{is_disc, ImageTensor, LabelMask, Tensor3};

/// Integer centroid of the disc region (labels 1 and 2), rounded half up.
pub fn locate_center(mask: &LabelMask) -> Result<(usize, usize)> {
    let (mut n, mut sr, mut sc) = (0u64, 0u64, 0u64);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if is_disc(mask.get(r, c)) {
                n += 1;
                sr += r as u64;
                sc += c as u64;
            }
        }
    }
    if n == 0 {
        return Err(Error::Location("mask has no disc pixels".into()));
    }
    Ok((((2 * sr + n) / (2 * n)) as usize, ((2 * sc + n) / (2 * n)) as usize))
}

/// Crops a square window around `center` and resizes it to `out_size`.
///
/// The window side is `crop_size` limited to the shorter image side; a window
/// covering the whole image is not cropped at all. Windows straddling the
/// border are edge-padded. Images are resized bilinearly, masks with
/// nearest-neighbour sampling so labels are preserved. With no `center`, the
/// disc centroid of `mask` is used.
pub fn preprocess(
    image: &ImageTensor,
    mask: Option<&LabelMask>,
    center: Option<(usize, usize)>,
    crop_size: usize,
    out_size: usize,
) -> Result<(ImageTensor, Option<LabelMask>)> {
    let (h, w) = (image.height(), image.width());
    if let Some(m) = mask {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Preprocess(format!(
                "mask {}x{} does not match image {h}x{w}",
                m.height(),
                m.width()
            )));
        }
    }
    if out_size == 0 || crop_size == 0 {
        return Err(Error::Preprocess("crop and output sizes must be positive".into()));
    }
    let center = match (center, mask) {
        (Some(c), _) => c,
        (None, Some(m)) => locate_center(m)
            .map_err(|e| Error::Preprocess(format!("no disc center: {e}")))?,
        (None, None) => {
            return Err(Error::Preprocess(
                "neither a disc center nor a mask to locate it".into(),
            ))
        }
    };
    if center.0 >= h || center.1 >= w {
        return Err(Error::Preprocess(format!(
            "center {center:?} outside {h}x{w} image"
        )));
    }

    let side = crop_size.min(h).min(w);
    let whole = side == h && side == w;
    let (top, left) = if whole {
        (0isize, 0isize)
    } else {
        (
            center.0 as isize - (side / 2) as isize,
            center.1 as isize - (side / 2) as isize,
        )
    };
    let (ch, cw) = if whole { (h, w) } else { (side, side) };
    let clamp_r = |r: isize| r.clamp(0, h as isize - 1) as usize;
    let clamp_c = |c: isize| c.clamp(0, w as isize - 1) as usize;

    let src = image.tensor();
    let channels = src.channels();
    let mut out = Tensor3::zeros(channels, out_size, out_size);
    for c in 0..channels {
        if ch == out_size && cw == out_size {
            for y in 0..out_size {
                for x in 0..out_size {
                    out.set(c, y, x, src.get(c, clamp_r(top + y as isize), clamp_c(left + x as isize)));
                }
            }
        } else {
            let plane: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_fn(cw as u32, ch as u32, |x, y| {
                    let v = src.get(c, clamp_r(top + y as isize), clamp_c(left + x as isize));
                    Luma([v as f32])
                });
            let resized = imageops::resize(&plane, out_size as u32, out_size as u32, FilterType::Triangle);
            for (x, y, p) in resized.enumerate_pixels() {
                out.set(c, y as usize, x as usize, p.0[0] as f64);
            }
        }
    }
    let out_image = ImageTensor::from_clamped(out)?;

    let out_mask = mask
        .map(|m| {
            let crop: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_fn(cw as u32, ch as u32, |x, y| {
                    Luma([m.get(clamp_r(top + y as isize), clamp_c(left + x as isize))])
                });
            let resized = if ch == out_size && cw == out_size {
                crop
            } else {
                imageops::resize(&crop, out_size as u32, out_size as u32, FilterType::Nearest)
            };
            LabelMask::new(out_size, out_size, resized.into_raw())
        })
        .transpose()?;
    Ok((out_image, out_mask))
}
