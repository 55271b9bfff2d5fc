//! Pixel-space preprocessing: binarization, the foreground masking transform
//! F(x), square cropping around a bounding box, blacking out regions, and
//! nearest-neighbor resizing for images and masks.
//!
//! All operations are pure and exact: integer index arithmetic everywhere a
//! rounding rule matters, so identical inputs give identical outputs on any
//! platform.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Bounding box in pixel coordinates; x is the column of the left edge, y
/// the row of the top edge. May extend outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

/// An in-bounds rectangle (what a [`BBox`] becomes after clipping/fitting).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    /// The in-image part of this box, or None when the intersection is
    /// empty.
    pub fn clip(&self, img_h: usize, img_w: usize) -> Option<Rect> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = self.x.saturating_add(self.w).min(img_w as i64);
        let y1 = self.y.saturating_add(self.h).min(img_h as i64);
        if x0 < x1 && y0 < y1 {
            Some(Rect {
                top: y0 as usize,
                left: x0 as usize,
                height: (y1 - y0) as usize,
                width: (x1 - x0) as usize,
            })
        } else {
            None
        }
    }
}

/// Thresholds every channel value: 1 where value >= threshold, else 0.
/// Threshold must lie strictly inside (0, 1).
pub fn binarize(img: &Image, threshold: f64) -> Result<Image> {
    if !(threshold.is_finite() && threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid_param(
            "threshold",
            format!("{threshold} (need strictly inside (0,1))"),
        ));
    }
    let data = img
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Image::new(img.height(), img.width(), img.channels(), data)
}

/// The masking transform F(x): keep pixels where the mask is true, zero all
/// channels elsewhere.
pub fn apply_mask(img: &Image, mask: &Mask) -> Result<Image> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::shape(
            "apply_mask",
            format!("mask {}x{}", img.height(), img.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let ch = img.channels();
    let mut data = img.data().to_vec();
    for (i, &keep) in mask.bits().iter().enumerate() {
        if !keep {
            data[i * ch..(i + 1) * ch].fill(0.0);
        }
    }
    Image::new(img.height(), img.width(), ch, data)
}

/// Where the square crop for `bbox` lands: side max(w, h) clamped to the
/// smaller image dimension, centered on the bbox center, translated (never
/// shrunk) to fit inside the image. Errors when the bbox misses the image.
pub fn square_crop_rect(bbox: &BBox, img_h: usize, img_w: usize) -> Result<Rect> {
    if bbox.w < 1 || bbox.h < 1 {
        return Err(Error::invalid_param(
            "bbox",
            format!("{}x{} has no area", bbox.w, bbox.h),
        ));
    }
    if bbox.clip(img_h, img_w).is_none() {
        return Err(Error::invalid_param(
            "bbox",
            format!(
                "({}, {}) {}x{} does not intersect a {img_h}x{img_w} image",
                bbox.x, bbox.y, bbox.w, bbox.h
            ),
        ));
    }
    let side = bbox.w.max(bbox.h).min(img_h as i64).min(img_w as i64);
    // Ideal top/left put the square's center on the bbox center: solve
    // 2*top + side = 2*y + h in doubled coordinates, rounding down.
    let top = (2 * bbox.y + bbox.h - side).div_euclid(2);
    let left = (2 * bbox.x + bbox.w - side).div_euclid(2);
    let top = top.clamp(0, img_h as i64 - side) as usize;
    let left = left.clamp(0, img_w as i64 - side) as usize;
    Ok(Rect {
        top,
        left,
        height: side as usize,
        width: side as usize,
    })
}

pub fn crop_image(img: &Image, rect: &Rect) -> Result<Image> {
    if rect.height == 0
        || rect.width == 0
        || rect.top + rect.height > img.height()
        || rect.left + rect.width > img.width()
    {
        return Err(Error::shape(
            "crop_image",
            format!("rect inside {}x{}", img.height(), img.width()),
            format!("{rect:?}"),
        ));
    }
    let ch = img.channels();
    let mut data = Vec::with_capacity(rect.height * rect.width * ch);
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            for c in 0..ch {
                data.push(img.get(y, x, c));
            }
        }
    }
    Image::new(rect.height, rect.width, ch, data)
}

pub fn crop_mask(mask: &Mask, rect: &Rect) -> Result<Mask> {
    if rect.height == 0
        || rect.width == 0
        || rect.top + rect.height > mask.height()
        || rect.left + rect.width > mask.width()
    {
        return Err(Error::shape(
            "crop_mask",
            format!("rect inside {}x{}", mask.height(), mask.width()),
            format!("{rect:?}"),
        ));
    }
    let mut bits = Vec::with_capacity(rect.height * rect.width);
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            bits.push(mask.get(y, x));
        }
    }
    Mask::new(rect.height, rect.width, bits)
}

/// Square crop around a bounding box (see [`square_crop_rect`] for the
/// placement rule).
pub fn crop_square(img: &Image, bbox: &BBox) -> Result<Image> {
    let rect = square_crop_rect(bbox, img.height(), img.width())?;
    crop_image(img, &rect)
}

/// Zeroes every pixel inside any of the boxes; out-of-bounds parts are
/// clipped, not errors.
pub fn blackout_regions(img: &Image, boxes: &[BBox]) -> Image {
    let ch = img.channels();
    let mut data = img.data().to_vec();
    for bbox in boxes {
        if let Some(rect) = bbox.clip(img.height(), img.width()) {
            for y in rect.top..rect.top + rect.height {
                let row = (y * img.width() + rect.left) * ch;
                data[row..row + rect.width * ch].fill(0.0);
            }
        }
    }
    Image::new(img.height(), img.width(), ch, data).expect("zeroing preserves validity")
}

/// Source row/column for nearest-neighbor output index `i`:
/// floor((i + 0.5) * in / out), computed exactly in integers.
fn nn_index(i: usize, in_dim: usize, out_dim: usize) -> usize {
    ((2 * i + 1) * in_dim) / (2 * out_dim)
}

pub fn resize_nn(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid_param(
            "output size",
            format!("{out_h}x{out_w} (need >= 1x1)"),
        ));
    }
    let ch = img.channels();
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for y in 0..out_h {
        let sy = nn_index(y, img.height(), out_h);
        for x in 0..out_w {
            let sx = nn_index(x, img.width(), out_w);
            for c in 0..ch {
                data.push(img.get(sy, sx, c));
            }
        }
    }
    Image::new(out_h, out_w, ch, data)
}

/// Mask resize under the same index rule as [`resize_nn`], so an
/// (image, mask) pair stays aligned.
pub fn resize_nn_mask(mask: &Mask, out_h: usize, out_w: usize) -> Result<Mask> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid_param(
            "output size",
            format!("{out_h}x{out_w} (need >= 1x1)"),
        ));
    }
    let mut bits = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = nn_index(y, mask.height(), out_h);
        for x in 0..out_w {
            let sx = nn_index(x, mask.width(), out_w);
            bits.push(mask.get(sy, sx));
        }
    }
    Mask::new(out_h, out_w, bits)
}
