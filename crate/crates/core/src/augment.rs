//! Image resizing, cropping and random affine augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub enabled: bool,
    pub resize_to: u32,
    pub crop_to: u32,
    /// Maximum absolute rotation in degrees.
    pub rotation: f64,
    /// Maximum absolute translation as a fraction of the side.
    pub translate: f64,
    /// Maximum relative deviation of the scale factor from 1.
    pub scale: f64,
    /// Maximum absolute horizontal shear in degrees.
    pub shear: f64,
    pub hflip_prob: f64,
}

impl AugmentationSpec {
    pub fn paper() -> Self {
        Self::for_side(256)
    }

    /// Same geometry as [`Self::paper`], scaled so the crop is `side`.
    pub fn for_side(side: u32) -> Self {
        Self {
            enabled: true,
            resize_to: (side as f64 * 288.0 / 256.0).round() as u32,
            crop_to: side,
            rotation: 20.0,
            translate: 0.2,
            scale: 0.2,
            shear: 10.0,
            hflip_prob: 0.5,
        }
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_to == 0 || self.resize_to < self.crop_to {
            return Err(Error::InvalidArgument(format!(
                "augmentation needs 0 < crop_to <= resize_to, got {} and {}",
                self.crop_to, self.resize_to
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..1.0).contains(&self.scale) {
            return Err(Error::InvalidArgument("flip probability or scale range out of bounds".into()));
        }
        Ok(())
    }
}

/// Bilinear sample at continuous pixel-centre coordinates; outside pixels read as 0.
fn sample(img: &Image, c: usize, x: f64, y: f64) -> f32 {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let px = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            img.get(c, yi as usize, xi as usize)
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with edge clamping (half-pixel centres).
pub fn resize(img: &Image, width: u32, height: u32) -> Image {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    let (mw, mh) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    let mut out = Image::filled(width, height, 0.0);
    for y in 0..height as usize {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, mh);
        for x in 0..width as usize {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, mw);
            for c in 0..Image::CHANNELS {
                out.set(c, y, x, sample(img, c, src_x, src_y));
            }
        }
    }
    out
}

pub fn crop(img: &Image, left: u32, top: u32, side: u32) -> Image {
    let mut out = Image::filled(side, side, 0.0);
    for c in 0..Image::CHANNELS {
        for y in 0..side as usize {
            for x in 0..side as usize {
                out.set(c, y, x, img.get(c, y + top as usize, x + left as usize));
            }
        }
    }
    out
}

pub fn center_crop(img: &Image, side: u32) -> Image {
    crop(img, (img.width() - side) / 2, (img.height() - side) / 2, side)
}

pub fn hflip(img: &Image) -> Image {
    let w = img.width() as usize;
    let mut out = img.clone();
    for c in 0..Image::CHANNELS {
        for y in 0..img.height() as usize {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

/// One concrete affine draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub translate: (f64, f64),
    pub scale: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        translate: (0.0, 0.0),
        scale: 1.0,
        shear_deg: 0.0,
    };
}

/// Warps about the image centre (rotation, shear, scale, then translation in
/// pixels), sampling bilinearly with zero fill.
pub fn affine(img: &Image, p: &AffineParams) -> Image {
    let (th, sh) = (p.rotation_deg.to_radians(), p.shear_deg.to_radians());
    let (cos, sin) = (th.cos(), th.sin());
    // forward matrix: R * [[1, tan(sh)], [0, 1]] * s
    let a = [
        [cos * p.scale, (cos * sh.tan() - sin) * p.scale],
        [sin * p.scale, (sin * sh.tan() + cos) * p.scale],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let cx = (img.width() as f64 - 1.0) / 2.0;
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let mut out = Image::filled(img.width(), img.height(), 0.0);
    for y in 0..img.height() as usize {
        for x in 0..img.width() as usize {
            let qx = x as f64 - cx - p.translate.0;
            let qy = y as f64 - cy - p.translate.1;
            let sx = inv[0][0] * qx + inv[0][1] * qy + cx;
            let sy = inv[1][0] * qx + inv[1][1] * qy + cy;
            for c in 0..Image::CHANNELS {
                out.set(c, y, x, sample(img, c, sx, sy));
            }
        }
    }
    out
}

/// Deterministic evaluation path: resize then centre crop.
pub fn eval_transform(img: &Image, spec: &AugmentationSpec) -> Image {
    let resized = resize(img, spec.resize_to, spec.resize_to);
    center_crop(&resized, spec.crop_to)
}

/// Training path; falls back to [`eval_transform`] when disabled.
pub fn train_transform<R: Rng>(img: &Image, spec: &AugmentationSpec, rng: &mut R) -> Image {
    if !spec.enabled {
        return eval_transform(img, spec);
    }
    let resized = resize(img, spec.resize_to, spec.resize_to);
    let slack = spec.resize_to - spec.crop_to;
    let left = rng.random_range(0..=slack);
    let top = rng.random_range(0..=slack);
    let cropped = crop(&resized, left, top, spec.crop_to);
    let side = spec.crop_to as f64;
    let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let params = AffineParams {
        rotation_deg: sym(rng, spec.rotation),
        translate: (sym(rng, spec.translate) * side, sym(rng, spec.translate) * side),
        scale: 1.0 + sym(rng, spec.scale),
        shear_deg: sym(rng, spec.shear),
    };
    let warped = affine(&cropped, &params);
    if rng.random_bool(spec.hflip_prob) {
        hflip(&warped)
    } else {
        warped
    }
}
