use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ImageBuffer;
use crate::geometry::{Correspondence, Homography, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    /// Flip with probability 0.5.
    Random,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub jitter: bool,
    pub gain: [f64; 2],
    pub offset: [f64; 2],
    pub flip_horizontal: FlipMode,
    pub flip_vertical: FlipMode,
    /// Rotation range in degrees for pair augmentation.
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    /// Side of the crop window as a fraction of the image side.
    pub crop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter: true,
            gain: [0.8, 1.25],
            offset: [-0.1, 0.1],
            flip_horizontal: FlipMode::Random,
            flip_vertical: FlipMode::Random,
            rotation_deg: [-15.0, 15.0],
            scale: [0.9, 1.1],
            crop_fraction: 0.875,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn decide(rng: &mut ChaCha8Rng, mode: FlipMode) -> bool {
    // Always draw so the random stream does not depend on the mode.
    let coin = rng.random_bool(0.5);
    match mode {
        FlipMode::Random => coin,
        FlipMode::Always => true,
        FlipMode::Never => false,
    }
}

/// Brightness/contrast jitter `v * gain + offset` (clamped to `[0, 1]`) and
/// independent horizontal/vertical flips.
pub fn augment_single(img: &ImageBuffer, cfg: &AugmentConfig, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = uniform(&mut rng, cfg.gain) as f32;
    let offset = uniform(&mut rng, cfg.offset) as f32;
    let fh = decide(&mut rng, cfg.flip_horizontal);
    let fv = decide(&mut rng, cfg.flip_vertical);
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = Vec::with_capacity(w * h * c);
    for y in 0..h {
        let sy = if fv { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if fh { w - 1 - x } else { x };
            for ch in 0..c {
                let v = img.pixel(sx, sy, ch);
                let v = if cfg.jitter { v * gain + offset } else { v };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(w, h, c, data).expect("same shape, clamped values")
}

/// Resamples `img` onto a `width x height` grid: output pixel `q` takes the
/// bilinear value at `output_to_source(q)`. Outside the source, `fill` is
/// used if given, else the nearest edge pixel.
pub fn warp_image(
    img: &ImageBuffer,
    output_to_source: &Homography,
    width: usize,
    height: usize,
    fill: Option<f32>,
) -> ImageBuffer {
    let c = img.channels();
    let (sw, sh) = (img.width() as f64, img.height() as f64);
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        for x in 0..width {
            let p = output_to_source
                .apply(Point2::new(x as f64, y as f64))
                .unwrap_or(Point2::new(f64::NAN, f64::NAN));
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x <= sw - 1.0 && p.y <= sh - 1.0;
            if let (Some(v), false) = (fill, inside && p.is_finite()) {
                data.extend(std::iter::repeat_n(v, c));
                continue;
            }
            let px = if p.x.is_finite() {
                p.x.clamp(0.0, sw - 1.0)
            } else {
                0.0
            };
            let py = if p.y.is_finite() {
                p.y.clamp(0.0, sh - 1.0)
            } else {
                0.0
            };
            let (x0, y0) = (px.floor() as usize, py.floor() as usize);
            let (x1, y1) = (
                (x0 + 1).min(img.width() - 1),
                (y0 + 1).min(img.height() - 1),
            );
            let (fx, fy) = ((px - x0 as f64) as f32, (py - y0 as f64) as f32);
            for ch in 0..c {
                let top = img.pixel(x0, y0, ch) * (1.0 - fx) + img.pixel(x1, y0, ch) * fx;
                let bot = img.pixel(x0, y1, ch) * (1.0 - fx) + img.pixel(x1, y1, ch) * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(width, height, c, data).expect("interpolated values stay in range")
}

#[derive(Debug, Clone)]
pub struct PairAugmentation {
    pub img_a: ImageBuffer,
    pub img_b: ImageBuffer,
    /// Surviving correspondences in the augmented frames.
    pub correspondences: Vec<Correspondence>,
    /// Indices into the input correspondences, parallel to `correspondences`.
    pub kept: Vec<usize>,
    /// Original -> augmented coordinates, per side.
    pub transform_a: Homography,
    pub transform_b: Homography,
}

/// Rotation and scale about the image centre followed by a crop.
fn side_transform(
    rng: &mut ChaCha8Rng,
    cfg: &AugmentConfig,
    w: usize,
    h: usize,
) -> (Homography, usize, usize) {
    let theta = uniform(rng, cfg.rotation_deg).to_radians();
    let s = uniform(rng, cfg.scale);
    let frac = cfg.crop_fraction.clamp(0.0, 1.0);
    let (cw, ch) = (
        ((w as f64 * frac).round() as usize).max(1),
        ((h as f64 * frac).round() as usize).max(1),
    );
    let ox = uniform(rng, [0.0, (w - cw) as f64]).floor();
    let oy = uniform(rng, [0.0, (h - ch) as f64]).floor();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sn, cs) = theta.sin_cos();
    let (a, b) = (s * cs, s * sn);
    let t = Homography::from_rows([
        [a, -b, cx - a * cx + b * cy - ox],
        [b, a, cy - b * cx - a * cy - oy],
        [0.0, 0.0, 1.0],
    ])
    .expect("similarity with positive scale");
    (t, cw, ch)
}

/// Applies an independent similarity + crop to each side, mapping the
/// keypoints through exactly the same transforms; correspondences leaving
/// either crop are dropped from both sides.
pub fn augment_pair(
    img_a: &ImageBuffer,
    img_b: &ImageBuffer,
    correspondences: &[Correspondence],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<PairAugmentation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ta, wa, ha) = side_transform(&mut rng, cfg, img_a.width(), img_a.height());
    let (tb, wb, hb) = side_transform(&mut rng, cfg, img_b.width(), img_b.height());
    let inside = |p: Point2, w: usize, h: usize| {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= w as f64 - 1.0 && p.y <= h as f64 - 1.0
    };
    let mut kept = Vec::new();
    let mut out = Vec::new();
    for (i, c) in correspondences.iter().enumerate() {
        let (Ok(pa), Ok(pb)) = (ta.apply(c.source), tb.apply(c.target)) else {
            continue;
        };
        if inside(pa, wa, ha) && inside(pb, wb, hb) {
            kept.push(i);
            out.push(Correspondence::new(pa, pb));
        }
    }
    if out.is_empty() && !correspondences.is_empty() {
        return Err(Error::AllPointsCropped);
    }
    Ok(PairAugmentation {
        img_a: warp_image(img_a, &ta.inverse(), wa, ha, None),
        img_b: warp_image(img_b, &tb.inverse(), wb, hb, None),
        correspondences: out,
        kept,
        transform_a: ta,
        transform_b: tb,
    })
}
