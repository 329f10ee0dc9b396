//! Deterministic hand-crafted stand-in for a learned detector/descriptor.
//!
//! Detector: the smaller Hessian eigenvalue of the contrast-normalised
//! image, scale-normalised and maximised over scales. Across a straight
//! dark vessel the intensity curves upwards in one direction only, so the
//! smaller eigenvalue stays near zero; where vessels meet (bifurcations,
//! crossings) the dark region curves upwards in every direction and the
//! smaller eigenvalue turns positive.
//!
//! Descriptor: a gradient-orientation histogram over a window centred on
//! each cell, computed on locally contrast-normalised intensity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DenseFeatureMap, ImageBuffer};
use crate::error::{Error, Result};
use crate::grid::Grid2;

pub const MIN_IMAGE_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceExtractorConfig {
    /// Pixels per feature-map cell.
    pub stride: usize,
    /// Gaussian scales of the junction detector.
    pub junction_scales: Vec<f64>,
    /// Scale of the local mean/variance used for contrast normalisation.
    pub normalization_sigma: f64,
    /// Regulariser of the local variance, relative to its image mean.
    pub normalization_floor: f64,
    /// Pre-smoothing before descriptor gradients.
    pub gradient_sigma: f64,
    /// Descriptor window side in pixels.
    pub window: usize,
    pub spatial_bins: usize,
    pub orientation_bins: usize,
    /// Per-entry cap applied to the normalised histogram before renormalising.
    pub descriptor_clip: f64,
    /// Junction responses are divided by this quantile of the response map.
    pub response_quantile: f64,
    /// Offset subtracted from the scaled response; cells below it get a
    /// negative vessel logit.
    pub response_floor: f64,
}

impl Default for ReferenceExtractorConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            junction_scales: vec![1.0, 2.0, 3.0],
            normalization_sigma: 8.0,
            normalization_floor: 0.25,
            gradient_sigma: 1.0,
            window: 32,
            spatial_bins: 4,
            orientation_bins: 8,
            descriptor_clip: 0.2,
            response_quantile: 0.995,
            response_floor: 0.3,
        }
    }
}

impl ReferenceExtractorConfig {
    pub fn descriptor_dim(&self) -> usize {
        self.spatial_bins * self.spatial_bins * self.orientation_bins
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("reference extractor: {m}")));
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if self.junction_scales.is_empty() || self.junction_scales.iter().any(|s| *s <= 0.0) {
            return bad("junction scales must be positive and non-empty");
        }
        if self.spatial_bins == 0 || self.orientation_bins == 0 || self.descriptor_dim() < 2 {
            return bad("descriptor needs at least two bins");
        }
        if self.window < self.spatial_bins {
            return bad("window smaller than the spatial bin count");
        }
        if !(0.0..1.0).contains(&self.response_quantile) && self.response_quantile != 1.0 {
            return bad("response_quantile must lie in [0, 1]");
        }
        if self.normalization_sigma <= 0.0 || self.gradient_sigma < 0.0 {
            return bad("smoothing scales must be positive");
        }
        Ok(())
    }
}

/// `(I - mean) / sqrt(var + floor^2 * mean(var))` with Gaussian-weighted local
/// statistics. Invariant to affine intensity changes; all zeros for a
/// constant image.
fn contrast_normalize(gray: &Grid2, sigma: f64, floor: f64) -> Grid2 {
    let mean = gray.gaussian_blur(sigma);
    let centered = gray.zip_map(&mean, |v, m| v - m);
    let var = centered.map(|c| c * c).gaussian_blur(sigma);
    let mean_var = var.data.iter().sum::<f64>() / var.data.len() as f64;
    if mean_var <= 1e-20 {
        return Grid2::filled(gray.width, gray.height, 0.0);
    }
    let reg = floor * floor * mean_var;
    centered.zip_map(&var, |c, v| c / (v.max(0.0) + reg).sqrt())
}

/// Scale-normalised smaller Hessian eigenvalue, clamped at zero and
/// maximised over scales.
fn junction_map(img: &Grid2, scales: &[f64]) -> Grid2 {
    let (w, h) = (img.width, img.height);
    let mut best = Grid2::filled(w, h, 0.0);
    for &sigma in scales {
        let l = img.gaussian_blur(sigma);
        let s2 = sigma * sigma;
        best.data
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| {
                let y = y as isize;
                for (x, out) in row.iter_mut().enumerate() {
                    let x = x as isize;
                    let c = l.get_clamped(x, y);
                    let lxx = l.get_clamped(x + 1, y) - 2.0 * c + l.get_clamped(x - 1, y);
                    let lyy = l.get_clamped(x, y + 1) - 2.0 * c + l.get_clamped(x, y - 1);
                    let lxy = 0.25
                        * (l.get_clamped(x + 1, y + 1)
                            - l.get_clamped(x + 1, y - 1)
                            - l.get_clamped(x - 1, y + 1)
                            + l.get_clamped(x - 1, y - 1));
                    let half_tr = 0.5 * (lxx + lyy);
                    let disc = (0.25 * (lxx - lyy) * (lxx - lyy) + lxy * lxy).sqrt();
                    let r = s2 * (half_tr - disc).max(0.0);
                    if r > *out {
                        *out = r;
                    }
                }
            });
    }
    best
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    let k = ((v.len() - 1) as f64 * q).round() as usize;
    let (_, nth, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    *nth
}

/// Dense vessel-junction logits and orientation-histogram descriptors.
pub fn reference_extract(
    img: &ImageBuffer,
    cfg: &ReferenceExtractorConfig,
) -> Result<DenseFeatureMap> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    if w.min(h) < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: MIN_IMAGE_SIDE,
        });
    }
    let stride = cfg.stride;
    let (grid_w, grid_h) = (w.div_ceil(stride), h.div_ceil(stride));

    let norm = contrast_normalize(
        &img.to_gray(),
        cfg.normalization_sigma,
        cfg.normalization_floor,
    );
    let junctions = junction_map(&norm, &cfg.junction_scales);

    let scale = quantile(&junctions.data, cfg.response_quantile);
    let mut logits = vec![0.0f32; grid_w * grid_h * 2];
    logits
        .par_chunks_mut(grid_w * 2)
        .enumerate()
        .for_each(|(gy, row)| {
            for gx in 0..grid_w {
                let vessel = if scale > 1e-12 {
                    let (x0, y0) = (gx * stride, gy * stride);
                    let (x1, y1) = ((x0 + stride).min(w), (y0 + stride).min(h));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += junctions.get(x, y);
                        }
                    }
                    acc / ((x1 - x0) * (y1 - y0)) as f64 / scale - cfg.response_floor
                } else {
                    -cfg.response_floor
                };
                row[2 * gx] = vessel as f32;
                row[2 * gx + 1] = -vessel as f32;
            }
        });

    let descriptors = orientation_descriptors(&norm, cfg, grid_w, grid_h);
    DenseFeatureMap::new(w, h, stride, cfg.descriptor_dim(), logits, descriptors)
}

/// One window offset's share of the spatial bins, Gaussian-weighted.
struct Tap {
    dx: isize,
    dy: isize,
    bins: Vec<(usize, f64)>,
}

fn window_taps(cfg: &ReferenceExtractorConfig) -> Vec<Tap> {
    let win = cfg.window;
    let sb = cfg.spatial_bins;
    let bin_size = win as f64 / sb as f64;
    let half = win as f64 / 2.0;
    let gauss_sigma = half;
    // First window pixel relative to the cell's anchor pixel.
    let first = -((win as isize) / 2) + 1;
    let mut taps = Vec::with_capacity(win * win);
    for oy in 0..win {
        for ox in 0..win {
            let (fx, fy) = (ox as f64 + 0.5, oy as f64 + 0.5);
            let g = (-((fx - half).powi(2) + (fy - half).powi(2))
                / (2.0 * gauss_sigma * gauss_sigma))
                .exp();
            let bx = fx / bin_size - 0.5;
            let by = fy / bin_size - 0.5;
            let (bx0, by0) = (bx.floor(), by.floor());
            let (tx, ty) = (bx - bx0, by - by0);
            let mut bins = Vec::with_capacity(4);
            for (iy, wy) in [(by0 as isize, 1.0 - ty), (by0 as isize + 1, ty)] {
                for (ix, wx) in [(bx0 as isize, 1.0 - tx), (bx0 as isize + 1, tx)] {
                    let wgt = wx * wy * g;
                    if ix >= 0 && iy >= 0 && (ix as usize) < sb && (iy as usize) < sb && wgt > 0.0 {
                        bins.push((iy as usize * sb + ix as usize, wgt));
                    }
                }
            }
            taps.push(Tap {
                dx: first + ox as isize,
                dy: first + oy as isize,
                bins,
            });
        }
    }
    taps
}

fn orientation_descriptors(
    norm: &Grid2,
    cfg: &ReferenceExtractorConfig,
    grid_w: usize,
    grid_h: usize,
) -> Vec<f32> {
    let (w, h) = (norm.width, norm.height);
    let ob = cfg.orientation_bins;
    let dim = cfg.descriptor_dim();
    let smooth = norm.gaussian_blur(cfg.gradient_sigma);
    let (gx, gy) = smooth.gradient();

    // Per pixel: magnitude, lower orientation bin, fraction towards the next.
    let polar: Vec<(f64, usize, f64)> = gx
        .data
        .par_iter()
        .zip(gy.data.par_iter())
        .map(|(&dx, &dy)| {
            let mag = dx.hypot(dy);
            let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let pos = theta / std::f64::consts::TAU * ob as f64 - 0.5;
            let lo = pos.floor();
            let bin = (lo as isize).rem_euclid(ob as isize) as usize;
            (mag, bin, pos - lo)
        })
        .collect();

    let taps = window_taps(cfg);
    // Anchor pixel so that the window is centred on the cell centre
    // (stride * g + (stride - 1) / 2).
    let anchor =
        |g: usize| (cfg.stride * g + cfg.stride / 2) as isize - 1 + (cfg.stride % 2) as isize;
    let mut out = vec![0.0f32; grid_w * grid_h * dim];
    out.par_chunks_mut(grid_w * dim)
        .enumerate()
        .for_each(|(cy, row)| {
            let mut hist = vec![0.0f64; dim];
            for cx in 0..grid_w {
                hist.iter_mut().for_each(|v| *v = 0.0);
                let (ax, ay) = (anchor(cx), anchor(cy));
                for tap in &taps {
                    let px = (ax + tap.dx).clamp(0, w as isize - 1) as usize;
                    let py = (ay + tap.dy).clamp(0, h as isize - 1) as usize;
                    let (mag, o0, frac) = polar[py * w + px];
                    if mag == 0.0 {
                        continue;
                    }
                    let o1 = (o0 + 1) % ob;
                    for &(s, wgt) in &tap.bins {
                        let m = wgt * mag;
                        hist[s * ob + o0] += m * (1.0 - frac);
                        hist[s * ob + o1] += m * frac;
                    }
                }
                normalize_clipped(&mut hist, cfg.descriptor_clip);
                for (o, v) in row[cx * dim..(cx + 1) * dim].iter_mut().zip(&hist) {
                    *o = *v as f32;
                }
            }
        });
    out
}

/// L2-normalise, cap entries at `clip`, renormalise. Zero stays zero.
fn normalize_clipped(v: &mut [f64], clip: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    v.iter_mut().for_each(|x| *x = (*x / n).min(clip));
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{preprocess_image, Modality};

    /// Light background with dark Gaussian-profile line segments.
    type Segment = ((f64, f64), (f64, f64));

    fn render_lines(w: usize, h: usize, segs: &[Segment]) -> ImageBuffer {
        let g = Grid2::from_fn(w, h, |x, y| {
            let p = (x as f64, y as f64);
            let mut dark: f64 = 0.0;
            for &(a, b) in segs {
                let (vx, vy) = (b.0 - a.0, b.1 - a.1);
                let t =
                    (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                let d2 = (p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2);
                dark = dark.max((-d2 / (2.0 * 1.5 * 1.5)).exp());
            }
            0.8 - 0.5 * dark
        });
        ImageBuffer::from_grid(&g)
    }

    #[test]
    fn t_junction_cell_holds_the_max() {
        // Horizontal vessel with a vertical branch ending on it at (65.5, 65.5),
        // the centre of cell (16, 16).
        let img = render_lines(
            128,
            128,
            &[
                ((-10.0, 65.5), (140.0, 65.5)),
                ((65.5, 65.5), (65.5, 140.0)),
            ],
        );
        let fm =
            reference_extract(&preprocess_image(&img, Modality::Cf), &Default::default()).unwrap();
        // Ignore the image border, where the truncated vessels end.
        let mut best = (f32::NEG_INFINITY, 0, 0);
        for gy in 4..fm.grid_h() - 4 {
            for gx in 4..fm.grid_w() - 4 {
                let v = fm.vessel_logit(gx, gy);
                if v > best.0 {
                    best = (v, gx, gy);
                }
            }
        }
        assert_eq!((best.1, best.2), (16, 16), "max logit {}", best.0);
        assert!(best.0 > 0.0);
    }

    #[test]
    fn constant_image_is_flat_and_nonpositive() {
        let img = ImageBuffer::filled(80, 72, 3, 0.4).unwrap();
        let fm = reference_extract(&img, &Default::default()).unwrap();
        let first = fm.vessel_logit(0, 0);
        assert!(first <= 0.0);
        for gy in 0..fm.grid_h() {
            for gx in 0..fm.grid_w() {
                assert_eq!(fm.vessel_logit(gx, gy), first);
                assert_eq!(fm.background_logit(gx, gy), -first);
                assert!(fm.descriptor(gx, gy).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn inverted_pair_gives_identical_maps() {
        // Multiples of 1/256 make `1 - (1 - v)` exact in f32.
        let img = render_lines(
            96,
            80,
            &[((0.0, 10.0), (90.0, 70.0)), ((40.0, 0.0), (30.0, 79.0))],
        )
        .map(|v| (v * 256.0).round() / 256.0);
        let inverted = img.map(|v| 1.0 - v);
        let cfg = ReferenceExtractorConfig::default();
        let a = reference_extract(&preprocess_image(&img, Modality::Ir), &cfg).unwrap();
        let b = reference_extract(&preprocess_image(&inverted, Modality::Octa), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn descriptor_norms_are_unit_or_zero() {
        let img = render_lines(100, 64, &[((0.0, 30.0), (99.0, 35.0))]);
        let fm = reference_extract(&img.to_rgb(), &Default::default()).unwrap();
        assert_eq!(fm.descriptor_dim(), 128);
        for gy in 0..fm.grid_h() {
            for gx in 0..fm.grid_w() {
                let n = fm
                    .descriptor(gx, gy)
                    .iter()
                    .map(|&v| f64::from(v).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6, "norm {n}");
            }
        }
    }

    #[test]
    fn too_small() {
        let img = ImageBuffer::filled(63, 200, 3, 0.5).unwrap();
        assert!(matches!(
            reference_extract(&img, &Default::default()),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let img = render_lines(
            90,
            70,
            &[((0.0, 10.0), (90.0, 60.0)), ((20.0, 70.0), (60.0, 0.0))],
        );
        let cfg = ReferenceExtractorConfig::default();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| reference_extract(&img, &cfg).unwrap());
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| reference_extract(&img, &cfg).unwrap());
        assert_eq!(one, many);
    }
}
