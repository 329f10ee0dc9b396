//! From a dense feature map to keypoints with descriptors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DenseFeatureMap;
use crate::geometry::Point2;
use crate::grid::Grid2;

pub const DEFAULT_NMS_RADIUS: f64 = 4.0;
pub const DEFAULT_N_MAX: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub pos: Point2,
    pub confidence: f64,
}

/// Full-resolution keypoint confidence.
pub type ConfidenceHeatmap = Grid2;

/// Catmull-Rom weights (a = -0.5) for taps at -1, 0, 1, 2 around `t`.
#[inline]
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Weighted sum of four taps whose weights sum to one, written relative to
/// the second tap so that equal taps reproduce their value exactly.
#[inline]
fn blend(w: &[f64; 4], s: [f64; 4]) -> f64 {
    s[1] + w[0] * (s[0] - s[1]) + w[2] * (s[2] - s[1]) + w[3] * (s[3] - s[1])
}

/// For every output coordinate: the four clamped source indices and weights.
fn axis_taps(src_len: usize, factor: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..out_len)
        .map(|o| {
            let u = (o as f64 + 0.5) / factor as f64 - 0.5;
            let i0 = u.floor();
            let w = catmull_rom_weights(u - i0);
            let i0 = i0 as isize;
            let idx = std::array::from_fn(|k| {
                (i0 - 1 + k as isize).clamp(0, src_len as isize - 1) as usize
            });
            (idx, w)
        })
        .collect()
}

/// Separable Catmull-Rom upsampling by an integer factor, sampling grid
/// coordinate `((x + 0.5) / factor - 0.5, (y + 0.5) / factor - 0.5)` for
/// output pixel `(x, y)`, with edge replication, cropped to
/// `out_w x out_h`.
pub fn upsample_bicubic(
    channel: &Grid2,
    factor: usize,
    out_w: usize,
    out_h: usize,
) -> Result<Grid2> {
    if factor < 1 {
        return Err(Error::BadFactor(factor));
    }
    let fits = |g: usize, o: usize| g > 0 && o > 0 && g * factor >= o && (g - 1) * factor < o;
    if !fits(channel.width, out_w) || !fits(channel.height, out_h) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} grid at factor {factor} cannot cover {out_w}x{out_h}",
            channel.width, channel.height
        )));
    }
    let xt = axis_taps(channel.width, factor, out_w);
    let yt = axis_taps(channel.height, factor, out_h);

    // Horizontal pass on every source row, then vertical.
    let gw = channel.width;
    let mut rows = vec![0.0; out_w * channel.height];
    rows.par_chunks_mut(out_w)
        .enumerate()
        .for_each(|(gy, row)| {
            let src = &channel.data[gy * gw..(gy + 1) * gw];
            for (o, (idx, w)) in row.iter_mut().zip(&xt) {
                *o = blend(w, [src[idx[0]], src[idx[1]], src[idx[2]], src[idx[3]]]);
            }
        });
    let mut out = vec![0.0; out_w * out_h];
    out.par_chunks_mut(out_w).enumerate().for_each(|(y, row)| {
        let (idx, w) = &yt[y];
        let r = |k: usize| &rows[idx[k] * out_w..(idx[k] + 1) * out_w];
        let (r0, r1, r2, r3) = (r(0), r(1), r(2), r(3));
        for x in 0..out_w {
            row[x] = blend(w, [r0[x], r1[x], r2[x], r3[x]]);
        }
    });
    Ok(Grid2::from_vec(out_w, out_h, out))
}

/// `upsample(vessel) - upsample(background)`, computed as one upsampling of
/// the per-cell difference (bicubic interpolation is linear).
pub fn confidence_heatmap(fm: &DenseFeatureMap) -> ConfidenceHeatmap {
    upsample_bicubic(
        &fm.logit_difference(),
        fm.stride(),
        fm.source_w(),
        fm.source_h(),
    )
    .expect("feature map dimensions satisfy the grid law")
}

fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= r2 {
                v.push((dx, dy));
            }
        }
    }
    v
}

/// Greedy NMS over pixels with confidence strictly above `floor`.
fn nms_above(h: &ConfidenceHeatmap, radius: f64, floor: f64, limit: usize) -> Vec<Keypoint> {
    let (w, hh) = (h.width, h.height);
    let mut order: Vec<usize> = (0..h.data.len()).filter(|&i| h.data[i] > floor).collect();
    order.sort_unstable_by(|&a, &b| h.data[b].total_cmp(&h.data[a]).then(a.cmp(&b)));
    let disk = disk_offsets(radius);
    let mut taken = vec![false; w * hh];
    let mut out = Vec::new();
    for i in order {
        if out.len() >= limit {
            break;
        }
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        let blocked = disk.iter().any(|&(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            nx >= 0
                && ny >= 0
                && (nx as usize) < w
                && (ny as usize) < hh
                && taken[ny as usize * w + nx as usize]
        });
        if !blocked {
            taken[i] = true;
            out.push(Keypoint {
                pos: Point2::new(x as f64, y as f64),
                confidence: h.data[i],
            });
        }
    }
    out
}

/// Greedy non-maximum suppression: visit pixels by confidence (descending,
/// ties by row-major index) and keep each one that has no kept pixel within
/// Euclidean distance `radius`.
pub fn nms(h: &ConfidenceHeatmap, radius: f64) -> Vec<Keypoint> {
    nms_above(h, radius, f64::NEG_INFINITY, usize::MAX)
}

/// NMS keypoints with confidence above `min_confidence`, strongest first,
/// capped at `n_max`.
///
/// Filtering before suppression is equivalent to filtering after: pixels at
/// or below the floor come last in the greedy order and cannot suppress any
/// pixel above it.
pub fn extract_keypoints(
    h: &ConfidenceHeatmap,
    n_max: usize,
    min_confidence: f64,
    radius: f64,
) -> Vec<Keypoint> {
    nms_above(h, radius, min_confidence, n_max)
}

/// Row-major `N x dim` descriptors, each row unit length or all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    /// Builds a set from rows, L2-normalising each (zero rows stay zero).
    pub fn from_rows_normalized<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "row of {} values, expected {dim}",
                    r.len()
                )));
            }
            let acc: Vec<f64> = r.iter().map(|&v| f64::from(v)).collect();
            data.extend(normalized(&acc));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

fn normalized(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let inv = if n > 1e-12 { 1.0 / n } else { 0.0 };
    v.iter().map(move |x| (x * inv) as f32)
}

/// Bilinear interpolation of the descriptor grid at each keypoint (grid
/// coordinate `(x + 0.5) / stride - 0.5`, clamped at the edges), then
/// L2-normalisation.
pub fn sample_descriptors(fm: &DenseFeatureMap, kps: &[Keypoint]) -> Result<DescriptorSet> {
    let (sw, sh) = (fm.source_w(), fm.source_h());
    if let Some(k) = kps
        .iter()
        .find(|k| !(k.pos.x >= 0.0 && k.pos.y >= 0.0 && k.pos.x < sw as f64 && k.pos.y < sh as f64))
    {
        return Err(Error::OutOfBounds {
            x: k.pos.x,
            y: k.pos.y,
            width: sw,
            height: sh,
        });
    }
    let dim = fm.descriptor_dim();
    let stride = fm.stride() as f64;
    let (gw, gh) = (fm.grid_w(), fm.grid_h());
    let axis = |p: f64, n: usize| {
        let u = ((p + 0.5) / stride - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut data = Vec::with_capacity(kps.len() * dim);
    let mut acc = vec![0.0f64; dim];
    for k in kps {
        let (x0, x1, tx) = axis(k.pos.x, gw);
        let (y0, y1, ty) = axis(k.pos.y, gh);
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (gx, gy, wgt) in [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ] {
            if wgt == 0.0 {
                continue;
            }
            for (a, &d) in acc.iter_mut().zip(fm.descriptor(gx, gy)) {
                *a += wgt * f64::from(d);
            }
        }
        data.extend(normalized(&acc));
    }
    DescriptorSet::new(dim, data)
}
