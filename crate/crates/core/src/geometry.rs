//! Planar projective geometry.
//!
//! Pixel coordinates put the origin at the centre of the top-left pixel, so
//! the pixel grid of a `w x h` image spans `[0, w-1] x [0, h-1]`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this magnitude a homogeneous `w` sends the point to infinity.
pub const W_EPS: f64 = 1e-12;
/// Minimum `|det|` of a normalised homography.
pub const DET_EPS: f64 = 1e-12;
/// Two smallest singular values closer than this ratio leave the null
/// direction of the DLT system ambiguous.
pub const SINGULAR_RATIO_MAX: f64 = 0.999;
/// A second singular value this small (relative to the largest) means the
/// DLT system has a null space of dimension >= 2.
pub const RANK_DEFICIENCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One source -> target point pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: Point2,
    pub target: Point2,
}

impl Correspondence {
    pub const fn new(source: Point2, target: Point2) -> Self {
        Self { source, target }
    }
}

/// A 3x3 projective transform in canonical scale.
///
/// The matrix is scaled so that `h[2][2] == 1` whenever that entry is not
/// (numerically) zero; otherwise it has unit Frobenius norm with its first
/// non-zero entry positive. Two matrices describing the same transform
/// therefore compare equal entry-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Builds a canonical homography, rejecting non-finite or singular input.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotInvertible { det: f64::NAN });
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(Error::NotInvertible { det: 0.0 });
        }
        let m = if m[(2, 2)].abs() > 1e-12 * norm {
            m / m[(2, 2)]
        } else {
            let first = m.iter().copied().find(|v| *v != 0.0).unwrap_or(1.0);
            m / (norm * first.signum())
        };
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= DET_EPS {
            return Err(Error::NotInvertible { det });
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.m[(r, c)]))
    }

    pub fn inverse(&self) -> Self {
        let inv = self
            .m
            .try_inverse()
            .expect("canonical homography is invertible");
        Self::from_matrix(inv).expect("inverse of an invertible homography")
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * other.m)
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < W_EPS {
            return Err(Error::DegeneratePoint { w: v.z });
        }
        Ok(Point2::new(v.x / v.z, v.y / v.z))
    }

    /// Max absolute entry-wise difference between canonical matrices.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).amax()
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Homography::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// Row-major, three whitespace-separated values per line.
impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..3 {
            writeln!(
                f,
                "{:.17e} {:.17e} {:.17e}",
                self.m[(r, 0)],
                self.m[(r, 1)],
                self.m[(r, 2)]
            )?;
        }
        Ok(())
    }
}

impl FromStr for Homography {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lines: Vec<&str> = s.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != 3 {
            return Err(Error::Format(format!(
                "homography text needs 3 rows, found {}",
                lines.len()
            )));
        }
        let mut rows = [[0.0; 3]; 3];
        for (r, line) in lines.iter().enumerate() {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 3 {
                return Err(Error::Format(format!(
                    "homography row {r} needs 3 values, found {}",
                    vals.len()
                )));
            }
            for (c, v) in vals.iter().enumerate() {
                rows[r][c] = v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad homography entry {v:?}")))?;
            }
        }
        Homography::from_rows(rows)
    }
}

/// Projects every point through `h`, preserving order.
pub fn apply_homography(h: &Homography, pts: &[Point2]) -> Result<Vec<Point2>> {
    pts.iter().map(|p| h.apply(*p)).collect()
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance from it to sqrt(2).
fn normalizing_transform(pts: impl Iterator<Item = Point2> + Clone) -> Result<Matrix3<f64>> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts
        .clone()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = pts.map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(Error::DegenerateConfiguration(
            "all points coincide (normalization scale vanishes)",
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

/// Normalized DLT: algebraic least-squares homography mapping every
/// `source` onto its `target`.
pub fn estimate_homography_dlt(pairs: &[Correspondence]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientPoints {
            required: 4,
            got: pairs.len(),
        });
    }
    if pairs
        .iter()
        .any(|c| !c.source.is_finite() || !c.target.is_finite())
    {
        return Err(Error::DegenerateConfiguration("non-finite coordinate"));
    }
    let t_src = normalizing_transform(pairs.iter().map(|c| c.source))?;
    let t_dst = normalizing_transform(pairs.iter().map(|c| c.target))?;

    // At least 9 rows so the SVD yields a full 9x9 right basis.
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in pairs.iter().enumerate() {
        let s = t_src * Vector3::new(c.source.x, c.source.y, 1.0);
        let d = t_dst * Vector3::new(c.target.x, c.target.y, 1.0);
        let (x, y) = (s.x, s.y);
        let (u, v) = (d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for k in 0..9 {
            a[(2 * i, k)] = r0[k];
            a[(2 * i + 1, k)] = r1[k];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = svd.singular_values[order[0]];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if second <= RANK_DEFICIENCY_TOL * largest {
        return Err(Error::DegenerateConfiguration(
            "null space of the DLT system is not one-dimensional",
        ));
    }
    if smallest / second > SINGULAR_RATIO_MAX {
        return Err(Error::DegenerateConfiguration(
            "smallest singular direction is ambiguous",
        ));
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst
        .try_inverse()
        .expect("normalizing similarity is invertible");
    Homography::from_matrix(t_dst_inv * hn * t_src)
        .map_err(|_| Error::DegenerateConfiguration("estimated matrix is singular"))
}

/// Number of control points annotated per test image.
pub const CONTROL_POINT_COUNT: usize = 6;

/// Ground-truth homography from the six annotated control-point pairs.
pub fn ground_truth_homography(control_points: &[Correspondence]) -> Result<Homography> {
    if control_points.len() != CONTROL_POINT_COUNT {
        return Err(Error::WrongCount {
            expected: CONTROL_POINT_COUNT,
            got: control_points.len(),
        });
    }
    estimate_homography_dlt(control_points)
}

/// The four extreme pixel centres of a `width x height` image.
pub fn image_corners(width: f64, height: f64) -> [Point2; 4] {
    let (x1, y1) = ((width - 1.0).max(0.0), (height - 1.0).max(0.0));
    [
        Point2::new(0.0, 0.0),
        Point2::new(x1, 0.0),
        Point2::new(0.0, y1),
        Point2::new(x1, y1),
    ]
}

/// Mean distance between where `h_a` and `h_b` send the four image corners.
pub fn corner_transfer_error(
    h_a: &Homography,
    h_b: &Homography,
    width: f64,
    height: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for c in image_corners(width, height) {
        total += h_a.apply(c)?.distance(&h_b.apply(c)?);
    }
    Ok(total / 4.0)
}

/// Area of the triangle `abc`.
pub(crate) fn triangle_area(a: Point2, b: Point2, c: Point2) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs()
}
