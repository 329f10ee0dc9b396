//! Synthetic vessel-tree image pairs with exact ground truth.
//!
//! A random forest of branching curves is drawn dark on a light background
//! in frame A. Frame B is drawn from the same curves with every vertex
//! mapped through the ground-truth homography, so B is never a resampling
//! of A. Each side then gets its own modality transform.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotatedKeypoint, AnnotationSet, Class, Link};
use crate::error::{Error, Result};
use crate::features::{ImageBuffer, Modality};
use crate::geometry::{Correspondence, Homography, Point2, CONTROL_POINT_COUNT};
use crate::grid::Grid2;
use crate::numeric::derive_seed;

/// Appearance changes applied to one side after rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityTransform {
    /// Label written to the annotation; inverted modalities are undone by
    /// preprocessing.
    pub modality: Modality,
    pub invert: bool,
    pub gamma: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Peak-to-peak amplitude of a linear illumination ramp.
    pub gradient: f64,
}

impl ModalityTransform {
    pub fn plain(modality: Modality) -> Self {
        Self {
            modality,
            invert: false,
            gamma: 1.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            gradient: 0.0,
        }
    }
}

impl Default for ModalityTransform {
    fn default() -> Self {
        Self {
            modality: Modality::SynthA,
            invert: false,
            gamma: 1.0,
            blur_sigma: 0.7,
            noise_sigma: 0.02,
            gradient: 0.1,
        }
    }
}

/// Magnitude of the random ground-truth homography.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    pub max_rotation_deg: f64,
    pub scale: [f64; 2],
    pub max_translation: f64,
    /// Bound on the projective row entries, in units of 1/pixel.
    pub perspective: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale: [0.9, 1.1],
            max_translation: 40.0,
            perspective: 1e-4,
        }
    }
}

impl WarpConfig {
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale: [1.0, 1.0],
            max_translation: 0.0,
            perspective: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Number of independent vessel trees.
    pub roots: usize,
    /// Branching levels per tree; level `k` branches bifurcate into level `k+1`.
    pub depth: usize,
    /// Root branch length range in pixels; each level is 0.8x its parent.
    pub branch_length: [f64; 2],
    /// Vessel width (pixels) of the thinnest and the root branches.
    pub vessel_width: [f64; 2],
    pub background: f64,
    pub contrast: f64,
    pub modality_a: ModalityTransform,
    pub modality_b: ModalityTransform,
    pub warp: WarpConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 384,
            height: 384,
            roots: 4,
            depth: 4,
            branch_length: [50.0, 90.0],
            vessel_width: [1.5, 5.0],
            background: 0.72,
            contrast: 0.45,
            modality_a: ModalityTransform::default(),
            modality_b: ModalityTransform {
                modality: Modality::Octa,
                invert: true,
                gamma: 0.7,
                blur_sigma: 1.2,
                noise_sigma: 0.03,
                gradient: 0.15,
            },
            warp: WarpConfig::default(),
            seed: 0,
        }
    }
}

/// Keypoints closer than this to an image border are not used as ground truth.
const BORDER_MARGIN: f64 = 12.0;
const MAX_ATTEMPTS: u64 = 32;
const STEP: f64 = 4.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        if self.width < 64 || self.height < 64 {
            return bad("image sides must be at least 64");
        }
        if self.roots == 0 || self.depth < 2 {
            return bad("need at least one root and two branching levels");
        }
        let [l0, l1] = self.branch_length;
        if !(l0 > 0.0 && l0 <= l1) {
            return bad("branch_length must be a positive range");
        }
        let [w0, w1] = self.vessel_width;
        if !(w0 > 0.0 && w0 <= w1) {
            return bad("vessel_width must be a positive range");
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.contrast > 0.0) {
            return bad("background must be in [0, 1] and contrast positive");
        }
        for t in [&self.modality_a, &self.modality_b] {
            if !(t.gamma > 0.0)
                || !(t.blur_sigma >= 0.0)
                || !(t.noise_sigma >= 0.0)
                || !(t.gradient >= 0.0)
            {
                return bad("modality transform parameters must be non-negative (gamma positive)");
            }
        }
        let w = &self.warp;
        if !(w.max_rotation_deg >= 0.0 && w.max_rotation_deg < 90.0)
            || !(w.scale[0] > 0.0 && w.scale[0] <= w.scale[1])
            || !(w.max_translation >= 0.0)
            || !(w.perspective >= 0.0)
        {
            return bad("warp magnitudes must be non-negative with a positive scale range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub img_a: ImageBuffer,
    pub img_b: ImageBuffer,
    /// Maps frame A to frame B.
    pub homography: Homography,
    /// Every bifurcation visible in both frames.
    pub keypoints: Vec<Correspondence>,
    /// Six well-spread bifurcations.
    pub control_points: Vec<Correspondence>,
    pub modality_a: Modality,
    pub modality_b: Modality,
}

impl SynthPair {
    /// Annotation documents for both sides, linked keypoint-by-keypoint.
    pub fn annotations(&self, image_a: &str, image_b: &str) -> (AnnotationSet, AnnotationSet) {
        let side =
            |image: &str, other: &str, modality, acq: &str, pick: fn(&Correspondence) -> Point2| {
                AnnotationSet {
                    image: image.to_string(),
                    modality,
                    acquisition: acq.to_string(),
                    keypoints: self
                        .keypoints
                        .iter()
                        .map(|c| {
                            let p = pick(c);
                            AnnotatedKeypoint {
                                x: p.x,
                                y: p.y,
                                class: Class::Vessel,
                            }
                        })
                        .collect(),
                    control_points: self.control_points.iter().map(pick).collect(),
                    links: vec![Link {
                        other: other.to_string(),
                        index_map: (0..self.keypoints.len()).map(|i| [i, i]).collect(),
                    }],
                    split: None,
                }
            };
        (
            side(image_a, image_b, self.modality_a, "a", |c| c.source),
            side(image_b, image_a, self.modality_b, "b", |c| c.target),
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn random_homography(rng: &mut ChaCha8Rng, w: &WarpConfig, cx: f64, cy: f64) -> Result<Homography> {
    let theta = uniform(rng, -w.max_rotation_deg, w.max_rotation_deg).to_radians();
    let s = uniform(rng, w.scale[0], w.scale[1]);
    let tx = uniform(rng, -w.max_translation, w.max_translation);
    let ty = uniform(rng, -w.max_translation, w.max_translation);
    let px = uniform(rng, -w.perspective, w.perspective);
    let py = uniform(rng, -w.perspective, w.perspective);
    let (sn, cs) = theta.sin_cos();
    let to_centre = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let back = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
    let similarity = Matrix3::new(s * cs, -s * sn, 0.0, s * sn, s * cs, 0.0, 0.0, 0.0, 1.0);
    let projective = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
    Homography::from_matrix(back * similarity * projective * to_centre)
}

/// `sqrt|det J|` of `h` at `p`: the local length scale factor.
fn local_scale(h: &Homography, p: Point2) -> f64 {
    let m = h.matrix();
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
    let q = h.apply(p).unwrap_or(p);
    let j = nalgebra::Matrix2::new(
        (m[(0, 0)] - q.x * m[(2, 0)]) / w,
        (m[(0, 1)] - q.x * m[(2, 1)]) / w,
        (m[(1, 0)] - q.y * m[(2, 0)]) / w,
        (m[(1, 1)] - q.y * m[(2, 1)]) / w,
    );
    j.determinant().abs().sqrt()
}

struct Segment {
    a: Point2,
    b: Point2,
    width: f64,
}

struct Scene {
    segments: Vec<Segment>,
    bifurcations: Vec<Point2>,
}

fn grow_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let turn = Normal::new(0.0, 0.12).expect("positive std");
    let mut scene = Scene {
        segments: Vec::new(),
        bifurcations: Vec::new(),
    };
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    for _ in 0..cfg.roots {
        let start = Point2::new(uniform(rng, 0.0, w - 1.0), uniform(rng, 0.0, h - 1.0));
        let heading = uniform(rng, 0.0, std::f64::consts::TAU);
        let length = uniform(rng, cfg.branch_length[0], cfg.branch_length[1]);
        // (start, heading, length, width, level)
        let mut stack = vec![(start, heading, length, cfg.vessel_width[1], 0usize)];
        while let Some((mut p, mut heading, length, width, level)) = stack.pop() {
            let steps = (length / STEP).ceil().max(1.0) as usize;
            for _ in 0..steps {
                heading += turn.sample(rng);
                let q = Point2::new(p.x + STEP * heading.cos(), p.y + STEP * heading.sin());
                scene.segments.push(Segment { a: p, b: q, width });
                p = q;
            }
            if level + 1 < cfg.depth {
                scene.bifurcations.push(p);
                let child_w = (width * 0.78).max(cfg.vessel_width[0]);
                for sign in [1.0, -1.0] {
                    let spread = uniform(rng, 0.35, 0.75);
                    stack.push((p, heading + sign * spread, length * 0.8, child_w, level + 1));
                }
            }
        }
    }
    scene
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(&Point2::new(a.x + t * dx, a.y + t * dy))
}

/// Vessel darkness in `[0, 1]`: a Gaussian cross-section of std `width / 2`,
/// combined across segments by maximum.
fn render_darkness(segments: &[Segment], width: usize, height: usize) -> Grid2 {
    let mut g = Grid2::filled(width, height, 0.0);
    for s in segments {
        let sigma = s.width / 2.0;
        let reach = 3.0 * sigma + 1.0;
        let x0 = (s.a.x.min(s.b.x) - reach).floor().max(0.0);
        let x1 = (s.a.x.max(s.b.x) + reach).ceil().min(width as f64 - 1.0);
        let y0 = (s.a.y.min(s.b.y) - reach).floor().max(0.0);
        let y1 = (s.a.y.max(s.b.y) + reach).ceil().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let d = segment_distance(Point2::new(x as f64, y as f64), s.a, s.b);
                let v = (-d * d / (2.0 * sigma * sigma)).exp();
                if v > g.get(x, y) {
                    g.set(x, y, v);
                }
            }
        }
    }
    g
}

fn apply_modality(
    darkness: &Grid2,
    cfg: &SynthConfig,
    t: &ModalityTransform,
    ramp_angle: f64,
    noise_seed: u64,
) -> ImageBuffer {
    let (w, h) = (darkness.width as f64, darkness.height as f64);
    let (s, c) = ramp_angle.sin_cos();
    let span = w * c.abs() + h * s.abs();
    let mut g = Grid2::from_fn(darkness.width, darkness.height, |x, y| {
        let ramp = ((x as f64 - w / 2.0) * c + (y as f64 - h / 2.0) * s) / span.max(1.0);
        let v = cfg.background - cfg.contrast * darkness.get(x, y) + t.gradient * ramp;
        let v = v.clamp(0.0, 1.0).powf(t.gamma);
        if t.invert {
            1.0 - v
        } else {
            v
        }
    });
    if t.blur_sigma > 0.0 {
        g = g.gaussian_blur(t.blur_sigma);
    }
    if t.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let n = Normal::new(0.0, t.noise_sigma).expect("positive std");
        for v in g.data.iter_mut() {
            *v += n.sample(&mut rng);
        }
    }
    ImageBuffer::from_grid(&g)
}

/// Greedy farthest-point selection, starting from the point farthest from
/// `centre` (ties: lowest index).
fn spread_selection(points: &[Point2], k: usize, centre: Point2) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.distance(&centre) > points[best].distance(&centre) {
            best = i;
        }
    }
    chosen.push(best);
    while chosen.len() < k.min(points.len()) {
        let mut pick = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| p.distance(&points[j]))
                .fold(f64::INFINITY, f64::min);
            if d > pick.1 {
                pick = (i, d);
            }
        }
        chosen.push(pick.0);
    }
    chosen
}

/// Renders one synthetic pair. Scenes without six bifurcations visible in
/// both frames are redrawn from derived seeds.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let inside = |p: Point2| {
        p.x >= BORDER_MARGIN
            && p.y >= BORDER_MARGIN
            && p.x <= w - 1.0 - BORDER_MARGIN
            && p.y <= h - 1.0 - BORDER_MARGIN
    };
    for attempt in 0..MAX_ATTEMPTS {
        let scene_seed = derive_seed(cfg.seed, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let homography = random_homography(&mut rng, &cfg.warp, (w - 1.0) / 2.0, (h - 1.0) / 2.0)?;
        let ramp_angle = uniform(&mut rng, 0.0, std::f64::consts::TAU);
        let scene = grow_scene(cfg, &mut rng);

        let mut keypoints = Vec::new();
        for &p in &scene.bifurcations {
            let Ok(q) = homography.apply(p) else { continue };
            if inside(p) && inside(q) {
                keypoints.push(Correspondence::new(p, q));
            }
        }
        if keypoints.len() < CONTROL_POINT_COUNT {
            continue;
        }
        let warped: Vec<Segment> = scene
            .segments
            .iter()
            .filter_map(|s| {
                let a = homography.apply(s.a).ok()?;
                let b = homography.apply(s.b).ok()?;
                Some(Segment {
                    a,
                    b,
                    width: s.width * local_scale(&homography, s.a),
                })
            })
            .collect();
        let dark_a = render_darkness(&scene.segments, cfg.width, cfg.height);
        let dark_b = render_darkness(&warped, cfg.width, cfg.height);
        let img_a = apply_modality(
            &dark_a,
            cfg,
            &cfg.modality_a,
            ramp_angle,
            derive_seed(scene_seed, 0xA),
        );
        let img_b = apply_modality(
            &dark_b,
            cfg,
            &cfg.modality_b,
            ramp_angle,
            derive_seed(scene_seed, 0xB),
        );

        let sources: Vec<Point2> = keypoints.iter().map(|c| c.source).collect();
        let control_points =
            spread_selection(&sources, CONTROL_POINT_COUNT, Point2::new(w / 2.0, h / 2.0))
                .into_iter()
                .map(|i| keypoints[i])
                .collect();
        return Ok(SynthPair {
            img_a,
            img_b,
            homography,
            keypoints,
            control_points,
            modality_a: cfg.modality_a.modality,
            modality_b: cfg.modality_b.modality,
        });
    }
    Err(Error::Config(format!(
        "synth: no scene with {CONTROL_POINT_COUNT} shared bifurcations after {MAX_ATTEMPTS} attempts"
    )))
}
