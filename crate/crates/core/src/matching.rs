//! Mutual nearest-neighbour matching and RANSAC homography fitting.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DenseFeatureMap;
use crate::geometry::{estimate_homography_dlt, triangle_area, Correspondence, Homography};
use crate::keypoints::{
    confidence_heatmap, extract_keypoints, sample_descriptors, DescriptorSet, Keypoint,
    DEFAULT_NMS_RADIUS, DEFAULT_N_MAX,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub idx_a: usize,
    pub idx_b: usize,
    pub distance: f64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `set` (first on ties) and its squared distance.
fn nearest(q: &[f32], set: &DescriptorSet) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (j, r) in set.rows().enumerate() {
        let d = sq_dist(q, r);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Brute-force mutual nearest neighbours under Euclidean distance.
///
/// `(i, j)` is kept iff `j` is the nearest `b` to `a[i]` and `i` the nearest
/// `a` to `b[j]`, ties going to the smaller index. Sorted by distance, then
/// by index pair.
pub fn mutual_nn_match(desc_a: &DescriptorSet, desc_b: &DescriptorSet) -> Result<Vec<Match>> {
    if desc_a.dim() != desc_b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "descriptor dims {} vs {}",
            desc_a.dim(),
            desc_b.dim()
        )));
    }
    if desc_a.is_empty() || desc_b.is_empty() {
        return Ok(Vec::new());
    }
    let a_to_b: Vec<(usize, f32)> = (0..desc_a.len())
        .into_par_iter()
        .map(|i| nearest(desc_a.row(i), desc_b))
        .collect();
    let b_to_a: Vec<usize> = (0..desc_b.len())
        .into_par_iter()
        .map(|j| nearest(desc_b.row(j), desc_a).0)
        .collect();
    let mut out: Vec<Match> = a_to_b
        .iter()
        .enumerate()
        .filter(|(i, (j, _))| b_to_a[*j] == *i)
        .map(|(i, &(j, d2))| Match {
            idx_a: i,
            idx_b: j,
            distance: f64::from(d2.max(0.0)).sqrt(),
        })
        .collect();
    out.sort_by(|x, y| {
        x.distance
            .total_cmp(&y.distance)
            .then(x.idx_a.cmp(&y.idx_a))
            .then(x.idx_b.cmp(&y.idx_b))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Inlier threshold on the source-to-target transfer error, pixels.
    pub reproj_threshold: f64,
    pub max_iterations: usize,
    /// Target probability of drawing at least one all-inlier sample.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            reproj_threshold: 5.0,
            max_iterations: 5000,
            confidence: 0.9999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reproj_threshold > 0.0) {
            return Err(Error::Config("RANSAC threshold must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("RANSAC confidence must lie in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("RANSAC needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Minimal samples with a triangle smaller than this (px^2) are rejected.
const MIN_TRIANGLE_AREA: f64 = 1.0;

fn sample_is_degenerate(c: &[Correspondence; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|t| {
        triangle_area(c[t[0]].source, c[t[1]].source, c[t[2]].source) < MIN_TRIANGLE_AREA
            || triangle_area(c[t[0]].target, c[t[1]].target, c[t[2]].target) < MIN_TRIANGLE_AREA
    })
}

/// Source-to-target transfer error; infinite if the point leaves the plane.
fn transfer_error(h: &Homography, c: &Correspondence) -> f64 {
    h.apply(c.source)
        .map(|p| p.distance(&c.target))
        .unwrap_or(f64::INFINITY)
}

fn score(h: &Homography, pairs: &[Correspondence], thr: f64) -> (usize, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for c in pairs {
        let e = transfer_error(h, c);
        if e <= thr {
            n += 1;
            sum += e;
        }
    }
    (n, if n > 0 { sum / n as f64 } else { f64::INFINITY })
}

fn inlier_mask(h: &Homography, pairs: &[Correspondence], thr: f64) -> Vec<bool> {
    pairs.iter().map(|c| transfer_error(h, c) <= thr).collect()
}

/// Iterations needed to hit `confidence` at inlier ratio `w` with 4-point
/// samples.
fn required_iterations(confidence: f64, w: f64) -> f64 {
    let p_good = w.powi(4);
    if p_good >= 1.0 {
        return 0.0;
    }
    if p_good <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (1.0 - p_good).ln()
}

/// RANSAC over 4-point DLT fits, followed by a normalized-DLT refit on the
/// inliers of the best sample. Returns the refit model and the inlier mask
/// against it.
pub fn ransac_homography(
    pairs: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<(Homography, Vec<bool>)> {
    cfg.validate()?;
    let n = pairs.len();
    if n < 4 {
        return Err(Error::InsufficientMatches(n));
    }
    let thr = cfg.reproj_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Homography, usize, f64)> = None;
    let mut needed = f64::INFINITY;
    let mut iter = 0usize;
    while iter < cfg.max_iterations && (iter as f64) < needed {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let s: [Correspondence; 4] = std::array::from_fn(|k| pairs[idx.index(k)]);
        if sample_is_degenerate(&s) {
            continue;
        }
        let Ok(h) = estimate_homography_dlt(&s) else {
            continue;
        };
        let (count, mean_err) = score(&h, pairs, thr);
        let better = match &best {
            None => count > 0,
            Some((_, bc, be)) => count > *bc || (count == *bc && mean_err < *be),
        };
        if better {
            best = Some((h, count, mean_err));
            needed = required_iterations(cfg.confidence, count as f64 / n as f64);
        }
    }
    let (h_min, count, _) = best.ok_or(Error::NoModel)?;
    if count < 4 {
        return Err(Error::NoModel);
    }
    let inliers: Vec<Correspondence> = pairs
        .iter()
        .zip(inlier_mask(&h_min, pairs, thr))
        .filter_map(|(c, keep)| keep.then_some(*c))
        .collect();
    let h = estimate_homography_dlt(&inliers).unwrap_or(h_min);
    let mask = inlier_mask(&h, pairs, thr);
    Ok((h, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub n_max: usize,
    pub nms_radius: f64,
    pub min_confidence: f64,
    pub ransac: RansacConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            n_max: DEFAULT_N_MAX,
            nms_radius: DEFAULT_NMS_RADIUS,
            min_confidence: 0.0,
            ransac: RansacConfig::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        if !(self.nms_radius >= 1.0) {
            return Err(Error::Config("nms_radius must be at least 1".into()));
        }
        if !self.min_confidence.is_finite() {
            return Err(Error::Config("min_confidence must be finite".into()));
        }
        self.ransac.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegistrationStatus {
    #[serde(rename = "OK")]
    Ok,
    TooFewMatches,
    RansacFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationResult {
    pub status: RegistrationStatus,
    /// Maps image A pixel coordinates to image B; present iff status is OK.
    pub homography: Option<Homography>,
    pub matches: Vec<Match>,
    pub inlier_mask: Vec<bool>,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub seed: u64,
}

impl RegistrationResult {
    pub fn num_inliers(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// Registration outcome together with the keypoints it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRegistration {
    pub result: RegistrationResult,
    pub keypoints_a: Vec<Keypoint>,
    pub keypoints_b: Vec<Keypoint>,
}

/// Keypoints and their descriptors for one feature map.
pub fn detect_and_describe(
    fm: &DenseFeatureMap,
    cfg: &RegistrationConfig,
) -> (Vec<Keypoint>, DescriptorSet) {
    let heat = confidence_heatmap(fm);
    let kps = extract_keypoints(&heat, cfg.n_max, cfg.min_confidence, cfg.nms_radius);
    let desc = sample_descriptors(fm, &kps).expect("NMS keypoints lie inside the source image");
    (kps, desc)
}

pub fn register_pair_detailed(
    fm_a: &DenseFeatureMap,
    fm_b: &DenseFeatureMap,
    cfg: &RegistrationConfig,
) -> PairRegistration {
    let (kps_a, desc_a) = detect_and_describe(fm_a, cfg);
    let (kps_b, desc_b) = detect_and_describe(fm_b, cfg);
    let mut result = RegistrationResult {
        status: RegistrationStatus::TooFewMatches,
        homography: None,
        matches: Vec::new(),
        inlier_mask: Vec::new(),
        keypoints_a: kps_a.len(),
        keypoints_b: kps_b.len(),
        seed: cfg.ransac.seed,
    };
    // Descriptor dims can differ only between foreign feature maps.
    let matches = mutual_nn_match(&desc_a, &desc_b).unwrap_or_default();
    result.inlier_mask = vec![false; matches.len()];
    if matches.len() >= 4 {
        let pairs: Vec<Correspondence> = matches
            .iter()
            .map(|m| Correspondence::new(kps_a[m.idx_a].pos, kps_b[m.idx_b].pos))
            .collect();
        match ransac_homography(&pairs, &cfg.ransac) {
            Ok((h, mask)) => {
                result.status = RegistrationStatus::Ok;
                result.homography = Some(h);
                result.inlier_mask = mask;
            }
            Err(_) => result.status = RegistrationStatus::RansacFailed,
        }
    }
    result.matches = matches;
    PairRegistration {
        result,
        keypoints_a: kps_a,
        keypoints_b: kps_b,
    }
}

/// Heatmap, keypoints, descriptors, mutual-NN matches and RANSAC for one
/// image pair. Never fails: stage failures map onto the status.
pub fn register_pair(
    fm_a: &DenseFeatureMap,
    fm_b: &DenseFeatureMap,
    cfg: &RegistrationConfig,
) -> RegistrationResult {
    register_pair_detailed(fm_a, fm_b, cfg).result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{corner_transfer_error, Point2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DescriptorSet {
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        DescriptorSet::from_rows_normalized(dim, &rows).unwrap()
    }

    fn oracle(a: &DescriptorSet, b: &DescriptorSet) -> Vec<(usize, usize)> {
        let d = |x: &[f32], y: &[f32]| -> f64 {
            x.iter()
                .zip(y)
                .map(|(p, q)| f64::from(p - q).powi(2))
                .sum::<f64>()
        };
        let mut out = Vec::new();
        for i in 0..a.len() {
            let mut j_best = 0;
            for j in 1..b.len() {
                if d(a.row(i), b.row(j)) < d(a.row(i), b.row(j_best)) {
                    j_best = j;
                }
            }
            let mut i_best = 0;
            for k in 1..a.len() {
                if d(b.row(j_best), a.row(k)) < d(b.row(j_best), a.row(i_best)) {
                    i_best = k;
                }
            }
            if i_best == i {
                out.push((i, j_best));
            }
        }
        out.sort();
        out
    }

    #[test]
    fn identical_sets_match_identity() {
        let rows: Vec<Vec<f32>> = (0..5)
            .map(|i| (0..5).map(|k| if k == i { 1.0 } else { 0.0 }).collect())
            .collect();
        let ds = DescriptorSet::from_rows_normalized(5, &rows).unwrap();
        let m = mutual_nn_match(&ds, &ds).unwrap();
        assert_eq!(m.len(), 5);
        for (i, x) in m.iter().enumerate() {
            assert_eq!((x.idx_a, x.idx_b, x.distance), (i, i, 0.0));
        }
    }

    #[test]
    fn empty_side_gives_no_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_set(&mut rng, 4, 8);
        let e = DescriptorSet::new(8, vec![]).unwrap();
        assert!(mutual_nn_match(&a, &e).unwrap().is_empty());
        assert!(mutual_nn_match(&e, &a).unwrap().is_empty());
        let c = random_set(&mut rng, 4, 6);
        assert!(matches!(
            mutual_nn_match(&a, &c),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn matches_double_argmin_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a = random_set(&mut rng, 50, 16);
            let b = random_set(&mut rng, 50, 16);
            let ab = mutual_nn_match(&a, &b).unwrap();
            let mut got: Vec<_> = ab.iter().map(|m| (m.idx_a, m.idx_b)).collect();
            got.sort();
            assert_eq!(got, oracle(&a, &b));
            let mut ba: Vec<_> = mutual_nn_match(&b, &a)
                .unwrap()
                .iter()
                .map(|m| (m.idx_b, m.idx_a))
                .collect();
            ba.sort();
            assert_eq!(got, ba);
        }
    }

    fn known_h() -> Homography {
        Homography::from_rows([[0.95, -0.12, 20.0], [0.1, 1.03, -12.0], [1e-4, -5e-5, 1.0]])
            .unwrap()
    }

    #[test]
    fn ransac_exact_data() {
        let h = known_h();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<_> = (0..100)
            .map(|_| {
                let p = Point2::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0));
                Correspondence::new(p, h.apply(p).unwrap())
            })
            .collect();
        let (est, mask) = ransac_homography(&pairs, &RansacConfig::default()).unwrap();
        assert!(mask.iter().all(|&b| b));
        assert!(corner_transfer_error(&est, &h, 512.0, 512.0).unwrap() < 1e-6);
    }

    #[test]
    fn ransac_with_outliers() {
        let h = known_h();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = rand_distr::Normal::new(0.0, 0.5).unwrap();
        let mut pairs = Vec::new();
        for i in 0..200 {
            let p = Point2::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0));
            let q = if i % 2 == 0 {
                let t = h.apply(p).unwrap();
                Point2::new(t.x + rng.sample(normal), t.y + rng.sample(normal))
            } else {
                Point2::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0))
            };
            pairs.push(Correspondence::new(p, q));
        }
        let cfg = RansacConfig {
            seed: 99,
            ..Default::default()
        };
        let (est, mask) = ransac_homography(&pairs, &cfg).unwrap();
        assert!(corner_transfer_error(&est, &h, 512.0, 512.0).unwrap() <= 1.0);
        for (c, &inl) in pairs.iter().zip(&mask) {
            if inl {
                assert!(est.apply(c.source).unwrap().distance(&c.target) <= 5.0);
            }
        }
        assert_eq!(ransac_homography(&pairs, &cfg).unwrap(), (est, mask));
    }

    #[test]
    fn ransac_too_few() {
        let c = Correspondence::new(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0));
        assert!(matches!(
            ransac_homography(&[c; 3], &RansacConfig::default()),
            Err(Error::InsufficientMatches(3))
        ));
    }

    #[test]
    fn ransac_all_degenerate_has_no_model() {
        let pairs: Vec<_> = (0..10)
            .map(|i| {
                let p = Point2::new(i as f64, 2.0 * i as f64);
                Correspondence::new(p, p)
            })
            .collect();
        let cfg = RansacConfig {
            max_iterations: 50,
            ..Default::default()
        };
        assert!(matches!(
            ransac_homography(&pairs, &cfg),
            Err(Error::NoModel)
        ));
    }

    #[test]
    fn featureless_maps_have_too_few_matches() {
        let cells = 20 * 20;
        let fm = DenseFeatureMap::new(80, 80, 4, 4, vec![-0.1; cells * 2], vec![0.0; cells * 4])
            .unwrap();
        let r = register_pair(&fm, &fm, &RegistrationConfig::default());
        assert_eq!(r.status, RegistrationStatus::TooFewMatches);
        assert!(r.homography.is_none());
        assert_eq!(r.inlier_mask.len(), r.matches.len());
    }
}
