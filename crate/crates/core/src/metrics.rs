//! Registration and detector metrics.
//!
//! Control-point errors drive the success rates: a pair succeeds when its
//! mean (SR_ME) or maximum (SR_MAE) control-point error is within the
//! threshold. A failed registration gets infinite errors and never succeeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Modality;
use crate::geometry::{
    ground_truth_homography, Correspondence, Homography, Point2, CONTROL_POINT_COUNT,
};
use crate::matching::{RegistrationResult, RegistrationStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointErrors {
    pub errors: Vec<f64>,
    pub status: RegistrationStatus,
}

impl ControlPointErrors {
    /// `n` infinite errors for a registration that produced no homography.
    pub fn failed(n: usize, status: RegistrationStatus) -> Self {
        Self {
            errors: vec![f64::INFINITY; n],
            status,
        }
    }

    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.errors
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn succeeded(&self) -> bool {
        self.status == RegistrationStatus::Ok && self.errors.iter().all(|e| e.is_finite())
    }
}

/// `||H_pred(p) - q||` per control point; points sent to infinity get `+inf`.
pub fn euclidean_errors(
    h_pred: &Homography,
    control: &[Correspondence],
) -> Result<ControlPointErrors> {
    if control.is_empty() {
        return Err(Error::EmptyInput);
    }
    let errors = control
        .iter()
        .map(|c| match h_pred.apply(c.source) {
            Ok(p) => p.distance(&c.target),
            Err(_) => f64::INFINITY,
        })
        .collect();
    Ok(ControlPointErrors {
        errors,
        status: RegistrationStatus::Ok,
    })
}

fn success_rate(
    per_pair: &[ControlPointErrors],
    eps: f64,
    stat: fn(&ControlPointErrors) -> f64,
) -> Result<f64> {
    if per_pair.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = per_pair
        .iter()
        .filter(|e| !e.errors.is_empty() && e.succeeded() && stat(e) <= eps)
        .count();
    Ok(100.0 * hits as f64 / per_pair.len() as f64)
}

/// Percentage of pairs whose mean control-point error is at most `eps`.
pub fn success_rate_me(per_pair: &[ControlPointErrors], eps: f64) -> Result<f64> {
    success_rate(per_pair, eps, ControlPointErrors::mean)
}

/// Percentage of pairs whose maximum control-point error is at most `eps`.
pub fn success_rate_mae(per_pair: &[ControlPointErrors], eps: f64) -> Result<f64> {
    success_rate(per_pair, eps, ControlPointErrors::max)
}

fn inside(p: &Point2, (w, h): (usize, usize)) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= w as f64 - 1.0 && p.y <= h as f64 - 1.0
}

/// Symmetric detector repeatability.
///
/// `a` keypoints are warped into B by `h_gt` and kept if they land inside B;
/// `b` keypoints are warped into A by the inverse and kept if they land in
/// A. A kept `a` is repeated if some kept `b` lies within `eps` of it in B's
/// frame, and vice versa in A's frame. Returns
/// `(repeated a + repeated b) / (kept a + kept b)`, or 0 when nothing is kept.
pub fn repeatability(
    kps_a: &[Point2],
    kps_b: &[Point2],
    h_gt: &Homography,
    eps: f64,
    dims_a: (usize, usize),
    dims_b: (usize, usize),
) -> f64 {
    let h_inv = h_gt.inverse();
    // (original, warped) for keypoints whose warp stays in the other image.
    let kept = |pts: &[Point2], h: &Homography, dims| -> Vec<(Point2, Point2)> {
        pts.iter()
            .filter_map(|&p| h.apply(p).ok().filter(|q| inside(q, dims)).map(|q| (p, q)))
            .collect()
    };
    let ka = kept(kps_a, h_gt, dims_b);
    let kb = kept(kps_b, &h_inv, dims_a);
    if ka.is_empty() && kb.is_empty() {
        return 0.0;
    }
    let near = |p: &Point2, set: &[(Point2, Point2)], pick: fn(&(Point2, Point2)) -> Point2| {
        set.iter().any(|s| pick(s).distance(p) <= eps)
    };
    let rep_a = ka.iter().filter(|(_, q)| near(q, &kb, |s| s.0)).count();
    let rep_b = kb.iter().filter(|(_, q)| near(q, &ka, |s| s.0)).count();
    (rep_a + rep_b) as f64 / (ka.len() + kb.len()) as f64
}

/// `inliers / matches`, 0 when there are no matches.
pub fn matching_inlier_ratio(num_inliers: usize, num_matches: usize) -> Result<f64> {
    if num_inliers > num_matches {
        return Err(Error::InvalidCounts {
            inliers: num_inliers,
            matches: num_matches,
        });
    }
    if num_matches == 0 {
        return Ok(0.0);
    }
    Ok(num_inliers as f64 / num_matches as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub sr_me: f64,
    pub sr_mae: f64,
    pub rep: f64,
    pub mir: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            sr_me: 3.0,
            sr_mae: 5.0,
            rep: 5.0,
            mir: 5.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if [self.sr_me, self.sr_mae, self.rep, self.mir]
            .iter()
            .any(|t| !(*t > 0.0))
        {
            return Err(Error::Config(format!(
                "thresholds must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Everything needed to score one registered pair.
#[derive(Debug, Clone)]
pub struct PairEvaluation<'a> {
    pub id: String,
    pub modality_a: Modality,
    pub modality_b: Modality,
    pub result: &'a RegistrationResult,
    pub keypoints_a: Vec<Point2>,
    pub keypoints_b: Vec<Point2>,
    pub dims_a: (usize, usize),
    pub dims_b: (usize, usize),
    pub control_a: &'a [Point2],
    pub control_b: &'a [Point2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub id: String,
    pub modality_pair: String,
    pub status: RegistrationStatus,
    /// `None` when the registration failed.
    pub mean_error: Option<f64>,
    pub max_error: Option<f64>,
    pub repeatability: f64,
    pub mir: f64,
    pub num_matches: usize,
    pub num_inliers: usize,
}

impl PairRecord {
    fn success(&self, eps: f64, stat: Option<f64>) -> bool {
        self.status == RegistrationStatus::Ok && stat.is_some_and(|v| v <= eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub pairs: usize,
    /// Percentages.
    pub sr_me: f64,
    pub sr_mae: f64,
    /// Fractions in `[0, 1]`.
    pub mean_rep: f64,
    pub mean_mir: f64,
}

impl Aggregate {
    /// Recomputes the aggregate from per-pair records.
    pub fn from_records<'r>(
        records: impl IntoIterator<Item = &'r PairRecord>,
        t: &Thresholds,
    ) -> Self {
        let records: Vec<&PairRecord> = records.into_iter().collect();
        let n = records.len().max(1) as f64;
        let count =
            |f: &dyn Fn(&PairRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64;
        Self {
            pairs: records.len(),
            sr_me: 100.0 * count(&|r| r.success(t.sr_me, r.mean_error)) / n,
            sr_mae: 100.0 * count(&|r| r.success(t.sr_mae, r.max_error)) / n,
            mean_rep: records.iter().map(|r| r.repeatability).sum::<f64>() / n,
            mean_mir: records.iter().map(|r| r.mir).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub by_modality_pair: BTreeMap<String, Aggregate>,
    pub overall: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Thresholds,
    pub pairs: Vec<PairRecord>,
    pub aggregates: Aggregates,
}

fn evaluate_pair(p: &PairEvaluation<'_>, t: &Thresholds) -> Result<PairRecord> {
    if p.control_a.len() != CONTROL_POINT_COUNT || p.control_b.len() != CONTROL_POINT_COUNT {
        return Err(Error::MissingAnnotation(format!(
            "{}: need {CONTROL_POINT_COUNT} control points per side, found {} and {}",
            p.id,
            p.control_a.len(),
            p.control_b.len()
        )));
    }
    let control: Vec<Correspondence> = p
        .control_a
        .iter()
        .zip(p.control_b)
        .map(|(&a, &b)| Correspondence::new(a, b))
        .collect();
    let h_gt = ground_truth_homography(&control)?;
    let r = p.result;
    let errors = match (&r.status, &r.homography) {
        (RegistrationStatus::Ok, Some(h)) => euclidean_errors(h, &control)?,
        _ => ControlPointErrors::failed(control.len(), r.status),
    };
    let ok = errors.succeeded();
    Ok(PairRecord {
        id: p.id.clone(),
        modality_pair: format!("{}-{}", p.modality_a, p.modality_b),
        status: r.status,
        mean_error: ok.then(|| errors.mean()),
        max_error: ok.then(|| errors.max()),
        repeatability: repeatability(
            &p.keypoints_a,
            &p.keypoints_b,
            &h_gt,
            t.rep,
            p.dims_a,
            p.dims_b,
        ),
        mir: matching_inlier_ratio(r.num_inliers(), r.matches.len())?,
        num_matches: r.matches.len(),
        num_inliers: r.num_inliers(),
    })
}

/// Scores every pair (in parallel, output in input order) and aggregates per
/// modality pair and overall.
pub fn evaluate_dataset(
    pairs: &[PairEvaluation<'_>],
    thresholds: &Thresholds,
) -> Result<EvalReport> {
    thresholds.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let records = pairs
        .par_iter()
        .map(|p| evaluate_pair(p, thresholds))
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<String, Vec<&PairRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry(r.modality_pair.clone()).or_default().push(r);
    }
    let by_modality_pair = groups
        .into_iter()
        .map(|(k, v)| (k, Aggregate::from_records(v, thresholds)))
        .collect();
    let overall = Aggregate::from_records(&records, thresholds);
    Ok(EvalReport {
        thresholds: *thresholds,
        aggregates: Aggregates {
            by_modality_pair,
            overall,
        },
        pairs: records,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned table: one row per modality pair plus the overall row, all
    /// figures in percent with one decimal.
    pub fn to_text_table(&self) -> String {
        let t = &self.thresholds;
        let headers = [
            "group".to_string(),
            "pairs".to_string(),
            format!("SR_ME({})", t.sr_me),
            format!("SR_MAE({})", t.sr_mae),
            format!("Rep({})", t.rep),
            format!("MIR({})", t.mir),
        ];
        let row = |name: &str, a: &Aggregate| {
            [
                name.to_string(),
                a.pairs.to_string(),
                format!("{:.1}", a.sr_me),
                format!("{:.1}", a.sr_mae),
                format!("{:.1}", 100.0 * a.mean_rep),
                format!("{:.1}", 100.0 * a.mean_mir),
            ]
        };
        let mut rows = vec![headers];
        for (k, a) in &self.aggregates.by_modality_pair {
            rows.push(row(k, a));
        }
        rows.push(row("overall", &self.aggregates.overall));
        let widths: Vec<usize> = (0..6)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let mut line = format!("{:<w$}", r[0], w = widths[0]);
            for c in 1..6 {
                let _ = write!(line, "  {:>w$}", r[c], w = widths[c]);
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}
