//! Training objective: two-class BCE for the detector head and the
//! bidirectional quadruplet loss with in-batch hard negatives for the
//! descriptor head, with analytic gradients.

pub mod sampler;
pub mod toy;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Class;
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, softplus};

pub use sampler::{balanced_batch_sampler, StratifiedPool};
pub use toy::{
    loss_curve_csv, mutual_nn_precision, toy_embedder_forward, toy_train, EpochRecord, ToyDataset,
    ToyEmbedder, ToyTrainConfig, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_det: f64,
    pub lambda_desc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda_det: 1.0,
            lambda_desc: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.lambda_det >= 0.0) || !(self.lambda_desc >= 0.0) {
            return Err(Error::Config(format!(
                "loss config needs margin > 0 and non-negative weights: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Detector logits (`[vessel, background]` per row) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    pub logits: Vec<[f64; 2]>,
    pub labels: Vec<Class>,
}

/// Row `i` of `anchors` and row `i` of `positives` form positive pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBatch {
    pub anchors: DMatrix<f64>,
    pub positives: DMatrix<f64>,
}

impl DescriptorBatch {
    pub fn new(anchors: DMatrix<f64>, positives: DMatrix<f64>) -> Result<Self> {
        if anchors.shape() != positives.shape() {
            return Err(Error::DimensionMismatch(format!(
                "anchors {:?} vs positives {:?}",
                anchors.shape(),
                positives.shape()
            )));
        }
        Ok(Self { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.nrows() == 0
    }
}

/// Mean two-class cross-entropy and its gradient w.r.t. the logits.
pub fn bce_detector_loss(batch: &LogitBatch) -> (f64, Vec<[f64; 2]>) {
    assert_eq!(batch.logits.len(), batch.labels.len(), "one label per row");
    let b = batch.logits.len();
    if b == 0 {
        return (0.0, Vec::new());
    }
    let inv_b = 1.0 / b as f64;
    let mut terms = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b);
    for (l, &label) in batch.logits.iter().zip(&batch.labels) {
        let k = label.index();
        let other = 1 - k;
        // -log softmax(l)[k] = softplus(l_other - l_k)
        terms.push(softplus(l[other] - l[k]));
        let p_other = 1.0 / (1.0 + (l[k] - l[other]).exp());
        let mut g = [0.0; 2];
        g[k] = -p_other * inv_b;
        g[other] = p_other * inv_b;
        grad.push(g);
    }
    (pairwise_sum(&terms) * inv_b, grad)
}

/// `d[i][j] = ||x_i - y_j||_2`.
pub fn pairwise_distances(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "descriptor dims {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    Ok(DMatrix::from_fn(x.nrows(), y.nrows(), |i, j| {
        let mut s = 0.0;
        for k in 0..x.ncols() {
            let d = x[(i, k)] - y[(j, k)];
            s += d * d;
        }
        s.max(0.0).sqrt()
    }))
}

/// Closest non-matching partners within the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedNegatives {
    /// For anchor `i`: index of the nearest positive `j != i`.
    pub for_anchor: Vec<usize>,
    /// For positive `i`: index of the nearest anchor `j != i`.
    pub for_positive: Vec<usize>,
}

/// In-batch hard-negative mining in both directions (ties: smallest index).
pub fn hard_negative_mining(batch: &DescriptorBatch) -> Result<MinedNegatives> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let d = pairwise_distances(&batch.anchors, &batch.positives)?;
    let argmin_excluding = |i: usize, f: &dyn Fn(usize) -> f64| {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in (0..b).filter(|&j| j != i) {
            let v = f(j);
            if best.0 == usize::MAX || v < best.1 {
                best = (j, v);
            }
        }
        best.0
    };
    let for_anchor = (0..b)
        .map(|i| argmin_excluding(i, &|j| d[(i, j)]))
        .collect();
    let for_positive = (0..b)
        .map(|i| argmin_excluding(i, &|j| d[(j, i)]))
        .collect();
    Ok(MinedNegatives {
        for_anchor,
        for_positive,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrupletOutput {
    pub loss: f64,
    pub grad_anchors: DMatrix<f64>,
    pub grad_positives: DMatrix<f64>,
}

fn row_diff(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> Vec<f64> {
    (0..a.ncols()).map(|k| a[(i, k)] - b[(j, k)]).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient of `||v||` with the zero-vector case defined as 0.
fn unit(v: &[f64], n: f64) -> Vec<f64> {
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn add_row(g: &mut DMatrix<f64>, i: usize, v: &[f64], scale: f64) {
    for (k, x) in v.iter().enumerate() {
        g[(i, k)] += scale * x;
    }
}

/// Batch mean of
/// `max(0, m + d(a,p) - d(a,n_a)) + max(0, m + d(p,a) - d(p,n_p))`,
/// with `n_a = p[for_anchor[i]]`, `n_p = a[for_positive[i]]`. The mined
/// indices are held fixed when differentiating.
pub fn quadruplet_loss(
    batch: &DescriptorBatch,
    mined: &MinedNegatives,
    margin: f64,
) -> Result<QuadrupletOutput> {
    let b = batch.len();
    let dim = batch.anchors.ncols();
    if mined.for_anchor.len() != b
        || mined.for_positive.len() != b
        || mined
            .for_anchor
            .iter()
            .chain(&mined.for_positive)
            .any(|&j| j >= b)
    {
        return Err(Error::DimensionMismatch(
            "mined indices do not fit the batch".into(),
        ));
    }
    let (a, p) = (&batch.anchors, &batch.positives);
    let mut ga = DMatrix::zeros(b, dim);
    let mut gp = DMatrix::zeros(b, dim);
    let mut terms = Vec::with_capacity(b);
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let (na, np) = (mined.for_anchor[i], mined.for_positive[i]);
        let v_ap = row_diff(a, i, p, i);
        let v_an = row_diff(a, i, p, na);
        let v_pn = row_diff(p, i, a, np);
        let (d_ap, d_an, d_pn) = (norm(&v_ap), norm(&v_an), norm(&v_pn));
        let h_anchor = margin + d_ap - d_an;
        let h_positive = margin + d_ap - d_pn;
        terms.push(h_anchor.max(0.0) + h_positive.max(0.0));

        let u_ap = unit(&v_ap, d_ap);
        if h_anchor > 0.0 {
            let u_an = unit(&v_an, d_an);
            add_row(&mut ga, i, &u_ap, inv_b);
            add_row(&mut gp, i, &u_ap, -inv_b);
            add_row(&mut ga, i, &u_an, -inv_b);
            add_row(&mut gp, na, &u_an, inv_b);
        }
        if h_positive > 0.0 {
            let u_pn = unit(&v_pn, d_pn);
            add_row(&mut ga, i, &u_ap, inv_b);
            add_row(&mut gp, i, &u_ap, -inv_b);
            add_row(&mut gp, i, &u_pn, -inv_b);
            add_row(&mut ga, np, &u_pn, inv_b);
        }
    }
    Ok(QuadrupletOutput {
        loss: pairwise_sum(&terms) * inv_b,
        grad_anchors: ga,
        grad_positives: gp,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskOutput {
    pub loss: f64,
    pub detector_loss: f64,
    pub descriptor_loss: f64,
    pub grad_logits: Vec<[f64; 2]>,
    pub grad_anchors: DMatrix<f64>,
    pub grad_positives: DMatrix<f64>,
    pub mined: MinedNegatives,
}

/// `lambda_det * BCE + lambda_desc * quadruplet`, mining negatives in-batch.
pub fn multitask_loss(
    det: &LogitBatch,
    desc: &DescriptorBatch,
    cfg: &LossConfig,
) -> Result<MultitaskOutput> {
    cfg.validate()?;
    let (det_loss, det_grad) = bce_detector_loss(det);
    let mined = hard_negative_mining(desc)?;
    let quad = quadruplet_loss(desc, &mined, cfg.margin)?;
    Ok(MultitaskOutput {
        loss: cfg.lambda_det * det_loss + cfg.lambda_desc * quad.loss,
        detector_loss: det_loss,
        descriptor_loss: quad.loss,
        grad_logits: det_grad
            .iter()
            .map(|g| [cfg.lambda_det * g[0], cfg.lambda_det * g[1]])
            .collect(),
        grad_anchors: quad.grad_anchors * cfg.lambda_desc,
        grad_positives: quad.grad_positives * cfg.lambda_desc,
        mined,
    })
}
