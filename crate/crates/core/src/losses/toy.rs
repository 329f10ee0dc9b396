//! A small MLP patch embedder trained with the multitask loss.
//!
//! `32x32x3 patch -> affine -> ReLU -> affine -> ReLU -> {2 logits, D-dim
//! L2-normalised descriptor}`. It exists to show that the losses and their
//! gradients actually train a detector/descriptor; it is not a substitute
//! for a convolutional backbone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    balanced_batch_sampler, multitask_loss, DescriptorBatch, LogitBatch, LossConfig, StratifiedPool,
};
use crate::dataset::{PatchSample, PATCH_LEN};
use crate::error::{Error, Result};
use crate::keypoints::DescriptorSet;
use crate::matching::mutual_nn_match;
use crate::numeric::derive_seed;

pub const PARAMS_MAGIC: &[u8; 4] = b"TOYP";
pub const PARAMS_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    /// `input x hidden`; inputs are row vectors.
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w_det: DMatrix<f64>,
    pub b_det: DVector<f64>,
    pub w_desc: DMatrix<f64>,
    pub b_desc: DVector<f64>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    x: DMatrix<f64>,
    z1: DMatrix<f64>,
    h1: DMatrix<f64>,
    z2: DMatrix<f64>,
    h2: DMatrix<f64>,
    norms: Vec<f64>,
    pub logits: DMatrix<f64>,
    pub descriptors: DMatrix<f64>,
}

fn add_bias(mut m: DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        row += b.transpose();
    }
    m
}

/// Variance floor keeping flat patches finite.
const STANDARDIZE_EPS: f64 = 1e-4;

fn standardize_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    let n = x.ncols() as f64;
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        row.apply(|v| *v = (*v - mean) * inv);
    }
    out
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn col_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

impl ToyEmbedder {
    pub fn zeros(input: usize, hidden: usize, desc_dim: usize) -> Self {
        Self {
            w1: DMatrix::zeros(input, hidden),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(hidden, hidden),
            b2: DVector::zeros(hidden),
            w_det: DMatrix::zeros(hidden, 2),
            b_det: DVector::zeros(2),
            w_desc: DMatrix::zeros(hidden, desc_dim),
            b_desc: DVector::zeros(desc_dim),
        }
    }

    /// He-initialised weights, zero biases.
    pub fn new(hidden: usize, desc_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("positive std");
            DMatrix::from_fn(rows, cols, |_, _| n.sample(&mut rng))
        };
        let mut e = Self::zeros(PATCH_LEN, hidden, desc_dim);
        e.w1 = init(PATCH_LEN, hidden);
        e.w2 = init(hidden, hidden);
        e.w_det = init(hidden, 2);
        e.w_desc = init(hidden, desc_dim);
        e
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }
    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }
    pub fn descriptor_dim(&self) -> usize {
        self.w_desc.ncols()
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w_det.as_slice(),
            self.b_det.as_slice(),
            self.w_desc.as_slice(),
            self.b_desc.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w_det.as_mut_slice(),
            self.b_det.as_mut_slice(),
            self.w_desc.as_mut_slice(),
            self.b_desc.as_mut_slice(),
        ]
    }

    /// Rows of `x` are flattened patches; each row is standardised to zero
    /// mean and unit variance before the first layer.
    pub fn forward(&self, x: &DMatrix<f64>) -> ForwardCache {
        let x = standardize_rows(x);
        let z1 = add_bias(&x * &self.w1, &self.b1);
        let h1 = relu(&z1);
        let z2 = add_bias(&h1 * &self.w2, &self.b2);
        let h2 = relu(&z2);
        let logits = add_bias(&h2 * &self.w_det, &self.b_det);
        let raw_desc = add_bias(&h2 * &self.w_desc, &self.b_desc);
        let norms: Vec<f64> = raw_desc.row_iter().map(|r| r.norm()).collect();
        let mut descriptors = raw_desc;
        for (mut row, &n) in descriptors.row_iter_mut().zip(&norms) {
            if n > 0.0 {
                row /= n;
            } else {
                row.fill(0.0);
            }
        }
        ForwardCache {
            x,
            z1,
            h1,
            z2,
            h2,
            norms,
            logits,
            descriptors,
        }
    }

    /// Parameter gradients given output gradients for logits (`B x 2`) and
    /// normalised descriptors (`B x D`).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &DMatrix<f64>,
        d_desc: &DMatrix<f64>,
    ) -> ToyEmbedder {
        // Through the L2 normalisation: (g - y (y . g)) / |e|, zero at e = 0.
        let mut d_raw = DMatrix::zeros(d_desc.nrows(), d_desc.ncols());
        for i in 0..d_desc.nrows() {
            let n = cache.norms[i];
            if n > 0.0 {
                let y = cache.descriptors.row(i);
                let g = d_desc.row(i);
                let dot = y.dot(&g);
                d_raw.set_row(i, &((g - y * dot) / n));
            }
        }
        let d_h2 = d_logits * self.w_det.transpose() + &d_raw * self.w_desc.transpose();
        let d_z2 = d_h2.zip_map(&cache.z2, |g, z| if z > 0.0 { g } else { 0.0 });
        let d_h1 = &d_z2 * self.w2.transpose();
        let d_z1 = d_h1.zip_map(&cache.z1, |g, z| if z > 0.0 { g } else { 0.0 });
        ToyEmbedder {
            w1: cache.x.transpose() * &d_z1,
            b1: col_sums(&d_z1),
            w2: cache.h1.transpose() * &d_z2,
            b2: col_sums(&d_z2),
            w_det: cache.h2.transpose() * d_logits,
            b_det: col_sums(d_logits),
            w_desc: cache.h2.transpose() * &d_raw,
            b_desc: col_sums(&d_raw),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.push(PARAMS_VERSION);
        for d in [self.input_dim(), self.hidden(), self.descriptor_dim()] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 17 || &bytes[..4] != PARAMS_MAGIC || bytes[4] != PARAMS_VERSION {
            return Err(Error::Format("not a version-1 TOYP parameter file".into()));
        }
        let dim = |i: usize| {
            let o = 5 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        };
        let mut e = Self::zeros(dim(0), dim(1), dim(2));
        let total: usize = e.tensors().iter().map(|t| t.len()).sum();
        let payload = &bytes[17..];
        if payload.len() != total * 8 {
            return Err(Error::Format(format!(
                "parameter payload holds {} bytes, expected {}",
                payload.len(),
                total * 8
            )));
        }
        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for t in e.tensors_mut() {
            for v in t.iter_mut() {
                *v = vals.next().expect("length checked");
            }
        }
        Ok(e)
    }
}

/// Single-patch forward pass: `(logits, normalised descriptor)`.
pub fn toy_embedder_forward(patch: &[f64], params: &ToyEmbedder) -> ([f64; 2], Vec<f64>) {
    assert_eq!(patch.len(), params.input_dim(), "patch length");
    let x = DMatrix::from_row_slice(1, patch.len(), patch);
    let c = params.forward(&x);
    (
        [c.logits[(0, 0)], c.logits[(0, 1)]],
        c.descriptors.row(0).iter().copied().collect(),
    )
}

/// Adam with bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(params: &ToyEmbedder, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &mut ToyEmbedder, grads: &ToyEmbedder) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .enumerate()
        {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_detector: usize,
    pub batch_descriptor: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub hidden: usize,
    pub descriptor_dim: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            batch_detector: 576,
            batch_descriptor: 288,
            patience: 5,
            hidden: 64,
            descriptor_dim: 32,
            seed: 0,
        }
    }
}

impl ToyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0)
            || self.epochs == 0
            || self.batch_detector == 0
            || self.batch_descriptor < 2
            || self.hidden == 0
            || self.descriptor_dim < 2
        {
            return Err(Error::Config(format!(
                "invalid toy training config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Detector patches (labelled by class and modality) and positive pairs.
#[derive(Debug, Clone, Default)]
pub struct ToyDataset {
    pub detector: Vec<PatchSample>,
    pub pairs: Vec<(PatchSample, PatchSample)>,
}

impl ToyDataset {
    pub fn stratified_pool(&self) -> StratifiedPool {
        StratifiedPool::from_labels(self.detector.iter().map(|p| (p.class, p.modality)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ToyEmbedder,
    pub best_epoch: usize,
    /// Row 0 evaluates the initial parameters; row `k` follows epoch `k`.
    pub curve: Vec<EpochRecord>,
}

/// `epoch,train_loss,val_loss` with 9 significant digits.
pub fn loss_curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in curve {
        s.push_str(&format!(
            "{},{:.8e},{:.8e}\n",
            r.epoch, r.train_loss, r.val_loss
        ));
    }
    s
}

fn patch_rows<'a>(patches: impl Iterator<Item = &'a PatchSample>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, PATCH_LEN);
    for (i, p) in patches.enumerate() {
        for (k, &v) in p.pixels.iter().enumerate() {
            m[(i, k)] = f64::from(v);
        }
    }
    m
}

/// A fixed detector batch plus descriptor pairs, stacked into one input.
struct Batch {
    x: DMatrix<f64>,
    labels: Vec<crate::dataset::Class>,
    n_pairs: usize,
}

impl Batch {
    fn build(ds: &ToyDataset, det_ids: &[usize], pair_ids: &[usize]) -> Self {
        let n_det = det_ids.len();
        let n_pairs = pair_ids.len();
        let patches = det_ids
            .iter()
            .map(|&i| &ds.detector[i])
            .chain(pair_ids.iter().map(|&i| &ds.pairs[i].0))
            .chain(pair_ids.iter().map(|&i| &ds.pairs[i].1));
        Self {
            x: patch_rows(patches, n_det + 2 * n_pairs),
            labels: det_ids.iter().map(|&i| ds.detector[i].class).collect(),
            n_pairs,
        }
    }

    fn n_det(&self) -> usize {
        self.labels.len()
    }

    /// Loss and, optionally, parameter gradients.
    fn evaluate(
        &self,
        model: &ToyEmbedder,
        loss_cfg: &LossConfig,
        with_grad: bool,
    ) -> Result<(f64, Option<ToyEmbedder>)> {
        let cache = model.forward(&self.x);
        let n_det = self.n_det();
        let np = self.n_pairs;
        let det = LogitBatch {
            logits: (0..n_det)
                .map(|i| [cache.logits[(i, 0)], cache.logits[(i, 1)]])
                .collect(),
            labels: self.labels.clone(),
        };
        let desc = DescriptorBatch::new(
            cache.descriptors.rows(n_det, np).into_owned(),
            cache.descriptors.rows(n_det + np, np).into_owned(),
        )?;
        let out = multitask_loss(&det, &desc, loss_cfg)?;
        if !with_grad {
            return Ok((out.loss, None));
        }
        let rows = self.x.nrows();
        let mut d_logits = DMatrix::zeros(rows, 2);
        for (i, g) in out.grad_logits.iter().enumerate() {
            d_logits[(i, 0)] = g[0];
            d_logits[(i, 1)] = g[1];
        }
        let mut d_desc = DMatrix::zeros(rows, model.descriptor_dim());
        d_desc.rows_mut(n_det, np).copy_from(&out.grad_anchors);
        d_desc
            .rows_mut(n_det + np, np)
            .copy_from(&out.grad_positives);
        Ok((out.loss, Some(model.backward(&cache, &d_logits, &d_desc))))
    }
}

const EVAL_TAG: u64 = 0xE7A1;
const INIT_TAG: u64 = 0x1417;

fn eval_batch(ds: &ToyDataset, cfg: &ToyTrainConfig, seed: u64) -> Result<Batch> {
    let det = balanced_batch_sampler(&ds.stratified_pool(), cfg.batch_detector, seed)?;
    let n = ds.pairs.len().min(cfg.batch_descriptor);
    let pairs: Vec<usize> = (0..n).collect();
    Ok(Batch::build(ds, &det, &pairs))
}

/// Adam on the multitask loss with balanced detector batches, keeping the
/// parameters with the best validation loss and stopping early after
/// `patience` epochs without improvement.
pub fn toy_train(
    train: &ToyDataset,
    val: &ToyDataset,
    cfg: &ToyTrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train.detector.is_empty() || val.detector.is_empty() {
        return Err(Error::EmptyDataset("no detector patches"));
    }
    if train.pairs.len() < 2 || val.pairs.len() < 2 {
        return Err(Error::EmptyDataset("need at least two positive pairs"));
    }
    let mut model = ToyEmbedder::new(
        cfg.hidden,
        cfg.descriptor_dim,
        derive_seed(cfg.seed, INIT_TAG),
    );
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let train_eval = eval_batch(train, cfg, derive_seed(cfg.seed, EVAL_TAG))?;
    let val_eval = eval_batch(val, cfg, derive_seed(cfg.seed, EVAL_TAG + 1))?;
    let pool = train.stratified_pool();

    let record = |model: &ToyEmbedder, epoch: usize| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            train_loss: train_eval.evaluate(model, loss_cfg, false)?.0,
            val_loss: val_eval.evaluate(model, loss_cfg, false)?.0,
        })
    };
    let mut curve = vec![record(&model, 0)?];
    let mut best = (curve[0].val_loss, 0usize, model.clone());

    let mut order: Vec<usize> = (0..train.pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_descriptor).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let det_seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | step as u64);
            let det = balanced_batch_sampler(&pool, cfg.batch_detector, det_seed)?;
            let batch = Batch::build(train, &det, chunk);
            let (_, grads) = batch.evaluate(&model, loss_cfg, true)?;
            adam.step(&mut model, &grads.expect("gradients requested"));
        }
        let rec = record(&model, epoch)?;
        curve.push(rec);
        if rec.val_loss < best.0 {
            best = (rec.val_loss, epoch, model.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        best_epoch: best.1,
        curve,
    })
}

/// Share of mutual nearest-neighbour matches that pair each patch with its
/// own partner. Pairs are matched within their image pair and the counts
/// pooled; 0 when nothing matches.
pub fn mutual_nn_precision(params: &ToyEmbedder, pairs: &[(PatchSample, PatchSample)]) -> f64 {
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, (a, b)) in pairs.iter().enumerate() {
        groups
            .entry((&a.image_id, &b.image_id))
            .or_default()
            .push(i);
    }
    let embed = |patches: Vec<&PatchSample>| {
        let n = patches.len();
        let c = params.forward(&patch_rows(patches.into_iter(), n));
        let data = c
            .descriptors
            .transpose()
            .iter()
            .map(|&v| v as f32)
            .collect();
        DescriptorSet::new(params.descriptor_dim(), data).expect("rows of descriptor_dim")
    };
    let (mut correct, mut total) = (0usize, 0usize);
    for ids in groups.values() {
        let da = embed(ids.iter().map(|&i| &pairs[i].0).collect());
        let db = embed(ids.iter().map(|&i| &pairs[i].1).collect());
        let matches = mutual_nn_match(&da, &db).expect("same descriptor dim");
        total += matches.len();
        correct += matches.iter().filter(|m| m.idx_a == m.idx_b).count();
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
