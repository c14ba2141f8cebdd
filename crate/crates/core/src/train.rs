//! Contrastive training of the shared backbone.
//!
//! Each batch embeds B descriptions and their B sequences, forms the B x B
//! cosine matrix and applies the multiple-negatives ranking loss (row i's
//! positive is column i, every other column is a negative) or the MSE-cosine
//! alternative. Loss and its gradient with respect to the embeddings are
//! computed in f64 outside the tape; the embedding gradients seed the
//! backward pass.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Grads, ParamStore};
use crate::backbone::EncoderBackbone;
use crate::data::DescribedSequence;
use crate::embed::{embed_descriptions_node, embed_sequences_node, fit_items, EmbedConfig};
use crate::error::{Error, Result};
use crate::retrieval::{evaluate, DEFAULT_KS};
use crate::tensor::{Mat, Scalar};

closed_enum!(
    LossKind {
        ContrastiveMnrl => "CONTRASTIVE_MNRL",
        MseCosine => "MSE_COSINE",
    }
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Multiplier on cosine similarities before the softmax (MNRL only).
    pub scale: f64,
    /// Average the description-to-sequence and sequence-to-description terms.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::ContrastiveMnrl,
            scale: 20.0,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn mse() -> Self {
        Self {
            kind: LossKind::MseCosine,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("loss scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Restore the parameters of the epoch with the best validation MRR.
    pub keep_best: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_ratio: 0.02,
            grad_clip: Some(1.0),
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            keep_best: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, loss: &LossConfig) -> Result<()> {
        loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        let min_batch = if loss.kind == LossKind::ContrastiveMnrl { 2 } else { 1 };
        if self.batch_size < min_batch {
            return bad(format!(
                "batch_size {} too small for {} (needs at least {min_batch})",
                self.batch_size, loss.kind
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} not in [0, 1)", self.warmup_ratio));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if self.weight_decay < 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("optimizer hyper-parameters out of range".into());
        }
        Ok(())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn unit_rows(m: &Mat<f64>) -> Result<(Mat<f64>, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// `S[i][j]` = cosine of description row i and sequence row j.
pub fn similarity_matrix(desc: &Mat<f64>, seq: &Mat<f64>) -> Result<Mat<f64>> {
    if desc.cols() != seq.cols() {
        return Err(Error::Shape("embedding widths differ".into()));
    }
    let (du, _) = unit_rows(desc)?;
    let (su, _) = unit_rows(seq)?;
    let mut s = Mat::zeros(desc.rows(), seq.rows());
    crate::tensor::gemm_acc(&du, false, &su, true, &mut s, 0.0);
    Ok(s)
}

/// Row-wise cross-entropy of `scale * S` against the diagonal, with the
/// gradient of the mean loss.
fn row_ce(s: &Mat<f64>, scale: f64) -> (f64, Mat<f64>) {
    let b = s.rows();
    let mut grad = Mat::zeros(b, b);
    let mut total = 0.0;
    for i in 0..b {
        let row = s.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(scale * v));
        let z: f64 = row.iter().map(|&v| (scale * v - max).exp()).sum();
        let lse = max + z.ln();
        // When the positive is the row maximum the loss can be far below
        // one ulp of `lse`; log1p over the negatives keeps it exact.
        total += if scale * row[i] >= max {
            let rest: f64 = (0..b)
                .filter(|&j| j != i)
                .map(|j| (scale * (row[j] - row[i])).exp())
                .sum();
            rest.ln_1p()
        } else {
            lse - scale * row[i]
        };
        let g = grad.row_mut(i);
        let mut off = 0.0;
        for j in (0..b).filter(|&j| j != i) {
            let p = (scale * row[j] - lse).exp();
            off += p;
            g[j] = scale * p / b as f64;
        }
        g[i] = -scale * off / b as f64;
    }
    (total / b as f64, grad)
}

fn transpose(m: &Mat<f64>) -> Mat<f64> {
    let mut t = Mat::zeros(m.cols(), m.rows());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            t.set(c, r, m.get(r, c));
        }
    }
    t
}

fn check_square(s: &Mat<f64>) -> Result<()> {
    if s.rows() != s.cols() || s.rows() == 0 {
        return Err(Error::Shape(format!(
            "similarity matrix must be square and non-empty, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    Ok(())
}

/// Mean over rows of `-log softmax(scale * S[i])[i]`.
pub fn mnrl_loss(s: &Mat<f64>, scale: f64) -> Result<f64> {
    check_square(s)?;
    Ok(row_ce(s, scale).0)
}

/// Loss and `dL/dS`; the symmetric form averages both directions.
pub fn mnrl_loss_grad(s: &Mat<f64>, scale: f64, symmetric: bool) -> Result<(f64, Mat<f64>)> {
    check_square(s)?;
    let (l, g) = row_ce(s, scale);
    if !symmetric {
        return Ok((l, g));
    }
    let (lt, gt) = row_ce(&transpose(s), scale);
    let mut g = g;
    g.add_assign(&transpose(&gt));
    g.scale(0.5);
    Ok(((l + lt) / 2.0, g))
}

/// Mean of `(sim_i - 1)^2`.
pub fn mse_cosine_loss(positive_sims: &[f64]) -> Result<f64> {
    if positive_sims.is_empty() {
        return Err(Error::Empty("similarities"));
    }
    Ok(positive_sims.iter().map(|s| (s - 1.0).powi(2)).sum::<f64>() / positive_sims.len() as f64)
}

/// Batch loss with gradients with respect to the raw description and
/// sequence embeddings.
pub fn batch_loss(
    desc: &Mat<f64>,
    seq: &Mat<f64>,
    loss: &LossConfig,
) -> Result<(f64, Mat<f64>, Mat<f64>)> {
    if desc.shape() != seq.shape() {
        return Err(Error::Shape("description and sequence batches differ".into()));
    }
    let b = desc.rows();
    let (du, dn) = unit_rows(desc)?;
    let (su, sn) = unit_rows(seq)?;
    let mut s = Mat::zeros(b, b);
    crate::tensor::gemm_acc(&du, false, &su, true, &mut s, 0.0);

    let (value, gs) = match loss.kind {
        LossKind::ContrastiveMnrl => mnrl_loss_grad(&s, loss.scale, loss.symmetric)?,
        LossKind::MseCosine => {
            let diag: Vec<f64> = (0..b).map(|i| s.get(i, i)).collect();
            let mut g = Mat::zeros(b, b);
            for (i, v) in diag.iter().enumerate() {
                g.set(i, i, 2.0 * (v - 1.0) / b as f64);
            }
            (mse_cosine_loss(&diag)?, g)
        }
    };

    // d cos(d_i, s_j)/d d_i = (s^_j - S_ij d^_i) / |d_i|, and symmetrically.
    let mut gd = Mat::zeros(b, desc.cols());
    crate::tensor::gemm_acc(&gs, false, &su, false, &mut gd, 0.0);
    let mut gsq = Mat::zeros(b, desc.cols());
    crate::tensor::gemm_acc(&gs, true, &du, false, &mut gsq, 0.0);
    for i in 0..b {
        let rd: f64 = (0..b).map(|j| gs.get(i, j) * s.get(i, j)).sum();
        let rs: f64 = (0..b).map(|j| gs.get(j, i) * s.get(j, i)).sum();
        for c in 0..desc.cols() {
            let v = (gd.get(i, c) - rd * du.get(i, c)) / dn[i];
            gd.set(i, c, v);
            let w = (gsq.get(i, c) - rs * su.get(i, c)) / sn[i];
            gsq.set(i, c, w);
        }
    }
    Ok((value, gd, gsq))
}

/// Linear warmup over `floor(warmup_ratio * total)` steps, then cosine decay
/// to zero at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, cfg: &TrainingConfig) -> f64 {
    let warmup = (cfg.warmup_ratio * total_steps as f64).floor() as usize;
    let step = step.min(total_steps);
    if step < warmup {
        return cfg.learning_rate * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    if span == 0 {
        return cfg.learning_rate;
    }
    let progress = (step - warmup) as f64 / span as f64;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adaptive-moment optimizer with decoupled weight decay. Decay skips
/// single-row tensors (biases and layer-norm gains).
pub struct AdamW<T> {
    m: Vec<Option<Mat<T>>>,
    v: Vec<Option<Mat<T>>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n_params: usize, cfg: &TrainingConfig) -> Self {
        Self {
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            let decay = if p.rows() > 1 { lr * self.weight_decay } else { 0.0 };
            let keep = T::from_f64(1.0 - decay);
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * *gi;
                *vi = b2 * *vi + one_b2 * *gi * *gi;
                let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
                *pi = *pi * keep - step_size * *mi / denom;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mrr: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the backbone holds after training.
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.epochs {
            let line = serde_json::to_string(r)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.train_loss).collect()
    }
}

fn batches(order: &[usize], size: usize, min: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    // A trailing batch too small for in-batch negatives joins its neighbour.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min) {
        let last = out.pop().unwrap();
        let prev = out.pop().unwrap();
        let start = order.len() - last.len() - prev.len();
        out.push(&order[start..]);
    }
    out
}

/// Optimize `backbone` on `train`, selecting by MRR on `valid`.
///
/// `on_epoch` sees every record as soon as the epoch finishes.
pub fn train<T: Scalar, B: EncoderBackbone<T>>(
    backbone: &mut B,
    train: &[&DescribedSequence],
    valid: &[&DescribedSequence],
    embed: &EmbedConfig,
    cfg: &TrainingConfig,
    loss: &LossConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainingLog> {
    cfg.validate(loss)?;
    embed.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if valid.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let train = fit_items(train, backbone.tokenizer(), embed, backbone.max_positions());
    let min_batch = if loss.kind == LossKind::ContrastiveMnrl { 2 } else { 1 };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let steps_per_epoch = batches(&order, cfg.batch_size, min_batch).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(backbone.params().len(), cfg);

    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        let mut lr = 0.0;
        for batch in batches(&order, cfg.batch_size, min_batch) {
            lr = lr_at_step(step, total_steps, cfg);
            let texts: Vec<&str> = batch.iter().map(|&i| train[i].description.as_str()).collect();
            let seqs: Vec<_> = batch.iter().map(|&i| &train[i].sequence).collect();

            let grads = {
                let mut g = Graph::new(backbone.params());
                let rng: &mut dyn RngCore = &mut dropout_rng;
                let dn = embed_descriptions_node(&mut g, backbone, &texts, embed.pooling, Some(&mut *rng))?;
                let sn = embed_sequences_node(&mut g, backbone, &seqs, embed, Some(rng))?;
                let d: Mat<f64> = g.value(dn).cast();
                let s: Mat<f64> = g.value(sn).cast();
                let (value, gd, gs) = batch_loss(&d, &s, loss)?;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: value });
                }
                loss_sum += value;
                n_batches += 1;
                g.backward(vec![(dn, gd.cast()), (sn, gs.cast())])?.params
            };
            let mut grads = grads;
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: norm });
            }
            if let Some(clip) = cfg.grad_clip {
                if norm > clip {
                    grads.scale(T::from_f64(clip / norm));
                }
            }
            opt.step(backbone.params_mut(), &grads, lr);
            step += 1;
        }
        let valid_mrr = evaluate(valid, backbone, embed, &DEFAULT_KS)?.mrr;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            valid_mrr,
            lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} valid_mrr {:.4} lr {:.2e}",
            record.train_loss,
            valid_mrr,
            lr
        );
        on_epoch(&record);
        log.epochs.push(record);
        if cfg.keep_best && best.as_ref().is_none_or(|(m, _)| valid_mrr > *m) {
            best = Some((valid_mrr, backbone.params().clone()));
            log.best_epoch = Some(epoch);
        }
    }
    if let Some((_, params)) = best {
        *backbone.params_mut() = params;
    } else {
        log.best_epoch = Some(cfg.epochs - 1);
    }
    Ok(log)
}
