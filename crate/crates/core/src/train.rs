//! Minibatch SGD on real images only, with validation-driven checkpointing
//! and an early-stop gap criterion.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bayes::{self, VariationalPosterior, REAL_TARGET};
use crate::detector::{Detector, InferenceMode};
use crate::error::{invalid, Error, Result};
use crate::eval::{score_prepared, select_threshold};
use crate::ops::{dropout_mask, Mode};
use crate::preprocess::{center_crop, prepare, DatasetSplit, ImageRecord, NormStats};
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied over one full run.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Absolute gain in the validation metric needed for a new best snapshot.
    pub improvement_threshold: f64,
    /// Largest tolerated |proxy - validation| metric gap.
    pub early_stop_gap: f64,
    pub seed: u64,
    pub inference_mode: InferenceMode,
    pub alpha: f64,
    pub beta: f64,
    /// Real-validation percentile for the final threshold.
    pub percentile: f64,
    /// Share of the real validation images carved off as the early-stop proxy.
    pub proxy_fraction: f64,
    /// Monte-Carlo draws per step in variational mode.
    pub n_mc: usize,
    /// Initial standard deviation of the variational posterior.
    pub q_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay: 0.1,
            epochs: 50,
            batch_size: 512,
            improvement_threshold: 0.01,
            early_stop_gap: 0.06,
            seed: 0,
            inference_mode: InferenceMode::Map,
            alpha: bayes::DEFAULT_ALPHA,
            beta: bayes::DEFAULT_BETA,
            percentile: crate::eval::DEFAULT_PERCENTILE,
            proxy_fraction: 0.5,
            n_mc: 1,
            q_init_std: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return invalid(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return invalid(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if self.batch_size < 2 {
            return invalid("batch_size must be at least 2 (batch norm)");
        }
        if !(self.proxy_fraction > 0.0 && self.proxy_fraction < 1.0) {
            return invalid("proxy_fraction must lie in (0, 1)");
        }
        if self.n_mc == 0 {
            return invalid("n_mc must be at least 1");
        }
        if !(self.q_init_std > 0.0) {
            return invalid("q_init_std must be positive");
        }
        Ok(())
    }
}

/// `lr0 * decay^(epoch / epochs)`: one full decay across the run.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let period = cfg.epochs.max(1) as f64;
    cfg.lr0 * cfg.decay.powf(epoch as f64 / period)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub proxy_metric: f64,
    pub snapshot: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn best_metric(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].val_metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_metric,snapshot_flag\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                r.val_metric,
                u8::from(r.snapshot)
            );
        }
        out
    }
}

/// Provisional threshold used while training: two noise standard deviations
/// below the real target.
pub fn provisional_gamma(beta: f64) -> f64 {
    REAL_TARGET - 2.0 / beta.sqrt()
}

/// Fraction of scores strictly above `gamma`.
pub fn retention(scores: &[f64], gamma: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s > gamma).count() as f64 / scores.len() as f64
}

fn prepare_all(pool: &[ImageRecord], idx: &[usize], size: usize, stats: &NormStats) -> Result<Vec<Tensor>> {
    idx.par_iter()
        .map(|&i| prepare(&pool[i].pixels()?, size, stats))
        .collect()
}

/// Contiguous minibatches; a trailing batch of one is merged into its predecessor.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// One SGD step; returns the objective per sample and per unit of beta,
/// before the update.
fn sgd_step(
    det: &mut Detector,
    xs: &[&Tensor],
    n_total: usize,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let b = xs.len();
    let s = det.arch().input_size;
    let mut data = Vec::with_capacity(b * 3 * s * s);
    for x in xs {
        data.extend_from_slice(x.data());
    }
    let batch = Tensor::new(&[b, 3, s, s], data)?;
    let layout = det.head.layout;
    let hidden = layout.hidden.unwrap_or(1);
    let mask = if layout.hidden.is_some() && det.arch().dropout > 0.0 {
        Some(dropout_mask(&[b, hidden], det.arch().dropout, rng)?)
    } else {
        None
    };
    let targets = vec![REAL_TARGET; b];
    let data_weight = n_total as f64 / b as f64;

    let mut tape = GradTape::new();
    let vars = det.cnn.register(&mut tape);
    let x = tape.constant(batch);
    let feats = det.cnn.forward_taped(&mut tape, &vars, x, Mode::Train)?;

    let (loss, head_vars) = match cfg.inference_mode {
        InferenceMode::Map => {
            let w = tape.param(Tensor::from_vec(det.head.weights.clone()));
            let f = layout.forward_taped(&mut tape, w, feats.z, mask)?;
            let obj = bayes::map_objective_taped(&mut tape, f, &targets, w, cfg.alpha, cfg.beta, data_weight)?;
            (obj, vec![w])
        }
        InferenceMode::Variational => {
            let q = det.posterior.as_ref().ok_or_else(|| Error::InvalidArgument("missing variational posterior".into()))?;
            let means = tape.param(Tensor::from_vec(q.means.clone()));
            let log_stds = tape.param(Tensor::from_vec(q.log_stds.clone()));
            let noise = bayes::standard_noise(cfg.n_mc, q.dim(), rng);
            let obj = bayes::neg_elbo_taped(
                &mut tape,
                &layout,
                means,
                log_stds,
                feats.z,
                &targets,
                &noise,
                cfg.alpha,
                cfg.beta,
                data_weight,
                mask.as_ref(),
            )?;
            (obj, vec![means, log_stds])
        }
    };
    // Same minimiser as the objective; keeps the step size independent of beta.
    let loss = tape.scale(loss, 1.0 / (n_total as f64 * cfg.beta))?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("training loss became {value}")));
    }
    let grads = tape.backward(loss)?;

    let cnn_grads: Vec<&Tensor> = vars
        .kernels
        .iter()
        .chain(&vars.biases)
        .chain([&vars.bn_gamma, &vars.bn_beta])
        .map(|&v| grads.wrt(v))
        .collect();
    det.cnn.apply_update(&cnn_grads, -lr);
    match cfg.inference_mode {
        InferenceMode::Map => {
            crate::tensor::axpy(-lr, grads.wrt(head_vars[0]).data(), &mut det.head.weights);
        }
        InferenceMode::Variational => {
            let q = det.posterior.as_mut().expect("checked above");
            crate::tensor::axpy(-lr, grads.wrt(head_vars[0]).data(), &mut q.means);
            crate::tensor::axpy(-lr, grads.wrt(head_vars[1]).data(), &mut q.log_stds);
        }
    }
    if let Some(st) = feats.batch_stats {
        det.cnn.bn.update_running(&st.mean, &st.var, st.count);
    }
    Ok(value)
}

/// Trains `init` on the real training images of `split`.
///
/// Returns the best snapshot (with normalisation statistics and `gamma`
/// filled in) and the per-epoch report. With zero epochs `init` comes back
/// unchanged.
pub fn train(
    init: Detector,
    pool: &[ImageRecord],
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(Detector, TrainReport)> {
    cfg.validate()?;
    split.check_one_class(pool)?;
    if split.train.is_empty() {
        return Err(Error::EmptyData("training split is empty".into()));
    }
    if cfg.epochs == 0 {
        let report = TrainReport { epochs: Vec::new(), best_epoch: None, stop_reason: StopReason::Completed };
        return Ok((init, report));
    }
    let size = init.arch().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let cropped: Vec<Tensor> = split
        .train
        .par_iter()
        .map(|&i| center_crop(&pool[i].pixels()?, size))
        .collect::<Result<_>>()?;
    let norm = NormStats::from_images(&cropped)?;
    drop(cropped);

    let mut det = init;
    det.norm = norm;
    det.head.alpha = cfg.alpha;
    det.head.beta = cfg.beta;
    if cfg.inference_mode == InferenceMode::Variational && det.posterior.is_none() {
        det.posterior = Some(VariationalPosterior::around(det.head.weights.clone(), cfg.q_init_std));
    }

    let train_x = prepare_all(pool, &split.train, size, &det.norm)?;
    let mut val_reals: Vec<usize> = DatasetSplit::reals(pool, &split.validation).collect();
    val_reals.shuffle(&mut rng);
    let n_proxy = if val_reals.len() >= 2 {
        ((val_reals.len() as f64 * cfg.proxy_fraction).round() as usize).clamp(1, val_reals.len() - 1)
    } else {
        0
    };
    let (proxy_idx, val_idx) = val_reals.split_at(n_proxy);
    let val_x = prepare_all(pool, val_idx, size, &det.norm)?;
    let proxy_x = prepare_all(pool, proxy_idx, size, &det.norm)?;

    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Detector)> = None;
    let mut stop_reason = StopReason::Completed;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let bs = cfg.batch_size.min(order.len());
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in batches(&order, bs) {
            if chunk.len() < 2 {
                continue;
            }
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &train_x[i]).collect();
            loss_sum += sgd_step(&mut det, &xs, train_x.len(), lr, cfg, &mut rng)?;
            steps += 1;
        }
        if steps == 0 {
            return invalid("training split needs at least two images per batch");
        }
        let train_loss = loss_sum / steps as f64;

        let val_scores = score_prepared(&det, &val_x)?;
        let proxy_scores = score_prepared(&det, &proxy_x)?;
        let gamma = provisional_gamma(cfg.beta);
        let val_metric = retention(&val_scores, gamma);
        let proxy_metric = retention(&proxy_scores, gamma);

        let snapshot = match &best {
            None => true,
            Some((m, _, _)) => val_metric >= m + cfg.improvement_threshold,
        };
        if snapshot {
            best = Some((val_metric, epoch, det.clone()));
        }
        records.push(EpochRecord { epoch, lr, train_loss, val_metric, proxy_metric, snapshot });

        if !val_x.is_empty() && !proxy_x.is_empty() && (proxy_metric - val_metric).abs() > cfg.early_stop_gap {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let (_, best_epoch, mut best_det) = best.expect("at least one epoch ran");
    let gamma_scores = if val_x.is_empty() {
        score_prepared(&best_det, &train_x)?
    } else {
        score_prepared(&best_det, &val_x)?
    };
    best_det.gamma = Some(select_threshold(&gamma_scores, cfg.percentile)?);
    best_det.percentile = cfg.percentile;
    best_det.trained = true;
    Ok((best_det, TrainReport { epochs: records, best_epoch: Some(best_epoch), stop_reason }))
}
