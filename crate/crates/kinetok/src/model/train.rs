//! Training loop: Adam with bias correction, per-epoch cosine learning-rate
//! decay, global gradient-norm clipping, and seeded shuffling so identical
//! seeds reproduce identical weights bit-for-bit.

use super::math::Tensor;
use super::{
    backward_gradients, forward, weighted_ce_loss, ForwardMode, ModelParameters, ParamSet,
};
use crate::error::{Error, Result};
use crate::labeling::{ActionLabel, LabeledWindow, LossWeights};
use crate::tokenizer::TokenWindow;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Mean weighted cross-entropy over the dataset, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    /// Learning rate used in each epoch (cosine decay from `base_lr`).
    pub epoch_lrs: Vec<f64>,
}

/// Cosine decay: `base · (1 + cos(π·e/E)) / 2` for epoch `e` of `E`.
pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    base * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()) / 2.0
}

/// Euclidean norm over all gradient tensors jointly.
pub fn global_grad_norm(grads: &ParamSet) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|t| t.squared_norm())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so their global norm is at most `clip`. Returns the
/// pre-clip norm.
pub fn clip_gradients(grads: &mut ParamSet, clip: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > clip {
        let s = clip / norm;
        for t in grads.tensors_mut() {
            t.scale(s);
        }
    }
    norm
}

struct AdamState {
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

fn adam_update(set: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    let mut ps = set.tensors_mut();
    let gs = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for k in 0..ps.len() {
        for i in 0..ps[k].data.len() {
            let g = gs[k].data[i];
            let m = &mut ms[k].data[i];
            let v = &mut vs[k].data[i];
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            ps[k].data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

fn accumulate(into: &mut ParamSet, from: &ParamSet) {
    let mut dst = into.tensors_mut();
    let src = from.tensors();
    for k in 0..dst.len() {
        dst[k].add_assign(src[k]);
    }
}

/// Train with a noise stream derived from the model seed.
pub fn train(
    params: &mut ModelParameters,
    data: &[LabeledWindow],
    weights: &LossWeights,
) -> Result<TrainingLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed ^ 0x5452_4149);
    train_with(params, data, weights, &mut rng)
}

/// Train with an explicit shuffle/dropout stream (mini-batch Adam, cosine
/// decay, global clipping). A non-finite loss aborts with the offending
/// epoch and batch index.
pub fn train_with(
    params: &mut ModelParameters,
    data: &[LabeledWindow],
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingLog> {
    let cfg = params.config;
    if data.is_empty() {
        return Err(Error::InsufficientData(
            "training requires at least one labeled window".into(),
        ));
    }
    let mut state = AdamState {
        m: params.set.zeros_like(),
        v: params.set.zeros_like(),
        step: 0,
    };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_lrs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs);
        epoch_lrs.push(lr);
        order.shuffle(rng);
        let mut total_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Numerical breakdowns carry the epoch and batch they occurred in.
            let ctx = |e: Error| match e {
                Error::NumericalFailure(msg) => {
                    Error::NumericalFailure(format!("epoch {epoch}, batch {bi}: {msg}"))
                }
                other => other,
            };
            let mut grads = params.set.zeros_like();
            for &si in batch {
                let sample = &data[si];
                let (probs, cache) =
                    forward(params, &sample.window, ForwardMode::Train { rng: &mut *rng })
                        .map_err(&ctx)?;
                let loss = weighted_ce_loss(&probs, sample.label, weights);
                if !loss.is_finite() {
                    return Err(Error::NumericalFailure(format!(
                        "non-finite loss at epoch {epoch}, batch {bi}"
                    )));
                }
                total_loss += loss;
                let g =
                    backward_gradients(params, &cache, sample.label, weights).map_err(&ctx)?;
                accumulate(&mut grads, &g);
            }
            let inv = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                t.scale(inv);
            }
            clip_gradients(&mut grads, cfg.clip_norm);
            adam_update(&mut params.set, &grads, &mut state, lr);
        }
        epoch_losses.push(total_loss / data.len() as f64);
    }
    Ok(TrainingLog {
        epoch_losses,
        epoch_lrs,
    })
}

/// Human-readable name for every tensor, in [`ParamSet::tensors`] order.
pub fn tensor_names(set: &ParamSet) -> Vec<String> {
    let mut out = vec!["w_emb".into(), "b_emb".into()];
    for (i, l) in set.layers.iter().enumerate() {
        for n in [
            "ln1_gamma", "ln1_beta", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gamma",
            "ln2_beta", "w1", "b1", "w2", "b2",
        ] {
            out.push(format!("layer{i}.{n}"));
        }
        if l.adapter.is_some() {
            out.push(format!("layer{i}.adapter_a"));
            out.push(format!("layer{i}.adapter_b"));
        }
    }
    out.extend([
        "lnf_gamma".into(),
        "lnf_beta".into(),
        "w_head".into(),
        "b_head".into(),
    ]);
    out
}

/// Central finite-difference check of the analytic gradients on one sample.
///
/// Perturbs every scalar parameter by ±`step`, recomputes the loss, and
/// returns the worst relative error per tensor. The comparison is an
/// independent path through the forward pass only, so it exercises every
/// backward formula.
pub fn gradient_check(
    params: &ModelParameters,
    window: &TokenWindow,
    label: ActionLabel,
    weights: &LossWeights,
    step: f64,
) -> Result<Vec<(String, f64)>> {
    let (_, cache) = forward(params, window, ForwardMode::Inference)?;
    let grads = backward_gradients(params, &cache, label, weights)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.clone()).collect();
    let names = tensor_names(&params.set);

    let mut work = params.clone();
    let loss_of = |p: &ModelParameters| -> Result<f64> {
        let (probs, _) = forward(p, window, ForwardMode::Inference)?;
        Ok(weighted_ce_loss(&probs, label, weights))
    };

    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut worst = 0.0f64;
        for idx in 0..len {
            let orig = {
                let ts: Vec<&Tensor> = work.set.tensors();
                ts[ti].data[idx]
            };
            set_scalar(&mut work.set, ti, idx, orig + step);
            let lp = loss_of(&work)?;
            set_scalar(&mut work.set, ti, idx, orig - step);
            let lm = loss_of(&work)?;
            set_scalar(&mut work.set, ti, idx, orig);
            let fd = (lp - lm) / (2.0 * step);
            let a = analytic[ti][idx];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
            worst = worst.max(err);
        }
        out.push((name.clone(), worst));
    }
    Ok(out)
}

fn set_scalar(set: &mut ParamSet, tensor_index: usize, scalar_index: usize, value: f64) {
    let mut ts = set.tensors_mut();
    ts[tensor_index].data[scalar_index] = value;
}
