//! Decoder-only causal transformer classifier, written directly against f64
//! tensors with hand-derived backpropagation.
//!
//! Architecture: linear embedding of the 9 token channels, a stack of pre-LN
//! blocks (causal multi-head attention with rotary positional encoding on
//! queries/keys, then a GELU feed-forward), a final layer norm, and a 3-class
//! head read from the last position. Everything is deterministic given the
//! configured seed; dropout noise comes from an explicit caller-provided
//! stream so training runs are reproducible bit-for-bit.
//!
//! Low-rank adapters (W′ = W + B·A) can be attached to the attention output
//! projection of selected layers; the frozen base then receives exactly zero
//! gradient while adapters and the classification head keep training.

pub mod math;
mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, checkpoint_from_bytes, checkpoint_to_bytes};
pub use train::{
    clip_gradients, cosine_lr, global_grad_norm, gradient_check, tensor_names, train, train_with,
    TrainingLog,
};

use crate::error::{Error, Result};
use crate::labeling::{ActionLabel, LossWeights};
use crate::tokenizer::TokenWindow;
use math::{
    add_bias, gelu, gelu_grad, layernorm_backward, layernorm_forward, matmul, matmul_nt,
    matmul_tn, rope_apply, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probability floor inside the loss logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Shape and training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Context length T: tokens per input window.
    pub context: usize,
    /// Input channels per token (9: 4 price + 5 volume).
    pub channels: usize,
    pub dropout: f64,
    pub base_lr: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 128,
            context: 16,
            channels: 9,
            dropout: 0.1,
            base_lr: 6e-4,
            epochs: 5,
            clip_norm: 1.0,
            batch_size: 32,
            seed: 0,
        }
    }

    /// Full-size configuration (millions of parameters); same code path.
    pub fn full_scale() -> Self {
        ModelConfig {
            layers: 4,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            context: 64,
            channels: 9,
            dropout: 0.1,
            base_lr: 6e-4,
            epochs: 5,
            clip_norm: 1.0,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Parameter count of the full set (biases and final head included).
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        // Per layer: two LN pairs, four biased attention projections, and
        // the two feed-forward matrices with biases.
        let per_layer = 4 * d * d + 2 * d * self.d_ff + self.d_ff + 9 * d;
        self.channels * d + d + self.layers * per_layer + 2 * d + 3 * d + 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("context", self.context),
            ("channels", self.channels),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Low-rank adapter pair for one weight matrix: W′ = W + B·A.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterTensors {
    /// r×d, Gaussian-initialized.
    pub a: Tensor,
    /// d×r, zero-initialized so a fresh adapter is a no-op.
    pub b: Tensor,
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Adapter on the attention output projection, if attached.
    pub adapter: Option<AdapterTensors>,
}

/// All weight tensors of the model (also reused as the gradient container).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub w_emb: Tensor,
    pub b_emb: Tensor,
    pub layers: Vec<LayerTensors>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    pub w_head: Tensor,
    pub b_head: Tensor,
}

/// Gradients mirror the parameter layout exactly.
pub type ModelGradients = ParamSet;

impl ParamSet {
    /// Zero tensors with the same shapes (and the same adapter layout).
    pub fn zeros_like(&self) -> ParamSet {
        fn z(t: &Tensor) -> Tensor {
            Tensor::zeros(t.rows, t.cols)
        }
        ParamSet {
            w_emb: z(&self.w_emb),
            b_emb: z(&self.b_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTensors {
                    ln1_gamma: z(&l.ln1_gamma),
                    ln1_beta: z(&l.ln1_beta),
                    wq: z(&l.wq),
                    bq: z(&l.bq),
                    wk: z(&l.wk),
                    bk: z(&l.bk),
                    wv: z(&l.wv),
                    bv: z(&l.bv),
                    wo: z(&l.wo),
                    bo: z(&l.bo),
                    ln2_gamma: z(&l.ln2_gamma),
                    ln2_beta: z(&l.ln2_beta),
                    w1: z(&l.w1),
                    b1: z(&l.b1),
                    w2: z(&l.w2),
                    b2: z(&l.b2),
                    adapter: l.adapter.as_ref().map(|ad| AdapterTensors {
                        a: z(&ad.a),
                        b: z(&ad.b),
                    }),
                })
                .collect(),
            lnf_gamma: z(&self.lnf_gamma),
            lnf_beta: z(&self.lnf_beta),
            w_head: z(&self.w_head),
            b_head: z(&self.b_head),
        }
    }

    /// All tensors in a fixed, documented order: embedding, then per layer
    /// (norms, attention, feed-forward, adapter), final norm, head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w_emb, &self.b_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_gamma,
                &l.ln1_beta,
                &l.wq,
                &l.bq,
                &l.wk,
                &l.bk,
                &l.wv,
                &l.bv,
                &l.wo,
                &l.bo,
                &l.ln2_gamma,
                &l.ln2_beta,
                &l.w1,
                &l.b1,
                &l.w2,
                &l.b2,
            ]);
            if let Some(ad) = &l.adapter {
                out.push(&ad.a);
                out.push(&ad.b);
            }
        }
        out.extend([&self.lnf_gamma, &self.lnf_beta, &self.w_head, &self.b_head]);
        out
    }

    /// Mutable counterpart of [`ParamSet::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.w_emb, &mut self.b_emb];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gamma);
            out.push(&mut l.ln1_beta);
            out.push(&mut l.wq);
            out.push(&mut l.bq);
            out.push(&mut l.wk);
            out.push(&mut l.bk);
            out.push(&mut l.wv);
            out.push(&mut l.bv);
            out.push(&mut l.wo);
            out.push(&mut l.bo);
            out.push(&mut l.ln2_gamma);
            out.push(&mut l.ln2_beta);
            out.push(&mut l.w1);
            out.push(&mut l.b1);
            out.push(&mut l.w2);
            out.push(&mut l.b2);
            if let Some(ad) = &mut l.adapter {
                out.push(&mut ad.a);
                out.push(&mut ad.b);
            }
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out.push(&mut self.w_head);
        out.push(&mut self.b_head);
        out
    }
}

/// Model weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    /// When true (set by [`apply_lora`]), base weights receive zero gradient;
    /// only adapters and the classification head train.
    pub frozen_base: bool,
    pub set: ParamSet,
}

const INIT_STD: f64 = 0.02;

impl ModelParameters {
    /// Seeded initialization: Gaussian base weights (std 0.02), unit norms,
    /// zero biases, and an all-zero classification head so the untrained
    /// model outputs exactly uniform probabilities.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let gauss = |r: usize, c: usize, rng: &mut ChaCha8Rng| Tensor::gaussian(r, c, INIT_STD, rng);
        let ones = |c: usize| Tensor {
            rows: 1,
            cols: c,
            data: vec![1.0; c],
        };
        let layers = (0..config.layers)
            .map(|_| LayerTensors {
                ln1_gamma: ones(d),
                ln1_beta: Tensor::zeros(1, d),
                wq: gauss(d, d, &mut rng),
                bq: Tensor::zeros(1, d),
                wk: gauss(d, d, &mut rng),
                bk: Tensor::zeros(1, d),
                wv: gauss(d, d, &mut rng),
                bv: Tensor::zeros(1, d),
                wo: gauss(d, d, &mut rng),
                bo: Tensor::zeros(1, d),
                ln2_gamma: ones(d),
                ln2_beta: Tensor::zeros(1, d),
                w1: gauss(d, config.d_ff, &mut rng),
                b1: Tensor::zeros(1, config.d_ff),
                w2: gauss(config.d_ff, d, &mut rng),
                b2: Tensor::zeros(1, d),
                adapter: None,
            })
            .collect();
        Ok(ModelParameters {
            config,
            frozen_base: false,
            set: ParamSet {
                w_emb: gauss(config.channels, d, &mut rng),
                b_emb: Tensor::zeros(1, d),
                layers,
                lnf_gamma: ones(d),
                lnf_beta: Tensor::zeros(1, d),
                w_head: Tensor::zeros(d, 3),
                b_head: Tensor::zeros(1, 3),
            },
        })
    }
}

/// Default adapter placement: the first two blocks (perception) and the last
/// block (reasoning), deduplicated for shallow stacks.
pub fn default_lora_targets(layers: usize) -> Vec<usize> {
    let mut t = vec![0];
    if layers > 1 {
        t.push(1);
    }
    if layers > 2 {
        t.push(layers - 1);
    }
    t
}

/// Attach low-rank adapters (B zero, A Gaussian) to the attention output
/// projection of `target_layers` and freeze the base.
pub fn apply_lora(
    mut params: ModelParameters,
    rank: usize,
    target_layers: &[usize],
) -> Result<ModelParameters> {
    let d = params.config.d_model;
    if rank == 0 || rank > d {
        return Err(Error::Config(format!(
            "adapter rank must lie in 1..={d}, got {rank}"
        )));
    }
    for &t in target_layers {
        if t >= params.config.layers {
            return Err(Error::Config(format!(
                "adapter target layer {t} out of range (model has {} layers)",
                params.config.layers
            )));
        }
    }
    // Distinct stream from base init so adding adapters never perturbs it.
    let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed ^ 0x4c6f_5261);
    for &t in target_layers {
        params.set.layers[t].adapter = Some(AdapterTensors {
            a: Tensor::gaussian(rank, d, INIT_STD, &mut rng),
            b: Tensor::zeros(d, rank),
        });
    }
    params.frozen_base = true;
    Ok(params)
}

/// Softmax output of the 3-class head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProbabilities {
    p: [f64; 3],
}

impl ClassProbabilities {
    pub fn new(p: [f64; 3]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::OutOfRange(format!(
                "class probabilities must be in [0,1] and sum to 1, got {p:?}"
            )));
        }
        Ok(ClassProbabilities { p })
    }

    pub fn probs(&self) -> [f64; 3] {
        self.p
    }

    pub fn prob(&self, label: ActionLabel) -> f64 {
        self.p[label.index()]
    }

    /// Argmax with exact ties resolved to Hold (the conservative action).
    pub fn argmax_action(&self) -> ActionLabel {
        let [b, s, h] = self.p;
        if b > s && b > h {
            ActionLabel::Buy
        } else if s > b && s > h {
            ActionLabel::Sell
        } else {
            ActionLabel::Hold
        }
    }
}

/// Whether a forward pass samples dropout. Training passes draw their
/// dropout noise from the provided stream.
pub enum ForwardMode<'a> {
    Inference,
    Train { rng: &'a mut ChaCha8Rng },
}

struct LayerCache {
    xhat1: Tensor,
    rstd1: Vec<f64>,
    y1: Tensor,
    q_rot: Tensor,
    k_rot: Tensor,
    v: Tensor,
    /// Per head: masked pre-softmax scores (lower triangle valid).
    scores: Vec<Tensor>,
    /// Per head: post-softmax attention weights (pre-dropout).
    att: Vec<Tensor>,
    /// Per head: dropout retention mask (scaled), if training.
    att_mask: Option<Vec<Tensor>>,
    heads_out: Tensor,
    adapter_z: Option<Tensor>,
    attn_out_mask: Option<Tensor>,
    xhat2: Tensor,
    rstd2: Vec<f64>,
    y2: Tensor,
    z1: Tensor,
    g: Tensor,
    ff_mask: Option<Tensor>,
}

/// Every intermediate needed for the backward pass plus the per-position
/// representations used by the causality probes.
pub struct ForwardCache {
    x: Tensor,
    layers: Vec<LayerCache>,
    xhatf: Tensor,
    rstdf: Vec<f64>,
    hidden: Tensor,
    probs: ClassProbabilities,
}

impl ForwardCache {
    /// Final per-position representations (T×d_model, after the last norm).
    pub fn hidden_states(&self) -> &Tensor {
        &self.hidden
    }

    /// Masked pre-softmax attention scores of one head (T×T; entries above
    /// the diagonal are -inf).
    pub fn attention_scores(&self, layer: usize, head: usize) -> &Tensor {
        &self.layers[layer].scores[head]
    }

    pub fn probabilities(&self) -> ClassProbabilities {
        self.probs
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor { rows, cols, data }
}

fn apply_mask(x: &mut Tensor, mask: &Tensor) {
    for (v, m) in x.data.iter_mut().zip(&mask.data) {
        *v *= m;
    }
}

/// Run the model over one window. Returns class probabilities and the full
/// activation cache for [`backward_gradients`].
pub fn forward(
    params: &ModelParameters,
    window: &TokenWindow,
    mode: ForwardMode,
) -> Result<(ClassProbabilities, ForwardCache)> {
    let cfg = &params.config;
    if window.tokens.len() != cfg.context {
        return Err(Error::Shape(format!(
            "window has {} tokens, model expects {}",
            window.tokens.len(),
            cfg.context
        )));
    }
    let t_len = cfg.context;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut drop_rng = match mode {
        ForwardMode::Inference => None,
        ForwardMode::Train { rng } => {
            if cfg.dropout > 0.0 {
                Some(rng)
            } else {
                None
            }
        }
    };

    let mut x = Tensor::zeros(t_len, cfg.channels);
    for (i, tok) in window.tokens.iter().enumerate() {
        let arr = tok.as_array();
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite input channel in token {i}"
            )));
        }
        x.row_mut(i).copy_from_slice(&arr);
    }

    let mut h = matmul(&x, &params.set.w_emb);
    add_bias(&mut h, &params.set.b_emb);

    let mut layer_caches = Vec::with_capacity(cfg.layers);
    for layer in &params.set.layers {
        let x_in = h.clone();
        let (y1, xhat1, rstd1) = layernorm_forward(&x_in, &layer.ln1_gamma, &layer.ln1_beta);

        let mut q = matmul(&y1, &layer.wq);
        add_bias(&mut q, &layer.bq);
        let mut k = matmul(&y1, &layer.wk);
        add_bias(&mut k, &layer.bk);
        let mut v = matmul(&y1, &layer.wv);
        add_bias(&mut v, &layer.bv);
        rope_apply(&mut q, cfg.heads, dh, 1.0);
        rope_apply(&mut k, cfg.heads, dh, 1.0);

        let mut scores = Vec::with_capacity(cfg.heads);
        let mut att = Vec::with_capacity(cfg.heads);
        let mut att_mask: Option<Vec<Tensor>> = drop_rng.as_mut().map(|_| Vec::new());
        let mut heads_out = Tensor::zeros(t_len, d);
        for head in 0..cfg.heads {
            let off = head * dh;
            let mut s = Tensor {
                rows: t_len,
                cols: t_len,
                data: vec![f64::NEG_INFINITY; t_len * t_len],
            };
            for i in 0..t_len {
                for j in 0..=i {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q.at(i, off + c) * k.at(j, off + c);
                    }
                    *s.at_mut(i, j) = dot * scale;
                }
            }
            // Row-wise softmax over the causal prefix.
            let mut a = Tensor::zeros(t_len, t_len);
            for i in 0..t_len {
                let row_max = (0..=i).fold(f64::NEG_INFINITY, |m, j| m.max(s.at(i, j)));
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (s.at(i, j) - row_max).exp();
                    *a.at_mut(i, j) = e;
                    z += e;
                }
                for j in 0..=i {
                    *a.at_mut(i, j) /= z;
                }
            }
            let mut a_eff = a.clone();
            if let Some(rng) = drop_rng.as_mut() {
                let m = dropout_mask(t_len, t_len, cfg.dropout, rng);
                apply_mask(&mut a_eff, &m);
                att_mask.as_mut().unwrap().push(m);
            }
            for i in 0..t_len {
                for j in 0..=i {
                    let w = a_eff.at(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        *heads_out.at_mut(i, off + c) += w * v.at(j, off + c);
                    }
                }
            }
            scores.push(s);
            att.push(a);
        }

        let mut attn_out = matmul(&heads_out, &layer.wo);
        add_bias(&mut attn_out, &layer.bo);
        let adapter_z = layer.adapter.as_ref().map(|ad| {
            let z = matmul(&heads_out, &ad.b); // T×r
            attn_out.add_assign(&matmul(&z, &ad.a));
            z
        });
        let attn_out_mask = drop_rng.as_mut().map(|rng| {
            let m = dropout_mask(t_len, d, cfg.dropout, rng);
            apply_mask(&mut attn_out, &m);
            m
        });

        let mut x_mid = x_in.clone();
        x_mid.add_assign(&attn_out);

        let (y2, xhat2, rstd2) = layernorm_forward(&x_mid, &layer.ln2_gamma, &layer.ln2_beta);
        let mut z1 = matmul(&y2, &layer.w1);
        add_bias(&mut z1, &layer.b1);
        let mut g = z1.clone();
        for val in &mut g.data {
            *val = gelu(*val);
        }
        let mut ff = matmul(&g, &layer.w2);
        add_bias(&mut ff, &layer.b2);
        let ff_mask = drop_rng.as_mut().map(|rng| {
            let m = dropout_mask(t_len, d, cfg.dropout, rng);
            apply_mask(&mut ff, &m);
            m
        });

        let mut x_out = x_mid.clone();
        x_out.add_assign(&ff);
        h = x_out;

        layer_caches.push(LayerCache {
            xhat1,
            rstd1,
            y1,
            q_rot: q,
            k_rot: k,
            v,
            scores,
            att,
            att_mask,
            heads_out,
            adapter_z,
            attn_out_mask,
            xhat2,
            rstd2,
            y2,
            z1,
            g,
            ff_mask,
        });
    }

    let (hidden, xhatf, rstdf) = layernorm_forward(&h, &params.set.lnf_gamma, &params.set.lnf_beta);
    let last = hidden.row(t_len - 1);
    let mut logits = [0.0f64; 3];
    for c in 0..3 {
        let mut s = params.set.b_head.at(0, c);
        for j in 0..d {
            s += last[j] * params.set.w_head.at(j, c);
        }
        logits[c] = s;
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(format!(
            "non-finite logits {logits:?}"
        )));
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    let probs = ClassProbabilities::new([exp[0] / z, exp[1] / z, exp[2] / z])?;

    Ok((
        probs,
        ForwardCache {
            x,
            layers: layer_caches,
            xhatf,
            rstdf,
            hidden,
            probs,
        },
    ))
}

/// Asymmetric cross-entropy: −w_g · ln(ĝ_g), with ĝ floored at
/// [`PROB_FLOOR`] so the loss stays finite.
pub fn weighted_ce_loss(
    probs: &ClassProbabilities,
    label: ActionLabel,
    weights: &LossWeights,
) -> f64 {
    -weights.w[label.index()] * probs.prob(label).max(PROB_FLOOR).ln()
}

/// Analytic gradients of [`weighted_ce_loss`] ∘ [`forward`] for every
/// parameter tensor. With a frozen base, non-trainable gradients are
/// identically zero.
pub fn backward_gradients(
    params: &ModelParameters,
    cache: &ForwardCache,
    label: ActionLabel,
    weights: &LossWeights,
) -> Result<ModelGradients> {
    let cfg = &params.config;
    let t_len = cfg.context;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    if cache.hidden.rows != t_len
        || cache.hidden.cols != d
        || cache.layers.len() != cfg.layers
    {
        return Err(Error::Shape(
            "forward cache does not match the model configuration".into(),
        ));
    }

    let mut grads = params.set.zeros_like();

    // Loss -> logits. Exact for the floored loss: zero gradient if floored.
    let p = cache.probs.probs();
    let w = weights.w[label.index()];
    let mut dlogits = [0.0f64; 3];
    if p[label.index()] > PROB_FLOOR {
        for c in 0..3 {
            let indicator = if c == label.index() { 1.0 } else { 0.0 };
            dlogits[c] = w * (p[c] - indicator);
        }
    }

    // Head.
    let last = cache.hidden.row(t_len - 1);
    for c in 0..3 {
        *grads.b_head.at_mut(0, c) += dlogits[c];
        for j in 0..d {
            *grads.w_head.at_mut(j, c) += last[j] * dlogits[c];
        }
    }
    let mut d_hidden = Tensor::zeros(t_len, d);
    for j in 0..d {
        let mut s = 0.0;
        for c in 0..3 {
            s += dlogits[c] * params.set.w_head.at(j, c);
        }
        *d_hidden.at_mut(t_len - 1, j) = s;
    }

    // Final norm.
    let mut dh_stream = layernorm_backward(
        &d_hidden,
        &cache.xhatf,
        &cache.rstdf,
        &params.set.lnf_gamma,
        &mut grads.lnf_gamma,
        &mut grads.lnf_beta,
    );

    for (li, layer) in params.set.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];
        let d_x_out = dh_stream; // gradient w.r.t. this block's output

        // x_out = x_mid + dropout(ff)
        let mut d_ff = d_x_out.clone();
        if let Some(m) = &lc.ff_mask {
            apply_mask(&mut d_ff, m);
        }
        // ff = g·w2 + b2
        lg.w2.add_assign(&matmul_tn(&lc.g, &d_ff));
        for i in 0..t_len {
            for j in 0..d {
                *lg.b2.at_mut(0, j) += d_ff.at(i, j);
            }
        }
        let mut d_g = matmul_nt(&d_ff, &layer.w2);
        // g = gelu(z1)
        for (dg, z) in d_g.data.iter_mut().zip(&lc.z1.data) {
            *dg *= gelu_grad(*z);
        }
        // z1 = y2·w1 + b1
        lg.w1.add_assign(&matmul_tn(&lc.y2, &d_g));
        for i in 0..t_len {
            for j in 0..cfg.d_ff {
                *lg.b1.at_mut(0, j) += d_g.at(i, j);
            }
        }
        let d_y2 = matmul_nt(&d_g, &layer.w1);
        let mut d_x_mid = layernorm_backward(
            &d_y2,
            &lc.xhat2,
            &lc.rstd2,
            &layer.ln2_gamma,
            &mut lg.ln2_gamma,
            &mut lg.ln2_beta,
        );
        d_x_mid.add_assign(&d_x_out); // residual branch

        // x_mid = x_in + dropout(attn_out)
        let mut d_attn_out = d_x_mid.clone();
        if let Some(m) = &lc.attn_out_mask {
            apply_mask(&mut d_attn_out, m);
        }
        // attn_out = heads_out·wo + bo (+ z·A with z = heads_out·B)
        let mut d_heads_out = matmul_nt(&d_attn_out, &layer.wo);
        lg.wo.add_assign(&matmul_tn(&lc.heads_out, &d_attn_out));
        for i in 0..t_len {
            for j in 0..d {
                *lg.bo.at_mut(0, j) += d_attn_out.at(i, j);
            }
        }
        if let (Some(ad), Some(z)) = (&layer.adapter, &lc.adapter_z) {
            let adg = lg.adapter.as_mut().expect("gradient adapter slot");
            adg.a.add_assign(&matmul_tn(z, &d_attn_out));
            let d_z = matmul_nt(&d_attn_out, &ad.a);
            adg.b.add_assign(&matmul_tn(&lc.heads_out, &d_z));
            d_heads_out.add_assign(&matmul_nt(&d_z, &ad.b));
        }

        // Attention heads.
        let mut d_q_rot = Tensor::zeros(t_len, d);
        let mut d_k_rot = Tensor::zeros(t_len, d);
        let mut d_v = Tensor::zeros(t_len, d);
        for head in 0..cfg.heads {
            let off = head * dh;
            let a = &lc.att[head];
            // Effective (post-dropout) weights were a ⊙ mask.
            let mask = lc.att_mask.as_ref().map(|m| &m[head]);
            // d a_eff and dV.
            let mut d_a = Tensor::zeros(t_len, t_len);
            for i in 0..t_len {
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += d_heads_out.at(i, off + c) * lc.v.at(j, off + c);
                    }
                    let a_eff = a.at(i, j) * mask.map_or(1.0, |m| m.at(i, j));
                    if a_eff != 0.0 {
                        for c in 0..dh {
                            *d_v.at_mut(j, off + c) += a_eff * d_heads_out.at(i, off + c);
                        }
                    }
                    // Chain through dropout.
                    *d_a.at_mut(i, j) = s * mask.map_or(1.0, |m| m.at(i, j));
                }
            }
            // Softmax backward per causal row.
            for i in 0..t_len {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += d_a.at(i, j) * a.at(i, j);
                }
                for j in 0..=i {
                    let ds = a.at(i, j) * (d_a.at(i, j) - dot);
                    // s = q·k·scale
                    for c in 0..dh {
                        *d_q_rot.at_mut(i, off + c) += ds * scale * lc.k_rot.at(j, off + c);
                        *d_k_rot.at_mut(j, off + c) += ds * scale * lc.q_rot.at(i, off + c);
                    }
                }
            }
        }
        // Undo the rotary rotation (orthogonal, so transpose = negative angle).
        rope_apply(&mut d_q_rot, cfg.heads, dh, -1.0);
        rope_apply(&mut d_k_rot, cfg.heads, dh, -1.0);

        lg.wq.add_assign(&matmul_tn(&lc.y1, &d_q_rot));
        lg.wk.add_assign(&matmul_tn(&lc.y1, &d_k_rot));
        lg.wv.add_assign(&matmul_tn(&lc.y1, &d_v));
        for i in 0..t_len {
            for j in 0..d {
                *lg.bq.at_mut(0, j) += d_q_rot.at(i, j);
                *lg.bk.at_mut(0, j) += d_k_rot.at(i, j);
                *lg.bv.at_mut(0, j) += d_v.at(i, j);
            }
        }
        let mut d_y1 = matmul_nt(&d_q_rot, &layer.wq);
        d_y1.add_assign(&matmul_nt(&d_k_rot, &layer.wk));
        d_y1.add_assign(&matmul_nt(&d_v, &layer.wv));

        let mut d_x_in = layernorm_backward(
            &d_y1,
            &lc.xhat1,
            &lc.rstd1,
            &layer.ln1_gamma,
            &mut lg.ln1_gamma,
            &mut lg.ln1_beta,
        );
        d_x_in.add_assign(&d_x_mid); // residual branch
        dh_stream = d_x_in;
    }

    // Embedding.
    grads.w_emb.add_assign(&matmul_tn(&cache.x, &dh_stream));
    for i in 0..t_len {
        for j in 0..d {
            *grads.b_emb.at_mut(0, j) += dh_stream.at(i, j);
        }
    }

    if params.frozen_base {
        freeze_base_gradients(&mut grads);
    }
    Ok(grads)
}

/// Zero every gradient except adapters and the classification head.
fn freeze_base_gradients(grads: &mut ModelGradients) {
    let zero = |t: &mut Tensor| t.data.iter_mut().for_each(|v| *v = 0.0);
    zero(&mut grads.w_emb);
    zero(&mut grads.b_emb);
    for l in &mut grads.layers {
        zero(&mut l.ln1_gamma);
        zero(&mut l.ln1_beta);
        zero(&mut l.wq);
        zero(&mut l.bq);
        zero(&mut l.wk);
        zero(&mut l.bk);
        zero(&mut l.wv);
        zero(&mut l.bv);
        zero(&mut l.wo);
        zero(&mut l.bo);
        zero(&mut l.ln2_gamma);
        zero(&mut l.ln2_beta);
        zero(&mut l.w1);
        zero(&mut l.b1);
        zero(&mut l.w2);
        zero(&mut l.b2);
    }
    zero(&mut grads.lnf_gamma);
    zero(&mut grads.lnf_beta);
}

/// Inference helper: argmax action (ties → Hold) plus the probabilities.
pub fn predict_action(
    params: &ModelParameters,
    window: &TokenWindow,
) -> Result<(ActionLabel, ClassProbabilities)> {
    let (probs, _) = forward(params, window, ForwardMode::Inference)?;
    Ok((probs.argmax_action(), probs))
}
