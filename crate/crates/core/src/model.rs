//! One-block token classifier built around suppressed self-attention.
//!
//! Each sample is `phi` local tokens of width `input_dim`. Tokens are embedded
//! linearly, a learned global token is prepended as row 0, and one attention
//! block computes `softmax((Q Kᵀ − S) / √d) V` where the suppression matrix `S`
//! leaves each token free to attend only to itself and to the global token.
//! The block output is projected back to the embedding width and added to the
//! residual stream; the head reads the mean of all token rows.
//!
//! Gradients are derived by hand; [`gradcheck`] compares them with central
//! finite differences of the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{add_into, Matrix};
use crate::param::{BinaryMask, ParamVector, Segment};

pub const SEG_EMBED_W: &str = "embed.weight";
pub const SEG_EMBED_B: &str = "embed.bias";
pub const SEG_GLOBAL: &str = "global_token";
pub const SEG_WQ: &str = "wq";
pub const SEG_WK: &str = "wk";
pub const SEG_WV: &str = "wv";
pub const SEG_PROJ: &str = "proj";
pub const SEG_HEAD_W: &str = "head.weight";
pub const SEG_HEAD_B: &str = "head.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenModelConfig {
    /// Number of local tokens per sample.
    pub phi: usize,
    pub d_model: usize,
    /// Width of Q/K/V; also the `d` in the `√d` scaling.
    pub d_attn: usize,
    pub n_classes: usize,
    #[serde(rename = "lambda")]
    pub lambda_suppress: f64,
    pub input_dim: usize,
}

impl Default for TokenModelConfig {
    fn default() -> Self {
        Self {
            phi: 4,
            d_model: 16,
            d_attn: 16,
            n_classes: 5,
            lambda_suppress: 1e8,
            input_dim: 8,
        }
    }
}

impl TokenModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model.phi", self.phi),
            ("model.d_model", self.d_model),
            ("model.d_attn", self.d_attn),
            ("model.n_classes", self.n_classes),
            ("model.input_dim", self.input_dim),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.lambda_suppress > 0.0 && self.lambda_suppress.is_finite()) {
            return Err(Error::config("model.lambda", "must be a positive finite number"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.phi + 1
    }

    pub fn layout(&self) -> Vec<Segment> {
        let sizes = [
            (SEG_EMBED_W, self.input_dim * self.d_model),
            (SEG_EMBED_B, self.d_model),
            (SEG_GLOBAL, self.d_model),
            (SEG_WQ, self.d_model * self.d_attn),
            (SEG_WK, self.d_model * self.d_attn),
            (SEG_WV, self.d_model * self.d_attn),
            (SEG_PROJ, self.d_attn * self.d_model),
            (SEG_HEAD_W, self.d_model * self.n_classes),
            (SEG_HEAD_B, self.n_classes),
        ];
        let mut offset = 0;
        sizes
            .iter()
            .map(|&(name, len)| {
                let seg = Segment {
                    name: name.to_string(),
                    offset,
                    len,
                };
                offset += len;
                seg
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|s| s.len).sum()
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::new(vec![0.0; self.param_count()], self.layout()).expect("layout tiles")
    }

    /// Gaussian init scaled by `1/√fan_in`; biases start at zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.zero_params();
        let fan_in = [
            (SEG_EMBED_W, self.input_dim),
            (SEG_GLOBAL, self.d_model),
            (SEG_WQ, self.d_model),
            (SEG_WK, self.d_model),
            (SEG_WV, self.d_model),
            (SEG_PROJ, self.d_attn),
            (SEG_HEAD_W, self.d_model),
        ];
        for (name, fan) in fan_in {
            let normal = Normal::new(0.0, 1.0 / (fan as f64).sqrt()).expect("positive std");
            for v in params.segment_mut(name).expect("segment exists") {
                *v = normal.sample(&mut rng);
            }
        }
        params
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        check_len("model parameters", params.len(), self.param_count())
    }
}

/// Samples of `phi × input_dim` token features with class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub phi: usize,
    pub input_dim: usize,
    /// `sample_count × phi × input_dim`, row-major.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(phi: usize, input_dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        check_len("batch features", features.len(), labels.len() * phi * input_dim)?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("batch features must be finite"));
        }
        Ok(Self {
            phi,
            input_dim,
            features,
            labels,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.phi * self.input_dim;
        &self.features[i * w..(i + 1) * w]
    }

    /// Samples `[start, end)` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        let w = self.phi * self.input_dim;
        Batch {
            phi: self.phi,
            input_dim: self.input_dim,
            features: self.features[start * w..end * w].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    fn conforms(&self, config: &TokenModelConfig) -> Result<()> {
        if self.phi != config.phi || self.input_dim != config.input_dim {
            return Err(Error::contract(format!(
                "batch tokens {}x{} do not match model {}x{}",
                self.phi, self.input_dim, config.phi, config.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= config.n_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                config.n_classes
            )));
        }
        Ok(())
    }
}

/// `S[i][j] = 0` on the diagonal and in the first column, `lambda` elsewhere.
pub fn build_suppression_matrix(phi: usize, lambda: f64) -> Result<Matrix> {
    if phi == 0 {
        return Err(Error::contract("suppression matrix needs phi >= 1"));
    }
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::contract("suppression constant must be positive"));
    }
    let n = phi + 1;
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 1..n {
            if i != j {
                s.set(i, j, lambda);
            }
        }
    }
    Ok(s)
}

/// Intermediate values of one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention weights.
    pub weights: Matrix,
    pub output: Matrix,
}

/// `softmax((Q Kᵀ − S) / √d) V` with `Q = M Wq`, `K = M Wk`, `V = M Wv`.
pub fn attend(tokens: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, suppression: &Matrix) -> Result<AttentionCache> {
    let n = tokens.rows();
    if suppression.rows() != n || suppression.cols() != n {
        return Err(Error::contract(format!(
            "suppression matrix is {}x{}, tokens need {n}x{n}",
            suppression.rows(),
            suppression.cols()
        )));
    }
    let q = tokens.matmul(wq);
    let k = tokens.matmul(wk);
    let v = tokens.matmul(wv);
    let scale = (wq.cols() as f64).sqrt();
    let mut weights = q.matmul_t(&k);
    for i in 0..n {
        let row = weights.row_mut(i);
        for (z, &s) in row.iter_mut().zip(suppression.row(i)) {
            *z = (*z - s) / scale;
        }
        softmax_in_place(row).map_err(|_| Error::Numeric(format!("non-finite attention logits in row {i}")))?;
    }
    let output = weights.matmul(&v);
    if let Some(i) = (0..n).find(|&i| output.row(i).iter().any(|x| !x.is_finite())) {
        return Err(Error::Numeric(format!("non-finite attention output in row {i}")));
    }
    Ok(AttentionCache {
        q,
        k,
        v,
        weights,
        output,
    })
}

/// Attention over a `(phi+1) × d_model` token matrix using the Q/K/V weights in `params`.
pub fn attention_forward(
    tokens: &Matrix,
    params: &ParamVector,
    config: &TokenModelConfig,
    suppression: &Matrix,
) -> Result<AttentionCache> {
    config.check_params(params)?;
    if tokens.rows() != config.tokens() || tokens.cols() != config.d_model {
        return Err(Error::contract("token matrix shape does not match config"));
    }
    let w = Weights::view(params, config)?;
    attend(tokens, &w.wq, &w.wk, &w.wv, suppression)
}

fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(());
    }
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in row.iter_mut() {
        *z /= sum;
    }
    Ok(())
}

struct Weights {
    embed_w: Matrix,
    embed_b: Vec<f64>,
    global: Vec<f64>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    proj: Matrix,
    head_w: Matrix,
    head_b: Vec<f64>,
}

impl Weights {
    fn view(params: &ParamVector, c: &TokenModelConfig) -> Result<Self> {
        let seg = |name: &str| {
            params
                .segment(name)
                .ok_or_else(|| Error::contract(format!("parameter vector lacks segment `{name}`")))
        };
        Ok(Self {
            embed_w: Matrix::from_slice(c.input_dim, c.d_model, seg(SEG_EMBED_W)?)?,
            embed_b: seg(SEG_EMBED_B)?.to_vec(),
            global: seg(SEG_GLOBAL)?.to_vec(),
            wq: Matrix::from_slice(c.d_model, c.d_attn, seg(SEG_WQ)?)?,
            wk: Matrix::from_slice(c.d_model, c.d_attn, seg(SEG_WK)?)?,
            wv: Matrix::from_slice(c.d_model, c.d_attn, seg(SEG_WV)?)?,
            proj: Matrix::from_slice(c.d_attn, c.d_model, seg(SEG_PROJ)?)?,
            head_w: Matrix::from_slice(c.d_model, c.n_classes, seg(SEG_HEAD_W)?)?,
            head_b: seg(SEG_HEAD_B)?.to_vec(),
        })
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SampleCache {
    pub inputs: Matrix,
    pub tokens: Matrix,
    pub attention: AttentionCache,
    pub pooled: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `sample_count × n_classes`.
    pub logits: Matrix,
    pub caches: Vec<SampleCache>,
}

pub fn model_forward(batch: &Batch, params: &ParamVector, config: &TokenModelConfig) -> Result<ForwardOutput> {
    config.check_params(params)?;
    batch.conforms(config)?;
    let w = Weights::view(params, config)?;
    let s = build_suppression_matrix(config.phi, config.lambda_suppress)?;
    forward_with(batch, &w, &s, config)
}

fn forward_with(batch: &Batch, w: &Weights, s: &Matrix, c: &TokenModelConfig) -> Result<ForwardOutput> {
    let n = c.tokens();
    let mut logits = Matrix::zeros(batch.sample_count(), c.n_classes);
    let mut caches = Vec::with_capacity(batch.sample_count());
    for idx in 0..batch.sample_count() {
        let inputs = Matrix::from_slice(c.phi, c.input_dim, batch.sample(idx))?;
        let local = inputs.matmul(&w.embed_w);
        let mut tokens = Matrix::zeros(n, c.d_model);
        tokens.row_mut(0).copy_from_slice(&w.global);
        for r in 0..c.phi {
            let row = tokens.row_mut(r + 1);
            row.copy_from_slice(local.row(r));
            add_into(row, &w.embed_b);
        }
        let attention = attend(&tokens, &w.wq, &w.wk, &w.wv, s)?;
        let mut residual = attention.output.matmul(&w.proj);
        residual.add_assign(&tokens);
        let mut pooled = vec![0.0; c.d_model];
        for r in 0..n {
            add_into(&mut pooled, residual.row(r));
        }
        pooled.iter_mut().for_each(|x| *x /= n as f64);
        let out = logits.row_mut(idx);
        out.copy_from_slice(&w.head_b);
        for (i, &h) in pooled.iter().enumerate() {
            add_into(out, &scaled(w.head_w.row(i), h));
        }
        caches.push(SampleCache {
            inputs,
            tokens,
            attention,
            pooled,
        });
    }
    Ok(ForwardOutput { logits, caches })
}

fn scaled(row: &[f64], s: f64) -> Vec<f64> {
    row.iter().map(|x| x * s).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// Mean cross-entropy of a batch.
pub fn loss(batch: &Batch, params: &ParamVector, config: &TokenModelConfig) -> Result<f64> {
    let out = model_forward(batch, params, config)?;
    mean_cross_entropy(&out.logits, &batch.labels)
}

fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_softmax(logits.row(i))[y])
        .sum();
    let loss = total / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// Mean cross-entropy and its full gradient. Entries set in `freeze` are
/// zeroed after the gradient is computed.
pub fn loss_and_grad(
    batch: &Batch,
    params: &ParamVector,
    config: &TokenModelConfig,
    freeze: Option<&BinaryMask>,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::contract("loss_and_grad on an empty batch"));
    }
    config.check_params(params)?;
    batch.conforms(config)?;
    if let Some(mask) = freeze {
        check_len("freeze mask", mask.len(), params.len())?;
    }
    let w = Weights::view(params, config)?;
    let s = build_suppression_matrix(config.phi, config.lambda_suppress)?;
    let fwd = forward_with(batch, &w, &s, config)?;
    let loss = mean_cross_entropy(&fwd.logits, &batch.labels)?;

    let c = config;
    let n = c.tokens();
    let inv_b = 1.0 / batch.sample_count() as f64;
    let inv_n = 1.0 / n as f64;
    let scale = (c.d_attn as f64).sqrt();

    let mut g_embed_w = Matrix::zeros(c.input_dim, c.d_model);
    let mut g_embed_b = vec![0.0; c.d_model];
    let mut g_global = vec![0.0; c.d_model];
    let mut g_wq = Matrix::zeros(c.d_model, c.d_attn);
    let mut g_wk = Matrix::zeros(c.d_model, c.d_attn);
    let mut g_wv = Matrix::zeros(c.d_model, c.d_attn);
    let mut g_proj = Matrix::zeros(c.d_attn, c.d_model);
    let mut g_head_w = Matrix::zeros(c.d_model, c.n_classes);
    let mut g_head_b = vec![0.0; c.n_classes];

    for (idx, cache) in fwd.caches.iter().enumerate() {
        let mut dlogits: Vec<f64> = log_softmax(fwd.logits.row(idx)).iter().map(|l| l.exp()).collect();
        dlogits[batch.labels[idx]] -= 1.0;
        dlogits.iter_mut().for_each(|d| *d *= inv_b);

        add_into(&mut g_head_b, &dlogits);
        let mut dpooled = vec![0.0; c.d_model];
        for i in 0..c.d_model {
            let h = cache.pooled[i];
            let gw = g_head_w.row_mut(i);
            for (g, &d) in gw.iter_mut().zip(&dlogits) {
                *g += h * d;
            }
            dpooled[i] = crate::linalg::dot(w.head_w.row(i), &dlogits);
        }

        // Mean pooling spreads the gradient evenly over every residual row.
        let mut dresidual = Matrix::zeros(n, c.d_model);
        for r in 0..n {
            dresidual.row_mut(r).copy_from_slice(&scaled(&dpooled, inv_n));
        }
        let att = &cache.attention;
        let mut dtokens = dresidual.clone();
        g_proj.add_assign(&att.output.t_matmul(&dresidual));
        let doutput = dresidual.matmul_t(&w.proj);

        let dweights = doutput.matmul_t(&att.v);
        let dv = att.weights.t_matmul(&doutput);
        let mut dlogit = Matrix::zeros(n, n);
        for i in 0..n {
            let a = att.weights.row(i);
            let da = dweights.row(i);
            let inner = crate::linalg::dot(a, da);
            for (j, z) in dlogit.row_mut(i).iter_mut().enumerate() {
                *z = a[j] * (da[j] - inner) / scale;
            }
        }
        let dq = dlogit.matmul(&att.k);
        let dk = dlogit.t_matmul(&att.q);

        g_wq.add_assign(&cache.tokens.t_matmul(&dq));
        g_wk.add_assign(&cache.tokens.t_matmul(&dk));
        g_wv.add_assign(&cache.tokens.t_matmul(&dv));
        dtokens.add_assign(&dq.matmul_t(&w.wq));
        dtokens.add_assign(&dk.matmul_t(&w.wk));
        dtokens.add_assign(&dv.matmul_t(&w.wv));

        add_into(&mut g_global, dtokens.row(0));
        let mut dlocal = Matrix::zeros(c.phi, c.d_model);
        for r in 0..c.phi {
            dlocal.row_mut(r).copy_from_slice(dtokens.row(r + 1));
            add_into(&mut g_embed_b, dtokens.row(r + 1));
        }
        g_embed_w.add_assign(&cache.inputs.t_matmul(&dlocal));
    }

    let mut grad = Vec::with_capacity(params.len());
    grad.extend_from_slice(g_embed_w.data());
    grad.extend_from_slice(&g_embed_b);
    grad.extend_from_slice(&g_global);
    grad.extend_from_slice(g_wq.data());
    grad.extend_from_slice(g_wk.data());
    grad.extend_from_slice(g_wv.data());
    grad.extend_from_slice(g_proj.data());
    grad.extend_from_slice(g_head_w.data());
    grad.extend_from_slice(&g_head_b);
    if let Some(mask) = freeze {
        for (g, &frozen) in grad.iter_mut().zip(mask.as_slice()) {
            if frozen {
                *g = 0.0;
            }
        }
    }
    Ok((loss, params.with_values(grad)?))
}

/// `params − lr · grad`.
///
/// A zero learning rate is accepted and leaves the parameters untouched.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    check_len("sgd_step", params.len(), grad.len())?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!(
            "learning rate {lr} must be a non-negative finite number"
        )));
    }
    let values = params
        .values()
        .iter()
        .zip(grad.values())
        .map(|(p, g)| p - lr * g)
        .collect();
    params.with_values(values)
}

pub fn predict(batch: &Batch, params: &ParamVector, config: &TokenModelConfig) -> Result<Vec<usize>> {
    let out = model_forward(batch, params, config)?;
    Ok((0..batch.sample_count()).map(|i| argmax(out.logits.row(i))).collect())
}

pub fn accuracy(batch: &Batch, params: &ParamVector, config: &TokenModelConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("accuracy of an empty batch"));
    }
    let preds = predict(batch, params, config)?;
    let hits = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / batch.sample_count() as f64)
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_segment: String,
}

/// Per-entry relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used when comparing near-zero gradient entries.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Central-difference check of `grad` against the loss at `params`.
pub fn gradcheck(
    batch: &Batch,
    params: &ParamVector,
    config: &TokenModelConfig,
    grad: &ParamVector,
    step: f64,
) -> Result<GradCheckReport> {
    check_len("gradcheck", params.len(), grad.len())?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_segment: String::new(),
    };
    let mut probe = params.clone();
    for j in 0..params.len() {
        let orig = params.values()[j];
        probe.values_mut()[j] = orig + step;
        let up = loss(batch, &probe, config)?;
        probe.values_mut()[j] = orig - step;
        let down = loss(batch, &probe, config)?;
        probe.values_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(grad.values()[j], numeric, GRADCHECK_FLOOR);
        if err > report.max_rel_error || j == 0 {
            report.max_rel_error = err;
            report.worst_index = j;
        }
    }
    report.worst_segment = params.segment_of(report.worst_index).unwrap_or("?").to_string();
    Ok(report)
}

/// A random batch for the model's shape, features uniform in `[-1, 1)`.
pub fn random_batch(config: &TokenModelConfig, samples: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..samples * config.phi * config.input_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let labels = (0..samples).map(|_| rng.random_range(0..config.n_classes)).collect();
    Batch::new(config.phi, config.input_dim, features, labels).expect("shape by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TokenModelConfig {
        TokenModelConfig {
            phi: 3,
            d_model: 4,
            d_attn: 4,
            n_classes: 3,
            lambda_suppress: 1e8,
            input_dim: 2,
        }
    }

    #[test]
    fn suppression_matrix_examples() {
        let l = 7.0;
        let s = build_suppression_matrix(2, l).unwrap();
        assert_eq!(s.to_rows(), vec![vec![0.0, l, l], vec![0.0, 0.0, l], vec![0.0, l, 0.0]]);
        let s1 = build_suppression_matrix(1, l).unwrap();
        assert_eq!(s1.to_rows(), vec![vec![0.0, l], vec![0.0, 0.0]]);
        let s5 = build_suppression_matrix(5, l).unwrap();
        assert_eq!(s5.row(0).iter().filter(|&&x| x == 0.0).count(), 1);
        assert!(build_suppression_matrix(0, l).is_err());
        assert!(build_suppression_matrix(2, 0.0).is_err());
    }

    #[test]
    fn zero_tokens_give_zero_output() {
        let s = build_suppression_matrix(3, 1e8).unwrap();
        let m = Matrix::zeros(4, 1);
        let w = Matrix::from_vec(1, 1, vec![0.7]).unwrap();
        let att = attend(&m, &w, &w, &w, &s).unwrap();
        assert_eq!(att.weights.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert!(att.output.data().iter().all(|&x| x == 0.0));
        // row 2 splits evenly between the global token and itself
        assert_eq!(att.weights.row(2), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn two_surviving_entries() {
        // Q = K = V = ones(3,1) with M = ones and W = [[1]].
        let s = build_suppression_matrix(2, 1e8).unwrap();
        let m = Matrix::from_vec(3, 1, vec![1.0; 3]).unwrap();
        let w = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let att = attend(&m, &w, &w, &w, &s).unwrap();
        assert_eq!(att.weights.row(1), &[0.5, 0.5, 0.0]);
        assert_eq!(att.output.get(1, 0), 1.0);
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let c = TokenModelConfig {
            n_classes: 4,
            ..small()
        };
        let batch = random_batch(&c, 5, 1);
        let (l, _) = loss_and_grad(&batch, &c.zero_params(), &c, None).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let out = model_forward(&batch, &c.zero_params(), &c).unwrap();
        assert!(out.logits.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn head_bias_dominates_when_body_is_zero() {
        let c = TokenModelConfig {
            n_classes: 2,
            ..small()
        };
        let mut p = c.zero_params();
        p.segment_mut(SEG_HEAD_B).unwrap()[0] = 10.0;
        let batch = random_batch(&c, 8, 3);
        assert!(predict(&batch, &p, &c).unwrap().iter().all(|&y| y == 0));
    }

    #[test]
    fn full_freeze_zeroes_gradient() {
        let c = small();
        let p = c.init_params(4);
        let batch = random_batch(&c, 6, 4);
        let (_, g) = loss_and_grad(&batch, &p, &c, Some(&BinaryMask::ones(p.len()))).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let c = small();
        let p = c.init_params(11);
        let batch = random_batch(&c, 4, 12);
        let (_, g) = loss_and_grad(&batch, &p, &c, None).unwrap();
        let report = gradcheck(&batch, &p, &c, &g, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn sgd_examples() {
        let p = ParamVector::flat(vec![1.0, 2.0]).unwrap();
        let g = ParamVector::flat(vec![0.5, 0.0]).unwrap();
        assert_eq!(sgd_step(&p, &g, 1.0).unwrap().values(), &[0.5, 2.0]);
        let zero = ParamVector::zeros_like(&p);
        assert_eq!(sgd_step(&p, &zero, 0.3).unwrap(), p);
        let twice = sgd_step(&sgd_step(&p, &g, 0.5).unwrap(), &g, 0.5).unwrap();
        assert_eq!(twice, sgd_step(&p, &g, 1.0).unwrap());
        assert!(sgd_step(&p, &g, -1.0).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let c = small();
        let other = TokenModelConfig { phi: 2, ..small() };
        let batch = random_batch(&other, 2, 0);
        assert!(matches!(
            model_forward(&batch, &c.zero_params(), &c),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            loss_and_grad(&random_batch(&c, 0, 0), &c.zero_params(), &c, None),
            Err(Error::Contract(_))
        ));
    }
}
