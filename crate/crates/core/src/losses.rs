// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training objectives and their analytic gradients.
//!
//! Each term has a value-only function and a `*_grad` variant returning the
//! value together with the gradient with respect to its direct input.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{ForwardTrace, SaliencyStack, TraceGrads};
use crate::numeric::{log_sum_exp, softmax};

/// Norm guard for cosine similarity in the contrastive term.
const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EntropyReduction {
    /// Sum over spatial cells.
    #[default]
    Sum,
    /// Mean over spatial cells.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_ca: f64,
    pub lambda_e: f64,
    pub lambda_c: f64,
    pub gamma: f64,
    pub tau: f64,
    pub entropy_reduction: EntropyReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_ca: 1e4,
            lambda_e: 5.0,
            lambda_c: 0.0,
            gamma: 1.0,
            tau: 0.07,
            entropy_reduction: EntropyReduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_ca", self.lambda_ca),
            ("lambda_e", self.lambda_e),
            ("lambda_c", self.lambda_c),
        ] {
            ensure!(
                v.is_finite() && v >= 0.0,
                "{name} must be finite and non-negative, got {v}"
            );
        }
        ensure!(
            self.gamma.is_finite() && self.gamma > 0.0,
            "gamma must be positive"
        );
        ensure!(
            self.tau.is_finite() && self.tau > 0.0,
            "tau must be positive"
        );
        Ok(())
    }
}

pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    Ok(loss_ce_grad(logits, label)?.0)
}

/// Cross-entropy and `softmax(logits) - onehot(label)`.
pub fn loss_ce_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    ensure!(
        label < logits.len(),
        "label {label} out of range for {} classes",
        logits.len()
    );
    let value = (log_sum_exp(logits) - logits[label]).max(0.0);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((value, grad))
}

fn indicator(c: usize, concepts: &[usize]) -> Result<Vec<f64>> {
    let mut y = vec![0.0; c];
    for &i in concepts {
        ensure!(i < c, "concept {i} out of range for C = {c}");
        y[i] = 1.0;
    }
    Ok(y)
}

pub fn loss_ca(f: &[f64], concepts: &[usize], gamma: f64) -> Result<f64> {
    Ok(loss_ca_grad(f, concepts, gamma)?.0)
}

/// `mean_i |γ softmax(f)_i − γ softmax(𝟙)_i|` and its gradient in `f`.
pub fn loss_ca_grad(f: &[f64], concepts: &[usize], gamma: f64) -> Result<(f64, Vec<f64>)> {
    let c = f.len();
    let target = softmax(&indicator(c, concepts)?);
    let probs = softmax(f);
    let n = c as f64;
    let mut value = 0.0;
    let mut outer = vec![0.0; c];
    for i in 0..c {
        let diff = gamma * (probs[i] - target[i]);
        value += diff.abs();
        outer[i] = gamma * sign(diff) / n;
    }
    // softmax Jacobian: d p_i / d f_k = p_i (δ_ik − p_k)
    let mix: f64 = outer.iter().zip(&probs).map(|(g, p)| g * p).sum();
    let grad = probs
        .iter()
        .zip(&outer)
        .map(|(p, g)| p * (g - mix))
        .collect();
    Ok((value / n, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn loss_entropy(saliency: &SaliencyStack, reduction: EntropyReduction) -> f64 {
    loss_entropy_grad(saliency, reduction).0
}

/// Entropy (nats) of the per-cell softmax over concepts, reduced over cells.
pub fn loss_entropy_grad(
    saliency: &SaliencyStack,
    reduction: EntropyReduction,
) -> (f64, Array2<f64>) {
    let (c, cells) = saliency.maps.dim();
    let scale = match reduction {
        EntropyReduction::Sum => 1.0,
        EntropyReduction::Mean => 1.0 / cells as f64,
    };
    let mut grad = Array2::<f64>::zeros((c, cells));
    let mut total = 0.0;
    let mut column = vec![0.0; c];
    for p in 0..cells {
        for (i, v) in column.iter_mut().enumerate() {
            *v = saliency.maps[[i, p]];
        }
        let probs = softmax(&column);
        let h: f64 = -probs
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|q| q * q.ln())
            .sum::<f64>();
        total += h;
        for (i, q) in probs.iter().enumerate() {
            let log_q = if *q > 0.0 { q.ln() } else { 0.0 };
            grad[[i, p]] = -scale * q * (log_q + h);
        }
    }
    ((total * scale).max(0.0), grad)
}

fn cosine_and_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - cos * y / (nb * nb))
        .collect();
    (cos, ga, gb)
}

pub fn loss_contrastive(batch: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    loss_contrastive_grad(batch, labels, tau).0
}

/// Supervised InfoNCE over cosine similarities.
///
/// Each anchor with at least one same-label partner contributes the mean over
/// its positives of `−log(exp(sim_ij/τ) / Σ_{m≠i} exp(sim_im/τ))`; the loss is
/// the mean over such anchors, zero when there are none.
pub fn loss_contrastive_grad(
    batch: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
) -> (f64, Vec<Vec<f64>>) {
    let n = batch.len();
    let dim = batch.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; dim]; n];
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if n < 2 || anchors.is_empty() {
        return (0.0, grads);
    }
    let mut sims = vec![vec![0.0; n]; n];
    let mut dsims = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sims[i][j] = cosine_and_grads(&batch[i], &batch[j]).0;
            }
        }
    }
    let per_anchor = 1.0 / anchors.len() as f64;
    let mut total = 0.0;
    for &i in &anchors {
        let others: Vec<usize> = (0..n).filter(|&m| m != i).collect();
        let scaled: Vec<f64> = others.iter().map(|&m| sims[i][m] / tau).collect();
        let lse = log_sum_exp(&scaled);
        let weights = softmax(&scaled);
        let positives: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&j| labels[j] == labels[i])
            .collect();
        let np = positives.len() as f64;
        let term: f64 = positives
            .iter()
            .map(|&j| lse - sims[i][j] / tau)
            .sum::<f64>()
            / np;
        total += term;
        for (&m, w) in others.iter().zip(&weights) {
            let pos = (labels[m] == labels[i]) as u8 as f64;
            dsims[i][m] += per_anchor * (w - pos / np) / tau;
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i == j || dsims[i][j] == 0.0 {
                continue;
            }
            let (_, ga, gb) = cosine_and_grads(&batch[i], &batch[j]);
            for d in 0..dim {
                grads[i][d] += dsims[i][j] * ga[d];
                grads[j][d] += dsims[i][j] * gb[d];
            }
        }
    }
    ((total * per_anchor).max(0.0), grads)
}

/// Raw per-term values (batch means) and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ca: f64,
    pub entropy: f64,
    pub contrastive: f64,
    pub weighted_ce: f64,
    pub weighted_ca: f64,
    pub weighted_entropy: f64,
    pub weighted_contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name and value of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("ce", self.ce),
            ("ca", self.ca),
            ("entropy", self.entropy),
            ("contrastive", self.contrastive),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Ground truth needed by the loss for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub label: usize,
    pub concepts: &'a [usize],
}

/// Weighted batch loss. Terms with a zero weight are neither evaluated nor
/// differentiated. Per-sample terms are averaged over the batch.
pub fn total_loss(
    weights: &LossWeights,
    traces: &[ForwardTrace],
    targets: &[Target<'_>],
) -> Result<(LossBreakdown, Vec<TraceGrads>)> {
    ensure!(traces.len() == targets.len(), "trace/target count mismatch");
    let n = traces.len();
    let mut out = LossBreakdown::default();
    let mut grads = Vec::with_capacity(n);
    if n == 0 {
        return Ok((out, grads));
    }
    let inv = 1.0 / n as f64;
    for (t, y) in traces.iter().zip(targets) {
        let (c, cells) = t.saliency.maps.dim();
        let mut g = TraceGrads::zeros(c, cells, t.logits.len());
        if weights.lambda_ce > 0.0 {
            let (v, d) = loss_ce_grad(&t.logits, y.label)?;
            out.ce += v * inv;
            g.dlogits
                .iter_mut()
                .zip(d)
                .for_each(|(a, b)| *a += weights.lambda_ce * inv * b);
        }
        if weights.lambda_ca > 0.0 {
            let (v, d) = loss_ca_grad(&t.f, y.concepts, weights.gamma)?;
            out.ca += v * inv;
            g.df.iter_mut()
                .zip(d)
                .for_each(|(a, b)| *a += weights.lambda_ca * inv * b);
        }
        if weights.lambda_e > 0.0 {
            let (v, d) = loss_entropy_grad(&t.saliency, weights.entropy_reduction);
            out.entropy += v * inv;
            g.dsaliency.scaled_add(weights.lambda_e * inv, &d);
        }
        grads.push(g);
    }
    if weights.lambda_c > 0.0 {
        let fs: Vec<Vec<f64>> = traces.iter().map(|t| t.f.clone()).collect();
        let labels: Vec<usize> = targets.iter().map(|y| y.label).collect();
        let (v, d) = loss_contrastive_grad(&fs, &labels, weights.tau);
        out.contrastive = v;
        for (g, di) in grads.iter_mut().zip(d) {
            g.df.iter_mut()
                .zip(di)
                .for_each(|(a, b)| *a += weights.lambda_c * b);
        }
    }
    out.weighted_ce = weights.lambda_ce * out.ce;
    out.weighted_ca = weights.lambda_ca * out.ca;
    out.weighted_entropy = weights.lambda_e * out.entropy;
    out.weighted_contrastive = weights.lambda_c * out.contrastive;
    out.total = out.weighted_ce + out.weighted_ca + out.weighted_entropy + out.weighted_contrastive;
    Ok((out, grads))
}
