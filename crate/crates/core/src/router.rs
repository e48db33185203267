//! Top-k softmax routing, expert-major dispatch alignment and weighted combine.

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};

/// Padding marker in index buffers.
pub const SENTINEL: i32 = -1;

/// Per-token top-k expert choice, ids sorted by descending weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteResult {
    pub top_k: usize,
    /// `B * K`, row-major.
    pub topk_ids: Vec<usize>,
    /// `B * K`, row-major.
    pub topk_weights: Vec<f32>,
}

impl RouteResult {
    pub fn n_tokens(&self) -> usize {
        self.topk_ids.len() / self.top_k
    }

    pub fn ids(&self, token: usize) -> &[usize] {
        &self.topk_ids[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn weights(&self, token: usize) -> &[f32] {
        &self.topk_weights[token * self.top_k..(token + 1) * self.top_k]
    }
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let mut sum = 0.0f32;
    for &e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over each row of `logits` (`B x E`), then keep the `k` largest.
///
/// Ties go to the lower expert id. With `renormalize` the kept weights are
/// divided by their sum.
pub fn route(logits: &Matrix, k: usize, renormalize: bool) -> Result<RouteResult> {
    let e = logits.cols();
    if k == 0 || k > e {
        return Err(Error::config(format!("top_k {k} must be in 1..={e}")));
    }
    if logits.rows() == 0 {
        return Err(Error::shape("route needs at least one token"));
    }
    let mut topk_ids = Vec::with_capacity(logits.rows() * k);
    let mut topk_weights = Vec::with_capacity(logits.rows() * k);
    for t in 0..logits.rows() {
        let probs = softmax(logits.row(t));
        let mut order: Vec<usize> = (0..e).collect();
        // Stable sort keeps ascending id order among equal probabilities.
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        order.truncate(k);
        let mut w: Vec<f32> = order.iter().map(|&i| probs[i]).collect();
        if renormalize {
            let mut s = 0.0f32;
            for &v in &w {
                s += v;
            }
            for v in &mut w {
                *v /= s;
            }
        }
        topk_ids.extend(order);
        topk_weights.extend(w);
    }
    Ok(RouteResult {
        top_k: k,
        topk_ids,
        topk_weights,
    })
}

/// Token-slots grouped by expert, each group padded to a multiple of the
/// block size.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub block: usize,
    /// `token * K + slot` entries or [`SENTINEL`].
    pub sorted_token_slots: Vec<i32>,
    pub expert_of_block: Vec<usize>,
}

impl DispatchPlan {
    pub fn n_padded(&self) -> usize {
        self.sorted_token_slots.len()
    }

    /// `(expert, block entries)` in execution order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, &[i32])> {
        self.expert_of_block
            .iter()
            .copied()
            .zip(self.sorted_token_slots.chunks(self.block))
    }
}

/// Counting sort of token-slots by expert id (ascending), padding every
/// non-empty expert group to a multiple of `block`.
pub fn align_dispatch(route: &RouteResult, n_experts: usize, block: usize) -> Result<DispatchPlan> {
    if block == 0 {
        return Err(Error::config("dispatch block size must be at least 1"));
    }
    let mut groups: Vec<Vec<i32>> = vec![Vec::new(); n_experts];
    for (ts, &id) in route.topk_ids.iter().enumerate() {
        let g = groups.get_mut(id).ok_or(Error::Index {
            index: id,
            len: n_experts,
        })?;
        g.push(ts as i32);
    }
    let mut sorted = Vec::new();
    let mut expert_of_block = Vec::new();
    for (e, mut g) in groups.into_iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let padded = g.len().div_ceil(block) * block;
        expert_of_block.extend(std::iter::repeat_n(e, padded / block));
        g.resize(padded, SENTINEL);
        sorted.extend(g);
    }
    Ok(DispatchPlan {
        block,
        sorted_token_slots: sorted,
        expert_of_block,
    })
}

/// `y[t] = sum_slot w[t, slot] * out[t, slot]`, slots ascending.
///
/// `outputs` is indexed by `token * K + slot`.
pub fn combine(outputs: &[Option<Vec<f32>>], route: &RouteResult, d_model: usize) -> Result<Matrix> {
    let b = route.n_tokens();
    let k = route.top_k;
    if outputs.len() != b * k {
        return Err(Error::shape(format!(
            "combine expects {} slot outputs, got {}",
            b * k,
            outputs.len()
        )));
    }
    let mut y = Matrix::zeros(b, d_model);
    for t in 0..b {
        let row = y.row_mut(t);
        for (slot, &w) in route.weights(t).iter().enumerate() {
            let out = outputs[t * k + slot]
                .as_ref()
                .ok_or_else(|| Error::Internal(format!("missing output for token {t} slot {slot}")))?;
            if out.len() != d_model {
                return Err(Error::shape(format!("slot output has {} values, expected {d_model}", out.len())));
            }
            axpy(w, out, row);
        }
    }
    Ok(y)
}
