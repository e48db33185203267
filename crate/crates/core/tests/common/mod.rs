//! Test-only reference implementations. Nothing here calls into the engine,
//! router or activation modules: routing, SwiGLU and projections are
//! re-derived with naive f64 loops.

#![allow(dead_code)]

use moe_sparsekit::model::{generate_synthetic, MoEConfig, MoELayerWeights};
use moe_sparsekit::Matrix;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// E <= 16, K <= 4, D <= 64, N <= 128.
pub fn random_config(rng: &mut SplitMix64, with_shared: bool) -> MoEConfig {
    let e = rng.random_range(1..=16);
    let k = rng.random_range(1..=e.min(4));
    let d = rng.random_range(1..=64);
    let n = rng.random_range(1..=128);
    let mut cfg = MoEConfig::new(e, k, d, n).with_renormalize(rng.random_bool(0.5));
    if with_shared {
        cfg = cfg.with_shared(rng.random_range(1..=128));
    }
    cfg
}

pub fn random_model(seed: u64, with_shared: bool) -> MoELayerWeights {
    let mut r = rng(seed);
    let cfg = random_config(&mut r, with_shared);
    generate_synthetic(cfg, seed.wrapping_mul(31).wrapping_add(7), 1.0).unwrap()
}

pub fn oracle_silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Top-k expert ids and weights for one token, in f64.
pub fn oracle_route(w: &MoELayerWeights, x: &[f32]) -> Vec<(usize, f64)> {
    let cfg = &w.config;
    let logits: Vec<f64> = (0..cfg.n_experts)
        .map(|e| (0..cfg.d_model).map(|j| w.router.get(e, j) as f64 * x[j] as f64).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let mut probs: Vec<(usize, f64)> = logits.iter().map(|l| (l - max).exp() / z).enumerate().collect();
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    probs.truncate(cfg.top_k);
    if cfg.renormalize {
        let s: f64 = probs.iter().map(|p| p.1).sum();
        for p in &mut probs {
            p.1 /= s;
        }
    }
    probs
}

/// SwiGLU output of one FFN for one token, before the down projection.
pub fn oracle_hidden(gate: &Matrix, up: &Matrix, x: &[f32]) -> Vec<f64> {
    (0..gate.rows())
        .map(|i| {
            let mut g = 0.0;
            let mut u = 0.0;
            for j in 0..x.len() {
                g += gate.get(i, j) as f64 * x[j] as f64;
                u += up.get(i, j) as f64 * x[j] as f64;
            }
            oracle_silu(g) * u
        })
        .collect()
}

/// `y[d] = sum_n W_down[d, n] * h[n]`, with `down_t[n][d] = W_down[d, n]`.
pub fn oracle_down(down_t: &Matrix, h: &[f64]) -> Vec<f64> {
    (0..down_t.cols())
        .map(|d| (0..down_t.rows()).map(|n| down_t.get(n, d) as f64 * h[n]).sum())
        .collect()
}

/// Per-token, per-expert, per-neuron reference forward. `keep(t, slot, n)`
/// decides whether routed neuron `n` of slot `slot` contributes.
pub fn oracle_forward(
    w: &MoELayerWeights,
    x: &Matrix,
    keep: &dyn Fn(usize, usize, usize) -> bool,
) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let mut ids = Vec::new();
    let mut out = Vec::new();
    for t in 0..x.rows() {
        let xt = x.row(t);
        let route = oracle_route(w, xt);
        let mut y = vec![0.0f64; w.config.d_model];
        for (slot, &(e, weight)) in route.iter().enumerate() {
            let ex = &w.experts[e];
            let mut h = oracle_hidden(&ex.gate, &ex.up, xt);
            for (n, v) in h.iter_mut().enumerate() {
                if !keep(t, slot, n) {
                    *v = 0.0;
                }
            }
            for (yd, od) in y.iter_mut().zip(oracle_down(&ex.down_t, &h)) {
                *yd += weight * od;
            }
        }
        if let Some(s) = &w.shared {
            let h = oracle_hidden(&s.gate, &s.up, xt);
            for (yd, od) in y.iter_mut().zip(oracle_down(&s.down_t, &h)) {
                *yd += od;
            }
        }
        ids.push(route.iter().map(|r| r.0).collect());
        out.push(y);
    }
    (ids, out)
}

/// `max |a - b| / max(1, max |b|)` against an f64 reference.
pub fn rel_diff_f64(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 1.0f64;
    for (t, row) in b.iter().enumerate() {
        for (d, &v) in row.iter().enumerate() {
            num = num.max((a.get(t, d) as f64 - v).abs());
            den = den.max(v.abs());
        }
    }
    num / den
}

/// Brute-force tile walk: tiles of 64 over the padded buffer, skipped when
/// the tile start lies at or beyond the active count.
pub fn brute_force_tiles_skipped(k_total_pad: usize, total_active: usize) -> usize {
    let mut skipped = 0;
    let mut start = 0;
    while start < k_total_pad {
        if start >= total_active {
            skipped += 1;
        }
        start += 64;
    }
    skipped
}
