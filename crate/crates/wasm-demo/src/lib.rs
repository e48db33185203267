//! Browser bindings for the demo page. Every operation builds a seeded
//! synthetic layer from plain numbers and returns a JSON document for the
//! page to plot. The `*_json` functions are plain Rust and are what the
//! native tests exercise; the `#[wasm_bindgen]` exports only convert errors.

use moe_sparsekit::calibrate::{build_table, collect_magnitudes, CalibrationTable, SparsityShape};
use moe_sparsekit::engine::expert_mac_ratio;
use moe_sparsekit::model::{generate_synthetic, synthetic_tokens, MoEConfig};
use moe_sparsekit::profiler::{mean_relative_error, profile_expert};
use moe_sparsekit::{Engine, Error, MoELayerWeights, Result, SparsityLevel};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub const MAX_EXPERTS: usize = 64;
pub const MAX_WIDTH: usize = 1024;
pub const MAX_TOKENS: usize = 4096;
const SAMPLE_CAP: usize = 1 << 18;

/// Shape and seed of the synthetic layer behind every demo operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub d_shared: usize,
    pub seed: u64,
    pub tokens: usize,
}

impl LayerParams {
    fn validate(&self) -> Result<()> {
        let too_big = |what: &str, v: usize, max: usize| {
            (v > max).then(|| Error::Config(format!("{what} = {v} exceeds the demo limit of {max}")))
        };
        let checks = [
            too_big("experts", self.experts, MAX_EXPERTS),
            too_big("d_model", self.d_model, MAX_WIDTH),
            too_big("d_ffn", self.d_ffn, MAX_WIDTH),
            too_big("d_shared", self.d_shared, MAX_WIDTH),
            too_big("tokens", self.tokens, MAX_TOKENS),
        ];
        if let Some(e) = checks.into_iter().flatten().next() {
            return Err(e);
        }
        if self.tokens == 0 {
            return Err(Error::Config("tokens must be positive".into()));
        }
        Ok(())
    }

    fn build(&self) -> Result<MoELayerWeights> {
        self.validate()?;
        let mut cfg = MoEConfig::new(self.experts, self.top_k, self.d_model, self.d_ffn);
        if self.d_shared > 0 {
            cfg = cfg.with_shared(self.d_shared);
        }
        generate_synthetic(cfg, self.seed, 1.0)
    }

    fn calibration_tokens(&self) -> moe_sparsekit::Matrix {
        synthetic_tokens(self.tokens, self.d_model, self.seed.wrapping_add(1))
    }

    fn eval_tokens(&self) -> moe_sparsekit::Matrix {
        synthetic_tokens(self.tokens, self.d_model, self.seed.wrapping_add(2))
    }
}

fn grid(step: f64, max: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (1..=n).map(|i| (i as f64 * step * 1e6).round() / 1e6).collect()
}

fn calibrate(engine: &Engine<'_>, p: &LayerParams, targets: &[f64]) -> Result<CalibrationTable> {
    let sample = collect_magnitudes(engine, &p.calibration_tokens(), SAMPLE_CAP, p.seed)?;
    build_table(&sample, targets, (&engine.weights().config).into())
}

/// Threshold per total-sparsity target with the routed sparsity it achieves
/// on held-out tokens.
pub fn calibration_curve_json(p: &LayerParams) -> Result<String> {
    let w = p.build()?;
    let engine = Engine::new(&w);
    let shape = SparsityShape::from(&w.config);
    let targets = grid(0.05, 0.95);
    let table = calibrate(&engine, p, &targets)?;
    let eval = p.eval_tokens();
    let points = table
        .entries()
        .iter()
        .map(|entry| {
            let r = engine.forward_sparse(&eval, entry.threshold)?;
            Ok(json!({
                "target": entry.target,
                "routed_target": shape.total_to_routed(entry.target as f64)?,
                "threshold": entry.threshold,
                "achieved_routed": r.achieved_routed_sparsity,
                "achieved_total": r.achieved_total_sparsity,
            }))
        })
        .collect::<Result<Vec<Value>>>()?;
    Ok(json!({ "points": points }).to_string())
}

/// SwiGLU output histogram of one expert, with per-neuron survivor counts
/// under top-k masking at `sparsity`.
pub fn activation_histogram_json(p: &LayerParams, expert: usize, sparsity: f64) -> Result<String> {
    let w = p.build()?;
    let engine = Engine::new(&w);
    let profile = profile_expert(&engine, expert, &p.eval_tokens(), SparsityLevel::new(sparsity)?)?;
    let bins: Vec<[f64; 2]> = profile
        .bins
        .iter()
        .map(|(&i, &c)| [i as f64 * profile.bin_width, c as f64])
        .collect();
    Ok(json!({
        "bin_width": profile.bin_width,
        "bins": bins,
        "events": profile.total_events,
        "zero_bin_fraction": profile.zero_bin_fraction(),
        "per_neuron_counts": profile.per_neuron_counts,
        "mean_count": profile.mean_count(),
        "never_activated": profile.never_activated,
    })
    .to_string())
}

/// Calibrated runtime sweep: for each target, MAC ratios read from the
/// counters and the mean relative output error against the dense layer.
pub fn sparsity_sweep_json(p: &LayerParams) -> Result<String> {
    let w = p.build()?;
    let engine = Engine::new(&w);
    let targets = grid(0.05, 0.95);
    let table = calibrate(&engine, p, &targets)?;
    let eval = p.eval_tokens();
    let dense = engine.forward_dense(&eval)?;
    let taus = std::iter::once((0.0, 0.0)).chain(table.entries().iter().map(|e| (e.target as f64, e.threshold)));
    let points = taus
        .map(|(target, tau)| {
            let r = engine.forward_sparse(&eval, tau)?;
            Ok(json!({
                "target": target,
                "tau": tau,
                "achieved_routed": r.achieved_routed_sparsity,
                "achieved_total": r.achieved_total_sparsity,
                "rel_error": mean_relative_error(&dense.outputs, &r.outputs),
                "expert_mac_ratio": r.macs.expert_macs() as f64 / dense.macs.expert_macs() as f64,
                "total_mac_ratio": r.macs.total() as f64 / dense.macs.total() as f64,
                "ideal_expert_mac_ratio": expert_mac_ratio(r.achieved_routed_sparsity),
                "tiles_skipped": r.tiles_skipped,
                "tiles_total": r.tiles_total,
            }))
        })
        .collect::<Result<Vec<Value>>>()?;
    Ok(json!({ "points": points }).to_string())
}

fn params(experts: usize, top_k: usize, d_model: usize, d_ffn: usize, d_shared: usize, seed: u32, tokens: usize) -> LayerParams {
    LayerParams { experts, top_k, d_model, d_ffn, d_shared, seed: seed as u64, tokens }
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn calibration_curve(
    experts: usize,
    top_k: usize,
    d_model: usize,
    d_ffn: usize,
    d_shared: usize,
    seed: u32,
    tokens: usize,
) -> std::result::Result<String, JsError> {
    js(calibration_curve_json(&params(experts, top_k, d_model, d_ffn, d_shared, seed, tokens)))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn activation_histogram(
    experts: usize,
    top_k: usize,
    d_model: usize,
    d_ffn: usize,
    d_shared: usize,
    seed: u32,
    tokens: usize,
    expert: usize,
    sparsity: f64,
) -> std::result::Result<String, JsError> {
    js(activation_histogram_json(&params(experts, top_k, d_model, d_ffn, d_shared, seed, tokens), expert, sparsity))
}

#[wasm_bindgen]
pub fn sparsity_sweep(
    experts: usize,
    top_k: usize,
    d_model: usize,
    d_ffn: usize,
    d_shared: usize,
    seed: u32,
    tokens: usize,
) -> std::result::Result<String, JsError> {
    js(sparsity_sweep_json(&params(experts, top_k, d_model, d_ffn, d_shared, seed, tokens)))
}
