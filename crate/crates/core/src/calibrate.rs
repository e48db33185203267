//! Target-sparsity to threshold lookup table.
//!
//! At startup a sample of `|silu(gate)|` magnitudes is collected from the
//! routed experts on calibration tokens. For each target total sparsity the
//! matching routed sparsity is computed (the shared expert is never masked)
//! and the threshold is the nearest-rank upper quantile of the sample at that
//! level. Neurons with `|silu(gate)| < tau` are then masked at runtime.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::activation::silu;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::linalg::Matrix;
use crate::model::MoEConfig;

pub const TABLE_HEADER: &str = "# moe-sparsekit calib v1";

/// Default total-sparsity targets.
pub const DEFAULT_TARGETS: [f64; 5] = [0.60, 0.70, 0.80, 0.85, 0.87];

/// Shape parameters that relate routed and total sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparsityShape {
    pub top_k: usize,
    pub d_ffn: usize,
    pub d_shared: usize,
}

impl From<&MoEConfig> for SparsityShape {
    fn from(c: &MoEConfig) -> Self {
        Self {
            top_k: c.top_k,
            d_ffn: c.d_ffn,
            d_shared: c.d_shared,
        }
    }
}

impl SparsityShape {
    fn routed_width(&self) -> Result<f64> {
        let kn = self.top_k * self.d_ffn;
        if kn == 0 {
            return Err(Error::config("K * d_ffn must be positive"));
        }
        Ok(kn as f64)
    }

    /// Routed sparsity needed to reach `s_total` when the shared expert stays
    /// dense: `min(1, s_total * (K*N + d_shared) / (K*N))`.
    pub fn total_to_routed(&self, s_total: f64) -> Result<f64> {
        let kn = self.routed_width()?;
        Ok((s_total * (kn + self.d_shared as f64) / kn).min(1.0))
    }

    /// Total sparsity produced by routed sparsity `s_routed`.
    pub fn routed_to_total(&self, s_routed: f64) -> Result<f64> {
        let kn = self.routed_width()?;
        Ok(s_routed * kn / (kn + self.d_shared as f64))
    }
}

pub fn total_to_routed(s_total: f64, k: usize, d_ffn: usize, d_shared: usize) -> Result<f64> {
    SparsityShape {
        top_k: k,
        d_ffn,
        d_shared,
    }
    .total_to_routed(s_total)
}

/// Reservoir sample (algorithm R) of `|silu(gate)|` over every routed
/// token-slot and neuron of `tokens`, sorted ascending.
pub fn collect_magnitudes(engine: &Engine<'_>, tokens: &Matrix, sample_cap: usize, seed: u64) -> Result<Vec<f32>> {
    if sample_cap == 0 {
        return Err(Error::config("sample cap must be positive"));
    }
    let inputs = engine.expert_inputs(tokens, false)?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut sample = Vec::with_capacity(sample_cap.min(inputs.gate.len() * engine.weights().config.d_ffn));
    for (seen, g) in (0u64..).zip(inputs.gate.iter().flatten()) {
        let m = silu(*g).abs();
        if sample.len() < sample_cap {
            sample.push(m);
        } else {
            let j = rng.random_range(0..=seen);
            if (j as usize) < sample_cap {
                sample[j as usize] = m;
            }
        }
    }
    sample.sort_by(f32::total_cmp);
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationEntry {
    pub target: f32,
    pub threshold: f32,
}

/// Monotone mapping from target total sparsity to masking threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    entries: Vec<CalibrationEntry>,
}

/// Index into a sorted sample of size `n` for routed sparsity `s`:
/// `min(n - 1, ceil(s * n))`. A relative slack of 1e-9 keeps products such
/// as `0.7 * 10` on the intended integer.
pub fn nearest_rank(s: f64, n: usize) -> usize {
    let x = s * n as f64;
    let rank = (x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize;
    rank.min(n - 1)
}

pub fn build_table(sample: &[f32], targets: &[f64], shape: SparsityShape) -> Result<CalibrationTable> {
    if sample.is_empty() {
        return Err(Error::Calibration("empty magnitude sample".into()));
    }
    if sample.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Calibration("magnitude sample is not sorted".into()));
    }
    check_targets(targets)?;
    let entries = targets
        .iter()
        .map(|&t| {
            let s_routed = shape.total_to_routed(t)?;
            Ok(CalibrationEntry {
                target: t as f32,
                threshold: sample[nearest_rank(s_routed, sample.len())],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CalibrationTable::new(entries)
}

pub fn check_targets(targets: &[f64]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::config("no calibration targets"));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Error::config(format!("target {t} outside [0, 1)")));
    }
    if targets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("targets must be strictly increasing"));
    }
    Ok(())
}

impl CalibrationTable {
    pub fn new(entries: Vec<CalibrationEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Calibration("empty table".into()));
        }
        for w in entries.windows(2) {
            if w[0].target >= w[1].target {
                return Err(Error::Calibration("targets must be strictly increasing".into()));
            }
            if w[0].threshold > w[1].threshold {
                return Err(Error::Calibration("thresholds must be non-decreasing".into()));
            }
        }
        if entries.iter().any(|e| !(e.threshold >= 0.0) || !e.threshold.is_finite()) {
            return Err(Error::Calibration("thresholds must be finite and non-negative".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CalibrationEntry] {
        &self.entries
    }

    /// Linear interpolation between bracketing entries, clamped at the ends.
    /// Targets are compared at the table's `f32` precision.
    pub fn lookup(&self, target: f64) -> f32 {
        let target = target as f32 as f64;
        let first = self.entries[0];
        let last = self.entries[self.entries.len() - 1];
        if target <= first.target as f64 {
            return first.threshold;
        }
        if target >= last.target as f64 {
            return last.threshold;
        }
        let hi = self.entries.partition_point(|e| (e.target as f64) < target);
        let (a, b) = (self.entries[hi - 1], self.entries[hi]);
        if b.target as f64 == target {
            return b.threshold;
        }
        let f = (target - a.target as f64) / (b.target as f64 - a.target as f64);
        (a.threshold as f64 + f * (b.threshold as f64 - a.threshold as f64)) as f32
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(TABLE_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}", sig9(e.target as f64), sig9(e.threshold as f64));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TABLE_HEADER) {
            return Err(Error::Format {
                offset: 0,
                msg: format!("missing header {TABLE_HEADER:?}"),
            });
        }
        let mut offset = TABLE_HEADER.len() as u64 + 1;
        let mut entries = Vec::new();
        for line in lines {
            let bad = |msg: String| Error::Format { offset, msg };
            let (t, th) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("expected <target>\\t<threshold>, got {line:?}")))?;
            let target = t.parse::<f32>().map_err(|e| bad(format!("target {t:?}: {e}")))?;
            let threshold = th.parse::<f32>().map_err(|e| bad(format!("threshold {th:?}: {e}")))?;
            entries.push(CalibrationEntry { target, threshold });
            offset += line.len() as u64 + 1;
        }
        Self::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Fraction of `sample` strictly below `tau`.
pub fn fraction_below(sample: &[f32], tau: f32) -> f64 {
    sample.partition_point(|&v| v < tau) as f64 / sample.len() as f64
}
