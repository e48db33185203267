//! Activation statistics and sparsity-cutoff sweeps.
//!
//! Counting convention: an *event* is one neuron output of one token-slot.
//! [`profile_expert`] pushes every token through one expert (B*N events);
//! [`profile_routed`] covers all routed token-slots (B*K*N events) and
//! counts survivors per `expert * N + neuron`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::activation::{silu, topk_mask, SparsityLevel};
use crate::calibrate::CalibrationTable;
use crate::engine::{Engine, ExecPath, ForwardReport, TopKPolicy};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::linalg::{matvec, MacCategory, MacCounter, Matrix};

pub const DEFAULT_BIN_WIDTH: f64 = 0.006;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    pub bin_width: f64,
    /// Bin `i` covers `[(i - 0.5) * w, (i + 0.5) * w)`.
    pub bins: BTreeMap<i64, u64>,
    pub per_neuron_counts: Vec<u64>,
    pub total_events: u64,
    pub never_activated: usize,
}

impl ActivationProfile {
    fn new(bin_width: f64, neurons: usize) -> Self {
        Self {
            bin_width,
            bins: BTreeMap::new(),
            per_neuron_counts: vec![0; neurons],
            total_events: 0,
            never_activated: 0,
        }
    }

    pub fn bin_index(&self, v: f32) -> i64 {
        (v as f64 / self.bin_width + 0.5).floor() as i64
    }

    fn record(&mut self, h: &[f32], mask: &[bool], neuron_base: usize) {
        for (i, (&v, &on)) in h.iter().zip(mask).enumerate() {
            *self.bins.entry(self.bin_index(v)).or_default() += 1;
            if on {
                self.per_neuron_counts[neuron_base + i] += 1;
            }
        }
        self.total_events += h.len() as u64;
    }

    fn finish(mut self) -> Self {
        self.never_activated = self.per_neuron_counts.iter().filter(|&&c| c == 0).count();
        self
    }

    /// Fraction of events in the zero bin.
    pub fn zero_bin_fraction(&self) -> f64 {
        self.bins.get(&0).copied().unwrap_or(0) as f64 / self.total_events.max(1) as f64
    }

    pub fn mean_count(&self) -> f64 {
        let n = self.per_neuron_counts.len().max(1);
        self.per_neuron_counts.iter().sum::<u64>() as f64 / n as f64
    }

    /// `bin_center\tcount` per non-empty bin, ascending.
    pub fn histogram_text(&self) -> String {
        let mut s = String::new();
        for (&i, &c) in &self.bins {
            let _ = writeln!(s, "{}\t{c}", sig9(i as f64 * self.bin_width));
        }
        s
    }

    pub fn write_histogram(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.histogram_text())?;
        Ok(())
    }
}

/// SwiGLU outputs of `expert_id` for every token, histogrammed before
/// masking; survivors of `topk_mask(h, s)` counted per neuron.
pub fn profile_expert(
    engine: &Engine<'_>,
    expert_id: usize,
    tokens: &Matrix,
    s: SparsityLevel,
) -> Result<ActivationProfile> {
    let w = engine.weights();
    let ex = w.expert(expert_id)?;
    if tokens.cols() != w.config.d_model {
        return Err(Error::shape("token width does not match d_model"));
    }
    let mut macs = MacCounter::default();
    let mut profile = ActivationProfile::new(DEFAULT_BIN_WIDTH, w.config.d_ffn);
    for t in 0..tokens.rows() {
        let g = matvec(&ex.gate, tokens.row(t), &mut macs, MacCategory::Gate)?;
        let u = matvec(&ex.up, tokens.row(t), &mut macs, MacCategory::Up)?;
        let h: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
        profile.record(&h, &topk_mask(&h, s), 0);
    }
    Ok(profile.finish())
}

/// Same statistics over all routed token-slots.
pub fn profile_routed(engine: &Engine<'_>, tokens: &Matrix, s: SparsityLevel) -> Result<ActivationProfile> {
    let cfg = engine.weights().config;
    let inputs = engine.expert_inputs(tokens, true)?;
    let mut profile = ActivationProfile::new(DEFAULT_BIN_WIDTH, cfg.n_experts * cfg.d_ffn);
    for (ts, (g, u)) in inputs.gate.iter().zip(&inputs.up).enumerate() {
        let h: Vec<f32> = g.iter().zip(u).map(|(&g, &u)| silu(g) * u).collect();
        let expert = inputs.route.topk_ids[ts];
        profile.record(&h, &topk_mask(&h, s), expert * cfg.d_ffn);
    }
    Ok(profile.finish())
}

/// Which experts the offline top-k rule sparsifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Routed experts only.
    Routed,
    /// Routed and shared experts.
    RoutedShared,
}

/// Scores an approximate output batch against the dense reference.
pub trait QualityMetric {
    fn score(&self, dense: &Matrix, approx: &Matrix) -> f64;
}

/// `1 - mean_relative_error`.
pub struct RelativeErrorQuality;

impl QualityMetric for RelativeErrorQuality {
    fn score(&self, dense: &Matrix, approx: &Matrix) -> f64 {
        1.0 - mean_relative_error(dense, approx)
    }
}

/// Mean over tokens of `||approx - dense||_2 / ||dense||_2`, skipping tokens
/// whose dense norm is below `1e-12`.
pub fn mean_relative_error(dense: &Matrix, approx: &Matrix) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..dense.rows() {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (&a, &d) in approx.row(t).iter().zip(dense.row(t)) {
            num += (a as f64 - d as f64).powi(2);
            den += (d as f64).powi(2);
        }
        let den = den.sqrt();
        if den >= 1e-12 {
            sum += num.sqrt() / den;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub target: f64,
    pub achieved_total: f64,
    pub achieved_routed: f64,
    pub quality: f64,
    pub rel_error: f64,
    pub path: ExecPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub cutoff: f64,
    pub baseline_quality: f64,
}

fn point(target: f64, dense: &Matrix, r: &ForwardReport, metric: &dyn QualityMetric) -> SweepPoint {
    SweepPoint {
        target,
        achieved_total: r.achieved_total_sparsity,
        achieved_routed: r.achieved_routed_sparsity,
        quality: metric.score(dense, &r.outputs),
        rel_error: mean_relative_error(dense, &r.outputs),
        path: r.path,
    }
}

/// Largest target whose quality is at least `retention * baseline`, or 0.
pub fn cutoff(points: &[SweepPoint], baseline: f64, retention: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.quality >= retention * baseline)
        .map(|p| p.target)
        .fold(0.0, f64::max)
}

fn check_sweep_args(targets: &[f64], retention: f64) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::config("sweep needs at least one target"));
    }
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(Error::config(format!("retention must be in (0, 1], got {retention}")));
    }
    if targets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("sweep targets must be strictly ascending"));
    }
    Ok(())
}

/// Offline top-k sweep in masked-dense mode. The baseline is the quality at
/// sparsity 0.
pub fn sweep_cutoff(
    engine: &Engine<'_>,
    tokens: &Matrix,
    targets: &[f64],
    retention: f64,
    mode: SweepMode,
    metric: &dyn QualityMetric,
) -> Result<SweepResult> {
    check_sweep_args(targets, retention)?;
    let dense = engine.forward_dense(tokens)?.outputs;
    let run = |s: f64| -> Result<ForwardReport> {
        let policy = TopKPolicy {
            sparsity: SparsityLevel::new(s)?,
            include_shared: mode == SweepMode::RoutedShared,
        };
        engine.forward_masked_with(tokens, &policy)
    };
    let baseline = metric.score(&dense, &run(0.0)?.outputs);
    let points = targets
        .iter()
        .map(|&s| Ok(point(s, &dense, &run(s)?, metric)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        cutoff: cutoff(&points, baseline, retention),
        points,
        baseline_quality: baseline,
    })
}

/// Runtime sweep: thresholds from `table`, executed on the sparse path.
/// Target 0 uses `tau = 0`.
pub fn sweep_calibrated(
    engine: &Engine<'_>,
    tokens: &Matrix,
    table: &CalibrationTable,
    targets: &[f64],
    retention: f64,
    metric: &dyn QualityMetric,
) -> Result<SweepResult> {
    check_sweep_args(targets, retention)?;
    let dense = engine.forward_dense(tokens)?.outputs;
    let baseline = metric.score(&dense, &engine.forward_sparse(tokens, 0.0)?.outputs);
    let points = targets
        .iter()
        .map(|&s| {
            let tau = if s == 0.0 { 0.0 } else { table.lookup(s) };
            Ok(point(s, &dense, &engine.forward_sparse(tokens, tau)?, metric))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        cutoff: cutoff(&points, baseline, retention),
        points,
        baseline_quality: baseline,
    })
}

pub const CSV_HEADER: &str = "target,achieved_total,achieved_routed,quality,rel_error,path";

pub fn report_csv(result: &SweepResult) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for p in &result.points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            sig9(p.target),
            sig9(p.achieved_total),
            sig9(p.achieved_routed),
            sig9(p.quality),
            sig9(p.rel_error),
            p.path
        );
    }
    if !result.points.is_empty() {
        let _ = writeln!(s, "# cutoff={}", sig9(result.cutoff));
    }
    s
}

pub fn emit_report(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, report_csv(result))?;
    Ok(())
}

/// Parses [`report_csv`] output back into points and the cutoff, if present.
pub fn parse_report(text: &str) -> Result<(Vec<SweepPoint>, Option<f64>)> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format {
            offset: 0,
            msg: "missing CSV header".into(),
        });
    }
    let mut points = Vec::new();
    let mut cutoff = None;
    let mut offset = CSV_HEADER.len() as u64 + 1;
    for line in lines {
        let bad = |msg: String| Error::Format { offset, msg };
        if let Some(v) = line.strip_prefix("# cutoff=") {
            cutoff = Some(v.parse().map_err(|e| bad(format!("cutoff {v:?}: {e}")))?);
        } else {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", f.len())));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| bad(format!("field {i} {:?}: {e}", f[i])));
            let path = match f[5] {
                "dense" => ExecPath::Dense,
                "masked-dense" => ExecPath::MaskedDense,
                "sparse" => ExecPath::Sparse,
                other => return Err(bad(format!("unknown path {other:?}"))),
            };
            points.push(SweepPoint {
                target: num(0)?,
                achieved_total: num(1)?,
                achieved_routed: num(2)?,
                quality: num(3)?,
                rel_error: num(4)?,
                path,
            });
        }
        offset += line.len() as u64 + 1;
    }
    Ok((points, cutoff))
}
