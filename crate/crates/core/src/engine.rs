//! Execution paths for one MoE layer.
//!
//! * `forward_dense`: grouped expert-major execution through the dispatch plan.
//! * `forward_masked_dense`: the same computation with chosen neurons zeroed
//!   before the down projection. Used as the analysis-mode oracle; it saves no
//!   compute.
//! * `forward_sparse`: dense gate projection, threshold masking and
//!   compaction, then a per-token fused up/down pass over gathered rows,
//!   processed in tiles of [`TILE`] neurons.
//!
//! Work is split per token (or per token-slot). Every reduction keeps its own
//! sequential order, so outputs do not depend on the worker count.

use std::time::Instant;

use crate::activation::{
    compact_active, silu, threshold_mask, topk_mask, ActiveIndexBuffer, SparsityLevel,
};
use crate::budget::{allocate_budget, apply_budget, group_experts, BudgetRatios};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matvec, matvec_t, MacCategory, MacCounter, Matrix};
use crate::model::{synthetic_tokens, ExpertWeights, MoELayerWeights, TILE};
use crate::router::{align_dispatch, combine, route, RouteResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecPath {
    Dense,
    MaskedDense,
    Sparse,
}

impl ExecPath {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecPath::Dense => "dense",
            ExecPath::MaskedDense => "masked-dense",
            ExecPath::Sparse => "sparse",
        }
    }
}

impl std::fmt::Display for ExecPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardReport {
    /// `B x D`
    pub outputs: Matrix,
    pub macs: MacCounter,
    pub route: RouteResult,
    pub path: ExecPath,
    /// Fraction of routed-expert neurons skipped or zeroed.
    pub achieved_routed_sparsity: f64,
    /// Skipped or zeroed neurons over routed plus shared neurons.
    pub achieved_total_sparsity: f64,
    /// Routed neurons that contributed, summed over tokens.
    pub active_neurons: u64,
    /// `active_neurons` with each token rounded up to whole tiles
    /// (sparse path only; equals `active_neurons` otherwise).
    pub padded_active: u64,
    pub tiles_total: u64,
    pub tiles_skipped: u64,
    /// Compacted indices (sparse path only).
    pub active: Option<ActiveIndexBuffer>,
}

/// What a mask policy sees for one token.
pub struct TokenActivations<'a> {
    pub token: usize,
    pub topk_ids: &'a [usize],
    pub topk_weights: &'a [f32],
    /// Gate projection per slot.
    pub gate: &'a [Vec<f32>],
    /// Full SwiGLU output per slot.
    pub h: &'a [Vec<f32>],
}

/// Chooses which neurons survive in analysis mode.
pub trait MaskPolicy: Sync {
    /// One mask per slot, each `d_ffn` long. `true` keeps the neuron.
    fn routed(&self, act: &TokenActivations<'_>) -> Result<Vec<Vec<bool>>>;

    /// Mask for the shared expert; `None` leaves it dense.
    fn shared(&self, _token: usize, _h: &[f32]) -> Option<Vec<bool>> {
        None
    }
}

/// Keeps every neuron.
pub struct NoMask;

impl MaskPolicy for NoMask {
    fn routed(&self, act: &TokenActivations<'_>) -> Result<Vec<Vec<bool>>> {
        Ok(act.h.iter().map(|h| vec![true; h.len()]).collect())
    }
}

/// Per-expert top-k on `|silu(g) * u|`; optionally also the shared expert.
pub struct TopKPolicy {
    pub sparsity: SparsityLevel,
    pub include_shared: bool,
}

impl MaskPolicy for TopKPolicy {
    fn routed(&self, act: &TokenActivations<'_>) -> Result<Vec<Vec<bool>>> {
        Ok(act.h.iter().map(|h| topk_mask(h, self.sparsity)).collect())
    }

    fn shared(&self, _token: usize, h: &[f32]) -> Option<Vec<bool>> {
        self.include_shared.then(|| topk_mask(h, self.sparsity))
    }
}

/// Runtime rule `|silu(g)| >= tau`, evaluated on the gate projection.
pub struct ThresholdPolicy {
    pub tau: f32,
}

impl MaskPolicy for ThresholdPolicy {
    fn routed(&self, act: &TokenActivations<'_>) -> Result<Vec<Vec<bool>>> {
        Ok(act.gate.iter().map(|g| threshold_mask(g, self.tau)).collect())
    }
}

/// Router-weight neuron budgeting over the token's active experts.
pub struct BudgetPolicy {
    pub s_active: f64,
    pub ratios: BudgetRatios,
}

impl MaskPolicy for BudgetPolicy {
    fn routed(&self, act: &TokenActivations<'_>) -> Result<Vec<Vec<bool>>> {
        let k = act.topk_ids.len();
        let n = act.h.first().map_or(0, Vec::len);
        let groups = group_experts(act.topk_weights);
        let counts = allocate_budget(k, n, self.s_active, &groups, self.ratios)?;
        apply_budget(act.h, &counts)
    }
}

/// Explicit masks for a fixed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub top_k: usize,
    pub d_ffn: usize,
    /// `B * K * d_ffn`, indexed by `(token * K + slot) * d_ffn + neuron`.
    pub routed: Vec<bool>,
    pub d_shared: usize,
    /// `B * d_shared`, only honoured when present.
    pub shared: Option<Vec<bool>>,
}

impl MaskPolicy for MaskSet {
    fn routed(&self, act: &TokenActivations<'_>) -> Result<Vec<Vec<bool>>> {
        let k = act.topk_ids.len();
        let start = act.token * k * self.d_ffn;
        let rows = self
            .routed
            .get(start..start + k * self.d_ffn)
            .ok_or_else(|| Error::shape(format!("mask set has no entries for token {}", act.token)))?;
        Ok(rows.chunks(self.d_ffn).map(<[bool]>::to_vec).collect())
    }

    fn shared(&self, token: usize, _h: &[f32]) -> Option<Vec<bool>> {
        let s = self.shared.as_ref()?;
        s.get(token * self.d_shared..(token + 1) * self.d_shared).map(<[bool]>::to_vec)
    }
}

/// Batch-size threshold for switching to the dense path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchTable {
    /// Batches of at least this size run dense; `None` means always sparse.
    pub tipping_batch: Option<usize>,
}

impl SwitchTable {
    pub const ALWAYS_SPARSE: SwitchTable = SwitchTable { tipping_batch: None };

    pub fn path_for(&self, batch: usize) -> ExecPath {
        match self.tipping_batch {
            Some(t) if batch >= t => ExecPath::Dense,
            _ => ExecPath::Sparse,
        }
    }
}

/// Source of per-path step timings (seconds) for tipping-point profiling.
pub trait PathTimer {
    fn time(&mut self, path: ExecPath, batch: usize) -> Result<f64>;
}

/// Median of `reps` timings of each path per grid batch size; the tipping
/// batch is the first grid point where dense is no slower than sparse.
pub fn profile_tipping(timer: &mut dyn PathTimer, batch_grid: &[usize], reps: usize) -> Result<SwitchTable> {
    if batch_grid.is_empty() {
        return Err(Error::config("tipping profile needs a non-empty batch grid"));
    }
    if batch_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("batch grid must be strictly ascending"));
    }
    if reps == 0 {
        return Err(Error::config("tipping profile needs at least one repetition"));
    }
    for &b in batch_grid {
        let dense = median((0..reps).map(|_| timer.time(ExecPath::Dense, b)).collect::<Result<_>>()?);
        let sparse = median((0..reps).map(|_| timer.time(ExecPath::Sparse, b)).collect::<Result<_>>()?);
        if dense <= sparse {
            return Ok(SwitchTable { tipping_batch: Some(b) });
        }
    }
    Ok(SwitchTable::ALWAYS_SPARSE)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times real forward passes on seeded random batches.
pub struct WallClockTimer<'e, 'w> {
    engine: &'e Engine<'w>,
    tau: f32,
    seed: u64,
}

impl<'e, 'w> WallClockTimer<'e, 'w> {
    pub fn new(engine: &'e Engine<'w>, tau: f32, seed: u64) -> Self {
        Self { engine, tau, seed }
    }
}

impl PathTimer for WallClockTimer<'_, '_> {
    fn time(&mut self, path: ExecPath, batch: usize) -> Result<f64> {
        let x = synthetic_tokens(batch, self.engine.weights.config.d_model, self.seed ^ batch as u64);
        let start = Instant::now();
        match path {
            ExecPath::Sparse => self.engine.forward_sparse(&x, self.tau)?,
            _ => self.engine.forward_dense(&x)?,
        };
        Ok(start.elapsed().as_secs_f64())
    }
}

/// Gate and up projections for one token-slot.
struct SlotProjection {
    gate: Vec<f32>,
    up: Option<Vec<f32>>,
    macs: MacCounter,
}

/// Router output plus gate (and optionally up) projections for each
/// `token * K + slot`.
pub(crate) struct ExpertInputs {
    pub route: RouteResult,
    pub gate: Vec<Vec<f32>>,
    pub up: Vec<Vec<f32>>,
    pub macs: MacCounter,
}

pub struct Engine<'w> {
    weights: &'w MoELayerWeights,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl<'w> Engine<'w> {
    pub fn new(weights: &'w MoELayerWeights) -> Self {
        Self {
            weights,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Caps token-level parallelism at `threads` workers (1 = sequential).
    pub fn with_threads(self, threads: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let pool = if threads > 1 {
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build()
                        .map_err(|e| Error::config(format!("thread pool: {e}")))?,
                )
            } else {
                None
            };
            Ok(Self { pool, ..self })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Ok(self)
        }
    }

    pub fn weights(&self) -> &'w MoELayerWeights {
        self.weights
    }

    fn map_indexed<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let d = self.weights.config.d_model;
        if x.cols() != d {
            return Err(Error::shape(format!("input has {} features, layer expects {d}", x.cols())));
        }
        if x.rows() == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    pub fn route_tokens(&self, x: &Matrix, macs: &mut MacCounter) -> Result<RouteResult> {
        self.check_input(x)?;
        let cfg = &self.weights.config;
        let mut logits = Vec::with_capacity(x.rows() * cfg.n_experts);
        for t in 0..x.rows() {
            logits.extend(matvec(&self.weights.router, x.row(t), macs, MacCategory::Other)?);
        }
        let logits = Matrix::from_vec(x.rows(), cfg.n_experts, logits)
            .map_err(|e| Error::Internal(format!("router logits: {e}")))?;
        route(&logits, cfg.top_k, cfg.renormalize)
    }

    /// Routes `x` and runs the grouped expert-major projections through the
    /// dispatch plan. The up projection is skipped when `with_up` is false.
    pub(crate) fn expert_inputs(&self, x: &Matrix, with_up: bool) -> Result<ExpertInputs> {
        let cfg = &self.weights.config;
        let mut macs = MacCounter::default();
        let route = self.route_tokens(x, &mut macs)?;
        let plan = align_dispatch(&route, cfg.n_experts, cfg.align_block)?;
        let work: Vec<(usize, usize)> = plan
            .blocks()
            .flat_map(|(e, block)| block.iter().filter(|&&ts| ts >= 0).map(move |&ts| (ts as usize, e)))
            .collect();
        let k = cfg.top_k;
        let done = self.map_indexed(work.len(), |i| {
            let (ts, e) = work[i];
            let ex = &self.weights.experts[e];
            let xt = x.row(ts / k);
            let mut macs = MacCounter::default();
            let gate = matvec(&ex.gate, xt, &mut macs, MacCategory::Gate)?;
            let up = if with_up {
                Some(matvec(&ex.up, xt, &mut macs, MacCategory::Up)?)
            } else {
                None
            };
            Ok(SlotProjection { gate, up, macs })
        })?;
        let n_slots = route.topk_ids.len();
        let mut gate = vec![Vec::new(); n_slots];
        let mut up = vec![Vec::new(); n_slots];
        for ((ts, _), p) in work.into_iter().zip(done) {
            macs += p.macs;
            gate[ts] = p.gate;
            if let Some(u) = p.up {
                up[ts] = u;
            }
        }
        Ok(ExpertInputs { route, gate, up, macs })
    }

    fn shared_output(
        &self,
        shared: &ExpertWeights,
        xt: &[f32],
        token: usize,
        policy: &dyn MaskPolicy,
        macs: &mut MacCounter,
    ) -> Result<(Vec<f32>, usize)> {
        let g = matvec(&shared.gate, xt, macs, MacCategory::Other)?;
        let u = matvec(&shared.up, xt, macs, MacCategory::Other)?;
        let mut h: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
        let mut masked = 0;
        if let Some(mask) = policy.shared(token, &h) {
            if mask.len() != h.len() {
                return Err(Error::shape("shared mask width mismatch"));
            }
            for (v, on) in h.iter_mut().zip(mask) {
                if !on {
                    *v = 0.0;
                    masked += 1;
                }
            }
        }
        Ok((matvec_t(&shared.down_t, &h, macs, MacCategory::Other)?, masked))
    }

    pub fn forward_dense(&self, x: &Matrix) -> Result<ForwardReport> {
        let mut r = self.forward_masked_with(x, &NoMask)?;
        r.path = ExecPath::Dense;
        Ok(r)
    }

    pub fn forward_masked_dense(&self, x: &Matrix, masks: &MaskSet) -> Result<ForwardReport> {
        let cfg = &self.weights.config;
        if masks.top_k != cfg.top_k
            || masks.d_ffn != cfg.d_ffn
            || masks.routed.len() != x.rows() * cfg.top_k * cfg.d_ffn
        {
            return Err(Error::shape(format!(
                "routed masks must be {}x{}x{}",
                x.rows(),
                cfg.top_k,
                cfg.d_ffn
            )));
        }
        if let Some(s) = &masks.shared {
            if masks.d_shared != cfg.d_shared || s.len() != x.rows() * cfg.d_shared {
                return Err(Error::shape(format!("shared masks must be {}x{}", x.rows(), cfg.d_shared)));
            }
        }
        self.forward_masked_with(x, masks)
    }

    /// Masked-dense forward with masks chosen per token by `policy`.
    pub fn forward_masked_with(&self, x: &Matrix, policy: &dyn MaskPolicy) -> Result<ForwardReport> {
        let cfg = &self.weights.config;
        let (k, n) = (cfg.top_k, cfg.d_ffn);
        let inputs = self.expert_inputs(x, true)?;
        let route = &inputs.route;

        struct TokenOut {
            slots: Vec<Vec<f32>>,
            shared: Option<Vec<f32>>,
            routed_masked: usize,
            shared_masked: usize,
            macs: MacCounter,
        }

        let per_token = self.map_indexed(x.rows(), |t| {
            let mut macs = MacCounter::default();
            let gate = &inputs.gate[t * k..(t + 1) * k];
            let up = &inputs.up[t * k..(t + 1) * k];
            let mut h: Vec<Vec<f32>> = gate
                .iter()
                .zip(up)
                .map(|(g, u)| g.iter().zip(u).map(|(&g, &u)| silu(g) * u).collect())
                .collect();
            let act = TokenActivations {
                token: t,
                topk_ids: route.ids(t),
                topk_weights: route.weights(t),
                gate,
                h: &h,
            };
            let masks = policy.routed(&act)?;
            if masks.len() != k || masks.iter().any(|m| m.len() != n) {
                return Err(Error::shape(format!("policy must return {k} masks of width {n}")));
            }
            let mut routed_masked = 0;
            for (hs, m) in h.iter_mut().zip(&masks) {
                for (v, &on) in hs.iter_mut().zip(m) {
                    if !on {
                        *v = 0.0;
                        routed_masked += 1;
                    }
                }
            }
            let slots = route
                .ids(t)
                .iter()
                .zip(&h)
                .map(|(&e, hs)| matvec_t(&self.weights.experts[e].down_t, hs, &mut macs, MacCategory::Down))
                .collect::<Result<Vec<_>>>()?;
            let (shared, shared_masked) = match &self.weights.shared {
                Some(s) => {
                    let (o, m) = self.shared_output(s, x.row(t), t, policy, &mut macs)?;
                    (Some(o), m)
                }
                None => (None, 0),
            };
            Ok(TokenOut {
                slots,
                shared,
                routed_masked,
                shared_masked,
                macs,
            })
        })?;

        let mut macs = inputs.macs;
        let mut slot_outputs = Vec::with_capacity(x.rows() * k);
        let mut shared_outputs = Vec::with_capacity(x.rows());
        let (mut routed_masked, mut shared_masked) = (0u64, 0u64);
        for tok in per_token {
            macs += tok.macs;
            routed_masked += tok.routed_masked as u64;
            shared_masked += tok.shared_masked as u64;
            slot_outputs.extend(tok.slots.into_iter().map(Some));
            shared_outputs.push(tok.shared);
        }
        let mut outputs = combine(&slot_outputs, route, cfg.d_model)?;
        add_shared(&mut outputs, &shared_outputs);

        let b = x.rows() as u64;
        let routed_total = b * (k * n) as u64;
        let active = routed_total - routed_masked;
        Ok(ForwardReport {
            outputs,
            macs,
            route: inputs.route,
            path: ExecPath::MaskedDense,
            achieved_routed_sparsity: routed_masked as f64 / routed_total as f64,
            achieved_total_sparsity: (routed_masked + shared_masked) as f64
                / (routed_total + b * cfg.d_shared as u64) as f64,
            active_neurons: active,
            padded_active: active,
            tiles_total: 0,
            tiles_skipped: 0,
            active: None,
        })
    }

    /// Threshold-masked sparse execution.
    ///
    /// Charges `B*K*D*N` gate MACs, plus `D` up and `D` down MACs for every
    /// neuron slot of each non-skipped 64-wide tile.
    pub fn forward_sparse(&self, x: &Matrix, tau: f32) -> Result<ForwardReport> {
        if !(tau >= 0.0) {
            return Err(Error::config(format!("threshold must be non-negative, got {tau}")));
        }
        let cfg = &self.weights.config;
        let (k, n, d) = (cfg.top_k, cfg.d_ffn, cfg.d_model);
        let capacity = cfg.k_total_pad();
        let tiles_per_token = capacity.div_ceil(TILE);
        let inputs = self.expert_inputs(x, false)?;
        let route = &inputs.route;

        struct TokenOut {
            y: Vec<f32>,
            row: crate::activation::ActiveRow,
            tiles_run: usize,
            macs: MacCounter,
        }

        let per_token = self.map_indexed(x.rows(), |t| {
            let mut macs = MacCounter::default();
            let xt = x.row(t);
            let ids = route.ids(t);
            let weights = route.weights(t);
            let gate = &inputs.gate[t * k..(t + 1) * k];
            let masks: Vec<Vec<bool>> = gate.iter().map(|g| threshold_mask(g, tau)).collect();
            let row = compact_active(&masks, ids, n, capacity);

            let mut y = vec![0.0f32; d];
            let mut tiles_run = 0;
            for tile in 0..tiles_per_token {
                let start = tile * TILE;
                if start >= row.total {
                    continue;
                }
                tiles_run += 1;
                let mut partial = vec![0.0f32; d];
                for &fr in &row.flat[start..row.total.min(start + TILE)] {
                    let (e, neuron) = (fr as usize / n, fr as usize % n);
                    let slot = ids
                        .iter()
                        .position(|&id| id == e)
                        .ok_or_else(|| Error::Internal(format!("index {fr} names an unrouted expert")))?;
                    let ex = &self.weights.experts[e];
                    let up = dot(ex.up.row(neuron), xt);
                    let h = weights[slot] * silu(gate[slot][neuron]) * up;
                    axpy(h, ex.down_t.row(neuron), &mut partial);
                }
                macs.add(MacCategory::Up, (TILE * d) as u64);
                macs.add(MacCategory::Down, (TILE * d) as u64);
                for (yi, pi) in y.iter_mut().zip(&partial) {
                    *yi += pi;
                }
            }
            if let Some(s) = &self.weights.shared {
                let (o, _) = self.shared_output(s, xt, t, &NoMask, &mut macs)?;
                axpy(1.0, &o, &mut y);
            }
            Ok(TokenOut { y, row, tiles_run, macs })
        })?;

        let mut macs = inputs.macs;
        let mut outputs = Matrix::zeros(x.rows(), d);
        let mut buffer = ActiveIndexBuffer::new(capacity, k);
        let (mut active, mut padded, mut tiles_run) = (0u64, 0u64, 0u64);
        for (t, tok) in per_token.into_iter().enumerate() {
            macs += tok.macs;
            active += tok.row.total as u64;
            padded += (tok.tiles_run * TILE) as u64;
            tiles_run += tok.tiles_run as u64;
            outputs.row_mut(t).copy_from_slice(&tok.y);
            buffer.push(tok.row);
        }
        let b = x.rows() as u64;
        let routed_total = b * (k * n) as u64;
        let tiles_total = b * tiles_per_token as u64;
        let skipped = routed_total - active;
        Ok(ForwardReport {
            outputs,
            macs,
            route: inputs.route,
            path: ExecPath::Sparse,
            achieved_routed_sparsity: skipped as f64 / routed_total as f64,
            achieved_total_sparsity: skipped as f64 / (routed_total + b * cfg.d_shared as u64) as f64,
            active_neurons: active,
            padded_active: padded,
            tiles_total,
            tiles_skipped: tiles_total - tiles_run,
            active: Some(buffer),
        })
    }

    /// Runs the path the switch table picks for this batch size.
    pub fn step(&self, x: &Matrix, tau: f32, switch: &SwitchTable) -> Result<ForwardReport> {
        match switch.path_for(x.rows()) {
            ExecPath::Dense => self.forward_dense(x),
            _ => self.forward_sparse(x, tau),
        }
    }
}

fn add_shared(outputs: &mut Matrix, shared: &[Option<Vec<f32>>]) {
    for (t, s) in shared.iter().enumerate() {
        if let Some(s) = s {
            axpy(1.0, s, outputs.row_mut(t));
        }
    }
}

/// `max |a - b| / max(1, max |b|)`
pub fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    let num = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max);
    let den = b.data().iter().map(|v| (*v as f64).abs()).fold(1.0, f64::max);
    num / den
}

/// Expected tile skips for one token: all tiles minus those that hold at
/// least one active entry.
pub fn tiles_skipped_closed_form(k_total_pad: usize, total_active: usize) -> usize {
    k_total_pad.div_ceil(TILE) - total_active.div_ceil(TILE)
}

/// Routed-expert MAC ratio of sparse over dense execution for routed
/// sparsity `s` (measured on padded active counts): the gate projection stays
/// dense, up and down shrink with `1 - s`.
pub fn expert_mac_ratio(s: f64) -> f64 {
    (1.0 + 2.0 * (1.0 - s)) / 3.0
}
