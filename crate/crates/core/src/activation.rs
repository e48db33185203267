//! SwiGLU math, neuron masking and compaction of surviving neurons into the
//! padded per-token index buffer consumed by the sparse path.

use crate::error::{Error, Result};
use crate::router::SENTINEL;

/// Fraction of neurons deactivated, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SparsityLevel(f64);

impl SparsityLevel {
    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::config(format!("sparsity must be in [0, 1], got {s}")));
        }
        Ok(Self(s))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Neurons to switch off out of `n`.
    pub fn neurons_off(self, n: usize) -> usize {
        round_half_up(self.0 * n as f64).min(n)
    }
}

/// `floor(x + 0.5)` for non-negative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn swiglu_rows(gate_out: &[f32], up_out: &[f32]) -> Result<Vec<f32>> {
    if gate_out.len() != up_out.len() {
        return Err(Error::shape(format!(
            "swiglu: gate has {} entries, up has {}",
            gate_out.len(),
            up_out.len()
        )));
    }
    Ok(gate_out.iter().zip(up_out).map(|(&g, &u)| silu(g) * u).collect())
}

/// Offline top-k rule: switch off the `round_half_up(s * N)` entries with the
/// smallest `|h|`, lower index first on ties.
pub fn topk_mask(h: &[f32], s: SparsityLevel) -> Vec<bool> {
    let n_off = s.neurons_off(h.len());
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[a].abs().total_cmp(&h[b].abs()));
    let mut mask = vec![true; h.len()];
    for &i in &order[..n_off] {
        mask[i] = false;
    }
    mask
}

/// Runtime rule: a neuron stays active iff `|silu(gate)| >= tau`.
pub fn threshold_mask(gate_out: &[f32], tau: f32) -> Vec<bool> {
    gate_out.iter().map(|&g| silu(g).abs() >= tau).collect()
}

/// One token's row of the active-index buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveRow {
    /// `capacity` entries: `expert * N + neuron`, then [`SENTINEL`] padding.
    pub flat: Vec<i32>,
    pub per_slot: Vec<usize>,
    pub total: usize,
}

/// Packs active `(slot, neuron)` pairs in slot-major, neuron-ascending order.
///
/// Entries past `capacity` are dropped and the per-slot count is clamped to
/// the room that was left, so later slots may record zero.
pub fn compact_active(masks: &[Vec<bool>], topk_ids: &[usize], n_ffn: usize, capacity: usize) -> ActiveRow {
    debug_assert_eq!(masks.len(), topk_ids.len());
    let mut flat = vec![SENTINEL; capacity];
    let mut per_slot = Vec::with_capacity(masks.len());
    let mut offset = 0usize;
    for (mask, &expert) in masks.iter().zip(topk_ids) {
        let base = expert * n_ffn;
        let mut running = 0usize;
        for (neuron, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
            let pos = offset + running;
            if pos < capacity {
                flat[pos] = (base + neuron) as i32;
            }
            running += 1;
        }
        let actual = running.min(capacity - offset);
        per_slot.push(actual);
        offset += actual;
    }
    ActiveRow {
        flat,
        per_slot,
        total: offset,
    }
}

/// Per-token compacted indices for a whole batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveIndexBuffer {
    pub capacity: usize,
    pub top_k: usize,
    /// `B * capacity`
    pub flat_indices: Vec<i32>,
    /// `B * K`
    pub active_per_slot: Vec<usize>,
    /// `B`
    pub total_active: Vec<usize>,
}

impl ActiveIndexBuffer {
    pub fn new(capacity: usize, top_k: usize) -> Self {
        Self {
            capacity,
            top_k,
            flat_indices: Vec::new(),
            active_per_slot: Vec::new(),
            total_active: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ActiveRow) {
        debug_assert_eq!(row.flat.len(), self.capacity);
        self.flat_indices.extend(row.flat);
        self.active_per_slot.extend(row.per_slot);
        self.total_active.push(row.total);
    }

    pub fn n_tokens(&self) -> usize {
        self.total_active.len()
    }

    pub fn row(&self, token: usize) -> &[i32] {
        &self.flat_indices[token * self.capacity..(token + 1) * self.capacity]
    }

    /// Active entries of `token`, without padding.
    pub fn active(&self, token: usize) -> &[i32] {
        &self.row(token)[..self.total_active[token]]
    }
}

/// Rebuilds per-slot masks from a compacted row.
pub fn expand_active(row: &ActiveRow, topk_ids: &[usize], n_ffn: usize) -> Vec<Vec<bool>> {
    let mut masks = vec![vec![false; n_ffn]; topk_ids.len()];
    for &fr in row.flat[..row.total].iter() {
        let (e, n) = (fr as usize / n_ffn, fr as usize % n_ffn);
        if let Some(slot) = topk_ids.iter().position(|&id| id == e) {
            masks[slot][n] = true;
        }
    }
    masks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> SparsityLevel {
        SparsityLevel::new(v).unwrap()
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        let big = silu(40.0);
        assert!((big / 40.0 - 1.0).abs() < 1e-6);
        for x in [0.3f32, 1.7, 4.0] {
            let expect = -x as f64 / (1.0 + (x as f64).exp());
            assert!((silu(-x) as f64 - expect).abs() < 1e-6);
        }
        assert!(silu(-200.0).is_finite());
    }

    #[test]
    fn swiglu_examples() {
        assert_eq!(swiglu_rows(&[1.0, -2.0], &[0.0, 0.0]).unwrap(), vec![0.0, -0.0]);
        assert_eq!(swiglu_rows(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        let h = swiglu_rows(&[1.0], &[2.0]).unwrap();
        assert!((h[0] - 1.462_117_2).abs() < 1e-6);
        assert!(swiglu_rows(&[1.0], &[]).is_err());
    }

    #[test]
    fn topk_mask_examples() {
        let h = [0.1f32, -0.5, 0.3, 0.05];
        assert_eq!(topk_mask(&h, s(0.0)), vec![true; 4]);
        assert_eq!(topk_mask(&h, s(1.0)), vec![false; 4]);
        assert_eq!(topk_mask(&h, s(0.5)), vec![false, true, true, false]);
    }

    #[test]
    fn topk_mask_ties_mask_lower_index_first() {
        assert_eq!(topk_mask(&[0.2, -0.2, 0.2], s(0.5)), vec![false, false, true]);
    }

    #[test]
    fn sparsity_level_bounds() {
        assert!(SparsityLevel::new(1.01).is_err());
        assert!(SparsityLevel::new(-0.1).is_err());
        assert!(SparsityLevel::new(f64::NAN).is_err());
        assert_eq!(s(0.5).neurons_off(5), 3);
    }

    #[test]
    fn threshold_mask_examples() {
        let g = [2.0f32, -2.0, 0.01];
        assert_eq!(threshold_mask(&g, 0.0), vec![true; 3]);
        assert_eq!(threshold_mask(&g, 10.0), vec![false; 3]);
        assert_eq!(threshold_mask(&g, 0.5), vec![true, false, false]);
    }

    #[test]
    fn compact_examples() {
        let none = compact_active(&[vec![false; 4]], &[2], 4, 8);
        assert_eq!(none.total, 0);
        assert!(none.flat.iter().all(|&v| v == SENTINEL));

        let row = compact_active(&[vec![true, false, true, false]], &[2], 4, 8);
        assert_eq!(row.flat, vec![8, 10, -1, -1, -1, -1, -1, -1]);
        assert_eq!((row.total, row.per_slot.clone()), (2, vec![2]));

        let trunc = compact_active(&[vec![true, true, true]], &[0], 3, 1);
        assert_eq!(trunc.flat, vec![0]);
        assert_eq!((trunc.total, trunc.per_slot), (1, vec![1]));
    }

    #[test]
    fn compact_clamps_later_slots_to_zero() {
        let masks = vec![vec![true, true, true], vec![true, false, true]];
        let row = compact_active(&masks, &[1, 0], 3, 2);
        assert_eq!(row.flat, vec![3, 4]);
        assert_eq!(row.per_slot, vec![2, 0]);
        assert_eq!(row.total, 2);
    }

    #[test]
    fn compact_slot_major_order() {
        let masks = vec![vec![false, true], vec![true, true]];
        let row = compact_active(&masks, &[3, 1], 2, 4);
        assert_eq!(row.flat, vec![7, 2, 3, -1]);
        assert_eq!(expand_active(&row, &[3, 1], 2), masks);
    }
}
