//! Neuron budgeting across the active routed experts of a token.
//!
//! Slots are ranked by router weight and split into three groups. A total
//! budget of `s_active * K * D_ffn` neurons is shared out so that every expert
//! in group `x` receives `budget * r_x / sum_x(r_x * |g_x|)` neurons.

use crate::activation::round_half_up;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetRatios(pub [f64; 3]);

impl BudgetRatios {
    pub fn new(r0: f64, r1: f64, r2: f64) -> Result<Self> {
        let r = [r0, r1, r2];
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("budget ratios must be finite and non-negative, got {r:?}")));
        }
        if r.iter().all(|&v| v == 0.0) {
            return Err(Error::config("budget ratios are all zero"));
        }
        Ok(Self(r))
    }

    pub const fn uniform() -> Self {
        Self([1.0, 1.0, 1.0])
    }
}

impl std::str::FromStr for BudgetRatios {
    type Err = Error;

    /// Parses `r0:r1:r2`, e.g. `3:2:1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("bad budget ratios {s:?}: {e}")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::config(format!("expected three ratios r0:r1:r2, got {s:?}"))),
        }
    }
}

/// Slot indices of the three router-weight groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertGroups(pub [Vec<usize>; 3]);

impl ExpertGroups {
    pub fn sizes(&self) -> [usize; 3] {
        [self.0[0].len(), self.0[1].len(), self.0[2].len()]
    }

    pub fn group_of(&self, slot: usize) -> Option<usize> {
        self.0.iter().position(|g| g.contains(&slot))
    }
}

/// Sorts slots by router weight (descending, lower slot first on ties);
/// the first `K/3` go to g0, the next `K/3` to g1, the rest to g2.
pub fn group_experts(topk_weights: &[f32]) -> ExpertGroups {
    let k = topk_weights.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| topk_weights[b].total_cmp(&topk_weights[a]));
    let third = k / 3;
    let g2 = order.split_off(2 * third);
    let g1 = order.split_off(third);
    ExpertGroups([order, g1, g2])
}

/// Per-slot neuron counts, clamped to `[0, d_ffn]`.
///
/// Before clamping, each count is off by at most 0.5 from its exact share,
/// so `|sum(n_e) - s_active * K * d_ffn| <= K / 2`.
pub fn allocate_budget(
    k: usize,
    d_ffn: usize,
    s_active: f64,
    groups: &ExpertGroups,
    ratios: BudgetRatios,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&s_active) {
        return Err(Error::config(format!("active fraction must be in [0, 1], got {s_active}")));
    }
    if groups.sizes().iter().sum::<usize>() != k {
        return Err(Error::shape(format!("groups cover {:?} slots, expected {k}", groups.sizes())));
    }
    let total = s_active * k as f64 * d_ffn as f64;
    let denom: f64 = ratios.0.iter().zip(groups.sizes()).map(|(r, g)| r * g as f64).sum();
    if denom <= 0.0 {
        return Err(Error::config("budget ratios give zero weight to every non-empty group"));
    }
    let mut counts = vec![0usize; k];
    for (r, members) in ratios.0.iter().zip(&groups.0) {
        let n = round_half_up(total * r / denom).min(d_ffn);
        for &slot in members {
            counts[slot] = n;
        }
    }
    Ok(counts)
}

/// Keeps the `n` largest-`|h|` entries; lower index wins ties.
pub fn budget_mask(h: &[f32], n: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[b].abs().total_cmp(&h[a].abs()));
    let mut mask = vec![false; h.len()];
    for &i in order.iter().take(n) {
        mask[i] = true;
    }
    mask
}

pub fn apply_budget(h: &[Vec<f32>], counts: &[usize]) -> Result<Vec<Vec<bool>>> {
    if h.len() != counts.len() {
        return Err(Error::shape(format!("{} slots but {} budgets", h.len(), counts.len())));
    }
    h.iter()
        .zip(counts)
        .map(|(row, &n)| {
            if n > row.len() {
                Err(Error::config(format!("budget {n} exceeds width {}", row.len())))
            } else {
                Ok(budget_mask(row, n))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_sizes() {
        assert_eq!(group_experts(&[0.1; 6]).sizes(), [2, 2, 2]);
        assert_eq!(group_experts(&[0.1; 7]).sizes(), [2, 2, 3]);
        assert_eq!(group_experts(&[1.0]).sizes(), [0, 0, 1]);
    }

    #[test]
    fn groups_follow_weight_order() {
        let g = group_experts(&[0.1, 0.4, 0.2, 0.3]);
        assert_eq!(g.0, [vec![1], vec![3], vec![2, 0]]);
        let tie = group_experts(&[0.25; 3]);
        assert_eq!(tie.0, [vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn hand_evaluated_budget() {
        let weights = [0.3, 0.25, 0.15, 0.12, 0.1, 0.08];
        let g = group_experts(&weights);
        let n = allocate_budget(6, 8, 0.5, &g, BudgetRatios::new(3.0, 2.0, 1.0).unwrap()).unwrap();
        assert_eq!(n, vec![6, 6, 4, 4, 2, 2]);
        assert_eq!(n.iter().sum::<usize>(), 24);
    }

    #[test]
    fn uniform_ratios_and_zero_budget() {
        let g = group_experts(&[0.5, 0.3, 0.2]);
        assert_eq!(allocate_budget(3, 10, 0.4, &g, BudgetRatios::uniform()).unwrap(), vec![4, 4, 4]);
        assert_eq!(allocate_budget(3, 10, 0.0, &g, BudgetRatios::uniform()).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn zero_ratios_rejected() {
        assert!(BudgetRatios::new(0.0, 0.0, 0.0).is_err());
        let g = group_experts(&[1.0]);
        let r = BudgetRatios::new(1.0, 1.0, 0.0).unwrap();
        assert!(matches!(allocate_budget(1, 4, 0.5, &g, r), Err(Error::Config(_))));
    }

    #[test]
    fn clamps_to_width() {
        let g = group_experts(&[0.9, 0.05, 0.05]);
        let n = allocate_budget(3, 4, 1.0, &g, BudgetRatios::new(10.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(n[0], 4);
    }

    #[test]
    fn parse_ratios() {
        let r: BudgetRatios = "3:2:1".parse().unwrap();
        assert_eq!(r.0, [3.0, 2.0, 1.0]);
        assert!("3:2".parse::<BudgetRatios>().is_err());
        assert!("a:b:c".parse::<BudgetRatios>().is_err());
    }

    #[test]
    fn apply_budget_examples() {
        let h = vec![vec![1.0, -3.0, 2.0]];
        assert_eq!(apply_budget(&h, &[3]).unwrap(), vec![vec![true; 3]]);
        assert_eq!(apply_budget(&h, &[0]).unwrap(), vec![vec![false; 3]]);
        assert_eq!(apply_budget(&h, &[2]).unwrap(), vec![vec![false, true, true]]);
        assert!(apply_budget(&h, &[4]).is_err());
    }
}
