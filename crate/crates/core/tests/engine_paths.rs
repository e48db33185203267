mod common;

use common::*;
use moe_sparsekit::calibrate::{build_table, collect_magnitudes, CalibrationTable};
use moe_sparsekit::engine::{max_rel_diff, BudgetPolicy, ThresholdPolicy, TopKPolicy};
use moe_sparsekit::model::{generate_synthetic, synthetic_tokens, ExpertWeights, MoEConfig, MoELayerWeights};
use moe_sparsekit::{BudgetRatios, Engine, ExecPath, MaskSet, Matrix, SparsityLevel, SwitchTable};
use rand::Rng;

fn calibrated(engine: &Engine<'_>, targets: &[f64], seed: u64) -> CalibrationTable {
    let d = engine.weights().config.d_model;
    let sample = collect_magnitudes(engine, &synthetic_tokens(128, d, seed), 1 << 16, seed).unwrap();
    build_table(&sample, targets, (&engine.weights().config).into()).unwrap()
}

#[test]
fn single_expert_matches_plain_swiglu_ffn() {
    let w = generate_synthetic(MoEConfig::new(1, 1, 12, 20), 4, 1.0).unwrap();
    let x = synthetic_tokens(5, 12, 9);
    let r = Engine::new(&w).forward_dense(&x).unwrap();
    let ex = &w.experts[0];
    for t in 0..5 {
        let h = oracle_hidden(&ex.gate, &ex.up, x.row(t));
        let y = oracle_down(&ex.down_t, &h);
        for (a, b) in r.outputs.row(t).iter().zip(&y) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
    assert!(r.route.topk_weights.iter().all(|&v| v == 1.0));
}

#[test]
fn duplicate_experts_equal_single_expert() {
    let base = generate_synthetic(MoEConfig::new(1, 1, 6, 10), 2, 1.0).unwrap();
    let ex: ExpertWeights = base.experts[0].clone();
    let router = Matrix::zeros(2, 6);
    let two = MoELayerWeights::new(MoEConfig::new(2, 2, 6, 10), router, vec![ex.clone(), ex], None).unwrap();
    let x = synthetic_tokens(4, 6, 1);
    let a = Engine::new(&base).forward_dense(&x).unwrap();
    let b = Engine::new(&two).forward_dense(&x).unwrap();
    assert_eq!(b.route.topk_weights, vec![0.5; 8]);
    assert!(max_rel_diff(&b.outputs, &a.outputs) <= 1e-6);
}

#[test]
fn all_true_masks_are_bitwise_dense() {
    let w = random_model(11, true);
    let cfg = w.config;
    let x = synthetic_tokens(7, cfg.d_model, 3);
    let e = Engine::new(&w);
    let masks = MaskSet {
        top_k: cfg.top_k,
        d_ffn: cfg.d_ffn,
        routed: vec![true; 7 * cfg.top_k * cfg.d_ffn],
        d_shared: cfg.d_shared,
        shared: Some(vec![true; 7 * cfg.d_shared]),
    };
    let dense = e.forward_dense(&x).unwrap();
    let masked = e.forward_masked_dense(&x, &masks).unwrap();
    assert_eq!(dense.outputs, masked.outputs);
    assert_eq!(dense.macs, masked.macs);
    assert_eq!(masked.path, ExecPath::MaskedDense);
}

#[test]
fn random_masks_match_scalar_oracle() {
    for seed in 0..10 {
        let w = random_model(seed, seed % 2 == 0);
        let cfg = w.config;
        let b = 6;
        let x = synthetic_tokens(b, cfg.d_model, seed + 100);
        let mut r = rng(seed ^ 0xabc);
        let routed: Vec<bool> = (0..b * cfg.top_k * cfg.d_ffn).map(|_| r.random_bool(0.4)).collect();
        let masks = MaskSet { top_k: cfg.top_k, d_ffn: cfg.d_ffn, routed: routed.clone(), d_shared: cfg.d_shared, shared: None };
        let got = Engine::new(&w).forward_masked_dense(&x, &masks).unwrap();
        let keep = |t: usize, s: usize, n: usize| routed[(t * cfg.top_k + s) * cfg.d_ffn + n];
        let (ids, want) = oracle_forward(&w, &x, &keep);
        assert_eq!(ids.concat(), got.route.topk_ids, "seed {seed}");
        assert!(rel_diff_f64(&got.outputs, &want) <= 1e-5, "seed {seed}");
    }
}

#[test]
fn sparse_masks_round_trip_through_mask_set() {
    let w = random_model(5, true);
    let cfg = w.config;
    let e = Engine::new(&w);
    let x = synthetic_tokens(9, cfg.d_model, 2);
    let tau = calibrated(&e, &[0.7], 1).lookup(0.7);
    let sparse = e.forward_sparse(&x, tau).unwrap();
    let active = sparse.active.as_ref().unwrap();
    let mut routed = vec![false; 9 * cfg.top_k * cfg.d_ffn];
    for t in 0..9 {
        let ids = sparse.route.ids(t);
        for &fr in active.active(t) {
            let (ex, n) = (fr as usize / cfg.d_ffn, fr as usize % cfg.d_ffn);
            let slot = ids.iter().position(|&i| i == ex).unwrap();
            routed[(t * cfg.top_k + slot) * cfg.d_ffn + n] = true;
        }
    }
    let masks = MaskSet { top_k: cfg.top_k, d_ffn: cfg.d_ffn, routed, d_shared: cfg.d_shared, shared: None };
    let oracle = e.forward_masked_dense(&x, &masks).unwrap();
    let policy = e.forward_masked_with(&x, &ThresholdPolicy { tau }).unwrap();
    assert_eq!(oracle.outputs, policy.outputs);
    assert!(max_rel_diff(&sparse.outputs, &oracle.outputs) <= 1e-5);
    assert!((oracle.achieved_routed_sparsity - sparse.achieved_routed_sparsity).abs() < 1e-15);
}

#[test]
fn outputs_independent_of_thread_count() {
    let w = random_model(3, true);
    let x = synthetic_tokens(33, w.config.d_model, 5);
    let one = Engine::new(&w);
    let four = Engine::new(&w).with_threads(4).unwrap();
    let tau = calibrated(&one, &[0.8], 2).lookup(0.8);
    let (a, b) = (one.forward_sparse(&x, tau).unwrap(), four.forward_sparse(&x, tau).unwrap());
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.macs, b.macs);
    assert_eq!(a.active, b.active);
    assert_eq!(one.forward_dense(&x).unwrap().outputs, four.forward_dense(&x).unwrap().outputs);
}

#[test]
fn step_delegates_by_batch_size() {
    let w = random_model(8, false);
    let e = Engine::new(&w);
    let switch = SwitchTable { tipping_batch: Some(4) };
    let small = synthetic_tokens(3, w.config.d_model, 1);
    let big = synthetic_tokens(4, w.config.d_model, 1);
    let r = e.step(&small, 0.0, &switch).unwrap();
    assert_eq!(r.path, ExecPath::Sparse);
    assert_eq!(r.outputs, e.forward_sparse(&small, 0.0).unwrap().outputs);
    let r = e.step(&big, 0.0, &switch).unwrap();
    assert_eq!(r.path, ExecPath::Dense);
    assert_eq!(r.outputs, e.forward_dense(&big).unwrap().outputs);
}

#[test]
fn equal_budget_ratios_match_topk_policy() {
    let w = generate_synthetic(MoEConfig::new(8, 4, 16, 32), 3, 1.0).unwrap();
    let e = Engine::new(&w);
    let x = synthetic_tokens(16, 16, 4);
    for s_active in [0.25, 0.5, 0.75] {
        let budget = e
            .forward_masked_with(&x, &BudgetPolicy { s_active, ratios: BudgetRatios::uniform() })
            .unwrap();
        let topk = e
            .forward_masked_with(
                &x,
                &TopKPolicy { sparsity: SparsityLevel::new(1.0 - s_active).unwrap(), include_shared: false },
            )
            .unwrap();
        assert_eq!(budget.outputs, topk.outputs);
    }
}

#[test]
fn rs_mode_masks_shared_expert() {
    let w = generate_synthetic(MoEConfig::new(4, 2, 8, 16).with_shared(16), 1, 1.0).unwrap();
    let e = Engine::new(&w);
    let x = synthetic_tokens(8, 8, 4);
    let s = SparsityLevel::new(0.5).unwrap();
    let r = e.forward_masked_with(&x, &TopKPolicy { sparsity: s, include_shared: false }).unwrap();
    let rs = e.forward_masked_with(&x, &TopKPolicy { sparsity: s, include_shared: true }).unwrap();
    assert_eq!(r.achieved_routed_sparsity, 0.5);
    assert!((r.achieved_total_sparsity - 0.5 * 32.0 / 48.0).abs() < 1e-12);
    assert_eq!(rs.achieved_total_sparsity, 0.5);
    assert_ne!(r.outputs, rs.outputs);
}
