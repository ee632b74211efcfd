mod common;

use cascade_core::attack::{
    estimate_cost, layer0_f_values, layer0_meu_attack, subset_decomposition_check, vocab_match, AttackBudget,
    AttackError, AttackStatus, CompNodeView, DecompositionLists, ShardObservation,
};
use cascade_core::model::{Model, ModelConfig, TokenId};
use cascade_core::netsim::NetworkParams;
use cascade_core::protocol::{Capture, Cluster};
use cascade_core::sharding::{build_plan, IndexSet, ShardPlan, SplitFactor};
use num_bigint::BigUint;
use proptest::prelude::*;

fn small_vocab(vocab: usize, gqa: bool) -> ModelConfig {
    ModelConfig { vocab_size: vocab, ..common::tiny(gqa) }
}

fn observe(m: &Model, tokens: &[TokenId], layer: usize, indices: &[usize]) -> ShardObservation {
    let hidden = m.forward_prefix(tokens, layer).unwrap().rows;
    ShardObservation::from_hidden(layer, &hidden, IndexSet::new(indices.to_vec()).unwrap())
}

fn layer0_views(m: &Model, plan: &ShardPlan, tokens: &[TokenId]) -> Vec<CompNodeView> {
    Cluster::new(m, plan.clone(), NetworkParams::default())
        .unwrap()
        .forward_capturing(tokens, Capture { views_at_layer: Some(0), keep_kv: false })
        .unwrap()
        .views
}

#[test]
fn every_second_index_recovers_the_prefix() {
    let m = common::model(common::tiny(true), 3);
    let tokens = common::prompt(&mut common::rng(3), 8, 32);
    let obs = observe(&m, &tokens, 1, &[2, 4, 6]);
    let budget = AttackBudget::from_rho(3).unwrap();
    let result = vocab_match(&m, &obs, &budget, Some(&tokens)).unwrap();
    assert_eq!(result.status, AttackStatus::Recovered);
    assert_eq!(result.tokens(), tokens[..6]);
    assert_eq!(result.recovered.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
    assert_eq!(result.forward_pass_count, 3 * 32 * 32);
    for gap in &result.gaps {
        assert_eq!(gap.matches, 1);
        assert!(gap.best_distance <= gap.tolerance && gap.runner_up_distance.unwrap() > gap.tolerance);
    }
}

#[test]
fn a_gap_of_four_is_over_budget() {
    let m = common::model(common::tiny(true), 3);
    let tokens = common::prompt(&mut common::rng(4), 6, 32);
    let result = vocab_match(&m, &observe(&m, &tokens, 1, &[1, 5]), &AttackBudget::from_rho(3).unwrap(), None).unwrap();
    assert_eq!(result.status, AttackStatus::InfeasibleBudget);
    assert_eq!(result.limiting_gap, Some((2, 4)));
    assert_eq!(result.tokens(), tokens[..1]);
    assert_eq!(result.forward_pass_count, 32);
}

#[test]
fn full_observation_costs_one_vocab_sweep_per_token() {
    for layer in 1..=2 {
        let m = common::model(common::tiny(false), 10 + layer as u64);
        for seed in 0..5 {
            let tokens = common::prompt(&mut common::rng(seed), 6, 32);
            let obs = observe(&m, &tokens, layer, &[1, 2, 3, 4, 5, 6]);
            let result = vocab_match(&m, &obs, &AttackBudget::from_rho(2).unwrap(), Some(&tokens)).unwrap();
            assert_eq!(result.forward_pass_count, 6 * 32);
            match result.status {
                AttackStatus::Recovered => assert_eq!(result.tokens(), tokens),
                AttackStatus::CollisionSuspected => {
                    let cert = result.collision.expect("certificate");
                    assert!(cert.recovered_distance <= cert.true_distance);
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }
}

#[test]
fn pass_count_follows_the_gap_law() {
    let m = common::model(small_vocab(8, true), 5);
    let tokens = common::prompt(&mut common::rng(5), 10, 8);
    for indices in [vec![3, 4, 7], vec![1, 2, 3], vec![2, 5, 8, 10]] {
        let set = IndexSet::new(indices.clone()).unwrap();
        let budget = AttackBudget::from_rho(4).unwrap();
        let result = vocab_match(&m, &observe(&m, &tokens, 2, &indices), &budget, Some(&tokens)).unwrap();
        let cost = estimate_cost(&set, 8, &budget, None).unwrap();
        assert_eq!(BigUint::from(result.forward_pass_count), cost.cost.value);
        assert_eq!(result.status, AttackStatus::Recovered);
    }
}

#[test]
fn pass_cap_returns_the_partial_result() {
    let m = common::model(common::tiny(true), 3);
    let tokens = common::prompt(&mut common::rng(3), 6, 32);
    let budget = AttackBudget::from_rho(3).unwrap().with_pass_cap(1100);
    match vocab_match(&m, &observe(&m, &tokens, 1, &[2, 4]), &budget, None) {
        Err(AttackError::PassCapExhausted { cap, partial }) => {
            assert_eq!(cap, 1100);
            assert_eq!(partial.forward_pass_count, 1024);
            assert_eq!(partial.tokens(), tokens[..2]);
        }
        other => panic!("expected cap error, got {other:?}"),
    }
}

#[test]
fn budget_must_be_consistent() {
    assert!(AttackBudget::from_rho(0).is_err());
    let b = AttackBudget { t_max: 3, rho: 3, pass_cap: 5 };
    assert!(matches!(b.validate(), Err(AttackError::InvalidBudget(_))));
    assert!(AttackBudget::from_rho(2).unwrap().with_pass_cap(0).validate().is_err());
}

#[test]
fn cost_of_three_sparse_observations() {
    let set = IndexSet::new(vec![3, 5, 10]).unwrap();
    let v: u128 = 256_000;
    let est = estimate_cost(&set, 256_000, &AttackBudget::from_rho(3).unwrap(), Some(1000)).unwrap();
    assert_eq!(est.cost.value, BigUint::from(v.pow(3) + v.pow(2) + v.pow(5)));
    assert!((27.0..=27.1).contains(&est.cost.log10));
    assert_eq!(est.restricted.unwrap().value, BigUint::from(1000u128.pow(3) + 1000u128.pow(2) + 1000u128.pow(5)));
    assert!(!est.feasibility.feasible);
    assert_eq!(est.feasibility.max_gap, 5);
}

/// `Σ_{s ∈ S, s ≤ r} exp(q_r·k_s) v_s` and `Σ exp(q_r·k_s)` from vanilla projections.
fn direct_f(m: &Model, tokens: &[TokenId], r: usize, s: &IndexSet) -> Vec<f64> {
    let cfg = m.config();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let qkv = m.project_qkv(0, &m.embed(tokens), &positions).unwrap();
    let mut out = Vec::new();
    for h in 0..cfg.n_heads {
        let kv = h / cfg.group_size();
        let mut expsum = 0.0;
        let mut f = vec![0.0; cfg.head_dim];
        for x in s.iter().filter(|&x| x <= r) {
            let w: f64 = qkv.q.get(h, r - 1).iter().zip(qkv.k.get(kv, x - 1)).map(|(a, b)| a * b).sum::<f64>().exp();
            expsum += w;
            f.iter_mut().zip(qkv.v.get(kv, x - 1)).for_each(|(a, b)| *a += w * b);
        }
        out.push(expsum);
        out.extend(f);
    }
    out
}

#[test]
fn f_values_match_the_direct_sum() {
    let m = common::model(common::tiny(true), 6);
    let tokens = common::prompt(&mut common::rng(6), 18, 32);
    let plan = build_plan(18, 2, 3, SplitFactor::Fixed(2)).unwrap();
    for view in layer0_views(&m, &plan, &tokens) {
        for fv in layer0_f_values(&view).unwrap() {
            for (row, r) in view.r.iter().enumerate() {
                let expected = direct_f(&m, &tokens, r, &plan.s[fv.key_shard - 1]);
                assert!(common::rel_err(&fv.row_vector(row), &expected) < 1e-12);
            }
        }
    }
}

#[test]
fn layer0_attack_fills_single_gaps() {
    let m = common::model(small_vocab(16, true), 7);
    let tokens = common::prompt(&mut common::rng(7), 8, 16);
    let plan = build_plan(8, 1, 2, SplitFactor::Fixed(1)).unwrap();
    let views = layer0_views(&m, &plan, &tokens);
    let budget = AttackBudget::from_rho(3).unwrap();
    let result = layer0_meu_attack(&m, &views[0], &budget, Some(&tokens)).unwrap();
    assert_eq!(result.status, AttackStatus::Recovered);
    let got: Vec<(usize, TokenId)> = result.recovered.iter().map(|r| (r.index, r.token)).collect();
    assert_eq!(got, vec![(2, tokens[1]), (4, tokens[3]), (6, tokens[5])]);
    assert_eq!(result.forward_pass_count, 3 * 16);
}

#[test]
fn layer0_attack_refuses_wide_clusters() {
    let m = common::model(small_vocab(16, true), 7);
    let tokens = common::prompt(&mut common::rng(8), 12, 16);
    let plan = build_plan(12, 3, 2, SplitFactor::Fixed(1)).unwrap();
    let views = layer0_views(&m, &plan, &tokens);
    let result = layer0_meu_attack(&m, &views[0], &AttackBudget::from_rho(3).unwrap(), Some(&tokens)).unwrap();
    assert_eq!(result.status, AttackStatus::InfeasibleBudget);
    assert_eq!(result.limiting_gap, Some((4, 3)));
    assert!(result.recovered.is_empty());
    assert_eq!(result.forward_pass_count, 0);
}

#[test]
fn layer0_attack_rejects_other_layers() {
    let m = common::model(small_vocab(16, true), 7);
    let tokens = common::prompt(&mut common::rng(8), 8, 16);
    let plan = build_plan(8, 1, 2, SplitFactor::Fixed(1)).unwrap();
    let mut view = layer0_views(&m, &plan, &tokens).remove(0);
    view.layer = 1;
    assert!(matches!(
        layer0_meu_attack(&m, &view, &AttackBudget::from_rho(3).unwrap(), None),
        Err(AttackError::ShapeMismatch(_))
    ));
}

#[test]
fn decomposition_holds_on_the_worked_plan() {
    let m = common::model(small_vocab(16, true), 9);
    let tokens = common::prompt(&mut common::rng(9), 18, 16);
    let plan = build_plan(18, 2, 3, SplitFactor::Fixed(2)).unwrap();
    for i in 1..=plan.alpha {
        for k in 1..=plan.beta {
            let report = subset_decomposition_check(&m, &plan, &tokens, i, k).unwrap();
            assert!(report.pass, "({i},{k}): {:e}", report.max_error);
            assert_eq!(report.witness.len(), plan.s[k - 1].len());
        }
    }
}

#[test]
fn decomposition_fails_for_a_wrong_selection() {
    let m = common::model(small_vocab(16, true), 9);
    let tokens = common::prompt(&mut common::rng(9), 18, 16);
    let plan = build_plan(18, 2, 3, SplitFactor::Fixed(2)).unwrap();
    let view = layer0_views(&m, &plan, &tokens).remove(2);
    let lists = DecompositionLists::build(&m, &view, 1).unwrap();
    let first = plan.s[0].first().unwrap();
    assert!(lists.residual(|x| tokens[x - 1]) < 1e-9);
    let wrong = lists.residual(|x| if x == first { (tokens[x - 1] + 1) % 16 } else { tokens[x - 1] });
    assert!(wrong > 1e-6, "{wrong:e}");
}

#[test]
fn decomposition_refuses_large_vocabularies() {
    let m = common::model(small_vocab(128, true), 9);
    let tokens = common::prompt(&mut common::rng(9), 18, 128);
    let plan = build_plan(18, 2, 3, SplitFactor::Fixed(2)).unwrap();
    assert!(matches!(
        subset_decomposition_check(&m, &plan, &tokens, 1, 1),
        Err(AttackError::VocabTooLarge { vocab: 128, .. })
    ));
}

#[test]
fn attack_result_serializes_status_in_snake_case() {
    let m = common::model(common::tiny(true), 3);
    let tokens = common::prompt(&mut common::rng(4), 6, 32);
    let result = vocab_match(&m, &observe(&m, &tokens, 1, &[1, 5]), &AttackBudget::from_rho(3).unwrap(), None).unwrap();
    let json = serde_json::to_value(&result).unwrap();
    assert_eq!(json["status"], "infeasible_budget");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn layer0_recovers_exactly_what_the_budget_allows(seed in 0u64..1000, alpha in 2usize..=3, m_split in 1usize..=2) {
        let model = common::model(small_vocab(16, seed % 2 == 0), seed);
        let n = 4 * alpha * m_split;
        let tokens = common::prompt(&mut common::rng(seed), n, 16);
        let plan = build_plan(n, 1, alpha, SplitFactor::Fixed(m_split)).unwrap();
        let budget = AttackBudget::from_rho(2).unwrap();
        for view in layer0_views(&model, &plan, &tokens) {
            let result = layer0_meu_attack(&model, &view, &budget, Some(&tokens)).unwrap();
            prop_assert!(result.status != AttackStatus::NoMatch);
            for r in &result.recovered {
                prop_assert_eq!(r.token, tokens[r.index - 1]);
            }
            for gap in &result.gaps {
                prop_assert!(gap.indices.len() < budget.rho);
            }
        }
    }
}
