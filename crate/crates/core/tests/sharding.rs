use cascade_core::attack::AttackBudget;
use cascade_core::sharding::{
    build_plan, c_delta_sequence, collusion_union, feasibility, gap_profile, symmetric_pairs, validate_plan,
    vocab_matching_cost, CDeltaSpec, IndexSet, NodeId, PlanError, PlanViolation, ShardPlan, SplitFactor,
};
use num_bigint::BigUint;
use proptest::prelude::*;

type PieceKey = (usize, usize, usize, usize);

fn set(v: &[usize]) -> IndexSet {
    IndexSet::new(v.to_vec()).unwrap()
}

/// Membership test straight from the definition.
fn c_delta_oracle(c: usize, delta: usize, start: usize, n: usize) -> Vec<usize> {
    (start..=n).filter(|x| (x - start) % delta < c).collect()
}

#[test]
fn c_delta_sequence_matches_definition() {
    assert_eq!(c_delta_sequence(CDeltaSpec { c: 3, delta: 9, start: 4 }, 18).unwrap(), set(&[4, 5, 6, 13, 14, 15]));
    for c in 1..4 {
        for delta in c..10 {
            for start in 1..8 {
                for n in start..30 {
                    let got = c_delta_sequence(CDeltaSpec { c, delta, start }, n).unwrap();
                    assert_eq!(got.as_slice(), c_delta_oracle(c, delta, start, n).as_slice());
                }
            }
        }
    }
}

#[test]
fn worked_plan_matches_published_sets() {
    let plan = build_plan(18, 2, 3, SplitFactor::Fixed(2)).unwrap();
    assert_eq!((plan.alpha, plan.beta, plan.m, plan.c, plan.delta), (3, 6, 2, 2, 6));
    assert_eq!(plan.r, vec![set(&[1, 2, 7, 8, 13, 14]), set(&[3, 4, 9, 10, 15, 16]), set(&[5, 6, 11, 12, 17, 18])]);
    assert_eq!(
        plan.s,
        vec![
            set(&[1, 7, 13]),
            set(&[2, 8, 14]),
            set(&[3, 9, 15]),
            set(&[4, 10, 16]),
            set(&[5, 11, 17]),
            set(&[6, 12, 18]),
        ]
    );
    // Every AttnNode's token set, keyed by its pair of split pieces.
    let table: [(PieceKey, &[usize]); 21] = [
        ((1, 1, 1, 1), &[1, 7, 13]),
        ((1, 1, 2, 1), &[1, 3, 7, 9, 13, 15]),
        ((1, 1, 3, 1), &[1, 5, 7, 11, 13, 17]),
        ((1, 1, 1, 2), &[1, 2, 7, 8, 13, 14]),
        ((1, 1, 2, 2), &[1, 4, 7, 10, 13, 16]),
        ((1, 1, 3, 2), &[1, 6, 7, 12, 13, 18]),
        ((2, 1, 2, 1), &[3, 9, 15]),
        ((2, 1, 3, 1), &[3, 5, 9, 11, 15, 17]),
        ((2, 1, 1, 2), &[2, 3, 8, 9, 14, 15]),
        ((2, 1, 2, 2), &[3, 4, 9, 10, 15, 16]),
        ((2, 1, 3, 2), &[3, 6, 9, 12, 15, 18]),
        ((3, 1, 3, 1), &[5, 11, 17]),
        ((3, 1, 1, 2), &[2, 5, 8, 11, 14, 17]),
        ((3, 1, 2, 2), &[4, 5, 10, 11, 16, 17]),
        ((3, 1, 3, 2), &[5, 6, 11, 12, 17, 18]),
        ((1, 2, 1, 2), &[2, 8, 14]),
        ((1, 2, 2, 2), &[2, 4, 8, 10, 14, 16]),
        ((1, 2, 3, 2), &[2, 6, 8, 12, 14, 18]),
        ((2, 2, 2, 2), &[4, 10, 16]),
        ((2, 2, 3, 2), &[4, 6, 10, 12, 16, 18]),
        ((3, 2, 3, 2), &[6, 12, 18]),
    ];
    for ((i, x, j, y), expected) in table {
        let a = plan.m * (i - 1) + x;
        let b = plan.m * (j - 1) + y;
        assert_eq!(plan.node_indices(NodeId::attn(a, b)).unwrap().as_slice(), expected, "S_{i}{x}{j}{y}");
    }
    assert_eq!(plan.attn_pairs.len(), 21);
    assert!(validate_plan(&plan).is_empty());
}

#[test]
fn auto_split_uses_cluster_size() {
    assert_eq!(build_plan(18, 2, 3, SplitFactor::Auto).unwrap(), build_plan(18, 2, 3, SplitFactor::Fixed(2)).unwrap());
}

#[test]
fn split_of_one_is_identity() {
    let plan = build_plan(16, 2, 2, SplitFactor::Fixed(1)).unwrap();
    assert_eq!(plan.s, plan.r);
}

#[test]
fn minimum_alpha_for_coverage() {
    for c in 1usize..5 {
        for delta in c..16 {
            let n = 3 * delta;
            let min_alpha = delta.div_ceil(c);
            for alpha in 1..=min_alpha + 1 {
                let covered: std::collections::BTreeSet<usize> = (1..=alpha)
                    .filter_map(|i| c_delta_sequence(CDeltaSpec { c, delta, start: (i - 1) * c + 1 }, n).ok())
                    .flat_map(|s| s.as_slice().to_vec())
                    .collect();
                assert_eq!(covered.len() == n, alpha >= min_alpha, "c={c} delta={delta} alpha={alpha}");
            }
        }
    }
}

#[test]
fn validate_reports_overlap_and_missing_pairs() {
    let mut plan = build_plan(8, 1, 2, SplitFactor::Fixed(1)).unwrap();
    plan.r[1] = set(&[1, 2, 4, 6, 8]);
    let v = validate_plan(&plan);
    assert!(v.iter().any(|x| x.to_string().contains("R not disjoint")), "{v:?}");

    let mut plan = build_plan(12, 1, 3, SplitFactor::Fixed(2)).unwrap();
    plan.attn_pairs.retain(|&p| p != (2, 5));
    let v = validate_plan(&plan);
    assert!(matches!(v.as_slice(), [PlanViolation::PairCoverage { j: 2, k: 5, .. }]), "{v:?}");
    assert!(v[0].to_string().contains("pair coverage"));

    let mut plan = build_plan(12, 2, 3, SplitFactor::Fixed(1)).unwrap();
    plan.delta = 5;
    assert!(validate_plan(&plan).iter().any(|x| matches!(x, PlanViolation::DeltaMismatch { .. })));

    let mut plan = build_plan(12, 2, 3, SplitFactor::Fixed(1)).unwrap();
    plan.attn_pairs.push((1, 1));
    assert!(validate_plan(&plan).iter().any(|x| matches!(x, PlanViolation::DuplicatePair { j: 1, k: 1 })));
}

#[test]
fn plan_json_round_trip() {
    let plan = build_plan(18, 2, 3, SplitFactor::Auto).unwrap();
    let text = serde_json::to_string(&plan).unwrap();
    let back: ShardPlan = serde_json::from_str(&text).unwrap();
    assert_eq!(back, plan);
    let broken = text.replacen("[1,2,7,8,13,14]", "[2,1,7,8,13,14]", 1);
    assert!(serde_json::from_str::<ShardPlan>(&broken).is_err());
}

#[test]
fn gap_profiles() {
    let p = gap_profile(&set(&[3, 5, 10])).unwrap();
    assert_eq!((p.gaps.as_slice(), p.max_gap), (&[3, 2, 5][..], 5));
    assert!(gap_profile(&IndexSet::full(9)).unwrap().gaps.iter().all(|&g| g == 1));
    // Inter-cluster gap of a (c, delta)-sequence is delta - c + 1.
    let p = gap_profile(&set(&[1, 2, 7, 8, 13, 14])).unwrap();
    assert_eq!(p.max_gap, 6 - 2 + 1);
    assert_eq!(gap_profile(&IndexSet::default()), Err(PlanError::EmptySet));
}

#[test]
fn vocab_costs_match_integer_arithmetic() {
    let v: u128 = 256_000;
    let cost = vocab_matching_cost(&set(&[3, 5, 10]), 256_000).unwrap();
    assert_eq!(cost.value, BigUint::from(v.pow(3) + v.pow(2) + v.pow(5)));
    assert!((27.0..27.1).contains(&cost.log10), "{}", cost.log10);
    assert_eq!(vocab_matching_cost(&set(&[1]), 77).unwrap().value, BigUint::from(77u32));
    assert_eq!(vocab_matching_cost(&set(&[1, 2, 3]), 10).unwrap().value, BigUint::from(30u32));
    assert_eq!(vocab_matching_cost(&set(&[1]), 1), Err(PlanError::VocabTooSmall(1)));
}

/// `log10` from the decimal expansion.
fn decimal_log10(x: &BigUint) -> f64 {
    let digits = x.to_string();
    let lead: f64 = digits[..digits.len().min(17)].parse().unwrap();
    (lead.log10() - (digits.len().min(17) as f64 - 1.0)) + (digits.len() as f64 - 1.0)
}

#[test]
fn feasibility_examples() {
    let b = AttackBudget::from_rho(3).unwrap();
    assert!(feasibility(&set(&[2, 4, 6]), &b).unwrap().feasible);
    let f = feasibility(&set(&[1, 5]), &b).unwrap();
    assert!(!f.feasible);
    assert_eq!(f.limiting_gap.unwrap().gap, 4);
}

#[test]
fn collusion_of_two_comp_nodes() {
    let plan = build_plan(18, 2, 3, SplitFactor::Fixed(2)).unwrap();
    let b = AttackBudget::from_rho(3).unwrap();
    let one = collusion_union(&plan, &[NodeId::Comp(1)], &b).unwrap();
    assert_eq!(one.union, plan.r[0]);
    let two = collusion_union(&plan, &[NodeId::Comp(1), NodeId::Comp(2)], &b).unwrap();
    assert_eq!(two.union, set(&[1, 2, 3, 4, 7, 8, 9, 10, 13, 14, 15, 16]));
    assert!(two.profile.max_gap < one.profile.max_gap);
    let all = collusion_union(&plan, &plan.comp_nodes().collect::<Vec<_>>(), &b).unwrap();
    assert_eq!(all.union, IndexSet::full(18));
    assert!(all.feasibility.feasible);
    assert_eq!(collusion_union(&plan, &[NodeId::Comp(4)], &b).unwrap_err(), PlanError::UnknownNode(NodeId::Comp(4)));
}

fn plan_strategy() -> impl Strategy<Value = (usize, usize, usize, SplitFactor)> {
    (1usize..=4, 1usize..=3, 1usize..=4, 0usize..3)
        .prop_flat_map(|(alpha, c, periods, split)| {
            let delta = c * alpha;
            let split = match split {
                0 => SplitFactor::Auto,
                1 => SplitFactor::Fixed(1),
                _ => SplitFactor::Fixed(2),
            };
            (Just(alpha), Just(c), (delta * periods.max(2))..(delta * periods.max(2) + delta), Just(split))
        })
        .prop_map(|(alpha, c, n, split)| (n, c, alpha, split))
}

proptest! {
    #[test]
    fn plans_partition_both_families((n, c, alpha, split) in plan_strategy()) {
        let plan = build_plan(n, c, alpha, split).unwrap();
        prop_assert!(validate_plan(&plan).is_empty());
        for family in [&plan.r, &plan.s] {
            let mut all: Vec<usize> = family.iter().flat_map(|s| s.as_slice().to_vec()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (1..=n).collect::<Vec<_>>());
        }
        prop_assert_eq!(plan.beta, plan.m * plan.alpha);
        prop_assert_eq!(plan.attn_pairs.len(), plan.beta * (plan.beta + 1) / 2);
        prop_assert_eq!(&plan.attn_pairs, &symmetric_pairs(plan.beta));
        let sizes: Vec<usize> = plan.r.iter().map(IndexSet::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn split_of_one_keeps_shards((n, c, alpha, _) in plan_strategy()) {
        let plan = build_plan(n, c, alpha, SplitFactor::Fixed(1)).unwrap();
        prop_assert_eq!(plan.s, plan.r);
    }

    /// The m-split guarantee for AttnNode token sets. It needs every split
    /// piece to step by whole periods, i.e. `c | m`, and at least two
    /// periods so that a gap exists.
    #[test]
    fn split_attn_sets_have_no_runs_of_three(alpha in 2usize..=4, c in 1usize..=3, mult in 1usize..=2, periods in 2usize..=4) {
        let m = c * mult;
        let delta = c * alpha;
        prop_assume!(delta > 2);
        let plan = build_plan(delta * periods * mult, c, alpha, SplitFactor::Fixed(m)).unwrap();
        for node in plan.attn_nodes() {
            let held = plan.node_indices(node).unwrap();
            let idx = held.as_slice();
            prop_assert!(idx.windows(3).all(|w| w[2] - w[0] > 2), "{node}: {held}");
            let inner_max = idx.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
            prop_assert!(2 * inner_max >= delta, "{node}: {held}");
        }
    }

    #[test]
    fn collusion_is_monotone((n, c, alpha, split) in plan_strategy(), picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..5), extra in any::<prop::sample::Index>()) {
        let plan = build_plan(n, c, alpha, split).unwrap();
        let nodes = plan.nodes();
        let b = AttackBudget::from_rho(3).unwrap();
        let small: Vec<NodeId> = picks.iter().map(|i| nodes[i.index(nodes.len())]).collect();
        let mut large = small.clone();
        large.push(nodes[extra.index(nodes.len())]);
        let a = collusion_union(&plan, &small, &b).unwrap();
        let z = collusion_union(&plan, &large, &b).unwrap();
        prop_assert!(a.union.is_subset(&z.union));
        prop_assert!(z.profile.max_gap <= a.profile.max_gap);
    }

    #[test]
    fn cost_log10_is_consistent(idx in proptest::collection::btree_set(1usize..60, 1..8), v in 2u64..300_000) {
        let s = IndexSet::from_unsorted(idx);
        let cost = vocab_matching_cost(&s, v).unwrap();
        prop_assert!((cost.log10 - decimal_log10(&cost.value)).abs() < 1e-9);
    }

    #[test]
    fn wide_cluster_gaps_are_infeasible(c in 1usize..4, extra in 0usize..6, rho in 2usize..6, start in 1usize..4) {
        let delta = c + rho - 1 + extra;
        let n = start + 2 * delta + c;
        let s = c_delta_sequence(CDeltaSpec { c, delta, start }, n).unwrap();
        let f = feasibility(&s, &AttackBudget::from_rho(rho).unwrap()).unwrap();
        prop_assert!(!f.feasible);
    }

    #[test]
    fn tail_indices_are_round_robin(alpha in 1usize..5, c in 1usize..4, periods in 1usize..4, tail in 1usize..12) {
        let delta = c * alpha;
        let tail = tail % delta;
        prop_assume!(tail > 0);
        let n = delta * periods + tail;
        let plan = build_plan(n, c, alpha, SplitFactor::Fixed(1)).unwrap();
        prop_assert!(validate_plan(&plan).is_empty());
        prop_assert_eq!(plan.round_robin_tail, tail);
        for t in 0..tail {
            prop_assert_eq!(plan.comp_owner(delta * periods + 1 + t), Some(t % alpha + 1));
        }
    }
}
