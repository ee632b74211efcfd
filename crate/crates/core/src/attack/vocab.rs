use super::{
    candidate_count, for_each_tuple, l1, AttackBudget, AttackError, AttackResult, AttackStatus, Best,
    CollisionCertificate, GapOutcome, RecoveredToken, ShardObservation,
};
use crate::model::{Model, ModelError, TokenId};
use crate::sharding::slot;

/// Match tolerance per hidden-row element.
const MATCH_TOLERANCE: f64 = 1e-6;

/// Recovers the tokens behind observed hidden rows gap by gap.
///
/// For each gap between consecutive observed indices, every tuple of
/// `gap` tokens is appended to the tokens recovered so far and run through
/// the model; the tuple whose last row is L1-closest to the observation wins.
/// Stops at the first gap larger than `budget.t_max`.
///
/// With `truth`, a recovered tuple that differs from the true one is
/// reported as a collision, certified by the true tuple's distance.
pub fn vocab_match(
    model: &Model,
    obs: &ShardObservation,
    budget: &AttackBudget,
    truth: Option<&[TokenId]>,
) -> Result<AttackResult, AttackError> {
    budget.validate()?;
    let cfg = model.config();
    if obs.layer > cfg.num_layers {
        return Err(ModelError::LayerOutOfRange { layer: obs.layer, num_layers: cfg.num_layers }.into());
    }
    if obs.rows.rows() != obs.indices.len() || obs.rows.cols() != cfg.d_emb {
        return Err(AttackError::ShapeMismatch(format!(
            "{} observed rows of width {} for {} indices",
            obs.rows.rows(),
            obs.rows.cols(),
            obs.indices.len()
        )));
    }
    if let Some(last) = obs.indices.last() {
        if last > cfg.max_seq {
            return Err(ModelError::SequenceTooLong { len: last, max_seq: cfg.max_seq }.into());
        }
    }
    let tolerance = MATCH_TOLERANCE * cfg.d_emb as f64;

    let mut result = AttackResult::empty();
    let mut prefix: Vec<TokenId> = Vec::new();
    let mut prev = 0;
    for (j, index) in obs.indices.iter().enumerate() {
        let gap = index - prev;
        if gap > budget.t_max {
            result.status = AttackStatus::InfeasibleBudget;
            result.limiting_gap = Some((prev + 1, gap));
            return Ok(result);
        }
        let count = candidate_count(cfg.vocab_size, gap);
        if result.forward_pass_count.saturating_add(count) > budget.pass_cap {
            return Err(AttackError::PassCapExhausted { cap: budget.pass_cap, partial: Box::new(result) });
        }

        let target = obs.rows.row(j);
        let true_tuple = truth.and_then(|t| t.get(prev..index));
        let mut best = Best::new();
        let mut candidate = prefix.clone();
        let mut failure = None;
        for_each_tuple(cfg.vocab_size, gap, |tuple| {
            if failure.is_some() {
                return;
            }
            candidate.truncate(prefix.len());
            candidate.extend_from_slice(tuple);
            match model.forward_prefix(&candidate, obs.layer) {
                Ok(h) => best.offer(tuple, l1(h.rows.row(index - 1), target), tolerance, true_tuple),
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e.into());
        }
        result.forward_pass_count += count;
        result.gaps.push(GapOutcome {
            indices: (prev + 1..=index).collect(),
            anchor: index,
            tokens: best.tuple.clone(),
            best_distance: best.distance,
            runner_up_distance: best.runner_up.is_finite().then_some(best.runner_up),
            tolerance,
            matches: best.matches,
            passes: count,
        });

        if best.distance > tolerance {
            result.status = AttackStatus::NoMatch;
            return Ok(result);
        }
        result
            .recovered
            .extend(best.tuple.iter().enumerate().map(|(o, &token)| RecoveredToken { index: prev + 1 + o, token }));
        if let Some(t) = true_tuple {
            if t != best.tuple.as_slice() {
                result.status = AttackStatus::CollisionSuspected;
                result.collision = Some(CollisionCertificate {
                    anchor: index,
                    recovered: best.tuple.clone(),
                    truth: t.to_vec(),
                    recovered_distance: best.distance,
                    true_distance: best.truth_distance.unwrap_or(f64::INFINITY),
                });
                return Ok(result);
            }
        }
        if best.matches > 1 {
            result.status = AttackStatus::CollisionSuspected;
            return Ok(result);
        }
        prefix.extend_from_slice(&best.tuple);
        debug_assert_eq!(prefix.len(), slot(index) + 1);
        prev = index;
    }
    Ok(result)
}
