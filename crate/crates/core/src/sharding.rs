//! Token-dimension shard plans.
//!
//! All index math here is 1-based: token indices run over `1..=N`, CompNodes
//! over `1..=alpha` and S shards over `1..=beta`. [`slot`] is the single
//! conversion point to 0-based storage.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackBudget;

/// 0-based storage slot (and rotary position) of a 1-based token index.
#[inline]
pub fn slot(index: usize) -> usize {
    debug_assert!(index >= 1, "token indices are 1-based");
    index - 1
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("{0} must be at least 1")]
    ZeroParameter(&'static str),
    #[error("delta {delta} smaller than cluster size {c}")]
    DeltaBelowC { c: usize, delta: usize },
    #[error("start index {start} exceeds N = {n}")]
    StartBeyondN { start: usize, n: usize },
    #[error("split factor m = {m} exceeds the smallest CompNode shard ({smallest} indices)")]
    SplitTooLarge { m: usize, smallest: usize },
    #[error("index set must be strictly increasing and 1-based")]
    MalformedIndexSet,
    #[error("empty index set")]
    EmptySet,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(u64),
    #[error("plan is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<PlanViolation>),
}

/// Strictly increasing list of 1-based token indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct IndexSet(Vec<usize>);

impl TryFrom<Vec<usize>> for IndexSet {
    type Error = PlanError;

    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<IndexSet> for Vec<usize> {
    fn from(s: IndexSet) -> Self {
        s.0
    }
}

impl IndexSet {
    pub fn new(indices: Vec<usize>) -> Result<Self, PlanError> {
        let ok = indices.first().is_none_or(|&f| f >= 1) && indices.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self(indices))
        } else {
            Err(PlanError::MalformedIndexSet)
        }
    }

    /// Sorts and deduplicates; zero is dropped.
    pub fn from_unsorted(indices: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = indices.into_iter().filter(|&i| i >= 1).collect();
        Self(set.into_iter().collect())
    }

    /// `{1, 2, ..., n}`.
    pub fn full(n: usize) -> Self {
        Self((1..=n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn first(&self) -> Option<usize> {
        self.0.first().copied()
    }

    pub fn last(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        Self::from_unsorted(self.iter().chain(other.iter()))
    }

    pub fn intersection(&self, other: &IndexSet) -> IndexSet {
        Self(self.iter().filter(|&i| other.contains(i)).collect())
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.iter().all(|i| other.contains(i))
    }

    /// Elements `<= n`.
    pub fn truncated(&self, n: usize) -> IndexSet {
        Self(self.iter().take_while(|&i| i <= n).collect())
    }
}

impl fmt::Display for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, i) in self.0.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}

/// Parameters of a `(c, delta)`-sequence: clusters of `c` consecutive
/// indices repeating every `delta`, beginning at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CDeltaSpec {
    pub c: usize,
    pub delta: usize,
    pub start: usize,
}

impl CDeltaSpec {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.c == 0 {
            return Err(PlanError::ZeroParameter("c"));
        }
        if self.start == 0 {
            return Err(PlanError::ZeroParameter("start"));
        }
        if self.delta < self.c {
            return Err(PlanError::DeltaBelowC { c: self.c, delta: self.delta });
        }
        Ok(())
    }
}

/// `{start, ..., start+c-1, start+delta, ..., start+delta+c-1, ...}` truncated to `<= n`.
pub fn c_delta_sequence(spec: CDeltaSpec, n: usize) -> Result<IndexSet, PlanError> {
    spec.validate()?;
    if spec.start > n {
        return Err(PlanError::StartBeyondN { start: spec.start, n });
    }
    let mut out = Vec::new();
    let mut base = spec.start;
    while base <= n {
        out.extend((base..base + spec.c).take_while(|&i| i <= n));
        base += spec.delta;
    }
    Ok(IndexSet(out))
}

/// How each CompNode shard is split into S shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFactor {
    /// `m = c`: piece `x` takes every `c`-th element of the sorted shard,
    /// which selects indices `delta` apart.
    Auto,
    /// Uniform stride split into `m` pieces.
    Fixed(usize),
}

impl SplitFactor {
    pub fn resolve(self, c: usize) -> usize {
        match self {
            SplitFactor::Auto => c,
            SplitFactor::Fixed(m) => m,
        }
    }
}

impl fmt::Display for SplitFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitFactor::Auto => write!(f, "auto"),
            SplitFactor::Fixed(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SplitRepr {
    Fixed(usize),
    Named(String),
}

impl Serialize for SplitFactor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SplitFactor::Auto => SplitRepr::Named("auto".into()).serialize(s),
            SplitFactor::Fixed(m) => SplitRepr::Fixed(*m).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for SplitFactor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match SplitRepr::deserialize(d)? {
            SplitRepr::Fixed(m) => Ok(SplitFactor::Fixed(m)),
            SplitRepr::Named(s) if s == "auto" => Ok(SplitFactor::Auto),
            SplitRepr::Named(s) => {
                Err(serde::de::Error::custom(format!("split factor must be a count or \"auto\", got {s:?}")))
            }
        }
    }
}

/// A CompNode (`Comp(i)`, holding `R_i`) or a merged AttnNode
/// (`Attn(j, k)` with `j <= k`, holding `S_j ∪ S_k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Comp(usize),
    Attn(usize, usize),
}

impl NodeId {
    /// Merged AttnNode for the unordered shard pair `{j, k}`.
    pub fn attn(j: usize, k: usize) -> Self {
        NodeId::Attn(j.min(k), j.max(k))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Comp(i) => write!(f, "comp:{i}"),
            NodeId::Attn(j, k) => write!(f, "attn:{j}-{k}"),
        }
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed node id {s:?}");
        if let Some(i) = s.strip_prefix("comp:") {
            return i.parse().map(NodeId::Comp).map_err(|_| bad());
        }
        if let Some(pair) = s.strip_prefix("attn:") {
            let (j, k) = pair.split_once('-').ok_or_else(bad)?;
            let j = j.parse().map_err(|_| bad())?;
            let k = k.parse().map_err(|_| bad())?;
            return Ok(NodeId::attn(j, k));
        }
        Err(bad())
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// R/S partitions of `[N]` plus the retained AttnNode pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n: usize,
    pub c: usize,
    pub delta: usize,
    pub alpha: usize,
    pub beta: usize,
    pub m: usize,
    pub r: Vec<IndexSet>,
    pub s: Vec<IndexSet>,
    /// Unordered S-shard pairs `(j, k)`, `j <= k`, one merged AttnNode each.
    pub attn_pairs: Vec<(usize, usize)>,
    /// Trailing indices placed round-robin because `N` is not a multiple of `c·alpha`.
    #[serde(default)]
    pub round_robin_tail: usize,
}

/// Builds the `(c, delta = c·alpha)` plan over `[n]` with an m-split of each
/// CompNode shard into S shards.
pub fn build_plan(n: usize, c: usize, alpha: usize, split: SplitFactor) -> Result<ShardPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::ZeroParameter("N"));
    }
    if c == 0 {
        return Err(PlanError::ZeroParameter("c"));
    }
    if alpha == 0 {
        return Err(PlanError::ZeroParameter("alpha"));
    }
    let m = split.resolve(c);
    if m == 0 {
        return Err(PlanError::ZeroParameter("m"));
    }
    let delta = c * alpha;
    let periodic_len = n / delta * delta;

    let mut r: Vec<Vec<usize>> = vec![Vec::new(); alpha];
    if periodic_len > 0 {
        for (i, shard) in r.iter_mut().enumerate() {
            let spec = CDeltaSpec { c, delta, start: i * c + 1 };
            *shard = c_delta_sequence(spec, periodic_len)?.0;
        }
    }
    for (t, index) in (periodic_len + 1..=n).enumerate() {
        r[t % alpha].push(index);
    }
    let round_robin_tail = n - periodic_len;

    let smallest = r.iter().map(Vec::len).min().unwrap_or(0);
    if m > smallest {
        return Err(PlanError::SplitTooLarge { m, smallest });
    }

    let mut s = Vec::with_capacity(alpha * m);
    for shard in &r {
        for x in 0..m {
            s.push(IndexSet(shard.iter().copied().skip(x).step_by(m).collect()));
        }
    }
    let beta = s.len();
    Ok(ShardPlan {
        n,
        c,
        delta,
        alpha,
        beta,
        m,
        r: r.into_iter().map(IndexSet).collect(),
        s,
        attn_pairs: symmetric_pairs(beta),
        round_robin_tail,
    })
}

/// Every `(j, k)` with `1 <= j <= k <= beta`.
pub fn symmetric_pairs(beta: usize) -> Vec<(usize, usize)> {
    (1..=beta).flat_map(|j| (j..=beta).map(move |k| (j, k))).collect()
}

impl ShardPlan {
    /// `R_i`, 1-based.
    pub fn r_shard(&self, i: usize) -> Option<&IndexSet> {
        i.checked_sub(1).and_then(|i| self.r.get(i))
    }

    /// `S_j`, 1-based.
    pub fn s_shard(&self, j: usize) -> Option<&IndexSet> {
        j.checked_sub(1).and_then(|j| self.s.get(j))
    }

    /// CompNode holding token `index`.
    pub fn comp_owner(&self, index: usize) -> Option<usize> {
        self.r.iter().position(|r| r.contains(index)).map(|i| i + 1)
    }

    /// S shard holding token `index`.
    pub fn s_owner(&self, index: usize) -> Option<usize> {
        self.s.iter().position(|s| s.contains(index)).map(|j| j + 1)
    }

    pub fn comp_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (1..=self.r.len()).map(NodeId::Comp)
    }

    pub fn attn_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.attn_pairs.iter().map(|&(j, k)| NodeId::attn(j, k))
    }

    /// CompNodes first, then AttnNodes in pair order.
    pub fn nodes(&self) -> Vec<NodeId> {
        self.comp_nodes().chain(self.attn_nodes()).collect()
    }

    /// Token indices a node directly observes.
    pub fn node_indices(&self, node: NodeId) -> Result<IndexSet, PlanError> {
        match node {
            NodeId::Comp(i) => self.r_shard(i).cloned().ok_or(PlanError::UnknownNode(node)),
            NodeId::Attn(j, k) => {
                let sj = self.s_shard(j).ok_or(PlanError::UnknownNode(node))?;
                let sk = self.s_shard(k).ok_or(PlanError::UnknownNode(node))?;
                Ok(sj.union(sk))
            }
        }
    }

    pub fn max_r_len(&self) -> usize {
        self.r.iter().map(IndexSet::len).max().unwrap_or(0)
    }

    pub fn max_s_len(&self) -> usize {
        self.s.iter().map(IndexSet::len).max().unwrap_or(0)
    }

    /// The same plan restricted to indices `<= n`. Shard numbering is kept.
    pub fn truncated(&self, n: usize) -> ShardPlan {
        let n = n.min(self.n);
        ShardPlan {
            n,
            r: self.r.iter().map(|s| s.truncated(n)).collect(),
            s: self.s.iter().map(|s| s.truncated(n)).collect(),
            round_robin_tail: self.round_robin_tail.saturating_sub(self.n - n),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanViolation {
    DeltaMismatch { c: usize, alpha: usize, delta: usize },
    ShardCount { family: char, declared: usize, actual: usize },
    BetaNotMAlpha { beta: usize, m: usize, alpha: usize },
    OutOfRange { family: char, shard: usize, index: usize },
    NotDisjoint { family: char, index: usize, first: usize, second: usize },
    NotCovering { family: char, index: usize },
    PairCoverage { j: usize, k: usize, x: usize, y: usize },
    DuplicatePair { j: usize, k: usize },
    PairOutOfRange { j: usize, k: usize },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::DeltaMismatch { c, alpha, delta } => {
                write!(f, "delta mismatch: delta = {delta} but c*alpha = {}", c * alpha)
            }
            PlanViolation::ShardCount { family, declared, actual } => {
                write!(f, "shard count: {family} has {actual} shards, declared {declared}")
            }
            PlanViolation::BetaNotMAlpha { beta, m, alpha } => {
                write!(f, "beta != m*alpha: {beta} != {m}*{alpha}")
            }
            PlanViolation::OutOfRange { family, shard, index } => {
                write!(f, "{family} out of range: index {index} in {family}_{shard}")
            }
            PlanViolation::NotDisjoint { family, index, first, second } => {
                write!(f, "{family} not disjoint: index {index} in {family}_{first} and {family}_{second}")
            }
            PlanViolation::NotCovering { family, index } => {
                write!(f, "{family} not covering: index {index} unassigned")
            }
            PlanViolation::PairCoverage { j, k, x, y } => {
                write!(f, "pair coverage: no AttnNode holds S_{j} x S_{k} (token pair ({x},{y}))")
            }
            PlanViolation::DuplicatePair { j, k } => write!(f, "duplicate attn pair ({j},{k})"),
            PlanViolation::PairOutOfRange { j, k } => write!(f, "attn pair ({j},{k}) out of range"),
        }
    }
}

fn check_partition(family: char, shards: &[IndexSet], n: usize, out: &mut Vec<PlanViolation>) {
    let mut owner = vec![0usize; n + 1];
    for (s, shard) in shards.iter().enumerate() {
        for index in shard.iter() {
            if index == 0 || index > n {
                out.push(PlanViolation::OutOfRange { family, shard: s + 1, index });
                continue;
            }
            if owner[index] != 0 {
                out.push(PlanViolation::NotDisjoint { family, index, first: owner[index], second: s + 1 });
            } else {
                owner[index] = s + 1;
            }
        }
    }
    for (index, &o) in owner.iter().enumerate().skip(1) {
        if o == 0 {
            out.push(PlanViolation::NotCovering { family, index });
        }
    }
}

/// Checks partitions, shard counts and pairwise coverage. Empty result means valid.
pub fn validate_plan(plan: &ShardPlan) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    if plan.delta != plan.c * plan.alpha {
        out.push(PlanViolation::DeltaMismatch { c: plan.c, alpha: plan.alpha, delta: plan.delta });
    }
    if plan.r.len() != plan.alpha {
        out.push(PlanViolation::ShardCount { family: 'R', declared: plan.alpha, actual: plan.r.len() });
    }
    if plan.s.len() != plan.beta {
        out.push(PlanViolation::ShardCount { family: 'S', declared: plan.beta, actual: plan.s.len() });
    }
    if plan.beta != plan.m * plan.alpha {
        out.push(PlanViolation::BetaNotMAlpha { beta: plan.beta, m: plan.m, alpha: plan.alpha });
    }
    check_partition('R', &plan.r, plan.n, &mut out);
    check_partition('S', &plan.s, plan.n, &mut out);

    let beta = plan.s.len();
    let mut seen = BTreeSet::new();
    for &(j, k) in &plan.attn_pairs {
        if j == 0 || k == 0 || j > beta || k > beta {
            out.push(PlanViolation::PairOutOfRange { j, k });
            continue;
        }
        if !seen.insert((j.min(k), j.max(k))) {
            out.push(PlanViolation::DuplicatePair { j, k });
        }
    }
    for j in 1..=beta {
        for k in j..=beta {
            if seen.contains(&(j, k)) {
                continue;
            }
            // Only shard pairs that actually hold tokens need an AttnNode.
            if let (Some(x), Some(y)) = (plan.s[j - 1].first(), plan.s[k - 1].first()) {
                out.push(PlanViolation::PairCoverage { j, k, x, y });
            }
        }
    }
    out
}

/// Index differences of a set, starting from 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapProfile {
    /// `[i_1, i_2 - i_1, ..., i_k - i_{k-1}]`
    pub gaps: Vec<usize>,
    pub max_gap: usize,
    /// Lengths of maximal runs of consecutive indices.
    pub cluster_sizes: Vec<usize>,
}

pub fn gap_profile(set: &IndexSet) -> Result<GapProfile, PlanError> {
    if set.is_empty() {
        return Err(PlanError::EmptySet);
    }
    let mut gaps = Vec::with_capacity(set.len());
    let mut clusters = Vec::new();
    let mut prev = 0;
    for index in set.iter() {
        let gap = index - prev;
        if gap == 1 && prev != 0 {
            *clusters.last_mut().expect("cluster open") += 1;
        } else {
            clusters.push(1);
        }
        gaps.push(gap);
        prev = index;
    }
    let max_gap = gaps.iter().copied().max().unwrap_or(0);
    Ok(GapProfile { gaps, max_gap, cluster_sizes: clusters })
}

/// Exact big-integer cost with a base-10 logarithm summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigCost {
    #[serde(with = "decimal")]
    pub value: BigUint,
    pub log10: f64,
}

impl BigCost {
    pub fn new(value: BigUint) -> Self {
        let log10 = big_log10(&value);
        Self { value, log10 }
    }
}

mod decimal {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// `log10(x)`, `-inf` for zero. Accurate to double precision for any size.
pub fn big_log10(x: &BigUint) -> f64 {
    if x.is_zero() {
        return f64::NEG_INFINITY;
    }
    let bits = x.bits();
    if bits <= 64 {
        return (x.to_u64().expect("fits in u64") as f64).log10();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_u64().expect("fits in u64") as f64;
    top.log10() + shift as f64 * std::f64::consts::LOG10_2
}

/// `sum_j vocab^gap_j` over the gaps of `set`.
pub fn vocab_matching_cost(set: &IndexSet, vocab: u64) -> Result<BigCost, PlanError> {
    if vocab < 2 {
        return Err(PlanError::VocabTooSmall(vocab));
    }
    let profile = gap_profile(set)?;
    let v = BigUint::from(vocab);
    let mut total = BigUint::zero();
    for &gap in &profile.gaps {
        total += pow(&v, gap);
    }
    Ok(BigCost::new(total))
}

pub(crate) fn pow(base: &BigUint, exp: usize) -> BigUint {
    let mut out = BigUint::one();
    for _ in 0..exp {
        out *= base;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimitingGap {
    /// Position of the gap in the profile (0 = the gap from index 0).
    pub position: usize,
    pub gap: usize,
    /// Known index before the gap (0 for the leading gap).
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub max_gap: usize,
    pub limiting_gap: Option<LimitingGap>,
}

/// Feasible iff every gap is at most `t_max`; otherwise reports the first
/// offending gap.
pub fn feasibility(set: &IndexSet, budget: &AttackBudget) -> Result<Feasibility, PlanError> {
    let profile = gap_profile(set)?;
    let mut prev = 0;
    for (position, (&gap, index)) in profile.gaps.iter().zip(set.iter()).enumerate() {
        if gap > budget.t_max {
            return Ok(Feasibility {
                feasible: false,
                max_gap: profile.max_gap,
                limiting_gap: Some(LimitingGap { position, gap, from: prev, to: index }),
            });
        }
        prev = index;
    }
    Ok(Feasibility { feasible: true, max_gap: profile.max_gap, limiting_gap: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollusionReport {
    pub nodes: Vec<NodeId>,
    pub union: IndexSet,
    pub profile: GapProfile,
    pub feasibility: Feasibility,
}

/// Union of the token indices seen by all `nodes`, with its gap profile and
/// vocab-matching feasibility.
pub fn collusion_union(
    plan: &ShardPlan,
    nodes: &[NodeId],
    budget: &AttackBudget,
) -> Result<CollusionReport, PlanError> {
    let mut union = IndexSet::default();
    for &node in nodes {
        union = union.union(&plan.node_indices(node)?);
    }
    let profile = gap_profile(&union)?;
    let feasibility = feasibility(&union, budget)?;
    Ok(CollusionReport { nodes: nodes.to_vec(), union, profile, feasibility })
}
