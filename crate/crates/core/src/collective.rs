//! Ring and tree collectives under rank pruning.
//!
//! When only a sandbox block and its topological neighbors are
//! instantiated, the boundary virtual rank injects compensation values so
//! every sandbox rank still observes exact collective results. Floating
//! accumulation order is fixed to ring (or tree traversal) order so the
//! float tolerance is meaningful; integer-valued payloads reproduce the
//! oracle bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{AlgorithmHint, CommDescriptor, CommKind, GroupId, RankId, ReduceOp, SyncGroupId};
use crate::workload::CommGroups;

#[derive(Debug, thiserror::Error)]
pub enum CollectiveError {
    #[error("no contributions given")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sandbox is not contiguous in ring order")]
    NonContiguousSandbox,
    #[error("missing contribution for position {0}")]
    MissingContribution(usize),
    #[error("plan does not match contributions: {0}")]
    PlanMismatch(String),
    #[error("occurrence touches sandbox-path ranks; use the pruned path")]
    SkipRefused,
}

/// Ordered ring; the member at position `i` owns chunk `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingTopology {
    pub members: Vec<RankId>,
}

impl RingTopology {
    pub fn new(members: Vec<RankId>) -> RingTopology {
        assert!(!members.is_empty(), "ring needs at least one member");
        RingTopology { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn pred(&self, pos: usize) -> usize {
        (pos + self.len() - 1) % self.len()
    }

    pub fn succ(&self, pos: usize) -> usize {
        (pos + 1) % self.len()
    }
}

/// Binary tree in heap layout over the member list: the parent of position
/// `i` is `(i - 1) / 2`, children are `2i + 1` and `2i + 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTopology {
    pub members: Vec<RankId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeRole {
    Root,
    Leaf,
    Intermediate,
}

impl TreeTopology {
    pub fn new(members: Vec<RankId>) -> TreeTopology {
        assert!(!members.is_empty(), "tree needs at least one member");
        TreeTopology { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn parent(&self, pos: usize) -> Option<usize> {
        (pos > 0).then(|| (pos - 1) / 2)
    }

    pub fn children(&self, pos: usize) -> Vec<usize> {
        [2 * pos + 1, 2 * pos + 2]
            .into_iter()
            .filter(|&c| c < self.len())
            .collect()
    }

    pub fn role(&self, pos: usize) -> TreeRole {
        if pos == 0 {
            TreeRole::Root
        } else if self.children(pos).is_empty() {
            TreeRole::Leaf
        } else {
            TreeRole::Intermediate
        }
    }
}

/// One rank's payload, split into the ring's chunks. Tree collectives use a
/// single chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub chunks: Vec<Vec<f64>>,
}

impl Contribution {
    pub fn from_flat(values: &[f64], k: usize) -> Result<Contribution, CollectiveError> {
        if k == 0 || values.len() % k != 0 {
            return Err(CollectiveError::ShapeMismatch(format!(
                "{} elements do not split into {k} chunks",
                values.len()
            )));
        }
        let each = values.len() / k;
        Ok(Contribution {
            chunks: values.chunks(each).map(|c| c.to_vec()).collect(),
        })
    }

    pub fn whole(values: Vec<f64>) -> Contribution {
        Contribution { chunks: vec![values] }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.chunks.iter().flatten().copied().collect()
    }

    fn shape(&self) -> (usize, usize) {
        (self.chunks.len(), self.chunks.first().map(Vec::len).unwrap_or(0))
    }
}

fn check_shapes(contributions: &[Contribution]) -> Result<(usize, usize), CollectiveError> {
    let first = contributions.first().ok_or(CollectiveError::EmptyInput)?;
    let shape = first.shape();
    for c in contributions {
        if c.shape() != shape {
            return Err(CollectiveError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                c.shape(),
                shape
            )));
        }
        for chunk in &c.chunks {
            if chunk.len() != shape.1 {
                return Err(CollectiveError::ShapeMismatch("ragged chunks".to_string()));
            }
        }
    }
    Ok(shape)
}

/// Brute-force reduction: every rank's result is the elementwise op over
/// all contributions, folded in member-index order.
pub fn full_allreduce_oracle(
    contributions: &[Contribution],
    op: ReduceOp,
) -> Result<Vec<Contribution>, CollectiveError> {
    let (chunks, each) = check_shapes(contributions)?;
    let mut result = Contribution {
        chunks: vec![vec![0.0; each]; chunks],
    };
    for c in 0..chunks {
        for e in 0..each {
            let mut acc = contributions[0].chunks[c][e];
            for contrib in &contributions[1..] {
                acc = op.apply(acc, contrib.chunks[c][e]);
            }
            result.chunks[c][e] = acc;
        }
    }
    Ok(vec![result; contributions.len()])
}

/// Fully reduced value of one chunk, accumulated in ring order starting at
/// the owner's successor and ending at the owner.
fn ring_reduce_full(contributions: &[Contribution], chunk: usize, op: ReduceOp) -> Vec<f64> {
    let k = contributions.len();
    let start = (chunk + 1) % k;
    let mut acc = contributions[start].chunks[chunk].clone();
    for step in 1..k {
        let pos = (start + step) % k;
        for (a, b) in acc.iter_mut().zip(&contributions[pos].chunks[chunk]) {
            *a = op.apply(*a, *b);
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkSpec {
    /// The injection rank must supply a computed compensation value.
    Compensated,
    /// Value never reaches a sandbox result; anything goes.
    Any,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanShape {
    Ring {
        k: usize,
        sandbox_start: usize,
        sandbox_len: usize,
        full: bool,
    },
    Tree {
        proxy_pos: usize,
        role: TreeRole,
    },
}

/// Which ranks survive pruning of one collective and what the boundary
/// virtual rank must inject.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub group: GroupId,
    pub op: ReduceOp,
    pub sandbox: Vec<RankId>,
    pub active_virtual: Vec<RankId>,
    pub injection_rank: Option<RankId>,
    pub chunk_specs: Vec<ChunkSpec>,
    pub shape: PlanShape,
}

/// Plans ring pruning for a sandbox block that is contiguous in ring order
/// (wrap-around counts as contiguous). The predecessor of the block is the
/// injection rank; predecessor and successor stay instantiated.
pub fn plan_ring_pruning(
    ring: &RingTopology,
    sandbox: &BTreeSet<RankId>,
    op: ReduceOp,
    group: GroupId,
) -> Result<PruningPlan, CollectiveError> {
    let k = ring.len();
    let positions: Vec<usize> = ring
        .members
        .iter()
        .enumerate()
        .filter(|(_, r)| sandbox.contains(r))
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return Err(CollectiveError::PlanMismatch(
            "sandbox does not intersect the ring".to_string(),
        ));
    }
    if positions.len() == k {
        return Ok(PruningPlan {
            group,
            op,
            sandbox: ring.members.clone(),
            active_virtual: Vec::new(),
            injection_rank: None,
            chunk_specs: Vec::new(),
            shape: PlanShape::Ring {
                k,
                sandbox_start: 0,
                sandbox_len: k,
                full: true,
            },
        });
    }
    // Find the block start: the sandbox position whose ring predecessor is
    // not in the sandbox. Contiguity means exactly one such position.
    let in_sandbox = |pos: usize| positions.contains(&pos);
    let starts: Vec<usize> = positions
        .iter()
        .copied()
        .filter(|&p| !in_sandbox(ring.pred(p)))
        .collect();
    if starts.len() != 1 {
        return Err(CollectiveError::NonContiguousSandbox);
    }
    let start = starts[0];
    let len = positions.len();
    for i in 0..len {
        if !in_sandbox((start + i) % k) {
            return Err(CollectiveError::NonContiguousSandbox);
        }
    }

    let pred = ring.pred(start);
    let succ = (start + len) % k;
    let mut active_virtual = vec![ring.members[pred]];
    if succ != pred {
        active_virtual.push(ring.members[succ]);
    }
    let chunk_specs = (0..k)
        .map(|c| {
            let offset = (c + k - start) % k;
            if offset < len {
                ChunkSpec::Compensated
            } else {
                ChunkSpec::Any
            }
        })
        .collect();
    Ok(PruningPlan {
        group,
        op,
        sandbox: (0..len).map(|i| ring.members[(start + i) % k]).collect(),
        active_virtual,
        injection_rank: Some(ring.members[pred]),
        chunk_specs,
        shape: PlanShape::Ring {
            k,
            sandbox_start: start,
            sandbox_len: len,
            full: false,
        },
    })
}

/// Values the injection rank feeds into the reduce stage, one entry per
/// chunk: `Some` for compensated chunks, `None` where anything goes.
///
/// For a sum, the compensation for the chunk owned by sandbox position `o`
/// is the full value minus the contributions of the ring path from the
/// injection rank (exclusive) through `o` (inclusive), so the path adds
/// them back. Max/min are idempotent, so the full value itself is injected.
pub fn compensation_values(
    plan: &PruningPlan,
    contributions: &[Contribution],
) -> Result<Vec<Option<Vec<f64>>>, CollectiveError> {
    match &plan.shape {
        PlanShape::Ring {
            k,
            sandbox_start,
            sandbox_len,
            full,
        } => {
            if contributions.len() != *k {
                return Err(CollectiveError::PlanMismatch(format!(
                    "{} contributions for a {k}-ring",
                    contributions.len()
                )));
            }
            check_shapes(contributions)?;
            if *full {
                return Ok(Vec::new());
            }
            let mut out = Vec::with_capacity(*k);
            for chunk in 0..*k {
                let offset = (chunk + k - sandbox_start) % k;
                if offset >= *sandbox_len {
                    out.push(None);
                    continue;
                }
                let full_value = ring_reduce_full(contributions, chunk, plan.op);
                let injected = match plan.op {
                    ReduceOp::Sum => {
                        let mut v = full_value;
                        // Subtract the path start..=owner.
                        for i in 0..=offset {
                            let pos = (sandbox_start + i) % k;
                            for (a, b) in v.iter_mut().zip(&contributions[pos].chunks[chunk]) {
                                *a -= b;
                            }
                        }
                        v
                    }
                    ReduceOp::Max | ReduceOp::Min => full_value,
                };
                out.push(Some(injected));
            }
            Ok(out)
        }
        PlanShape::Tree { proxy_pos, role } => {
            check_shapes(contributions)?;
            match role {
                TreeRole::Root => {
                    let chunks = contributions[*proxy_pos].chunks.len();
                    let mut out = Vec::with_capacity(chunks);
                    for chunk in 0..chunks {
                        let full_value = tree_reduce_full(contributions, chunk, plan.op);
                        let injected = match plan.op {
                            ReduceOp::Sum => full_value
                                .iter()
                                .zip(&contributions[*proxy_pos].chunks[chunk])
                                .map(|(f, s)| f - s)
                                .collect(),
                            ReduceOp::Max | ReduceOp::Min => full_value,
                        };
                        out.push(Some(injected));
                    }
                    Ok(out)
                }
                TreeRole::Leaf | TreeRole::Intermediate => {
                    let chunks = contributions[*proxy_pos].chunks.len();
                    Ok(vec![None; chunks])
                }
            }
        }
    }
}

/// Post-order reduction over the whole tree; the fixed traversal order
/// keeps float results deterministic.
fn tree_reduce_full(contributions: &[Contribution], chunk: usize, op: ReduceOp) -> Vec<f64> {
    fn reduce_subtree(
        contributions: &[Contribution],
        chunk: usize,
        op: ReduceOp,
        pos: usize,
    ) -> Vec<f64> {
        let mut acc = contributions[pos].chunks[chunk].clone();
        for child in [2 * pos + 1, 2 * pos + 2] {
            if child < contributions.len() {
                let sub = reduce_subtree(contributions, chunk, op, child);
                for (a, b) in acc.iter_mut().zip(&sub) {
                    *a = op.apply(*a, *b);
                }
            }
        }
        acc
    }
    reduce_subtree(contributions, chunk, op, 0)
}

/// Reduce-stage state and final results of the sandbox ranks.
pub struct PrunedRingOutcome {
    /// Owned chunk of each sandbox rank right after the reduce stage.
    pub after_reduce: BTreeMap<RankId, Vec<f64>>,
    /// Full result vectors after the broadcast stage.
    pub results: BTreeMap<RankId, Contribution>,
}

/// Runs the pruned reduce and broadcast stages with explicit injected
/// values (normally `compensation_values` output; fuzzing may fill the
/// `Any` slots with garbage).
pub fn execute_pruned_ring(
    plan: &PruningPlan,
    contributions: &[Contribution],
    injected: &[Option<Vec<f64>>],
) -> Result<PrunedRingOutcome, CollectiveError> {
    let PlanShape::Ring {
        k,
        sandbox_start,
        sandbox_len,
        full,
    } = &plan.shape
    else {
        return Err(CollectiveError::PlanMismatch("ring plan required".to_string()));
    };
    if contributions.len() != *k {
        return Err(CollectiveError::PlanMismatch(format!(
            "{} contributions for a {k}-ring",
            contributions.len()
        )));
    }
    let (chunks, _) = check_shapes(contributions)?;
    if chunks != *k {
        return Err(CollectiveError::ShapeMismatch(format!(
            "{chunks} chunks for a {k}-ring"
        )));
    }

    // Value each chunk settles to inside the sandbox. A chunk owned by the
    // block accumulates the injected value along the path start..=owner and
    // the owner's result circulates back during broadcast; a chunk owned
    // outside enters the block as the injection rank's recorded full value.
    let each = contributions[0].chunks[0].len();
    let mut chunk_values: Vec<Vec<f64>> = Vec::with_capacity(*k);
    for chunk in 0..*k {
        let offset = (chunk + k - sandbox_start) % k;
        let value = if *full || offset >= *sandbox_len {
            ring_reduce_full(contributions, chunk, plan.op)
        } else {
            let mut acc = match injected.get(chunk).and_then(|v| v.clone()) {
                Some(v) => {
                    if v.len() != each {
                        return Err(CollectiveError::ShapeMismatch(
                            "injected value length differs from chunk length".to_string(),
                        ));
                    }
                    v
                }
                None => vec![0.0; each],
            };
            for j in 0..=offset {
                let p = (sandbox_start + j) % k;
                for (a, b) in acc.iter_mut().zip(&contributions[p].chunks[chunk]) {
                    *a = plan.op.apply(*a, *b);
                }
            }
            acc
        };
        chunk_values.push(value);
    }

    let sandbox_positions: Vec<usize> = if *full {
        (0..*k).collect()
    } else {
        (0..*sandbox_len).map(|i| (sandbox_start + i) % k).collect()
    };
    let mut after_reduce = BTreeMap::new();
    let mut results = BTreeMap::new();
    for (i, &pos) in sandbox_positions.iter().enumerate() {
        let rank = plan.sandbox[i];
        after_reduce.insert(rank, chunk_values[pos].clone());
        results.insert(
            rank,
            Contribution {
                chunks: chunk_values.clone(),
            },
        );
    }
    Ok(PrunedRingOutcome { after_reduce, results })
}

/// Pruned ring all-reduce: every sandbox rank's full result equals the
/// oracle.
pub fn pruned_ring_allreduce(
    plan: &PruningPlan,
    contributions: &[Contribution],
) -> Result<BTreeMap<RankId, Contribution>, CollectiveError> {
    let injected = compensation_values(plan, contributions)?;
    let injected = if injected.is_empty() {
        vec![None; contributions.len()]
    } else {
        injected
    };
    Ok(execute_pruned_ring(plan, contributions, &injected)?.results)
}

/// Pruned reduce stage only: each sandbox rank's owned chunk.
pub fn pruned_ring_reduce_scatter(
    plan: &PruningPlan,
    contributions: &[Contribution],
) -> Result<BTreeMap<RankId, Vec<f64>>, CollectiveError> {
    let injected = compensation_values(plan, contributions)?;
    let injected = if injected.is_empty() {
        vec![None; contributions.len()]
    } else {
        injected
    };
    Ok(execute_pruned_ring(plan, contributions, &injected)?.after_reduce)
}

/// Plans tree pruning. The sandbox maps to exactly one tree position (its
/// inter-node proxy); the proxy's contribution is the sandbox aggregate.
pub fn plan_tree_pruning(
    tree: &TreeTopology,
    sandbox: &BTreeSet<RankId>,
    op: ReduceOp,
    group: GroupId,
) -> Result<PruningPlan, CollectiveError> {
    let positions: Vec<usize> = tree
        .members
        .iter()
        .enumerate()
        .filter(|(_, r)| sandbox.contains(r))
        .map(|(i, _)| i)
        .collect();
    if positions.len() != 1 {
        return Err(CollectiveError::PlanMismatch(format!(
            "tree pruning expects one sandbox proxy in the tree, found {}",
            positions.len()
        )));
    }
    let proxy_pos = positions[0];
    let role = tree.role(proxy_pos);
    let mut active_virtual: Vec<RankId> = Vec::new();
    if let Some(p) = tree.parent(proxy_pos) {
        active_virtual.push(tree.members[p]);
    }
    for c in tree.children(proxy_pos) {
        active_virtual.push(tree.members[c]);
    }
    let injection_rank = match role {
        // The lowest child compensates the missing reduction.
        TreeRole::Root => tree.children(proxy_pos).first().map(|&c| tree.members[c]),
        // The parent delivers the full value during broadcast.
        TreeRole::Leaf | TreeRole::Intermediate => {
            tree.parent(proxy_pos).map(|p| tree.members[p])
        }
    };
    Ok(PruningPlan {
        group,
        op,
        sandbox: vec![tree.members[proxy_pos]],
        active_virtual,
        injection_rank,
        chunk_specs: match role {
            TreeRole::Root => vec![ChunkSpec::Compensated],
            _ => vec![ChunkSpec::Any],
        },
        shape: PlanShape::Tree { proxy_pos, role },
    })
}

/// Pruned tree all-reduce for the sandbox proxy.
///
/// Root: children send (compensation, identity); the proxy's own reduction
/// yields the full value. Leaf/intermediate: the upward value is irrelevant
/// and the parent broadcasts the full value down.
pub fn pruned_tree_allreduce(
    plan: &PruningPlan,
    contributions: &[Contribution],
) -> Result<BTreeMap<RankId, Contribution>, CollectiveError> {
    let PlanShape::Tree { proxy_pos, role } = &plan.shape else {
        return Err(CollectiveError::PlanMismatch("tree plan required".to_string()));
    };
    check_shapes(contributions)?;
    if *proxy_pos >= contributions.len() {
        return Err(CollectiveError::MissingContribution(*proxy_pos));
    }
    let injected = compensation_values(plan, contributions)?;
    let chunks = contributions[*proxy_pos].chunks.len();
    let rank = plan.sandbox[0];
    let mut out = Contribution {
        chunks: Vec::with_capacity(chunks),
    };
    for chunk in 0..chunks {
        let value = match role {
            TreeRole::Root => {
                // One child sends the compensation; any other boundary
                // child sends the op identity, which drops out.
                let mut acc = contributions[*proxy_pos].chunks[chunk].clone();
                if let Some(comp) = injected.get(chunk).and_then(|v| v.as_ref()) {
                    for (a, b) in acc.iter_mut().zip(comp) {
                        *a = plan.op.apply(*a, *b);
                    }
                }
                acc
            }
            TreeRole::Leaf | TreeRole::Intermediate => {
                tree_reduce_full(contributions, chunk, plan.op)
            }
        };
        out.chunks.push(value);
    }
    Ok(BTreeMap::from([(rank, out)]))
}

/// The two primitives every collective decomposes into, plus direct
/// exchange for the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Reduce,
    Broadcast,
    DirectExchange,
}

pub fn decompose(kind: CommKind) -> Vec<Phase> {
    match kind {
        CommKind::AllReduce => vec![Phase::Reduce, Phase::Broadcast],
        CommKind::ReduceScatter => vec![Phase::Reduce],
        CommKind::AllGather => vec![Phase::Broadcast],
        CommKind::Broadcast => vec![Phase::Broadcast],
        CommKind::AllToAll | CommKind::Send | CommKind::Recv => vec![Phase::DirectExchange],
        CommKind::Barrier => vec![],
    }
}

/// Group-level executors used by the coordinator's CPU collective path.
/// Inputs and outputs are indexed by group-member position.
pub fn execute_full(
    kind: CommKind,
    op: Option<ReduceOp>,
    inputs: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, CollectiveError> {
    let k = inputs.len();
    if k == 0 {
        return Err(CollectiveError::EmptyInput);
    }
    let len = inputs[0].len();
    if kind != CommKind::AllGather && inputs.iter().any(|v| v.len() != len) {
        return Err(CollectiveError::ShapeMismatch("unequal member payloads".to_string()));
    }
    match kind {
        CommKind::AllReduce => {
            let op = op.unwrap_or(ReduceOp::Sum);
            let contribs: Vec<Contribution> = if len % k == 0 && len > 0 {
                inputs
                    .iter()
                    .map(|v| Contribution::from_flat(v, k))
                    .collect::<Result<_, _>>()?
            } else {
                inputs.iter().map(|v| Contribution::whole(v.clone())).collect()
            };
            let ring = RingTopology::new((0..k as u32).map(RankId).collect());
            let sandbox: BTreeSet<RankId> = ring.members.iter().copied().collect();
            let plan = plan_ring_pruning(&ring, &sandbox, op, GroupId(0))?;
            let results = pruned_ring_allreduce(&plan, &contribs)?;
            Ok((0..k as u32).map(|r| results[&RankId(r)].flat()).collect())
        }
        CommKind::ReduceScatter => {
            if len % k != 0 || len == 0 {
                return Err(CollectiveError::ShapeMismatch(format!(
                    "reduce-scatter payload {len} not divisible by {k}"
                )));
            }
            let op = op.unwrap_or(ReduceOp::Sum);
            let contribs: Vec<Contribution> = inputs
                .iter()
                .map(|v| Contribution::from_flat(v, k))
                .collect::<Result<_, _>>()?;
            Ok((0..k)
                .map(|pos| ring_reduce_full(&contribs, pos, op))
                .collect())
        }
        CommKind::AllGather => {
            let len = inputs[0].len();
            if inputs.iter().any(|v| v.len() != len) {
                return Err(CollectiveError::ShapeMismatch(
                    "unequal all-gather inputs".to_string(),
                ));
            }
            let full: Vec<f64> = inputs.iter().flatten().copied().collect();
            Ok(vec![full; k])
        }
        CommKind::AllToAll => {
            if len % k != 0 {
                return Err(CollectiveError::ShapeMismatch(format!(
                    "all-to-all payload {len} not divisible by {k}"
                )));
            }
            let seg = len / k;
            Ok((0..k)
                .map(|i| {
                    inputs
                        .iter()
                        .flat_map(|v| v[i * seg..(i + 1) * seg].to_vec())
                        .collect()
                })
                .collect())
        }
        CommKind::Broadcast => Ok(vec![inputs[0].clone(); k]),
        CommKind::Barrier => Ok(vec![Vec::new(); k]),
        CommKind::Send | CommKind::Recv => Err(CollectiveError::PlanMismatch(
            "send/recv pairs are executed by the coordinator".to_string(),
        )),
    }
}

/// Which groups and virtual ranks must actually be instantiated for a
/// sandbox, and how many barrier joins a leader proxies per group.
#[derive(Debug, Clone, PartialEq)]
pub struct InstantiationPlan {
    pub active_groups: Vec<GroupId>,
    pub active_virtual: BTreeSet<RankId>,
    pub proxy_counts: BTreeMap<GroupId, u32>,
    pub leader: Option<RankId>,
    pub total_groups: usize,
}

impl InstantiationPlan {
    pub fn reduction_factor(&self) -> f64 {
        if self.active_groups.is_empty() {
            return f64::INFINITY;
        }
        self.total_groups as f64 / self.active_groups.len() as f64
    }
}

pub fn plan_instantiation(
    groups: &CommGroups,
    sandbox: &BTreeSet<RankId>,
    hints: &BTreeMap<GroupId, AlgorithmHint>,
) -> InstantiationPlan {
    let mut active_groups = Vec::new();
    let mut active_virtual: BTreeSet<RankId> = BTreeSet::new();
    let mut proxy_counts = BTreeMap::new();

    for group in groups.iter() {
        let in_sandbox: Vec<usize> = group
            .members
            .iter()
            .enumerate()
            .filter(|(_, r)| sandbox.contains(r))
            .map(|(i, _)| i)
            .collect();
        if in_sandbox.is_empty() {
            continue;
        }
        active_groups.push(group.id);
        let hint = hints.get(&group.id).copied().unwrap_or(AlgorithmHint::Ring);
        let mut instantiated: BTreeSet<usize> = in_sandbox.iter().copied().collect();
        for &pos in &in_sandbox {
            match hint {
                AlgorithmHint::Ring => {
                    let k = group.members.len();
                    instantiated.insert((pos + k - 1) % k);
                    instantiated.insert((pos + 1) % k);
                }
                AlgorithmHint::Tree => {
                    if pos > 0 {
                        instantiated.insert((pos - 1) / 2);
                    }
                    for c in [2 * pos + 1, 2 * pos + 2] {
                        if c < group.members.len() {
                            instantiated.insert(c);
                        }
                    }
                }
            }
        }
        for &pos in &instantiated {
            let r = group.members[pos];
            if !sandbox.contains(&r) {
                active_virtual.insert(r);
            }
        }
        proxy_counts.insert(group.id, (group.members.len() - instantiated.len()) as u32);
    }

    InstantiationPlan {
        active_groups,
        leader: active_virtual.iter().next().copied(),
        active_virtual,
        proxy_counts,
        total_groups: groups.len(),
    }
}

/// Completion metadata for an occurrence whose transfer is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionMeta {
    pub sync: SyncGroupId,
    pub bytes_moved: u64,
}

/// Skips the data transfer of an occurrence that involves no sandbox-path
/// ranks; refuses otherwise (those must take the pruned path).
pub fn skip_transfer(
    sync: SyncGroupId,
    _descriptor: &CommDescriptor,
    participants: &BTreeSet<RankId>,
    sandbox_path: &BTreeSet<RankId>,
) -> Result<CompletionMeta, CollectiveError> {
    if participants.intersection(sandbox_path).next().is_some() {
        return Err(CollectiveError::SkipRefused);
    }
    Ok(CompletionMeta { sync, bytes_moved: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn per_rank(values: &[f64]) -> Vec<Contribution> {
        let k = values.len();
        values
            .iter()
            .map(|&v| Contribution {
                chunks: vec![vec![v]; k],
            })
            .collect()
    }

    #[test]
    fn oracle_sum_and_max() {
        let contribs = per_rank(&[1.0, 2.0, 3.0, 4.0]);
        let out = full_allreduce_oracle(&contribs, ReduceOp::Sum).unwrap();
        for r in &out {
            assert!(r.chunks.iter().all(|c| c == &vec![10.0]));
        }
        let contribs = per_rank(&[0.0, 5.0, -1.0]);
        let out = full_allreduce_oracle(&contribs, ReduceOp::Max).unwrap();
        assert!(out[0].chunks.iter().all(|c| c == &vec![5.0]));
    }

    #[test]
    fn plan_neighbors_and_injection() {
        let ring = RingTopology::new((0..8).map(RankId).collect());
        let sandbox: BTreeSet<RankId> = [RankId(3), RankId(4)].into_iter().collect();
        let plan = plan_ring_pruning(&ring, &sandbox, ReduceOp::Sum, GroupId(0)).unwrap();
        assert_eq!(plan.active_virtual, vec![RankId(2), RankId(5)]);
        assert_eq!(plan.injection_rank, Some(RankId(2)));

        // Whole ring: pass-through.
        let all: BTreeSet<RankId> = ring.members.iter().copied().collect();
        let plan = plan_ring_pruning(&ring, &all, ReduceOp::Sum, GroupId(0)).unwrap();
        assert!(plan.active_virtual.is_empty());
        assert!(plan.injection_rank.is_none());
        assert!(plan.chunk_specs.is_empty());

        // Non-contiguous sandbox rejected.
        let bad: BTreeSet<RankId> = [RankId(1), RankId(5)].into_iter().collect();
        assert!(matches!(
            plan_ring_pruning(&ring, &bad, ReduceOp::Sum, GroupId(0)),
            Err(CollectiveError::NonContiguousSandbox)
        ));
    }

    #[test]
    fn compensation_matches_hand_computation() {
        // Every rank j contributes j+1 to every chunk; full = 10.
        let contribs = per_rank(&[1.0, 2.0, 3.0, 4.0]);
        let ring = RingTopology::new((0..4).map(RankId).collect());
        let sandbox: BTreeSet<RankId> = [RankId(2), RankId(3)].into_iter().collect();
        let plan = plan_ring_pruning(&ring, &sandbox, ReduceOp::Sum, GroupId(0)).unwrap();
        assert_eq!(plan.injection_rank, Some(RankId(1)));
        let injected = compensation_values(&plan, &contribs).unwrap();
        // Chunk owned by rank 2: 10 - 3 = 7; by rank 3: 10 - 3 - 4 = 3.
        assert_eq!(injected[2].as_deref(), Some(&[7.0][..]));
        assert_eq!(injected[3].as_deref(), Some(&[3.0][..]));
        assert!(injected[0].is_none() && injected[1].is_none());

        let results = pruned_ring_allreduce(&plan, &contribs).unwrap();
        for rank in [RankId(2), RankId(3)] {
            assert_eq!(results[&rank].flat(), vec![10.0; 4]);
        }
    }

    #[test]
    fn zero_contributions_inject_zero() {
        let contribs = per_rank(&[0.0; 4]);
        let ring = RingTopology::new((0..4).map(RankId).collect());
        let sandbox: BTreeSet<RankId> = [RankId(2), RankId(3)].into_iter().collect();
        let plan = plan_ring_pruning(&ring, &sandbox, ReduceOp::Sum, GroupId(0)).unwrap();
        let injected = compensation_values(&plan, &contribs).unwrap();
        for spec in injected.iter().flatten() {
            assert!(spec.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reduce_stage_alone_settles_owned_chunks() {
        let contribs = per_rank(&[3.0, 1.0, 4.0, 1.0, 5.0]);
        let ring = RingTopology::new((0..5).map(RankId).collect());
        let sandbox: BTreeSet<RankId> = [RankId(1), RankId(2)].into_iter().collect();
        let plan = plan_ring_pruning(&ring, &sandbox, ReduceOp::Sum, GroupId(0)).unwrap();
        let owned = pruned_ring_reduce_scatter(&plan, &contribs).unwrap();
        assert_eq!(owned[&RankId(1)], vec![14.0]);
        assert_eq!(owned[&RankId(2)], vec![14.0]);
    }

    #[test]
    fn tree_roles() {
        let tree = TreeTopology::new((0..7).map(RankId).collect());
        assert_eq!(tree.role(0), TreeRole::Root);
        assert_eq!(tree.role(1), TreeRole::Intermediate);
        assert_eq!(tree.role(3), TreeRole::Leaf);

        // Root: sandbox aggregate 6, full 10, child injects 4.
        let contribs: Vec<Contribution> = [6.0, 1.0, 3.0]
            .iter()
            .map(|&v| Contribution::whole(vec![v]))
            .collect();
        let tree = TreeTopology::new((0..3).map(RankId).collect());
        let sandbox: BTreeSet<RankId> = [RankId(0)].into_iter().collect();
        let plan = plan_tree_pruning(&tree, &sandbox, ReduceOp::Sum, GroupId(0)).unwrap();
        let injected = compensation_values(&plan, &contribs).unwrap();
        assert_eq!(injected[0].as_deref(), Some(&[4.0][..]));
        let out = pruned_tree_allreduce(&plan, &contribs).unwrap();
        assert_eq!(out[&RankId(0)].flat(), vec![10.0]);
    }

    #[test]
    fn tree_leaf_and_intermediate_get_full_from_parent() {
        let contribs: Vec<Contribution> = [2.0, 7.0, 1.0, 4.0, 5.0]
            .iter()
            .map(|&v| Contribution::whole(vec![v]))
            .collect();
        let tree = TreeTopology::new((0..5).map(RankId).collect());
        for proxy in [1u32, 3] {
            let sandbox: BTreeSet<RankId> = [RankId(proxy)].into_iter().collect();
            let plan = plan_tree_pruning(&tree, &sandbox, ReduceOp::Sum, GroupId(0)).unwrap();
            let out = pruned_tree_allreduce(&plan, &contribs).unwrap();
            assert_eq!(out[&RankId(proxy)].flat(), vec![19.0]);
        }
    }

    #[test]
    fn decompose_table() {
        assert_eq!(decompose(CommKind::AllReduce), vec![Phase::Reduce, Phase::Broadcast]);
        assert_eq!(decompose(CommKind::ReduceScatter), vec![Phase::Reduce]);
        assert_eq!(decompose(CommKind::AllGather), vec![Phase::Broadcast]);
        assert_eq!(decompose(CommKind::Broadcast), vec![Phase::Broadcast]);
        assert_eq!(decompose(CommKind::AllToAll), vec![Phase::DirectExchange]);
        assert_eq!(decompose(CommKind::Send), vec![Phase::DirectExchange]);
        assert!(decompose(CommKind::Barrier).is_empty());
    }

    #[test]
    fn skip_transfer_refuses_sandbox_paths() {
        let d = CommDescriptor::new(CommKind::AllReduce, GroupId(0), 64);
        let virt: BTreeSet<RankId> = [RankId(8), RankId(9)].into_iter().collect();
        let path: BTreeSet<RankId> = [RankId(0), RankId(1)].into_iter().collect();
        let meta = skip_transfer(SyncGroupId(5), &d, &virt, &path).unwrap();
        assert_eq!(meta.bytes_moved, 0);
        let touching: BTreeSet<RankId> = [RankId(1), RankId(9)].into_iter().collect();
        assert!(matches!(
            skip_transfer(SyncGroupId(5), &d, &touching, &path),
            Err(CollectiveError::SkipRefused)
        ));
    }
}
