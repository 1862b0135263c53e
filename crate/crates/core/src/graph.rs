//! Execution graph: compute spans and communication events per rank, joined
//! by directional and synchronization dependencies.
//!
//! A graph moves through three timing states: *bare* (structure only),
//! *timed* (every node has a duration), and *calibrated* (durations plus
//! globally consistent start times). All timing is integer nanoseconds.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Integer nanoseconds. No floats anywhere in timing.
pub type Ns = u64;

macro_rules! id_newtype {
    ($(#[$doc:meta])* $name:ident, $inner:ty) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(
    /// Logical training process, `0 <= rank < world`.
    RankId,
    u32
);
id_newtype!(
    /// Communication group (TP/PP/DP/EP).
    GroupId,
    u32
);
id_newtype!(
    /// Graph node, unique within a graph.
    NodeId,
    u64
);
id_newtype!(
    /// One collective occurrence; shared by all participating nodes.
    SyncGroupId,
    u64
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

impl ReduceOp {
    pub fn token(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Max => "max",
            ReduceOp::Min => "min",
        }
    }

    pub fn parse(s: &str) -> Option<ReduceOp> {
        match s {
            "sum" => Some(ReduceOp::Sum),
            "max" => Some(ReduceOp::Max),
            "min" => Some(ReduceOp::Min),
            _ => None,
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ReduceOp::Sum => a + b,
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CommKind {
    AllReduce,
    ReduceScatter,
    AllGather,
    AllToAll,
    Broadcast,
    Send,
    Recv,
    Barrier,
}

impl CommKind {
    /// Kinds that carry a reduce op.
    pub fn reduces(self) -> bool {
        matches!(self, CommKind::AllReduce | CommKind::ReduceScatter)
    }

    /// Point-to-point kinds; participants are a matched pair, not the group.
    pub fn is_p2p(self) -> bool {
        matches!(self, CommKind::Send | CommKind::Recv)
    }

    pub fn token(self) -> &'static str {
        match self {
            CommKind::AllReduce => "allreduce",
            CommKind::ReduceScatter => "reducescatter",
            CommKind::AllGather => "allgather",
            CommKind::AllToAll => "alltoall",
            CommKind::Broadcast => "broadcast",
            CommKind::Send => "send",
            CommKind::Recv => "recv",
            CommKind::Barrier => "barrier",
        }
    }

    pub fn parse(s: &str) -> Option<CommKind> {
        match s {
            "allreduce" => Some(CommKind::AllReduce),
            "reducescatter" => Some(CommKind::ReduceScatter),
            "allgather" => Some(CommKind::AllGather),
            "alltoall" => Some(CommKind::AllToAll),
            "broadcast" => Some(CommKind::Broadcast),
            "send" => Some(CommKind::Send),
            "recv" => Some(CommKind::Recv),
            "barrier" => Some(CommKind::Barrier),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlgorithmHint {
    Ring,
    Tree,
}

impl AlgorithmHint {
    pub fn token(self) -> &'static str {
        match self {
            AlgorithmHint::Ring => "ring",
            AlgorithmHint::Tree => "tree",
        }
    }

    pub fn parse(s: &str) -> Option<AlgorithmHint> {
        match s {
            "ring" => Some(AlgorithmHint::Ring),
            "tree" => Some(AlgorithmHint::Tree),
            _ => None,
        }
    }
}

/// One communication event as seen by a single rank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommDescriptor {
    pub kind: CommKind,
    pub group: GroupId,
    pub bytes: u64,
    /// Present iff `kind.reduces()`.
    pub reduce_op: Option<ReduceOp>,
    pub algorithm: AlgorithmHint,
}

impl CommDescriptor {
    pub fn new(kind: CommKind, group: GroupId, bytes: u64) -> CommDescriptor {
        let reduce_op = if kind.reduces() {
            Some(ReduceOp::Sum)
        } else {
            None
        };
        CommDescriptor {
            kind,
            group,
            bytes,
            reduce_op,
            algorithm: AlgorithmHint::Ring,
        }
    }

    /// Whether two descriptors may share a sync group. A matched send/recv
    /// pair differs only in direction, everything else must agree.
    pub fn sync_compatible(&self, other: &CommDescriptor) -> bool {
        if self == other {
            return true;
        }
        let pair = (self.kind == CommKind::Send && other.kind == CommKind::Recv)
            || (self.kind == CommKind::Recv && other.kind == CommKind::Send);
        pair && self.group == other.group && self.bytes == other.bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Compute {
        label: String,
        microbatch: Option<u32>,
    },
    Comm {
        descriptor: CommDescriptor,
    },
}

impl NodeKind {
    pub fn is_comm(&self) -> bool {
        matches!(self, NodeKind::Comm { .. })
    }

    pub fn descriptor(&self) -> Option<&CommDescriptor> {
        match self {
            NodeKind::Comm { descriptor } => Some(descriptor),
            NodeKind::Compute { .. } => None,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            NodeKind::Compute { label, .. } => label,
            NodeKind::Comm { descriptor } => descriptor.kind.token(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub id: NodeId,
    pub rank: RankId,
    pub kind: NodeKind,
    pub duration_ns: Option<Ns>,
    pub start_ns: Option<Ns>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Directional,
    Synchronization(SyncGroupId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct DependencyEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphMeta {
    pub world_size: u32,
    pub version: u32,
    /// Free-form reference to the parallelism spec that produced the graph.
    pub spec_label: Option<String>,
}

pub const FORMAT_VERSION: u32 = 1;

impl GraphMeta {
    pub fn new(world_size: u32) -> GraphMeta {
        GraphMeta {
            world_size,
            version: FORMAT_VERSION,
            spec_label: None,
        }
    }
}

/// Timing state of a graph, derived from which optional fields are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingState {
    Bare,
    Timed,
    Calibrated,
    /// Some nodes timed and some not; always a validation error.
    Mixed,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("edge references undefined node {0}")]
    DanglingEdge(NodeId),
    #[error("rank {rank} out of range for world size {world}")]
    RankOutOfRange { rank: RankId, world: u32 },
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("node {0} has no duration")]
    MissingDuration(NodeId),
    #[error("graph is not calibrated")]
    NotCalibrated,
    #[error("group {0} remapped inconsistently")]
    RemapConflict(GroupId),
    #[error("template rank {0} does not fit one replica")]
    TemplateRankRange(RankId),
}

/// A single validation failure; violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    RankOutOfRange { node: NodeId },
    CycleDetected,
    MissingChainEdge { rank: RankId, src: NodeId, dst: NodeId },
    SyncDescriptorMismatch { sync: SyncGroupId },
    SyncDuplicateRank { sync: SyncGroupId, rank: RankId },
    SyncOnComputeNode { node: NodeId },
    NodeInMultipleSyncGroups { node: NodeId },
    ReduceOpRule { node: NodeId },
    MixedTiming { node: NodeId },
    StartWithoutDuration { node: NodeId },
    DependencyViolated { src: NodeId, dst: NodeId },
    SyncStartMismatch { sync: SyncGroupId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RankOutOfRange { node } => write!(f, "node {node}: rank out of range"),
            Violation::CycleDetected => write!(f, "cycle detected"),
            Violation::MissingChainEdge { rank, src, dst } => {
                write!(f, "rank {rank}: no directional edge {src} -> {dst}")
            }
            Violation::SyncDescriptorMismatch { sync } => {
                write!(f, "sync group {sync}: member descriptors differ")
            }
            Violation::SyncDuplicateRank { sync, rank } => {
                write!(f, "sync group {sync}: rank {rank} appears twice")
            }
            Violation::SyncOnComputeNode { node } => {
                write!(f, "node {node}: sync edge on a compute node")
            }
            Violation::NodeInMultipleSyncGroups { node } => {
                write!(f, "node {node}: member of two sync groups")
            }
            Violation::ReduceOpRule { node } => {
                write!(f, "node {node}: reduce op presence violates kind rule")
            }
            Violation::MixedTiming { node } => {
                write!(f, "node {node}: timing fields inconsistent with the rest of the graph")
            }
            Violation::StartWithoutDuration { node } => {
                write!(f, "node {node}: start without duration")
            }
            Violation::DependencyViolated { src, dst } => {
                write!(f, "edge {src} -> {dst}: dst starts before src finishes")
            }
            Violation::SyncStartMismatch { sync } => {
                write!(f, "sync group {sync}: members have different starts")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecutionGraph {
    meta: GraphMeta,
    nodes: Vec<GraphNode>,
    index: HashMap<NodeId, usize>,
    edges: Vec<DependencyEdge>,
    rank_order: BTreeMap<RankId, Vec<NodeId>>,
}

impl ExecutionGraph {
    pub fn new(meta: GraphMeta) -> ExecutionGraph {
        ExecutionGraph {
            meta,
            nodes: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
            rank_order: BTreeMap::new(),
        }
    }

    pub fn meta(&self) -> &GraphMeta {
        &self.meta
    }

    pub fn set_spec_label(&mut self, label: Option<String>) {
        self.meta.spec_label = label;
    }

    pub fn world_size(&self) -> u32 {
        self.meta.world_size
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter()
    }

    pub fn edges(&self) -> &[DependencyEdge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Option<&GraphNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut GraphNode> {
        let i = *self.index.get(&id)?;
        Some(&mut self.nodes[i])
    }

    pub fn ranks(&self) -> impl Iterator<Item = RankId> + '_ {
        self.rank_order.keys().copied()
    }

    /// Nodes of one rank in program order (the directional chain).
    pub fn rank_order(&self, rank: RankId) -> &[NodeId] {
        self.rank_order.get(&rank).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Appends a node; its position in the owning rank's chain is the
    /// insertion order.
    pub fn add_node(&mut self, node: GraphNode) -> Result<NodeId, GraphError> {
        if self.index.contains_key(&node.id) {
            return Err(GraphError::DuplicateNode(node.id));
        }
        if node.rank.0 >= self.meta.world_size {
            return Err(GraphError::RankOutOfRange {
                rank: node.rank,
                world: self.meta.world_size,
            });
        }
        let id = node.id;
        self.rank_order.entry(node.rank).or_default().push(id);
        self.index.insert(id, self.nodes.len());
        self.nodes.push(node);
        Ok(id)
    }

    pub fn add_edge(&mut self, edge: DependencyEdge) -> Result<(), GraphError> {
        if !self.index.contains_key(&edge.src) {
            return Err(GraphError::DanglingEdge(edge.src));
        }
        if !self.index.contains_key(&edge.dst) {
            return Err(GraphError::DanglingEdge(edge.dst));
        }
        self.edges.push(edge);
        Ok(())
    }

    /// Appends a node and chains it after the rank's previous node.
    pub fn add_node_chained(&mut self, node: GraphNode) -> Result<NodeId, GraphError> {
        let rank = node.rank;
        let prev = self.rank_order(rank).last().copied();
        let id = self.add_node(node)?;
        if let Some(prev) = prev {
            self.add_edge(DependencyEdge {
                src: prev,
                dst: id,
                kind: EdgeKind::Directional,
            })?;
        }
        Ok(id)
    }

    /// Sync groups as sorted member lists, gathered from the S edges.
    pub fn sync_groups(&self) -> BTreeMap<SyncGroupId, Vec<NodeId>> {
        let mut groups: BTreeMap<SyncGroupId, BTreeSet<NodeId>> = BTreeMap::new();
        for e in &self.edges {
            if let EdgeKind::Synchronization(sync) = e.kind {
                let set = groups.entry(sync).or_default();
                set.insert(e.src);
                set.insert(e.dst);
            }
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect()
    }

    /// Sync group id of each member node.
    pub fn sync_of_node(&self) -> HashMap<NodeId, SyncGroupId> {
        let mut map = HashMap::new();
        for (sync, members) in self.sync_groups() {
            for m in members {
                map.insert(m, sync);
            }
        }
        map
    }

    pub fn timing_state(&self) -> TimingState {
        if self.nodes.is_empty() {
            return TimingState::Bare;
        }
        let with_dur = self.nodes.iter().filter(|n| n.duration_ns.is_some()).count();
        let with_start = self.nodes.iter().filter(|n| n.start_ns.is_some()).count();
        match (with_dur, with_start) {
            (0, 0) => TimingState::Bare,
            (d, 0) if d == self.nodes.len() => TimingState::Timed,
            (d, s) if d == self.nodes.len() && s == self.nodes.len() => TimingState::Calibrated,
            _ => TimingState::Mixed,
        }
    }

    /// Checks every structural and timing invariant; an empty result means
    /// the graph is well formed for its timing state.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();

        for n in &self.nodes {
            if n.rank.0 >= self.meta.world_size {
                out.push(Violation::RankOutOfRange { node: n.id });
            }
            if let NodeKind::Comm { descriptor } = &n.kind {
                if descriptor.kind.reduces() != descriptor.reduce_op.is_some() {
                    out.push(Violation::ReduceOpRule { node: n.id });
                }
            }
            if n.start_ns.is_some() && n.duration_ns.is_none() {
                out.push(Violation::StartWithoutDuration { node: n.id });
            }
        }

        // Timing state must be uniform.
        let state = self.timing_state();
        if state == TimingState::Mixed {
            let with_dur = self.nodes.iter().filter(|n| n.duration_ns.is_some()).count();
            let with_start = self.nodes.iter().filter(|n| n.start_ns.is_some()).count();
            if with_dur > 0 && with_dur < self.nodes.len() {
                for n in self.nodes.iter().filter(|n| n.duration_ns.is_none()) {
                    out.push(Violation::MixedTiming { node: n.id });
                }
            } else if with_start > 0 && with_start < self.nodes.len() {
                for n in self.nodes.iter().filter(|n| n.start_ns.is_none()) {
                    out.push(Violation::MixedTiming { node: n.id });
                }
            }
        }

        // Per-rank chains must be explicit directional edges.
        let dir_edges: HashSet<(NodeId, NodeId)> = self
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Directional)
            .map(|e| (e.src, e.dst))
            .collect();
        for (&rank, order) in &self.rank_order {
            for pair in order.windows(2) {
                if !dir_edges.contains(&(pair[0], pair[1])) {
                    out.push(Violation::MissingChainEdge {
                        rank,
                        src: pair[0],
                        dst: pair[1],
                    });
                }
            }
        }

        // Sync groups: members are comm nodes with compatible descriptors,
        // pairwise distinct ranks, one group per node.
        let mut node_sync: HashMap<NodeId, SyncGroupId> = HashMap::new();
        let sync_groups = self.sync_groups();
        for (&sync, members) in &sync_groups {
            for &m in members {
                if let Some(prev) = node_sync.insert(m, sync) {
                    if prev != sync {
                        out.push(Violation::NodeInMultipleSyncGroups { node: m });
                    }
                }
            }
            let mut ranks_seen = BTreeSet::new();
            let mut first_desc: Option<&CommDescriptor> = None;
            for &m in members {
                let node = match self.node(m) {
                    Some(n) => n,
                    None => continue,
                };
                match &node.kind {
                    NodeKind::Comm { descriptor } => match first_desc {
                        None => first_desc = Some(descriptor),
                        Some(d) => {
                            if !d.sync_compatible(descriptor) {
                                out.push(Violation::SyncDescriptorMismatch { sync });
                                break;
                            }
                        }
                    },
                    NodeKind::Compute { .. } => {
                        out.push(Violation::SyncOnComputeNode { node: m });
                    }
                }
                if !ranks_seen.insert(node.rank) {
                    out.push(Violation::SyncDuplicateRank { sync, rank: node.rank });
                }
            }
        }

        if self.topo_order().is_err() {
            out.push(Violation::CycleDetected);
        }

        // Calibrated-graph constraints.
        if state == TimingState::Calibrated {
            for e in &self.edges {
                if e.kind != EdgeKind::Directional {
                    continue;
                }
                let (src, dst) = match (self.node(e.src), self.node(e.dst)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => continue,
                };
                let src_end = src.start_ns.unwrap_or(0) + src.duration_ns.unwrap_or(0);
                if dst.start_ns.unwrap_or(0) < src_end {
                    out.push(Violation::DependencyViolated { src: e.src, dst: e.dst });
                }
            }
            for (&sync, members) in &sync_groups {
                let starts: BTreeSet<Option<Ns>> = members
                    .iter()
                    .filter_map(|m| self.node(*m))
                    .map(|n| n.start_ns)
                    .collect();
                if starts.len() > 1 {
                    out.push(Violation::SyncStartMismatch { sync });
                }
            }
        }

        out
    }

    /// Deterministic topological order over all stored edges, smallest
    /// NodeId first among ready nodes.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let mut indegree: HashMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        let mut succ: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in &self.edges {
            *indegree.get_mut(&e.dst).expect("edge endpoints exist") += 1;
            succ.entry(e.src).or_default().push(e.dst);
        }
        let mut heap: BinaryHeap<Reverse<NodeId>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = heap.pop() {
            order.push(id);
            if let Some(nexts) = succ.get(&id) {
                for &nx in nexts {
                    let d = indegree.get_mut(&nx).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        heap.push(Reverse(nx));
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(GraphError::CyclicGraph);
        }
        Ok(order)
    }

    /// Longest dependency-respecting chain of a timed graph. The returned
    /// length equals the makespan of the ASAP schedule; the path is the
    /// chain of nodes whose finish times force each successive start.
    pub fn critical_path(&self) -> Result<(Vec<NodeId>, Ns), GraphError> {
        for n in &self.nodes {
            if n.duration_ns.is_none() {
                return Err(GraphError::MissingDuration(n.id));
            }
        }
        if self.nodes.is_empty() {
            return Ok((Vec::new(), 0));
        }
        let schedule = self.asap_schedule(|n| n.duration_ns.unwrap())?;
        let mut end = None;
        for n in &self.nodes {
            let finish = schedule.start[&n.id] + n.duration_ns.unwrap();
            match end {
                None => end = Some((n.id, finish)),
                Some((bid, best)) => {
                    if finish > best || (finish == best && n.id < bid) {
                        end = Some((n.id, finish));
                    }
                }
            }
        }
        let (mut cur, length) = end.unwrap();
        let mut path = vec![cur];
        while let Some(&det) = schedule.determiner.get(&cur) {
            path.push(det);
            cur = det;
        }
        path.reverse();
        Ok((path, length))
    }

    /// ASAP start times: a node starts when its directional predecessors
    /// finish; sync-group members all start at the latest member readiness.
    pub(crate) fn asap_schedule<F>(&self, dur: F) -> Result<AsapSchedule, GraphError>
    where
        F: Fn(&GraphNode) -> Ns,
    {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let sync_of = self.sync_of_node();
        let groups = self.sync_groups();

        let mut indegree: HashMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        let mut succ: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        let mut preds: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in &self.edges {
            if e.kind != EdgeKind::Directional {
                continue;
            }
            *indegree.get_mut(&e.dst).expect("edge endpoints exist") += 1;
            succ.entry(e.src).or_default().push(e.dst);
            preds.entry(e.dst).or_default().push(e.src);
        }

        let mut ready: HashMap<NodeId, (Ns, Option<NodeId>)> = HashMap::new();
        let mut start: HashMap<NodeId, Ns> = HashMap::new();
        let mut determiner: HashMap<NodeId, NodeId> = HashMap::new();
        let mut arrived: HashMap<SyncGroupId, usize> = HashMap::new();
        let mut heap: BinaryHeap<Reverse<NodeId>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut finalized = 0usize;

        // Deferred sync members wait here until the whole group arrived.
        while let Some(Reverse(id)) = heap.pop() {
            // Readiness from directional predecessors; the determiner is the
            // predecessor whose finish realizes the maximum (lowest id wins
            // ties, zero-readiness nodes have none).
            let mut r: Ns = 0;
            let mut det: Option<NodeId> = None;
            if let Some(ps) = preds.get(&id) {
                let mut ps = ps.clone();
                ps.sort_unstable();
                for p in ps {
                    let f = start[&p] + dur(self.node(p).unwrap());
                    if f > r {
                        r = f;
                        det = Some(p);
                    }
                }
            }
            ready.insert(id, (r, det));

            let members: Vec<NodeId> = match sync_of.get(&id) {
                Some(sync) => {
                    let count = arrived.entry(*sync).or_insert(0);
                    *count += 1;
                    let group = &groups[sync];
                    if *count < group.len() {
                        continue; // wait for remaining members
                    }
                    group.clone()
                }
                None => vec![id],
            };

            // Shared start is the maximum readiness over the group.
            let mut s: Ns = 0;
            let mut det: Option<NodeId> = None;
            for &m in &members {
                let (r, d) = ready[&m];
                if r > s {
                    s = r;
                    det = d;
                }
            }
            for &m in &members {
                start.insert(m, s);
                if let Some(d) = det {
                    determiner.insert(m, d);
                }
                finalized += 1;
                if let Some(nexts) = succ.get(&m) {
                    for &nx in nexts {
                        let d = indegree.get_mut(&nx).unwrap();
                        *d -= 1;
                        if *d == 0 {
                            heap.push(Reverse(nx));
                        }
                    }
                }
            }
        }

        if finalized != self.nodes.len() {
            return Err(GraphError::CyclicGraph);
        }

        Ok(AsapSchedule { start, determiner })
    }

    /// Structural signature invariant under node/sync/group renumbering;
    /// two graphs are isomorphic iff their signatures are equal.
    pub fn canonical_signature(&self) -> CanonicalSignature {
        // Canonical position of a node: (rank, index in the rank chain).
        let mut pos: HashMap<NodeId, (u32, u32)> = HashMap::new();
        for (&rank, order) in &self.rank_order {
            for (i, &id) in order.iter().enumerate() {
                pos.insert(id, (rank.0, i as u32));
            }
        }
        // Rename groups by first appearance in canonical scan order.
        let mut group_rename: BTreeMap<GroupId, u32> = BTreeMap::new();
        let mut nodes: Vec<((u32, u32), String)> = Vec::new();
        for (&_rank, order) in &self.rank_order {
            for &id in order {
                let n = self.node(id).unwrap();
                let key = match &n.kind {
                    NodeKind::Compute { label, microbatch } => {
                        format!("C {label} {microbatch:?} {:?}", n.duration_ns)
                    }
                    NodeKind::Comm { descriptor } => {
                        let next = group_rename.len() as u32;
                        let g = *group_rename.entry(descriptor.group).or_insert(next);
                        format!(
                            "M {:?} g{} b{} {:?} {:?} {:?}",
                            descriptor.kind,
                            g,
                            descriptor.bytes,
                            descriptor.reduce_op,
                            descriptor.algorithm,
                            n.duration_ns
                        )
                    }
                };
                nodes.push((pos[&id], key));
            }
        }
        nodes.sort();

        let mut dir_edges: Vec<((u32, u32), (u32, u32))> = self
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Directional)
            .map(|e| (pos[&e.src], pos[&e.dst]))
            .collect();
        dir_edges.sort_unstable();
        dir_edges.dedup();

        let mut sync_partition: Vec<Vec<(u32, u32)>> = self
            .sync_groups()
            .values()
            .map(|members| {
                let mut v: Vec<(u32, u32)> = members.iter().map(|m| pos[m]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        sync_partition.sort();

        CanonicalSignature {
            world_size: self.meta.world_size,
            nodes,
            dir_edges,
            sync_partition,
        }
    }

    pub fn is_isomorphic(&self, other: &ExecutionGraph) -> bool {
        self.canonical_signature() == other.canonical_signature()
    }

    /// Renumbers nodes by (rank, chain position) and sync ids by smallest
    /// member node id. Produces the canonical form the serializer emits.
    pub fn renumbered(&self) -> ExecutionGraph {
        let mut rename: HashMap<NodeId, NodeId> = HashMap::new();
        let mut next = 0u64;
        for order in self.rank_order.values() {
            for &id in order {
                rename.insert(id, NodeId(next));
                next += 1;
            }
        }
        let mut out = ExecutionGraph::new(self.meta.clone());
        for order in self.rank_order.values() {
            for &id in order {
                let n = self.node(id).unwrap();
                out.add_node(GraphNode {
                    id: rename[&id],
                    ..n.clone()
                })
                .expect("renumbered ids are unique");
            }
        }
        // Sync ids ordered by the smallest renamed member.
        let mut sync_rename: HashMap<SyncGroupId, SyncGroupId> = HashMap::new();
        let mut firsts: Vec<(NodeId, SyncGroupId)> = self
            .sync_groups()
            .into_iter()
            .map(|(sync, members)| {
                let first = members.iter().map(|m| rename[m]).min().unwrap();
                (first, sync)
            })
            .collect();
        firsts.sort_unstable();
        for (i, (_, sync)) in firsts.into_iter().enumerate() {
            sync_rename.insert(sync, SyncGroupId(i as u64));
        }
        let mut edges: Vec<DependencyEdge> = self
            .edges
            .iter()
            .map(|e| DependencyEdge {
                src: rename[&e.src],
                dst: rename[&e.dst],
                kind: match e.kind {
                    EdgeKind::Directional => EdgeKind::Directional,
                    EdgeKind::Synchronization(s) => EdgeKind::Synchronization(sync_rename[&s]),
                },
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        for e in edges {
            out.add_edge(e).expect("endpoints renamed consistently");
        }
        out
    }
}

pub(crate) struct AsapSchedule {
    pub start: HashMap<NodeId, Ns>,
    pub determiner: HashMap<NodeId, NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalSignature {
    world_size: u32,
    nodes: Vec<((u32, u32), String)>,
    dir_edges: Vec<((u32, u32), (u32, u32))>,
    sync_partition: Vec<Vec<(u32, u32)>>,
}

/// Expands a one-replica template into `dp_size` structurally identical
/// copies. Groups listed in `dp_groups` span replicas: their collective
/// occurrences merge into fresh sync groups covering all copies; every
/// other group gets a fresh per-replica id.
pub fn expand_dp(
    template: &ExecutionGraph,
    dp_size: u32,
    dp_groups: &BTreeSet<GroupId>,
) -> Result<ExecutionGraph, GraphError> {
    assert!(dp_size >= 1, "dp_size must be positive");
    let replica_world = template.world_size();
    let world = replica_world * dp_size;
    for n in template.nodes() {
        if n.rank.0 >= replica_world {
            return Err(GraphError::TemplateRankRange(n.rank));
        }
    }
    // A group must be used consistently: either DP (cross-replica) or not.
    for n in template.nodes() {
        if let Some(d) = n.kind.descriptor() {
            let is_dp = dp_groups.contains(&d.group);
            if is_dp && d.kind.is_p2p() {
                return Err(GraphError::RemapConflict(d.group));
            }
        }
    }

    let stride = template
        .nodes()
        .map(|n| n.id.0)
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let dp = dp_size as u64;

    let mut meta = GraphMeta::new(world);
    meta.spec_label = template.meta().spec_label.clone();
    let mut out = ExecutionGraph::new(meta);

    for replica in 0..dp_size {
        let r64 = replica as u64;
        for order in template.rank_order.values() {
            for &id in order {
                let n = template.node(id).unwrap();
                let mut kind = n.kind.clone();
                if let NodeKind::Comm { descriptor } = &mut kind {
                    let g = descriptor.group.0 as u64;
                    descriptor.group = if dp_groups.contains(&descriptor.group) {
                        GroupId(u32::try_from(g * dp).expect("group id fits"))
                    } else {
                        GroupId(u32::try_from(g * dp + r64).expect("group id fits"))
                    };
                }
                out.add_node(GraphNode {
                    id: NodeId(n.id.0 + r64 * stride),
                    rank: RankId(n.rank.0 + replica * replica_world),
                    kind,
                    duration_ns: n.duration_ns,
                    start_ns: n.start_ns,
                })?;
            }
        }
    }

    // Directional edges replicate; sync occurrences merge for DP groups.
    let sync_of = template.sync_of_node();
    for replica in 0..dp_size {
        let r64 = replica as u64;
        for e in template.edges() {
            if e.kind == EdgeKind::Directional {
                out.add_edge(DependencyEdge {
                    src: NodeId(e.src.0 + r64 * stride),
                    dst: NodeId(e.dst.0 + r64 * stride),
                    kind: EdgeKind::Directional,
                })?;
            }
        }
    }
    // Occurrence membership across replicas. For a DP occurrence the members
    // are every replica's copy of every template member; a singleton
    // template occurrence becomes a dp_size-member group. Non-DP
    // occurrences stay within their replica. Additionally, a DP comm node
    // with no sync edge at dp=1 (a singleton group, hence no edge) must
    // gain a cross-replica sync group.
    let mut occurrences: BTreeMap<(SyncGroupId, Option<u32>), BTreeSet<NodeId>> = BTreeMap::new();
    for (sync, members) in template.sync_groups() {
        let first = template.node(members[0]).unwrap();
        let is_dp = first
            .kind
            .descriptor()
            .map(|d| dp_groups.contains(&d.group))
            .unwrap_or(false);
        for replica in 0..dp_size {
            let r64 = replica as u64;
            let key = (sync, if is_dp { None } else { Some(replica) });
            let set = occurrences.entry(key).or_default();
            for &m in &members {
                set.insert(NodeId(m.0 + r64 * stride));
            }
        }
    }
    // DP comm nodes without sync edges in the template: pair each one with
    // its per-replica copies, keyed by its own node id.
    let mut extra = 0u64;
    let sync_base = template
        .sync_groups()
        .keys()
        .map(|s| s.0)
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    for order in template.rank_order.values() {
        for &id in order {
            let n = template.node(id).unwrap();
            let Some(d) = n.kind.descriptor() else {
                continue;
            };
            if !dp_groups.contains(&d.group) || sync_of.contains_key(&id) {
                continue;
            }
            let key = (SyncGroupId(sync_base + extra), None);
            extra += 1;
            let set = occurrences.entry(key).or_default();
            for replica in 0..dp_size {
                set.insert(NodeId(id.0 + replica as u64 * stride));
            }
        }
    }

    let mut next_sync = 0u64;
    for (_, members) in occurrences {
        let members: Vec<NodeId> = members.into_iter().collect();
        if members.len() < 2 {
            continue;
        }
        let sync = SyncGroupId(next_sync);
        next_sync += 1;
        for pair in members.windows(2) {
            out.add_edge(DependencyEdge {
                src: pair[0],
                dst: pair[1],
                kind: EdgeKind::Synchronization(sync),
            })?;
        }
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn compute(id: u64, rank: u32, dur: Option<Ns>) -> GraphNode {
        GraphNode {
            id: NodeId(id),
            rank: RankId(rank),
            kind: NodeKind::Compute {
                label: "fwd".to_string(),
                microbatch: None,
            },
            duration_ns: dur,
            start_ns: None,
        }
    }

    fn chain_graph(durs: &[Ns]) -> ExecutionGraph {
        let mut g = ExecutionGraph::new(GraphMeta::new(1));
        for (i, &d) in durs.iter().enumerate() {
            g.add_node_chained(compute(i as u64, 0, Some(d))).unwrap();
        }
        g
    }

    #[test]
    fn validate_accepts_acyclic_chain() {
        let g = chain_graph(&[1, 2, 3]);
        assert!(g.validate().is_empty());
    }

    #[test]
    fn validate_detects_cycle() {
        let mut g = ExecutionGraph::new(GraphMeta::new(2));
        g.add_node(compute(0, 0, None)).unwrap();
        g.add_node(compute(1, 1, None)).unwrap();
        g.add_edge(DependencyEdge {
            src: NodeId(0),
            dst: NodeId(1),
            kind: EdgeKind::Directional,
        })
        .unwrap();
        g.add_edge(DependencyEdge {
            src: NodeId(1),
            dst: NodeId(0),
            kind: EdgeKind::Directional,
        })
        .unwrap();
        assert!(g.validate().contains(&Violation::CycleDetected));
    }

    #[test]
    fn validate_flags_sync_descriptor_mismatch() {
        let mut g = ExecutionGraph::new(GraphMeta::new(2));
        let d1 = CommDescriptor::new(CommKind::AllReduce, GroupId(0), 64);
        let d2 = CommDescriptor::new(CommKind::Broadcast, GroupId(0), 64);
        for (id, rank, d) in [(0u64, 0u32, d1), (1, 1, d2)] {
            g.add_node(GraphNode {
                id: NodeId(id),
                rank: RankId(rank),
                kind: NodeKind::Comm { descriptor: d },
                duration_ns: None,
                start_ns: None,
            })
            .unwrap();
        }
        g.add_edge(DependencyEdge {
            src: NodeId(0),
            dst: NodeId(1),
            kind: EdgeKind::Synchronization(SyncGroupId(0)),
        })
        .unwrap();
        assert!(g
            .validate()
            .contains(&Violation::SyncDescriptorMismatch { sync: SyncGroupId(0) }));
    }

    #[test]
    fn send_recv_pair_is_sync_compatible() {
        let s = CommDescriptor::new(CommKind::Send, GroupId(3), 128);
        let r = CommDescriptor::new(CommKind::Recv, GroupId(3), 128);
        assert!(s.sync_compatible(&r));
        let other = CommDescriptor::new(CommKind::Recv, GroupId(3), 256);
        assert!(!s.sync_compatible(&other));
    }

    #[test]
    fn topo_order_chain_and_diamond() {
        let g = chain_graph(&[1, 1, 1]);
        assert_eq!(
            g.topo_order().unwrap(),
            vec![NodeId(0), NodeId(1), NodeId(2)]
        );

        // Diamond a -> {b, c} -> d with ids b < c.
        let mut g = ExecutionGraph::new(GraphMeta::new(4));
        for id in 0..4 {
            g.add_node(compute(id, id as u32, None)).unwrap();
        }
        for (s, d) in [(0u64, 1u64), (0, 2), (1, 3), (2, 3)] {
            g.add_edge(DependencyEdge {
                src: NodeId(s),
                dst: NodeId(d),
                kind: EdgeKind::Directional,
            })
            .unwrap();
        }
        assert_eq!(
            g.topo_order().unwrap(),
            vec![NodeId(0), NodeId(1), NodeId(2), NodeId(3)]
        );
    }

    #[test]
    fn critical_path_single_and_parallel() {
        let g = chain_graph(&[5]);
        assert_eq!(g.critical_path().unwrap(), (vec![NodeId(0)], 5));

        let mut g = ExecutionGraph::new(GraphMeta::new(2));
        g.add_node(compute(0, 0, Some(3))).unwrap();
        g.add_node(compute(1, 1, Some(7))).unwrap();
        let (path, len) = g.critical_path().unwrap();
        assert_eq!(len, 7);
        assert_eq!(path, vec![NodeId(1)]);
    }

    #[test]
    fn critical_path_requires_durations() {
        let g = chain_graph(&[1, 1]);
        let mut bare = g.clone();
        bare.node_mut(NodeId(1)).unwrap().duration_ns = None;
        assert!(matches!(
            bare.critical_path(),
            Err(GraphError::MissingDuration(_))
        ));
    }

    #[test]
    fn expand_dp_identity_and_count() {
        let mut t = ExecutionGraph::new(GraphMeta::new(1));
        t.add_node_chained(compute(0, 0, None)).unwrap();
        t.add_node_chained(GraphNode {
            id: NodeId(1),
            rank: RankId(0),
            kind: NodeKind::Comm {
                descriptor: CommDescriptor::new(CommKind::AllReduce, GroupId(7), 64),
            },
            duration_ns: None,
            start_ns: None,
        })
        .unwrap();

        let dp_groups: BTreeSet<GroupId> = [GroupId(7)].into_iter().collect();
        let same = expand_dp(&t, 1, &dp_groups).unwrap();
        assert!(same.is_isomorphic(&t));

        let four = expand_dp(&t, 4, &dp_groups).unwrap();
        assert_eq!(four.node_count(), 4 * t.node_count());
        assert_eq!(four.world_size(), 4);
        // The DP collective occurrence spans all four replicas.
        let groups = four.sync_groups();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups.values().next().unwrap().len(), 4);
        assert!(four.validate().is_empty());
    }
}
