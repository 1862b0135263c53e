//! Hybrid emulation: sandbox ranks execute their programs under the cost
//! model while virtual ranks walk the calibrated graph; both rendezvous at
//! sync groups. Also provides the full-simulation oracle (sandbox = world),
//! what-if duration overrides, fault injection and chrome-trace export.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use serde::Serialize;

use crate::collective::{self, Contribution};
use crate::coordinator::RecordedPayloads;
use crate::graph::{
    CommKind, ExecutionGraph, NodeId, NodeKind, Ns, RankId, TimingState,
};
use crate::workload::{CostModel, ProgramStep, Workload};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("graph is not calibrated")]
    NotCalibrated,
    #[error("sandbox rank {0} outside world")]
    SandboxOutsideWorld(RankId),
    #[error("rank {rank} step {position}: program diverges from graph ({detail})")]
    GraphProgramMismatch {
        rank: RankId,
        position: usize,
        detail: String,
    },
    #[error("occurrence {occurrence}: payload of {needed} bytes does not fit the pools")]
    PoolOverflow { occurrence: NodeId, needed: u64 },
    #[error("no node carries label {0:?}")]
    UnknownLabel(String),
    #[error("unknown rank {0}")]
    UnknownRank(RankId),
    #[error("emulation stalled with {0} unfinished ranks")]
    Stalled(usize),
    #[error("no recorded payloads for occurrence {0}")]
    MissingRecord(NodeId),
    #[error(transparent)]
    Collective(#[from] collective::CollectiveError),
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub gpu_capacity_bytes: u64,
    pub cpu_capacity_bytes: u64,
    /// Upcoming occurrences prefetched per virtual rank while it sits in a
    /// compute span.
    pub prefetch_depth: usize,
}

impl Default for PoolConfig {
    fn default() -> PoolConfig {
        PoolConfig {
            gpu_capacity_bytes: 96 << 30,
            cpu_capacity_bytes: 512 << 30,
            prefetch_depth: 4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmulationOptions<'a> {
    pub pool: PoolConfig,
    /// Coordinator-recorded payloads; enables the numeric path for
    /// sandbox-touching collectives.
    pub payloads: Option<&'a RecordedPayloads>,
    /// Perform (and count) the transfers of virtual-only occurrences
    /// instead of skipping them; timing is unaffected either way.
    pub disable_skip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeTiming {
    pub node: NodeId,
    pub rank: RankId,
    pub label: String,
    pub start: Ns,
    pub dur: Ns,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryTimeline {
    /// Allocation level after each change, ordered by time.
    pub points: Vec<(Ns, u64)>,
    pub peak: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub peak_gpu_bytes: u64,
    pub peak_cpu_bytes: u64,
    pub prefetches: u64,
    pub demand_fetches: u64,
    pub promotions: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone, Default)]
pub struct EmulationReport {
    pub iteration_time: Ns,
    pub sandbox: Vec<RankId>,
    pub per_rank_peak: BTreeMap<RankId, u64>,
    pub memory: BTreeMap<RankId, MemoryTimeline>,
    pub timings: Vec<NodeTiming>,
    pub bytes_moved: u64,
    pub skipped_occurrences: u64,
    pub pool: PoolStats,
    /// Sandbox collective results keyed by occurrence id, present when
    /// recorded payloads were supplied.
    pub collective_outputs: BTreeMap<NodeId, BTreeMap<RankId, Vec<f64>>>,
}

impl EmulationReport {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("iteration_time_ns = {}\n", self.iteration_time));
        out.push_str(&format!("bytes_moved = {}\n", self.bytes_moved));
        out.push_str(&format!("skipped_occurrences = {}\n", self.skipped_occurrences));
        out.push_str(&format!(
            "sandbox = {}\n",
            self.sandbox
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        for (rank, peak) in &self.per_rank_peak {
            out.push_str(&format!("peak_bytes_rank{rank} = {peak}\n"));
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("node,rank,label,start_ns,dur_ns\n");
        for t in &self.timings {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t.node, t.rank, t.label, t.start, t.dur
            ));
        }
        out
    }
}

struct Item {
    node: NodeId,
    dur: Ns,
    label: String,
    bytes: u64,
    mem_delta: i64,
    /// Occurrence id (smallest member node) for comm items.
    occ: Option<NodeId>,
}

struct OccInfo {
    members: Vec<(RankId, NodeId)>,
    kind: CommKind,
}

struct OccState {
    arrived: Vec<(RankId, Ns)>,
    staged: Option<StagedIn>,
}

#[derive(PartialEq, Eq, Clone, Copy)]
enum StagedIn {
    Gpu(u64),
    Cpu(u64),
}

/// Hybrid emulation of a calibrated graph.
///
/// Sandbox ranks run their rank programs with cost-model durations; the
/// rest advance by recorded durations. An empty sandbox replays the whole
/// graph virtually.
pub fn emulate(
    calibrated: &ExecutionGraph,
    workload: &Workload,
    sandbox: &BTreeSet<RankId>,
    opts: &EmulationOptions,
) -> Result<EmulationReport, ReplayError> {
    if calibrated.timing_state() != TimingState::Calibrated {
        return Err(ReplayError::NotCalibrated);
    }
    for &r in sandbox {
        if r.0 >= calibrated.world_size() {
            return Err(ReplayError::SandboxOutsideWorld(r));
        }
    }
    for &r in sandbox {
        verify_correspondence(calibrated, workload, r)?;
    }
    emulate_core(calibrated, workload.cost.clone(), sandbox, opts, &|n| {
        if sandbox.contains(&n.rank) {
            match &n.kind {
                NodeKind::Compute { label, .. } => workload.cost.compute_ns(label),
                NodeKind::Comm { descriptor } => workload.cost.comm_ns(descriptor),
            }
        } else {
            n.duration_ns.expect("calibrated graph")
        }
    })
}

/// Re-emulates with substituted compute durations, label -> duration.
pub fn what_if(
    calibrated: &ExecutionGraph,
    cost: &CostModel,
    overrides: &BTreeMap<String, Ns>,
) -> Result<EmulationReport, ReplayError> {
    if calibrated.timing_state() != TimingState::Calibrated {
        return Err(ReplayError::NotCalibrated);
    }
    for label in overrides.keys() {
        let known = calibrated.nodes().any(|n| match &n.kind {
            NodeKind::Compute { label: l, .. } => l == label,
            NodeKind::Comm { .. } => false,
        });
        if !known {
            return Err(ReplayError::UnknownLabel(label.clone()));
        }
    }
    let empty = BTreeSet::new();
    emulate_core(
        calibrated,
        cost.clone(),
        &empty,
        &EmulationOptions::default(),
        &|n| match &n.kind {
            NodeKind::Compute { label, .. } => overrides
                .get(label)
                .copied()
                .unwrap_or_else(|| n.duration_ns.expect("calibrated graph")),
            NodeKind::Comm { .. } => n.duration_ns.expect("calibrated graph"),
        },
    )
}

#[derive(Debug, Clone)]
pub struct FaultReport {
    pub report: EmulationReport,
    pub baseline_ns: Ns,
    pub delta_ns: i64,
}

/// Multiplies one rank's compute durations by a slowdown factor and
/// re-emulates; the report carries the induced makespan delta.
pub fn fault_inject(
    calibrated: &ExecutionGraph,
    cost: &CostModel,
    rank: RankId,
    compute_slowdown: f64,
) -> Result<FaultReport, ReplayError> {
    assert!(
        compute_slowdown.is_finite() && compute_slowdown >= 1.0,
        "slowdown factor must be finite and >= 1"
    );
    if calibrated.timing_state() != TimingState::Calibrated {
        return Err(ReplayError::NotCalibrated);
    }
    if rank.0 >= calibrated.world_size() || calibrated.rank_order(rank).is_empty() {
        return Err(ReplayError::UnknownRank(rank));
    }
    let empty = BTreeSet::new();
    let baseline = emulate_core(
        calibrated,
        cost.clone(),
        &empty,
        &EmulationOptions::default(),
        &|n| n.duration_ns.expect("calibrated graph"),
    )?;
    let report = emulate_core(
        calibrated,
        cost.clone(),
        &empty,
        &EmulationOptions::default(),
        &|n| {
            let d = n.duration_ns.expect("calibrated graph");
            if n.rank == rank && !n.kind.is_comm() {
                (d as f64 * compute_slowdown).round() as Ns
            } else {
                d
            }
        },
    )?;
    let baseline_ns = baseline.iteration_time;
    let delta_ns = report.iteration_time as i64 - baseline_ns as i64;
    Ok(FaultReport {
        report,
        baseline_ns,
        delta_ns,
    })
}

fn verify_correspondence(
    graph: &ExecutionGraph,
    workload: &Workload,
    rank: RankId,
) -> Result<(), ReplayError> {
    let order = graph.rank_order(rank);
    let program = &workload.program(rank).steps;
    if order.len() != program.len() {
        return Err(ReplayError::GraphProgramMismatch {
            rank,
            position: order.len().min(program.len()),
            detail: format!("{} graph nodes vs {} program steps", order.len(), program.len()),
        });
    }
    for (i, (&id, step)) in order.iter().zip(program).enumerate() {
        let node = graph.node(id).expect("rank order entries exist");
        let ok = match (&node.kind, step) {
            (
                NodeKind::Compute { label, microbatch },
                ProgramStep::Compute { label: pl, microbatch: pm },
            ) => label == pl && microbatch == pm,
            (
                NodeKind::Comm { descriptor },
                ProgramStep::Communicate { descriptor: pd, .. },
            ) => descriptor == pd,
            _ => false,
        };
        if !ok {
            return Err(ReplayError::GraphProgramMismatch {
                rank,
                position: i,
                detail: "step kind differs".to_string(),
            });
        }
    }
    Ok(())
}

fn emulate_core(
    graph: &ExecutionGraph,
    cost: CostModel,
    sandbox: &BTreeSet<RankId>,
    opts: &EmulationOptions,
    dur_fn: &dyn Fn(&crate::graph::GraphNode) -> Ns,
) -> Result<EmulationReport, ReplayError> {
    // Occurrence table from sync groups; singleton comm nodes form
    // one-member occurrences.
    let sync_of = graph.sync_of_node();
    let groups = graph.sync_groups();
    let mut occ_of_node: HashMap<NodeId, NodeId> = HashMap::new();
    let mut occ_info: HashMap<NodeId, OccInfo> = HashMap::new();
    for members in groups.values() {
        let occ = members[0];
        let mut ms = Vec::with_capacity(members.len());
        let mut kind = CommKind::Barrier;
        for &m in members {
            let n = graph.node(m).expect("sync member exists");
            if let NodeKind::Comm { descriptor } = &n.kind {
                kind = descriptor.kind;
            }
            ms.push((n.rank, m));
            occ_of_node.insert(m, occ);
        }
        occ_info.insert(occ, OccInfo { members: ms, kind });
    }
    for n in graph.nodes() {
        if n.kind.is_comm() && !sync_of.contains_key(&n.id) {
            occ_of_node.insert(n.id, n.id);
            occ_info.insert(
                n.id,
                OccInfo {
                    members: vec![(n.rank, n.id)],
                    kind: n.kind.descriptor().expect("comm node").kind,
                },
            );
        }
    }

    // Per-rank item lists in chain order.
    let ranks: Vec<RankId> = graph.ranks().collect();
    let mut items: BTreeMap<RankId, Vec<Item>> = BTreeMap::new();
    for &rank in &ranks {
        let list: Vec<Item> = graph
            .rank_order(rank)
            .iter()
            .map(|&id| {
                let n = graph.node(id).expect("node exists");
                let (label, bytes, mem_delta, occ) = match &n.kind {
                    NodeKind::Compute { label, .. } => {
                        (label.clone(), 0, cost.compute_mem_delta(label), None)
                    }
                    NodeKind::Comm { descriptor } => (
                        descriptor.kind.token().to_string(),
                        descriptor.bytes,
                        0,
                        Some(occ_of_node[&id]),
                    ),
                };
                Item {
                    node: id,
                    dur: dur_fn(n),
                    label,
                    bytes,
                    mem_delta,
                    occ,
                }
            })
            .collect();
        items.insert(rank, list);
    }

    let mut cursor: BTreeMap<RankId, usize> = ranks.iter().map(|&r| (r, 0)).collect();
    let mut done = 0usize;
    let total_ranks = ranks.len();
    let mut heap: BinaryHeap<Reverse<(Ns, RankId)>> = BinaryHeap::new();
    for &r in &ranks {
        if items[&r].is_empty() {
            done += 1;
        } else {
            heap.push(Reverse((0, r)));
        }
    }

    let mut occ_state: HashMap<NodeId, OccState> = HashMap::new();
    let mut timings: Vec<NodeTiming> = Vec::with_capacity(graph.node_count());
    // Memory events: (time, order_class, delta); frees apply before allocs
    // at equal times.
    let mut mem_events: BTreeMap<RankId, Vec<(Ns, u8, i64)>> = BTreeMap::new();
    let mut pool = PoolTracker::new(opts.pool.clone());
    let mut bytes_moved = 0u64;
    let mut skipped = 0u64;
    let mut collective_outputs: BTreeMap<NodeId, BTreeMap<RankId, Vec<f64>>> = BTreeMap::new();
    // Eviction moments discovered while completing occurrences.
    let mut evictions: BinaryHeap<Reverse<(Ns, NodeId)>> = BinaryHeap::new();

    let record_compute = |timings: &mut Vec<NodeTiming>,
                          mem: &mut BTreeMap<RankId, Vec<(Ns, u8, i64)>>,
                          rank: RankId,
                          item: &Item,
                          start: Ns| {
        timings.push(NodeTiming {
            node: item.node,
            rank,
            label: item.label.clone(),
            start,
            dur: item.dur,
        });
        if item.mem_delta > 0 {
            mem.entry(rank).or_default().push((start, 1, item.mem_delta));
        } else if item.mem_delta < 0 {
            mem.entry(rank).or_default().push((start + item.dur, 0, item.mem_delta));
        }
    };

    while let Some(Reverse((now, rank))) = heap.pop() {
        // Apply due evictions first.
        while let Some(Reverse((t, occ))) = evictions.peek().copied() {
            if t > now {
                break;
            }
            evictions.pop();
            pool.evict(occ);
        }

        let idx = cursor[&rank];
        let list = &items[&rank];
        if idx >= list.len() {
            continue;
        }
        let item = &list[idx];

        match item.occ {
            None => {
                record_compute(&mut timings, &mut mem_events, rank, item, now);
                // A virtual rank entering a compute span prefetches buffers
                // for its upcoming sandbox-facing occurrences.
                if !sandbox.is_empty() && !sandbox.contains(&rank) {
                    prefetch_upcoming(
                        &mut pool,
                        list,
                        idx + 1,
                        opts.pool.prefetch_depth,
                        &occ_info,
                        sandbox,
                    );
                }
                *cursor.get_mut(&rank).unwrap() += 1;
                if cursor[&rank] >= list.len() {
                    done += 1;
                } else {
                    heap.push(Reverse((now + item.dur, rank)));
                }
            }
            Some(occ_id) => {
                let info = &occ_info[&occ_id];
                let st = occ_state.entry(occ_id).or_insert_with(|| OccState {
                    arrived: Vec::new(),
                    staged: None,
                });
                st.arrived.push((rank, now));
                if st.arrived.len() < info.members.len() {
                    continue; // rendezvous: wait for the rest
                }

                // All members arrived; the occurrence starts now.
                let start = st.arrived.iter().map(|(_, t)| *t).max().unwrap_or(now);
                let touches_sandbox = info.members.iter().any(|(r, _)| sandbox.contains(r));
                let has_virtual = info.members.iter().any(|(r, _)| !sandbox.contains(r));

                if touches_sandbox && has_virtual {
                    // The assistant side must hold the payload on its GPU
                    // buffer when the communication fires.
                    let first_virtual = info
                        .members
                        .iter()
                        .find(|(r, _)| !sandbox.contains(r))
                        .map(|(_, n)| *n)
                        .expect("has_virtual");
                    let bytes = graph
                        .node(first_virtual)
                        .and_then(|n| n.kind.descriptor())
                        .map(|d| d.bytes)
                        .unwrap_or(0);
                    pool.require_resident(occ_id, bytes)
                        .map_err(|needed| ReplayError::PoolOverflow { occurrence: occ_id, needed })?;
                }

                let mut max_end = start;
                for &(mrank, mnode) in &info.members {
                    let mitem = &items[&mrank][cursor[&mrank]];
                    debug_assert_eq!(mitem.node, mnode);
                    timings.push(NodeTiming {
                        node: mnode,
                        rank: mrank,
                        label: mitem.label.clone(),
                        start,
                        dur: mitem.dur,
                    });
                    let end = start + mitem.dur;
                    max_end = max_end.max(end);
                    if mitem.bytes > 0 {
                        let ev = mem_events.entry(mrank).or_default();
                        ev.push((start, 1, mitem.bytes as i64));
                        ev.push((end, 0, -(mitem.bytes as i64)));
                    }
                    *cursor.get_mut(&mrank).unwrap() += 1;
                    if cursor[&mrank] >= items[&mrank].len() {
                        done += 1;
                    } else {
                        heap.push(Reverse((end, mrank)));
                    }
                }

                // Transfer accounting: sandbox-facing occurrences move real
                // bytes; virtual-only ones complete via metadata.
                let member_bytes: u64 = info
                    .members
                    .iter()
                    .map(|(_, n)| {
                        graph
                            .node(*n)
                            .and_then(|nn| nn.kind.descriptor())
                            .map(|d| d.bytes)
                            .unwrap_or(0)
                    })
                    .sum();
                if touches_sandbox || opts.disable_skip || sandbox.is_empty() {
                    bytes_moved += member_bytes;
                } else {
                    let participants: BTreeSet<RankId> =
                        info.members.iter().map(|(r, _)| *r).collect();
                    let descriptor = graph
                        .node(info.members[0].1)
                        .and_then(|n| n.kind.descriptor())
                        .cloned()
                        .expect("comm occurrence");
                    let meta = collective::skip_transfer(
                        crate::graph::SyncGroupId(occ_id.0),
                        &descriptor,
                        &participants,
                        sandbox,
                    )?;
                    debug_assert_eq!(meta.bytes_moved, 0);
                    skipped += 1;
                }

                if touches_sandbox {
                    if let Some(payloads) = opts.payloads {
                        let outs = sandbox_numeric_outputs(sandbox, payloads, occ_id, info)?;
                        if let Some(outs) = outs {
                            collective_outputs.insert(occ_id, outs);
                        }
                    }
                }

                if occ_state[&occ_id].staged.is_some() {
                    evictions.push(Reverse((max_end, occ_id)));
                }
            }
        }
    }

    if done != total_ranks {
        return Err(ReplayError::Stalled(total_ranks - done));
    }
    while let Some(Reverse((_, occ))) = evictions.pop() {
        pool.evict(occ);
    }

    let iteration_time = timings.iter().map(|t| t.start + t.dur).max().unwrap_or(0);

    // Build memory timelines.
    let mut memory: BTreeMap<RankId, MemoryTimeline> = BTreeMap::new();
    let mut per_rank_peak: BTreeMap<RankId, u64> = BTreeMap::new();
    for &rank in &ranks {
        let mut events = mem_events.remove(&rank).unwrap_or_default();
        events.sort_by_key(|(t, class, _)| (*t, *class));
        let mut level: i64 = 0;
        let mut peak: i64 = 0;
        let mut points = Vec::with_capacity(events.len());
        for (t, _, delta) in events {
            level += delta;
            peak = peak.max(level);
            points.push((t, level.max(0) as u64));
        }
        per_rank_peak.insert(rank, peak.max(0) as u64);
        memory.insert(
            rank,
            MemoryTimeline {
                points,
                peak: peak.max(0) as u64,
            },
        );
    }

    timings.sort_by_key(|t| (t.start, t.node));

    Ok(EmulationReport {
        iteration_time,
        sandbox: sandbox.iter().copied().collect(),
        per_rank_peak,
        memory,
        timings,
        bytes_moved,
        skipped_occurrences: skipped,
        pool: pool.stats,
        collective_outputs,
    })
}

fn prefetch_upcoming(
    pool: &mut PoolTracker,
    list: &[Item],
    from: usize,
    depth: usize,
    occ_info: &HashMap<NodeId, OccInfo>,
    sandbox: &BTreeSet<RankId>,
) {
    let mut seen = 0usize;
    for item in list.iter().skip(from) {
        if seen >= depth {
            break;
        }
        let Some(occ) = item.occ else { continue };
        seen += 1;
        let touches = occ_info[&occ]
            .members
            .iter()
            .any(|(r, _)| sandbox.contains(r));
        if touches {
            pool.prefetch(occ, item.bytes);
        }
    }
}

struct PoolTracker {
    cfg: PoolConfig,
    resident: HashMap<NodeId, StagedIn>,
    gpu_used: u64,
    cpu_used: u64,
    stats: PoolStats,
}

impl PoolTracker {
    fn new(cfg: PoolConfig) -> PoolTracker {
        PoolTracker {
            cfg,
            resident: HashMap::new(),
            gpu_used: 0,
            cpu_used: 0,
            stats: PoolStats::default(),
        }
    }

    /// Best-effort staging: GPU first, CPU as the fallback; silently skips
    /// when neither has room (the occurrence will demand-fetch later).
    fn prefetch(&mut self, occ: NodeId, bytes: u64) {
        if self.resident.contains_key(&occ) {
            return;
        }
        if self.gpu_used + bytes <= self.cfg.gpu_capacity_bytes {
            self.gpu_used += bytes;
            self.resident.insert(occ, StagedIn::Gpu(bytes));
            self.stats.prefetches += 1;
            self.stats.peak_gpu_bytes = self.stats.peak_gpu_bytes.max(self.gpu_used);
        } else if self.cpu_used + bytes <= self.cfg.cpu_capacity_bytes {
            self.cpu_used += bytes;
            self.resident.insert(occ, StagedIn::Cpu(bytes));
            self.stats.prefetches += 1;
            self.stats.peak_cpu_bytes = self.stats.peak_cpu_bytes.max(self.cpu_used);
        }
    }

    /// The payload must sit in GPU memory when the occurrence fires.
    fn require_resident(&mut self, occ: NodeId, bytes: u64) -> Result<(), u64> {
        match self.resident.get(&occ).copied() {
            Some(StagedIn::Gpu(_)) => Ok(()),
            Some(StagedIn::Cpu(b)) => {
                if self.gpu_used + b > self.cfg.gpu_capacity_bytes {
                    return Err(b);
                }
                self.cpu_used -= b;
                self.gpu_used += b;
                self.resident.insert(occ, StagedIn::Gpu(b));
                self.stats.promotions += 1;
                self.stats.peak_gpu_bytes = self.stats.peak_gpu_bytes.max(self.gpu_used);
                Ok(())
            }
            None => {
                if self.gpu_used + bytes > self.cfg.gpu_capacity_bytes {
                    return Err(bytes);
                }
                self.gpu_used += bytes;
                self.resident.insert(occ, StagedIn::Gpu(bytes));
                self.stats.demand_fetches += 1;
                self.stats.peak_gpu_bytes = self.stats.peak_gpu_bytes.max(self.gpu_used);
                Ok(())
            }
        }
    }

    fn evict(&mut self, occ: NodeId) {
        if let Some(staged) = self.resident.remove(&occ) {
            match staged {
                StagedIn::Gpu(b) => self.gpu_used -= b,
                StagedIn::Cpu(b) => self.cpu_used -= b,
            }
            self.stats.evictions += 1;
        }
    }
}

/// Numeric results for the sandbox side of one occurrence, computed over
/// the pruned topology from coordinator-recorded inputs.
fn sandbox_numeric_outputs(
    sandbox: &BTreeSet<RankId>,
    payloads: &RecordedPayloads,
    occ_id: NodeId,
    info: &OccInfo,
) -> Result<Option<BTreeMap<RankId, Vec<f64>>>, ReplayError> {
    if info.kind == CommKind::Barrier {
        return Ok(None);
    }
    let record = payloads
        .by_occurrence(occ_id)
        .ok_or(ReplayError::MissingRecord(occ_id))?;
    if record.injected {
        return Ok(None);
    }
    let op = record.descriptor.reduce_op;

    let mut outputs: BTreeMap<RankId, Vec<f64>> = BTreeMap::new();
    match record.descriptor.kind {
        CommKind::Send | CommKind::Recv => {
            // Only the sender staged an input; the receiver obtains it.
            let (from, payload) = record
                .inputs
                .first()
                .map(|(r, v)| (*r, v.clone()))
                .unwrap_or((record.member_order[0], Vec::new()));
            for (r, _) in &info.members {
                if sandbox.contains(r) && *r != from {
                    outputs.insert(*r, payload.clone());
                }
            }
        }
        CommKind::AllReduce | CommKind::ReduceScatter => {
            let order: Vec<RankId> = record
                .member_order
                .iter()
                .filter(|r| record.input_of(**r).is_some())
                .copied()
                .collect();
            let k = order.len();
            let contribs: Vec<Contribution> = order
                .iter()
                .map(|r| {
                    Contribution::from_flat(record.input_of(*r).expect("filtered"), k)
                        .map_err(ReplayError::from)
                })
                .collect::<Result<_, _>>()?;
            let ring = collective::RingTopology::new(order.clone());
            let in_ring: BTreeSet<RankId> = order
                .iter()
                .filter(|r| sandbox.contains(r))
                .copied()
                .collect();
            let plan = collective::plan_ring_pruning(
                &ring,
                &in_ring,
                op.unwrap_or(crate::graph::ReduceOp::Sum),
                record.descriptor.group,
            )?;
            if record.descriptor.kind == CommKind::AllReduce {
                let results = collective::pruned_ring_allreduce(&plan, &contribs)?;
                for (r, c) in results {
                    if sandbox.contains(&r) {
                        outputs.insert(r, c.flat());
                    }
                }
            } else {
                let results = collective::pruned_ring_reduce_scatter(&plan, &contribs)?;
                for (r, v) in results {
                    if sandbox.contains(&r) {
                        outputs.insert(r, v);
                    }
                }
            }
        }
        kind => {
            // Direct exchanges and gathers reconstructed from the records.
            let order: Vec<RankId> = record
                .member_order
                .iter()
                .filter(|r| record.input_of(**r).is_some())
                .copied()
                .collect();
            let inputs: Vec<Vec<f64>> = order
                .iter()
                .map(|r| record.input_of(*r).expect("filtered").to_vec())
                .collect();
            let outs = collective::execute_full(kind, op, &inputs)?;
            for (r, out) in order.iter().zip(outs) {
                if sandbox.contains(r) {
                    outputs.insert(*r, out);
                }
            }
        }
    }
    Ok(Some(outputs))
}

/// Chrome trace-event JSON: one process per rank, complete events with
/// microsecond timestamps.
pub fn export_chrome_trace(report: &EmulationReport) -> String {
    #[derive(Serialize)]
    struct Event<'a> {
        name: &'a str,
        cat: &'a str,
        ph: &'a str,
        ts: u64,
        dur: u64,
        pid: u32,
        tid: u32,
    }
    #[derive(Serialize)]
    struct Trace<'a> {
        #[serde(rename = "traceEvents")]
        trace_events: Vec<Event<'a>>,
    }
    let events: Vec<Event> = report
        .timings
        .iter()
        .map(|t| Event {
            name: &t.label,
            cat: if t.label == "fwd" || t.label == "bwd" {
                "compute"
            } else {
                "comm"
            },
            ph: "X",
            ts: t.start / 1000,
            dur: t.dur / 1000,
            pid: t.rank.0,
            tid: t.rank.0,
        })
        .collect();
    serde_json::to_string(&Trace { trace_events: events }).expect("trace serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate;
    use crate::coordinator::{run_collection, CollectionConfig};
    use crate::workload::{CostModel, ParallelismSpec, Workload};

    fn pipeline(world_pp: u32, ga: u32) -> (Workload, ExecutionGraph) {
        let spec = ParallelismSpec { tp: 1, pp: world_pp, vpp: 0, ep: 1, dp: 1, ga };
        let wl = Workload::build(spec, CostModel::default()).unwrap();
        let (bare, _, _) = run_collection(&wl, &CollectionConfig::default()).unwrap();
        let slices = calibrate::plan_slices(wl.world(), wl.world()).unwrap();
        let src = calibrate::MeasurementSource::Simulated {
            cost: &wl.cost,
            jitter: 0.0,
            seed: 0,
        };
        let (timed, _) = calibrate::fill_all(&bare, &slices, &src).unwrap();
        let cal = calibrate::calibrate(&timed).unwrap();
        (wl, cal)
    }

    #[test]
    fn full_simulation_matches_calibrated_makespan() {
        let (wl, cal) = pipeline(2, 2);
        let sandbox: BTreeSet<RankId> = (0..wl.world()).map(RankId).collect();
        let report = emulate(&cal, &wl, &sandbox, &EmulationOptions::default()).unwrap();
        assert_eq!(
            report.iteration_time,
            calibrate::iteration_time(&cal).unwrap()
        );
        // Every node visited exactly once.
        assert_eq!(report.timings.len(), cal.node_count());
    }

    #[test]
    fn what_if_identity_and_unknown_label() {
        let (wl, cal) = pipeline(2, 2);
        let report = what_if(&cal, &wl.cost, &BTreeMap::new()).unwrap();
        assert_eq!(
            report.iteration_time,
            calibrate::iteration_time(&cal).unwrap()
        );
        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), 1u64);
        assert!(matches!(
            what_if(&cal, &wl.cost, &bad),
            Err(ReplayError::UnknownLabel(_))
        ));
    }

    #[test]
    fn fault_identity_factor() {
        let (wl, cal) = pipeline(2, 2);
        let fr = fault_inject(&cal, &wl.cost, RankId(0), 1.0).unwrap();
        assert_eq!(fr.delta_ns, 0);
        assert!(matches!(
            fault_inject(&cal, &wl.cost, RankId(99), 1.5),
            Err(ReplayError::UnknownRank(_))
        ));
    }

    #[test]
    fn chrome_trace_shape() {
        let empty = EmulationReport::default();
        assert_eq!(export_chrome_trace(&empty), r#"{"traceEvents":[]}"#);

        let (wl, cal) = pipeline(2, 2);
        let sandbox: BTreeSet<RankId> = (0..2).map(RankId).collect();
        let report = emulate(&cal, &wl, &sandbox, &EmulationOptions::default()).unwrap();
        let json = export_chrome_trace(&report);
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        let events = parsed["traceEvents"].as_array().unwrap();
        assert_eq!(events.len(), report.timings.len());
        for e in events {
            for field in ["ph", "ts", "dur", "pid"] {
                assert!(e.get(field).is_some());
            }
        }
    }

    #[test]
    fn pool_overflow_on_tiny_gpu() {
        let (wl, cal) = pipeline(2, 2);
        let sandbox: BTreeSet<RankId> = [RankId(0)].into_iter().collect();
        let opts = EmulationOptions {
            pool: PoolConfig {
                gpu_capacity_bytes: 1,
                cpu_capacity_bytes: 1,
                prefetch_depth: 4,
            },
            ..EmulationOptions::default()
        };
        let err = emulate(&cal, &wl, &sandbox, &opts).unwrap_err();
        assert!(matches!(err, ReplayError::PoolOverflow { .. }));
    }
}
