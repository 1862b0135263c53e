//! Slice planning, per-slice duration filling, and inter-slice calibration
//! that turns slice-local timings into one globally consistent schedule.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{ExecutionGraph, GraphError, NodeId, NodeKind, Ns, RankId};
use crate::workload::CostModel;

#[derive(Debug, thiserror::Error)]
pub enum CalibrateError {
    #[error("slice size {size} invalid for world {world}")]
    InvalidSize { size: u32, world: u32 },
    #[error("node {0} has no duration")]
    MissingDuration(NodeId),
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("graph is not calibrated")]
    NotCalibrated,
    #[error("line {line}: malformed duration record")]
    MalformedDuration { line: usize },
    #[error("imported durations miss node {0}")]
    ImportIncomplete(NodeId),
}

impl From<GraphError> for CalibrateError {
    fn from(e: GraphError) -> CalibrateError {
        match e {
            GraphError::MissingDuration(id) => CalibrateError::MissingDuration(id),
            GraphError::CyclicGraph => CalibrateError::CyclicGraph,
            GraphError::NotCalibrated => CalibrateError::NotCalibrated,
            other => panic!("unexpected graph error during calibration: {other}"),
        }
    }
}

/// One timing-fill round: `real_ranks` execute for real, the rest assist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub index: usize,
    pub real_ranks: Vec<RankId>,
    pub assistant_ranks: Vec<RankId>,
}

/// Contiguous round-robin slices; the last one may be smaller.
pub fn plan_slices(world: u32, slice_size: u32) -> Result<Vec<Slice>, CalibrateError> {
    if slice_size == 0 || slice_size > world {
        return Err(CalibrateError::InvalidSize { size: slice_size, world });
    }
    let mut slices = Vec::new();
    let mut start = 0u32;
    let mut index = 0usize;
    while start < world {
        let end = (start + slice_size).min(world);
        let real: Vec<RankId> = (start..end).map(RankId).collect();
        let assistant: Vec<RankId> = (0..world)
            .filter(|r| *r < start || *r >= end)
            .map(RankId)
            .collect();
        slices.push(Slice {
            index,
            real_ranks: real,
            assistant_ranks: assistant,
        });
        start = end;
        index += 1;
    }
    Ok(slices)
}

/// Where measured durations come from.
pub enum MeasurementSource<'a> {
    /// Cost-model durations with optional multiplicative jitter; jitter 0
    /// reproduces the cost model exactly.
    Simulated {
        cost: &'a CostModel,
        jitter: f64,
        seed: u64,
    },
    /// Durations measured elsewhere, one entry per node.
    Imported {
        durations: &'a BTreeMap<NodeId, Ns>,
    },
}

impl MeasurementSource<'_> {
    fn duration_of(
        &self,
        graph: &ExecutionGraph,
        id: NodeId,
    ) -> Result<Ns, CalibrateError> {
        match self {
            MeasurementSource::Simulated { cost, jitter, seed } => {
                let node = graph.node(id).expect("node exists");
                let base = match &node.kind {
                    NodeKind::Compute { label, .. } => cost.compute_ns(label),
                    NodeKind::Comm { descriptor } => cost.comm_ns(descriptor),
                };
                if *jitter == 0.0 {
                    return Ok(base);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix(id.0));
                let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let scaled = (base as f64) * (1.0 + jitter * u);
                Ok(scaled.round().max(0.0) as Ns)
            }
            MeasurementSource::Imported { durations } => durations
                .get(&id)
                .copied()
                .ok_or(CalibrateError::ImportIncomplete(id)),
        }
    }
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 33)).wrapping_mul(0xff51afd7ed558ccd);
    x = (x ^ (x >> 33)).wrapping_mul(0xc4ceb9fe1a85ec53);
    x ^ (x >> 33)
}

/// Durations and slice-local start times measured for one slice's real
/// ranks. Assistant nodes replay the bare structure with zero-length spans,
/// which is what makes the local timestamps globally inconsistent.
#[derive(Debug, Clone, Default)]
pub struct SliceTiming {
    pub durations: BTreeMap<NodeId, Ns>,
    pub local_starts: BTreeMap<NodeId, Ns>,
}

pub fn fill_slice_timings(
    bare: &ExecutionGraph,
    slice: &Slice,
    src: &MeasurementSource,
) -> Result<SliceTiming, CalibrateError> {
    let mut durations = BTreeMap::new();
    for &rank in &slice.real_ranks {
        for &id in bare.rank_order(rank) {
            durations.insert(id, src.duration_of(bare, id)?);
        }
    }
    // Local schedule of this slice's run: real ranks take their measured
    // durations, assistants respond as fast as dependencies allow.
    let schedule = bare
        .asap_schedule(|n| durations.get(&n.id).copied().unwrap_or(0))
        .map_err(CalibrateError::from)?;
    let local_starts = durations
        .keys()
        .map(|id| (*id, schedule.start[id]))
        .collect();
    Ok(SliceTiming {
        durations,
        local_starts,
    })
}

/// Runs every slice and returns the timed graph plus the per-slice local
/// timings.
pub fn fill_all(
    bare: &ExecutionGraph,
    slices: &[Slice],
    src: &MeasurementSource,
) -> Result<(ExecutionGraph, Vec<SliceTiming>), CalibrateError> {
    let mut timings = Vec::with_capacity(slices.len());
    let mut merged: BTreeMap<NodeId, Ns> = BTreeMap::new();
    for slice in slices {
        let t = fill_slice_timings(bare, slice, src)?;
        merged.extend(t.durations.iter().map(|(k, v)| (*k, *v)));
        timings.push(t);
    }
    let timed = apply_durations(bare, &merged)?;
    Ok((timed, timings))
}

/// Copies durations onto a bare graph; every node must be covered.
pub fn apply_durations(
    bare: &ExecutionGraph,
    durations: &BTreeMap<NodeId, Ns>,
) -> Result<ExecutionGraph, CalibrateError> {
    let mut out = bare.clone();
    let ids: Vec<NodeId> = out.nodes().map(|n| n.id).collect();
    for id in ids {
        let d = durations
            .get(&id)
            .copied()
            .ok_or(CalibrateError::MissingDuration(id))?;
        out.node_mut(id).expect("node exists").duration_ns = Some(d);
    }
    Ok(out)
}

/// ASAP calibration: each node starts when its directional predecessors
/// finish; sync-group members share the latest member readiness; the
/// earliest start anchors at zero.
pub fn calibrate(timed: &ExecutionGraph) -> Result<ExecutionGraph, CalibrateError> {
    for n in timed.nodes() {
        if n.duration_ns.is_none() {
            return Err(CalibrateError::MissingDuration(n.id));
        }
    }
    let schedule = timed
        .asap_schedule(|n| n.duration_ns.expect("checked above"))
        .map_err(CalibrateError::from)?;
    let min_start = timed
        .nodes()
        .map(|n| schedule.start[&n.id])
        .min()
        .unwrap_or(0);
    let mut out = timed.clone();
    let ids: Vec<NodeId> = out.nodes().map(|n| n.id).collect();
    for id in ids {
        let s = schedule.start[&id] - min_start;
        out.node_mut(id).expect("node exists").start_ns = Some(s);
    }
    Ok(out)
}

/// Makespan of a calibrated graph: latest finish minus earliest start.
pub fn iteration_time(calibrated: &ExecutionGraph) -> Result<Ns, CalibrateError> {
    if calibrated.is_empty() {
        return Ok(0);
    }
    let mut min_start = Ns::MAX;
    let mut max_end = 0;
    for n in calibrated.nodes() {
        let (Some(s), Some(d)) = (n.start_ns, n.duration_ns) else {
            return Err(CalibrateError::NotCalibrated);
        };
        min_start = min_start.min(s);
        max_end = max_end.max(s + d);
    }
    Ok(max_end - min_start)
}

/// Makespan obtained by concatenating slice-local timestamps without
/// calibration; on pipelined workloads this diverges from the true
/// schedule because each slice's clock starts at zero.
pub fn uncalibrated_makespan(timings: &[SliceTiming]) -> Ns {
    let mut min_start = Ns::MAX;
    let mut max_end = 0;
    let mut any = false;
    for t in timings {
        for (id, start) in &t.local_starts {
            let dur = t.durations.get(id).copied().unwrap_or(0);
            min_start = min_start.min(*start);
            max_end = max_end.max(start + dur);
            any = true;
        }
    }
    if !any {
        return 0;
    }
    max_end - min_start
}

/// Parses an imported-durations file: lines of `<node id> <duration ns>`.
pub fn parse_durations(text: &str) -> Result<BTreeMap<NodeId, Ns>, CalibrateError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let parse = |t: Option<&str>| -> Result<u64, CalibrateError> {
            t.and_then(|v| v.parse().ok())
                .ok_or(CalibrateError::MalformedDuration { line: idx + 1 })
        };
        let id = parse(toks.next())?;
        let dur = parse(toks.next())?;
        if toks.next().is_some() {
            return Err(CalibrateError::MalformedDuration { line: idx + 1 });
        }
        out.insert(NodeId(id), dur);
    }
    Ok(out)
}

pub fn serialize_durations(durations: &BTreeMap<NodeId, Ns>) -> String {
    let mut out = String::new();
    for (id, dur) in durations {
        out.push_str(&format!("{id} {dur}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        CommDescriptor, CommKind, DependencyEdge, EdgeKind, GraphMeta, GraphNode, GroupId,
        NodeKind, SyncGroupId,
    };

    #[test]
    fn slice_planning_partitions() {
        let slices = plan_slices(8, 8).unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].real_ranks.len(), 8);
        assert!(slices[0].assistant_ranks.is_empty());

        let slices = plan_slices(10, 4).unwrap();
        let sizes: Vec<usize> = slices.iter().map(|s| s.real_ranks.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let slices = plan_slices(1024, 8).unwrap();
        assert_eq!(slices.len(), 128);
        assert_eq!(slices[0].real_ranks, (0..8).map(RankId).collect::<Vec<_>>());
        assert_eq!(
            slices[1].real_ranks,
            (8..16).map(RankId).collect::<Vec<_>>()
        );

        assert!(plan_slices(4, 0).is_err());
        assert!(plan_slices(4, 5).is_err());
    }

    #[test]
    fn single_node_calibration() {
        let mut g = ExecutionGraph::new(GraphMeta::new(1));
        g.add_node_chained(GraphNode {
            id: NodeId(0),
            rank: RankId(0),
            kind: NodeKind::Compute {
                label: "fwd".to_string(),
                microbatch: None,
            },
            duration_ns: Some(5),
            start_ns: None,
        })
        .unwrap();
        let c = calibrate(&g).unwrap();
        assert_eq!(c.node(NodeId(0)).unwrap().start_ns, Some(0));
        assert_eq!(iteration_time(&c).unwrap(), 5);
    }

    #[test]
    fn send_end_shifts_matched_recv() {
        // rank 0: compute(12) -> send(0); rank 1: compute(3) -> recv(0).
        // The receive locally sits at t=3 but must shift to the send at 12.
        let mut g = ExecutionGraph::new(GraphMeta::new(2));
        let comm = |kind: CommKind| NodeKind::Comm {
            descriptor: CommDescriptor::new(kind, GroupId(0), 64),
        };
        let mk = |id: u64, rank: u32, kind: NodeKind, dur: Ns| GraphNode {
            id: NodeId(id),
            rank: RankId(rank),
            kind,
            duration_ns: Some(dur),
            start_ns: None,
        };
        g.add_node_chained(mk(
            0,
            0,
            NodeKind::Compute { label: "fwd".to_string(), microbatch: None },
            12,
        ))
        .unwrap();
        g.add_node_chained(mk(1, 0, comm(CommKind::Send), 0)).unwrap();
        g.add_node_chained(mk(
            2,
            1,
            NodeKind::Compute { label: "fwd".to_string(), microbatch: None },
            3,
        ))
        .unwrap();
        g.add_node_chained(mk(3, 1, comm(CommKind::Recv), 1)).unwrap();
        g.add_edge(DependencyEdge {
            src: NodeId(1),
            dst: NodeId(3),
            kind: EdgeKind::Synchronization(SyncGroupId(0)),
        })
        .unwrap();

        let c = calibrate(&g).unwrap();
        // Send ends at 12; the matched recv starts exactly there.
        assert_eq!(c.node(NodeId(1)).unwrap().start_ns, Some(12));
        assert_eq!(c.node(NodeId(3)).unwrap().start_ns, Some(12));
        assert_eq!(iteration_time(&c).unwrap(), 13);
    }

    #[test]
    fn calibrate_is_idempotent() {
        let mut g = ExecutionGraph::new(GraphMeta::new(2));
        for (id, rank, dur) in [(0u64, 0u32, 4u64), (1, 0, 2), (2, 1, 9)] {
            g.add_node_chained(GraphNode {
                id: NodeId(id),
                rank: RankId(rank),
                kind: NodeKind::Compute {
                    label: "fwd".to_string(),
                    microbatch: None,
                },
                duration_ns: Some(dur),
                start_ns: None,
            })
            .unwrap();
        }
        let once = calibrate(&g).unwrap();
        let twice = calibrate(&once).unwrap();
        for n in once.nodes() {
            assert_eq!(n.start_ns, twice.node(n.id).unwrap().start_ns);
        }
    }

    #[test]
    fn missing_duration_rejected() {
        let mut g = ExecutionGraph::new(GraphMeta::new(1));
        g.add_node_chained(GraphNode {
            id: NodeId(0),
            rank: RankId(0),
            kind: NodeKind::Compute {
                label: "fwd".to_string(),
                microbatch: None,
            },
            duration_ns: None,
            start_ns: None,
        })
        .unwrap();
        assert!(matches!(
            calibrate(&g),
            Err(CalibrateError::MissingDuration(_))
        ));
    }

    #[test]
    fn durations_file_round_trip() {
        let mut m = BTreeMap::new();
        m.insert(NodeId(0), 10);
        m.insert(NodeId(7), 42);
        let text = serialize_durations(&m);
        assert_eq!(parse_durations(&text).unwrap(), m);
        assert!(parse_durations("0 x\n").is_err());
    }
}
