//! Versioned line-record trace file.
//!
//! ```text
//! prismtrace v1 world=<N> [spec=<label>]
//! N <id> <rank> C <label> [mb=<k>] [dur=<ns>] [start=<ns>]
//! N <id> <rank> M <kind> g=<gid> b=<bytes> [op=<sum|max|min>] a=<ring|tree> [dur=<ns>] [start=<ns>]
//! E <src> <dst> D
//! E <src> <dst> S <sync_id>
//! ```
//!
//! Serialization is canonical: nodes ordered by (rank, chain position),
//! edges by (src, dst, kind). Parsing preserves per-rank chain order from
//! line order.

use std::collections::HashSet;

use crate::graph::{
    AlgorithmHint, CommDescriptor, CommKind, DependencyEdge, EdgeKind, ExecutionGraph, GraphMeta,
    GraphNode, GroupId, NodeId, NodeKind, RankId, ReduceOp, SyncGroupId, Violation,
};

pub const MAGIC: &str = "prismtrace";

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown format version {0:?}")]
    UnknownVersion(String),
    #[error("line {line}: edge references undefined node {node}")]
    DanglingEdge { line: usize, node: NodeId },
    #[error("parsed graph fails validation: {}", summarize(.0))]
    Invalid(Vec<Violation>),
}

fn summarize(violations: &[Violation]) -> String {
    let shown: Vec<String> = violations.iter().take(3).map(|v| v.to_string()).collect();
    let mut s = shown.join("; ");
    if violations.len() > 3 {
        s.push_str(&format!(" (+{} more)", violations.len() - 3));
    }
    s
}

fn malformed(line: usize, reason: impl Into<String>) -> ParseError {
    ParseError::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

/// Serializes a validated graph to its canonical byte form. Two calls on
/// the same graph produce identical bytes.
pub fn serialize_graph(g: &ExecutionGraph) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push_str(&format!(" v{} world={}", g.meta().version, g.world_size()));
    if let Some(label) = &g.meta().spec_label {
        out.push_str(&format!(" spec={label}"));
    }
    out.push('\n');

    let ranks: Vec<RankId> = g.ranks().collect();
    for rank in ranks {
        for &id in g.rank_order(rank) {
            let n = g.node(id).expect("rank order entries exist");
            out.push_str(&format!("N {} {}", n.id, n.rank));
            match &n.kind {
                NodeKind::Compute { label, microbatch } => {
                    out.push_str(&format!(" C {label}"));
                    if let Some(mb) = microbatch {
                        out.push_str(&format!(" mb={mb}"));
                    }
                }
                NodeKind::Comm { descriptor } => {
                    out.push_str(&format!(
                        " M {} g={} b={}",
                        descriptor.kind.token(),
                        descriptor.group,
                        descriptor.bytes
                    ));
                    if let Some(op) = descriptor.reduce_op {
                        out.push_str(&format!(" op={}", op.token()));
                    }
                    out.push_str(&format!(" a={}", descriptor.algorithm.token()));
                }
            }
            if let Some(d) = n.duration_ns {
                out.push_str(&format!(" dur={d}"));
            }
            if let Some(s) = n.start_ns {
                out.push_str(&format!(" start={s}"));
            }
            out.push('\n');
        }
    }

    let mut edges: Vec<&DependencyEdge> = g.edges().iter().collect();
    edges.sort_unstable();
    edges.dedup();
    for e in edges {
        match e.kind {
            EdgeKind::Directional => out.push_str(&format!("E {} {} D\n", e.src, e.dst)),
            EdgeKind::Synchronization(sync) => {
                out.push_str(&format!("E {} {} S {}\n", e.src, e.dst, sync))
            }
        }
    }
    out
}

/// Parses the line-record format and validates the result.
pub fn parse_graph(text: &str) -> Result<ExecutionGraph, ParseError> {
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty input, missing header"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(MAGIC) {
        return Err(malformed(1, format!("expected `{MAGIC}` header")));
    }
    let version = toks
        .next()
        .ok_or_else(|| malformed(1, "missing version token"))?;
    if version != "v1" {
        return Err(ParseError::UnknownVersion(version.to_string()));
    }
    let mut world: Option<u32> = None;
    let mut spec_label = None;
    for t in toks {
        if let Some(w) = t.strip_prefix("world=") {
            world = Some(
                w.parse()
                    .map_err(|_| malformed(1, format!("bad world size {w:?}")))?,
            );
        } else if let Some(s) = t.strip_prefix("spec=") {
            spec_label = Some(s.to_string());
        } else {
            return Err(malformed(1, format!("unexpected header token {t:?}")));
        }
    }
    let world = world.ok_or_else(|| malformed(1, "missing world= in header"))?;

    let mut meta = GraphMeta::new(world);
    meta.spec_label = spec_label;
    let mut g = ExecutionGraph::new(meta);
    let mut ids = HashSet::new();

    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("N") => {
                let node = parse_node(lineno, &mut toks)?;
                if !ids.insert(node.id) {
                    return Err(malformed(lineno, format!("duplicate node id {}", node.id)));
                }
                g.add_node(node).map_err(|e| malformed(lineno, e.to_string()))?;
            }
            Some("E") => {
                let src = parse_id(lineno, toks.next(), "src")?;
                let dst = parse_id(lineno, toks.next(), "dst")?;
                let kind = match toks.next() {
                    Some("D") => EdgeKind::Directional,
                    Some("S") => {
                        let sync = parse_u64(lineno, toks.next(), "sync id")?;
                        EdgeKind::Synchronization(SyncGroupId(sync))
                    }
                    other => return Err(malformed(lineno, format!("bad edge kind {other:?}"))),
                };
                if toks.next().is_some() {
                    return Err(malformed(lineno, "trailing tokens on edge record"));
                }
                for end in [src, dst] {
                    if !ids.contains(&end) {
                        return Err(ParseError::DanglingEdge {
                            line: lineno,
                            node: end,
                        });
                    }
                }
                g.add_edge(DependencyEdge { src, dst, kind })
                    .map_err(|e| malformed(lineno, e.to_string()))?;
            }
            other => return Err(malformed(lineno, format!("unknown record {other:?}"))),
        }
    }

    let violations = g.validate();
    if !violations.is_empty() {
        return Err(ParseError::Invalid(violations));
    }
    Ok(g)
}

fn parse_id(line: usize, tok: Option<&str>, what: &str) -> Result<NodeId, ParseError> {
    Ok(NodeId(parse_u64(line, tok, what)?))
}

fn parse_u64(line: usize, tok: Option<&str>, what: &str) -> Result<u64, ParseError> {
    let t = tok.ok_or_else(|| malformed(line, format!("missing {what}")))?;
    t.parse()
        .map_err(|_| malformed(line, format!("bad {what} {t:?}")))
}

fn parse_node<'a, I: Iterator<Item = &'a str>>(
    line: usize,
    toks: &mut I,
) -> Result<GraphNode, ParseError> {
    let id = parse_id(line, toks.next(), "node id")?;
    let rank = RankId(
        parse_u64(line, toks.next(), "rank")?
            .try_into()
            .map_err(|_| malformed(line, "rank does not fit u32"))?,
    );
    let kind_tok = toks
        .next()
        .ok_or_else(|| malformed(line, "missing node kind"))?;

    let mut duration_ns = None;
    let mut start_ns = None;
    let kind = match kind_tok {
        "C" => {
            let label = toks
                .next()
                .ok_or_else(|| malformed(line, "missing compute label"))?
                .to_string();
            let mut microbatch = None;
            for t in toks.by_ref() {
                if let Some(v) = t.strip_prefix("mb=") {
                    microbatch = Some(
                        v.parse()
                            .map_err(|_| malformed(line, format!("bad microbatch {v:?}")))?,
                    );
                } else if let Some(v) = t.strip_prefix("dur=") {
                    duration_ns = Some(parse_u64(line, Some(v), "duration")?);
                } else if let Some(v) = t.strip_prefix("start=") {
                    start_ns = Some(parse_u64(line, Some(v), "start")?);
                } else {
                    return Err(malformed(line, format!("unexpected token {t:?}")));
                }
            }
            NodeKind::Compute { label, microbatch }
        }
        "M" => {
            let kind_name = toks
                .next()
                .ok_or_else(|| malformed(line, "missing comm kind"))?;
            let comm_kind = CommKind::parse(kind_name)
                .ok_or_else(|| malformed(line, format!("unknown comm kind {kind_name:?}")))?;
            let mut group = None;
            let mut bytes = None;
            let mut reduce_op = None;
            let mut algorithm = AlgorithmHint::Ring;
            for t in toks.by_ref() {
                if let Some(v) = t.strip_prefix("g=") {
                    group = Some(GroupId(
                        v.parse()
                            .map_err(|_| malformed(line, format!("bad group {v:?}")))?,
                    ));
                } else if let Some(v) = t.strip_prefix("b=") {
                    bytes = Some(parse_u64(line, Some(v), "bytes")?);
                } else if let Some(v) = t.strip_prefix("op=") {
                    reduce_op = Some(
                        ReduceOp::parse(v)
                            .ok_or_else(|| malformed(line, format!("unknown reduce op {v:?}")))?,
                    );
                } else if let Some(v) = t.strip_prefix("a=") {
                    algorithm = AlgorithmHint::parse(v)
                        .ok_or_else(|| malformed(line, format!("unknown algorithm {v:?}")))?;
                } else if let Some(v) = t.strip_prefix("dur=") {
                    duration_ns = Some(parse_u64(line, Some(v), "duration")?);
                } else if let Some(v) = t.strip_prefix("start=") {
                    start_ns = Some(parse_u64(line, Some(v), "start")?);
                } else {
                    return Err(malformed(line, format!("unexpected token {t:?}")));
                }
            }
            let group = group.ok_or_else(|| malformed(line, "missing g= on comm node"))?;
            let bytes = bytes.ok_or_else(|| malformed(line, "missing b= on comm node"))?;
            NodeKind::Comm {
                descriptor: CommDescriptor {
                    kind: comm_kind,
                    group,
                    bytes,
                    reduce_op,
                    algorithm,
                },
            }
        }
        other => return Err(malformed(line, format!("unknown node kind {other:?}"))),
    };

    Ok(GraphNode {
        id,
        rank,
        kind,
        duration_ns,
        start_ns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphMeta;

    #[test]
    fn empty_sections_parse_to_empty_graph() {
        let g = parse_graph("prismtrace v1 world=4\n").unwrap();
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.world_size(), 4);
    }

    #[test]
    fn unknown_version_rejected() {
        let err = parse_graph("prismtrace v9 world=4\n").unwrap_err();
        assert!(matches!(err, ParseError::UnknownVersion(_)));
    }

    #[test]
    fn dangling_edge_rejected() {
        let text = "prismtrace v1 world=1\nN 0 0 C fwd\nE 0 5 D\n";
        let err = parse_graph(text).unwrap_err();
        assert!(matches!(
            err,
            ParseError::DanglingEdge {
                node: NodeId(5),
                ..
            }
        ));
    }

    #[test]
    fn round_trip_is_identity() {
        let mut g = ExecutionGraph::new(GraphMeta::new(2));
        g.set_spec_label(Some("demo".to_string()));
        g.add_node_chained(GraphNode {
            id: NodeId(0),
            rank: RankId(0),
            kind: NodeKind::Compute {
                label: "fwd".to_string(),
                microbatch: Some(3),
            },
            duration_ns: Some(10),
            start_ns: None,
        })
        .unwrap();
        g.add_node_chained(GraphNode {
            id: NodeId(1),
            rank: RankId(0),
            kind: NodeKind::Comm {
                descriptor: CommDescriptor::new(CommKind::AllReduce, GroupId(2), 4096),
            },
            duration_ns: Some(7),
            start_ns: None,
        })
        .unwrap();
        g.add_node_chained(GraphNode {
            id: NodeId(2),
            rank: RankId(1),
            kind: NodeKind::Comm {
                descriptor: CommDescriptor::new(CommKind::AllReduce, GroupId(2), 4096),
            },
            duration_ns: Some(9),
            start_ns: None,
        })
        .unwrap();
        g.add_edge(DependencyEdge {
            src: NodeId(1),
            dst: NodeId(2),
            kind: EdgeKind::Synchronization(SyncGroupId(0)),
        })
        .unwrap();

        let bytes = serialize_graph(&g);
        let reparsed = parse_graph(&bytes).unwrap();
        assert!(reparsed.is_isomorphic(&g));
        // Canonical bytes are a fixed point.
        assert_eq!(serialize_graph(&reparsed), bytes);
        // Serialization is deterministic.
        assert_eq!(serialize_graph(&g), bytes);
    }

    #[test]
    fn optional_fields_omitted_for_bare_graphs() {
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
        let bytes = serialize_graph(&g);
        assert!(!bytes.contains("dur="));
        assert!(!bytes.contains("start="));
        assert!(!bytes.contains("mb="));
    }
}
