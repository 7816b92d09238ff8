//! g2o text IO (`VERTEX_SE3:QUAT` / `EDGE_SE3:QUAT`) and the edge-category
//! sidecar CSV.

use super::{is_valid_information, Edge, EdgeCategory, EdgeKind, NodeKey, PoseGraph};
use crate::geom::{Mat6, Pose3, Vec3};
use crate::io::fmt_sig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

const SIG: usize = 12;
const ID_STRIDE: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum G2oError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("node index {0} does not fit the id scheme")]
    IndexOverflow(NodeKey),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn perr(line: usize, msg: impl Into<String>) -> G2oError {
    G2oError::Parse { line, msg: msg.into() }
}

/// A parsed graph plus non-fatal findings (unknown tags, suspicious edges).
#[derive(Debug, Clone, Default)]
pub struct ParsedGraph {
    pub graph: PoseGraph,
    pub diagnostics: Vec<String>,
}

/// g2o vertex id of a node: `robot * 1000000 + index`.
pub fn node_id(key: NodeKey) -> Result<u64, G2oError> {
    if u64::from(key.index) >= ID_STRIDE {
        return Err(G2oError::IndexOverflow(key));
    }
    Ok(u64::from(key.robot) * ID_STRIDE + u64::from(key.index))
}

fn key_of(id: u64, line: usize) -> Result<NodeKey, G2oError> {
    let robot = u32::try_from(id / ID_STRIDE).map_err(|_| perr(line, format!("id {id} out of range")))?;
    Ok(NodeKey::new(robot, (id % ID_STRIDE) as u32))
}

fn push_pose(out: &mut String, p: &Pose3) {
    let t = p.translation();
    let [w, x, y, z] = p.wxyz();
    for v in [t.x, t.y, t.z, x, y, z, w] {
        out.push(' ');
        out.push_str(&fmt_sig(v, SIG));
    }
}

/// Serializes a graph: vertices in key order, then edges in graph order.
pub fn format_g2o(graph: &PoseGraph) -> Result<String, G2oError> {
    let mut out = String::new();
    for (k, p) in graph.nodes() {
        write!(out, "VERTEX_SE3:QUAT {}", node_id(*k)?).unwrap();
        push_pose(&mut out, p);
        out.push('\n');
    }
    for e in graph.edges() {
        write!(out, "EDGE_SE3:QUAT {} {}", node_id(e.from)?, node_id(e.to)?).unwrap();
        push_pose(&mut out, &e.measurement);
        for r in 0..6 {
            for c in r..6 {
                out.push(' ');
                out.push_str(&fmt_sig(e.information[(r, c)], SIG));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T, G2oError> {
    tok.parse().map_err(|_| perr(line, format!("{what}: cannot parse `{tok}`")))
}

fn parse_floats(toks: &[&str], line: usize) -> Result<Vec<f64>, G2oError> {
    toks.iter()
        .map(|t| {
            let v: f64 = parse_num(t, line, "value")?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(perr(line, format!("non-finite value `{t}`")))
            }
        })
        .collect()
}

fn pose_from(v: &[f64], line: usize) -> Result<Pose3, G2oError> {
    Pose3::from_wxyz(v[6], v[3], v[4], v[5], Vec3::new(v[0], v[1], v[2])).ok_or_else(|| perr(line, "degenerate quaternion"))
}

/// Parses g2o text. Malformed vertex/edge lines are errors; unknown tags
/// and intra-robot edges that do not join successive nodes are reported as
/// diagnostics. Edge kind follows from the endpoint robots; inter-robot
/// edges get category `Unknown` until a sidecar says otherwise.
pub fn parse_g2o(text: &str) -> Result<ParsedGraph, G2oError> {
    let mut parsed = ParsedGraph::default();
    let mut pending: Vec<(usize, Edge)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        let Some(&tag) = toks.first() else { continue };
        if tag.starts_with('#') {
            continue;
        }
        match tag {
            "VERTEX_SE3:QUAT" => {
                if toks.len() != 9 {
                    return Err(perr(line, format!("VERTEX_SE3:QUAT expects 8 fields, found {}", toks.len() - 1)));
                }
                let key = key_of(parse_num(toks[1], line, "vertex id")?, line)?;
                let pose = pose_from(&parse_floats(&toks[2..], line)?, line)?;
                parsed.graph.add_node(key, pose).map_err(|e| perr(line, e.to_string()))?;
            }
            "EDGE_SE3:QUAT" => {
                if toks.len() != 31 {
                    return Err(perr(line, format!("EDGE_SE3:QUAT expects 30 fields, found {}", toks.len() - 1)));
                }
                let from = key_of(parse_num(toks[1], line, "edge id")?, line)?;
                let to = key_of(parse_num(toks[2], line, "edge id")?, line)?;
                let v = parse_floats(&toks[3..], line)?;
                let measurement = pose_from(&v[..7], line)?;
                let mut info = Mat6::zeros();
                let mut k = 7;
                for r in 0..6 {
                    for c in r..6 {
                        info[(r, c)] = v[k];
                        info[(c, r)] = v[k];
                        k += 1;
                    }
                }
                if !is_valid_information(&info) {
                    return Err(perr(line, "information matrix is not positive definite"));
                }
                let edge = if from.robot == to.robot {
                    Edge::odometry(from, to, measurement, info)
                } else {
                    Edge::inter_robot(from, to, measurement, info)
                };
                pending.push((line, edge));
            }
            other => parsed.diagnostics.push(format!("line {line}: unknown tag `{other}` skipped")),
        }
    }
    // edges may precede the vertices they reference, so validate at the end
    for (line, edge) in pending {
        match parsed.graph.add_edge(edge.clone()) {
            Ok(()) => {}
            Err(super::GraphError::BadOdometryEdge(a, b)) => {
                parsed.diagnostics.push(format!("line {line}: intra-robot edge {a} -> {b} does not join successive nodes"));
                parsed.graph.push_edge_unchecked(edge);
            }
            Err(e) => return Err(perr(line, e.to_string())),
        }
    }
    Ok(parsed)
}

pub const SIDECAR_HEADER: &str = "id1,id2,kind,category,gnc_weight";

/// Sidecar CSV with one row per edge, in graph edge order.
pub fn format_sidecar(graph: &PoseGraph) -> Result<String, G2oError> {
    let mut out = String::from(SIDECAR_HEADER);
    out.push('\n');
    for e in graph.edges() {
        writeln!(
            out,
            "{},{},{},{},{}",
            node_id(e.from)?,
            node_id(e.to)?,
            e.kind.as_str(),
            e.category.as_str(),
            fmt_sig(e.gnc_weight, SIG)
        )
        .unwrap();
    }
    Ok(out)
}

/// Applies a sidecar to `graph`, whose edges must match row by row.
pub fn parse_sidecar(text: &str, graph: &mut PoseGraph) -> Result<(), G2oError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == SIDECAR_HEADER => {}
        _ => return Err(perr(1, format!("expected header `{SIDECAR_HEADER}`"))),
    }
    let n_edges = graph.edges().len();
    let mut count = 0;
    for (i, raw) in lines {
        let line = i + 1;
        let f: Vec<&str> = raw.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(perr(line, format!("expected 5 fields, found {}", f.len())));
        }
        let from = key_of(parse_num(f[0], line, "id1")?, line)?;
        let to = key_of(parse_num(f[1], line, "id2")?, line)?;
        let kind = EdgeKind::parse(f[2]).ok_or_else(|| perr(line, format!("unknown kind `{}`", f[2])))?;
        let category = EdgeCategory::parse(f[3]).ok_or_else(|| perr(line, format!("unknown category `{}`", f[3])))?;
        let w: f64 = parse_num(f[4], line, "gnc_weight")?;
        if !(0.0..=1.0).contains(&w) {
            return Err(perr(line, format!("gnc_weight {w} outside [0, 1]")));
        }
        let Some(e) = graph.edges_mut().get_mut(count) else {
            return Err(perr(line, format!("sidecar has more rows than the graph's {n_edges} edges")));
        };
        if e.from != from || e.to != to {
            return Err(perr(line, format!("row {from} -> {to} does not match edge {} -> {}", e.from, e.to)));
        }
        e.kind = kind;
        e.category = category;
        e.gnc_weight = w;
        count += 1;
    }
    if count != n_edges {
        return Err(perr(0, format!("sidecar has {count} rows for {n_edges} edges")));
    }
    Ok(())
}

/// Sidecar path convention: `graph.g2o` pairs with `graph.edges.csv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("edges.csv")
}

/// Reads a g2o file and, when present, its sidecar.
pub fn read_g2o(path: &Path) -> Result<ParsedGraph, G2oError> {
    let mut parsed = parse_g2o(&std::fs::read_to_string(path)?)?;
    let side = sidecar_path(path);
    if side.exists() {
        parse_sidecar(&std::fs::read_to_string(side)?, &mut parsed.graph)?;
    }
    Ok(parsed)
}

/// Writes a g2o file and its sidecar next to it.
pub fn write_g2o(graph: &PoseGraph, path: &Path) -> Result<(), G2oError> {
    std::fs::write(path, format_g2o(graph)?)?;
    std::fs::write(sidecar_path(path), format_sidecar(graph)?)?;
    Ok(())
}
