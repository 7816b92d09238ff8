//! Parser harnesses shared by the fuzz targets and the corpus replay test.
//!
//! Each harness takes arbitrary bytes, must never panic on rejected input,
//! and checks that accepted input survives a write/read round trip where a
//! writer exists.

use crate::config::ExperimentConfig;
use crate::pipeline::Manifest;
use tunnelslam::eval::CellSummary;
use tunnelslam::graphcore::{format_g2o, format_sidecar, parse_g2o, parse_sidecar, SIDECAR_HEADER};
use tunnelslam::io::{parse_keyframe_index, parse_pose_csv, read_ply, trajectory_rows, write_ply, write_pose_csv};
use tunnelslam::merge::{MergeMessage, MergeReport};

/// Harness names, matching the fuzz target and corpus directory names.
pub const TARGETS: [&str; 8] = ["g2o", "sidecar", "ply", "pose_csv", "keyframe_index", "config_toml", "report_json", "transcript_json"];

/// Runs the named harness; returns whether the input was accepted.
pub fn exercise(target: &str, data: &[u8]) -> bool {
    match target {
        "g2o" => g2o(data),
        "sidecar" => sidecar(data),
        "ply" => ply(data),
        "pose_csv" => pose_csv(data),
        "keyframe_index" => keyframe_index(data),
        "config_toml" => config_toml(data),
        "report_json" => report_json(data),
        "transcript_json" => transcript_json(data),
        other => panic!("unknown harness `{other}`"),
    }
}

pub fn g2o(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let Ok(parsed) = parse_g2o(text) else { return false };
    let g = &parsed.graph;
    let back = parse_g2o(&format_g2o(g).expect("format accepted graph")).expect("reparse");
    assert_eq!(back.graph.nodes().len(), g.nodes().len());
    assert_eq!(back.graph.edges().len(), g.edges().len());
    true
}

/// Input is a g2o graph followed by a sidecar starting at its header line.
pub fn sidecar(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let Some(at) = text.find(SIDECAR_HEADER) else { return false };
    let Ok(mut parsed) = parse_g2o(&text[..at]) else { return false };
    if parse_sidecar(&text[at..], &mut parsed.graph).is_err() {
        return false;
    }
    let mut again = parse_g2o(&text[..at]).expect("parsed once");
    parse_sidecar(&format_sidecar(&parsed.graph).expect("format"), &mut again.graph).expect("reparse sidecar");
    for (a, b) in parsed.graph.edges().iter().zip(again.graph.edges()) {
        assert_eq!(a.category, b.category);
    }
    true
}

pub fn ply(data: &[u8]) -> bool {
    let Ok(cloud) = read_ply(data) else { return false };
    let mut buf = Vec::new();
    write_ply(&cloud, &mut buf).expect("write");
    assert_eq!(read_ply(&buf).expect("reparse").len(), cloud.len());
    true
}

pub fn pose_csv(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let Ok(trajs) = parse_pose_csv(text) else { return false };
    let rows: Vec<_> = trajs.iter().flat_map(trajectory_rows).collect();
    let mut buf = Vec::new();
    write_pose_csv(&rows, &mut buf).expect("write");
    let back = parse_pose_csv(std::str::from_utf8(&buf).unwrap()).expect("reparse");
    assert_eq!(back.iter().map(|t| t.len()).sum::<usize>(), rows.len());
    true
}

pub fn keyframe_index(data: &[u8]) -> bool {
    std::str::from_utf8(data).is_ok_and(|t| parse_keyframe_index(t).is_ok())
}

pub fn config_toml(data: &[u8]) -> bool {
    std::str::from_utf8(data).is_ok_and(|t| ExperimentConfig::from_toml(t).is_ok())
}

/// Cell report, cell summary or dataset manifest.
pub fn report_json(data: &[u8]) -> bool {
    fn check<T: serde::Serialize + serde::de::DeserializeOwned>(data: &[u8]) -> bool {
        let Ok(v) = serde_json::from_slice::<T>(data) else { return false };
        serde_json::to_vec(&v).expect("serialize");
        true
    }
    check::<MergeReport>(data) | check::<CellSummary>(data) | check::<Manifest>(data)
}

/// A whole transcript or a single message.
pub fn transcript_json(data: &[u8]) -> bool {
    if let Ok(v) = serde_json::from_slice::<Vec<MergeMessage>>(data) {
        for m in &v {
            m.kind();
        }
        serde_json::to_vec(&v).expect("serialize");
        return true;
    }
    serde_json::from_slice::<MergeMessage>(data).is_ok()
}
