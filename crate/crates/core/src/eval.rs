//! Trajectory error, loop-closure labelling, the success verdict and the
//! table files of the experiment matrix.

use crate::geom::Pose3;
use crate::graphcore::{Edge, EdgeCategory, NodeKey};
use crate::io::fmt_sig;
use crate::simworld::Trajectory;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no estimated pose of robot {0} matches a ground-truth stamp")]
    NoOverlap(u32),
    #[error("no ground truth for node {0}")]
    MissingGroundTruth(NodeKey),
    #[error("experiment matrix is missing cells: {}", .0.join(", "))]
    IncompleteMatrix(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    None,
    /// Map the first matched estimate onto its ground-truth pose.
    FirstPose,
    /// Apply a fixed transform to every estimate.
    Given(Pose3),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub per_pose_errors: Vec<f64>,
    pub max: f64,
    pub mean: f64,
    pub sum: f64,
    pub path_length: f64,
    pub ratio_max_over_length: f64,
}

/// Index of the ground-truth stamp nearest to `t`; ties go to the earlier.
fn nearest_stamp(stamps: &[f64], t: f64) -> usize {
    let k = stamps.partition_point(|&s| s < t);
    match k {
        0 => 0,
        k if k == stamps.len() => k - 1,
        k => {
            if t - stamps[k - 1] <= stamps[k] - t {
                k - 1
            } else {
                k
            }
        }
    }
}

/// Association tolerance: half the median ground-truth sample period.
fn stamp_tolerance(stamps: &[f64]) -> f64 {
    if stamps.len() < 2 {
        return 1e-9;
    }
    let mut d: Vec<f64> = stamps.windows(2).map(|w| w[1] - w[0]).collect();
    d.sort_by(f64::total_cmp);
    0.5 * d[d.len() / 2]
}

/// Per-pose translation error of `estimated` against `ground_truth`, with
/// estimates associated to the nearest ground-truth stamp.
pub fn ate(estimated: &Trajectory, ground_truth: &Trajectory, alignment: Alignment) -> Result<AteReport, EvalError> {
    let tol = stamp_tolerance(&ground_truth.stamps);
    let pairs: Vec<(Pose3, Pose3)> = estimated
        .stamps
        .iter()
        .zip(&estimated.poses)
        .filter_map(|(&t, p)| {
            if ground_truth.is_empty() {
                return None;
            }
            let k = nearest_stamp(&ground_truth.stamps, t);
            ((ground_truth.stamps[k] - t).abs() <= tol).then(|| (*p, ground_truth.poses[k]))
        })
        .collect();
    let Some(&(e0, g0)) = pairs.first() else {
        return Err(EvalError::NoOverlap(estimated.robot));
    };
    let align = match alignment {
        Alignment::None => Pose3::identity(),
        Alignment::FirstPose => g0.compose(&e0.inverse()),
        Alignment::Given(t) => t,
    };
    let errors: Vec<f64> = pairs.iter().map(|(e, g)| (align.compose(e).translation() - g.translation()).norm()).collect();
    let sum: f64 = errors.iter().sum();
    let max = errors.iter().copied().fold(0.0, f64::max);
    let path_length = ground_truth.path_length();
    Ok(AteReport {
        mean: sum / errors.len() as f64,
        max,
        sum,
        path_length,
        ratio_max_over_length: if path_length > 0.0 { max / path_length } else { f64::INFINITY },
        per_pose_errors: errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    /// Ground-truth separation beyond which a match is a wrong place.
    pub place_radius: f64,
    pub max_translation_error: f64,
    pub max_rotation_error_deg: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { place_radius: 5.0, max_translation_error: 1.0, max_rotation_error_deg: 15.0 }
    }
}

/// Labels an inter-robot loop against ground-truth keyframe poses.
pub fn classify_loop(edge: &Edge, gt: &BTreeMap<NodeKey, Pose3>, cfg: &ClassifyConfig) -> Result<EdgeCategory, EvalError> {
    let gi = gt.get(&edge.from).ok_or(EvalError::MissingGroundTruth(edge.from))?;
    let gj = gt.get(&edge.to).ok_or(EvalError::MissingGroundTruth(edge.to))?;
    if (gi.translation() - gj.translation()).norm() > cfg.place_radius {
        return Ok(EdgeCategory::WrongPr);
    }
    let err = gi.between(gj).between(&edge.measurement);
    if err.translation_norm() > cfg.max_translation_error || err.rotation_angle() > cfg.max_rotation_error_deg.to_radians() {
        return Ok(EdgeCategory::WrongPcr);
    }
    Ok(EdgeCategory::Correct)
}

/// True iff every robot's max ATE is below 1 % of its path length. An
/// empty set succeeds vacuously.
pub fn success(reports: &[AteReport]) -> bool {
    if reports.is_empty() {
        log::warn!("success verdict over an empty robot set is vacuously true");
    }
    reports.iter().all(|r| r.ratio_max_over_length < 0.01)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub correct: usize,
    pub wrong_pr: usize,
    pub wrong_pcr: usize,
    pub unknown: usize,
}

impl CategoryCounts {
    pub fn from_edges<'a>(edges: impl IntoIterator<Item = &'a Edge>) -> Self {
        let mut c = Self::default();
        for e in edges {
            c.add(e.category);
        }
        c
    }

    pub fn add(&mut self, cat: EdgeCategory) {
        match cat {
            EdgeCategory::Correct => self.correct += 1,
            EdgeCategory::WrongPr => self.wrong_pr += 1,
            EdgeCategory::WrongPcr => self.wrong_pcr += 1,
            EdgeCategory::Unknown => self.unknown += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.correct + self.wrong_pr + self.wrong_pcr + self.unknown
    }

    pub fn outliers(&self) -> usize {
        self.wrong_pr + self.wrong_pcr
    }

    /// `100 · count / total`, zero for an empty set.
    pub fn percent(&self, count: usize) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            100.0 * count as f64 / self.total() as f64
        }
    }

    pub fn outlier_percent(&self) -> f64 {
        self.percent(self.outliers())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    All,
    Tunnel,
}

impl FilterMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterMode::All => "all",
            FilterMode::Tunnel => "tunnel",
        }
    }
}

/// Identifies one cell of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub robot_a: u32,
    pub robot_b: u32,
    pub filter: FilterMode,
    pub pcm: bool,
}

impl CellId {
    pub fn name(&self) -> String {
        format!("pair_{}_{}_{}_{}", self.robot_a, self.robot_b, self.filter.as_str(), if self.pcm { "pcm" } else { "nopcm" })
    }
}

/// Estimated and ground-truth keyframe positions of one robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub robot: u32,
    pub stamp: f64,
    pub estimate: [f64; 3],
    pub ground_truth: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub pre_pcm: CategoryCounts,
    pub post_pcm: CategoryCounts,
    pub success: bool,
    /// Max ATE per robot.
    pub max_ate: BTreeMap<u32, f64>,
    pub track: Vec<TrackPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOutcome {
    Completed(CellMetrics),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub id: CellId,
    pub outcome: CellOutcome,
}

fn pct_cell(c: &CategoryCounts, n: usize) -> String {
    if n == 0 {
        "-".into()
    } else {
        fmt_sig(c.percent(n), 6)
    }
}

const REGIMES: [(FilterMode, bool); 4] = [(FilterMode::All, false), (FilterMode::All, true), (FilterMode::Tunnel, false), (FilterMode::Tunnel, true)];

fn regime_name(f: FilterMode, pcm: bool) -> String {
    format!("{}_{}", f.as_str(), if pcm { "pcm" } else { "nopcm" })
}

/// All unordered robot pairs, lower id first.
pub fn robot_pairs(robots: &[u32]) -> Vec<(u32, u32)> {
    let mut r = robots.to_vec();
    r.sort_unstable();
    r.dedup();
    let mut out = Vec::new();
    for (i, &a) in r.iter().enumerate() {
        for &b in &r[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// Writes the four table CSVs and one trajectory CSV per pair into `dir`.
/// Fails with `IncompleteMatrix` before writing anything if a cell is
/// missing.
pub fn emit_tables(cells: &[CellSummary], robots: &[u32], dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let by_id: BTreeMap<CellId, &CellOutcome> = cells.iter().map(|c| (c.id, &c.outcome)).collect();
    let pairs = robot_pairs(robots);
    let mut missing = Vec::new();
    for &(a, b) in &pairs {
        for (filter, pcm) in REGIMES {
            let id = CellId { robot_a: a, robot_b: b, filter, pcm };
            if !by_id.contains_key(&id) {
                missing.push(id.name());
            }
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::IncompleteMatrix(missing));
    }
    let get = |a, b, filter, pcm| match by_id[&CellId { robot_a: a, robot_b: b, filter, pcm }] {
        CellOutcome::Completed(m) => Some(m),
        CellOutcome::Failed(_) => None,
    };
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut write = |name: &str, body: String| -> Result<(), EvalError> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };

    // outlier percentages before PCM (from the PCM-off cells) and after it
    for (name, pcm) in [("outliers_pre_pcm.csv", false), ("outliers_post_pcm.csv", true)] {
        let mut s = String::from("pair,all_loops,all_wrong_pr,all_wrong_pcr,tunnel_loops,tunnel_wrong_pr,tunnel_wrong_pcr\n");
        for &(a, b) in &pairs {
            write!(s, "\"({a},{b})\"").unwrap();
            for filter in [FilterMode::All, FilterMode::Tunnel] {
                match get(a, b, filter, pcm) {
                    Some(m) => {
                        let c = if pcm { &m.post_pcm } else { &m.pre_pcm };
                        write!(s, ",{},{},{}", c.total(), pct_cell(c, c.wrong_pr), pct_cell(c, c.wrong_pcr)).unwrap();
                    }
                    None => s.push_str(",failed,failed,failed"),
                }
            }
            s.push('\n');
        }
        write(name, s)?;
    }

    let mut s = String::from("pair");
    for (f, p) in REGIMES {
        write!(s, ",{}", regime_name(f, p)).unwrap();
    }
    s.push('\n');
    let mut wins = [0usize; 4];
    for &(a, b) in &pairs {
        write!(s, "\"({a},{b})\"").unwrap();
        for (k, (f, p)) in REGIMES.into_iter().enumerate() {
            match get(a, b, f, p) {
                Some(m) => {
                    wins[k] += m.success as usize;
                    s.push_str(if m.success { ",yes" } else { ",no" });
                }
                None => s.push_str(",failed"),
            }
        }
        s.push('\n');
    }
    s.push_str("success_rate");
    for w in wins {
        let rate = if pairs.is_empty() { 0.0 } else { w as f64 / pairs.len() as f64 };
        write!(s, ",{}", fmt_sig(rate, 6)).unwrap();
    }
    s.push('\n');
    write("success_matrix.csv", s)?;

    let mut s = String::from("pair");
    for (f, p) in REGIMES {
        let r = regime_name(f, p);
        write!(s, ",{r}_ate_a,{r}_ate_b").unwrap();
    }
    s.push('\n');
    for &(a, b) in &pairs {
        write!(s, "\"({a},{b})\"").unwrap();
        for (f, p) in REGIMES {
            match get(a, b, f, p) {
                Some(m) => {
                    for r in [a, b] {
                        match m.max_ate.get(&r) {
                            Some(v) => write!(s, ",{}", fmt_sig(*v, 6)).unwrap(),
                            None => s.push_str(",-"),
                        }
                    }
                }
                None => s.push_str(",failed,failed"),
            }
        }
        s.push('\n');
    }
    write("max_ate.csv", s)?;

    // merged trajectories of the tunnel-filtered PCM run
    for &(a, b) in &pairs {
        let mut s = String::from("robot,stamp,x,y,z,gt_x,gt_y,gt_z\n");
        if let Some(m) = get(a, b, FilterMode::Tunnel, true) {
            for t in &m.track {
                write!(s, "{},{}", t.robot, fmt_sig(t.stamp, 6)).unwrap();
                for v in t.estimate.iter().chain(&t.ground_truth) {
                    write!(s, ",{}", fmt_sig(*v, 6)).unwrap();
                }
                s.push('\n');
            }
        }
        write(&format!("trajectory_{a}_{b}.csv"), s)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::graphcore::default_odometry_information;

    fn line(n: usize) -> Trajectory {
        let stamps: Vec<f64> = (0..n).map(|k| k as f64 * 0.1).collect();
        let poses = (0..n).map(|k| Pose3::from_yaw(0.0, Vec3::new(k as f64, 0.0, 0.0))).collect();
        Trajectory::new(0, stamps, poses)
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = line(20);
        let r = ate(&gt, &gt, Alignment::None).unwrap();
        assert_eq!(r.max, 0.0);
        assert_eq!(r.per_pose_errors.len(), 20);
        assert_eq!(r.path_length, 19.0);
    }

    #[test]
    fn first_pose_alignment_removes_rigid_offset() {
        let gt = line(20);
        let shift = Pose3::from_yaw(0.7, Vec3::new(2.0, 0.0, 0.0));
        let mut est = gt.clone();
        est.poses = gt.poses.iter().map(|p| shift.compose(p)).collect();
        let r = ate(&est, &gt, Alignment::FirstPose).unwrap();
        assert!(r.max < 1e-12);
        assert!(ate(&est, &gt, Alignment::None).unwrap().max > 1.0);
    }

    #[test]
    fn last_pose_offset() {
        let gt = line(20);
        let mut est = gt.clone();
        let last = est.poses[19];
        est.poses[19] = Pose3::new(*last.rotation(), last.translation() + Vec3::new(0.0, 1.0, 0.0));
        let r = ate(&est, &gt, Alignment::FirstPose).unwrap();
        assert!((r.max - 1.0).abs() < 1e-12 && (r.sum - 1.0).abs() < 1e-12);
        assert!(r.max >= r.mean && r.mean >= 0.0);
    }

    #[test]
    fn association_tolerance() {
        let gt = line(10);
        let mut est = Trajectory::new(0, vec![0.04, 0.5, 100.0], vec![Pose3::identity(); 3]);
        let r = ate(&est, &gt, Alignment::None).unwrap();
        assert_eq!(r.per_pose_errors.len(), 2);
        est.stamps = vec![50.0, 60.0, 70.0];
        assert!(matches!(ate(&est, &gt, Alignment::None), Err(EvalError::NoOverlap(0))));
    }

    fn edge(m: Pose3) -> Edge {
        Edge::inter_robot(NodeKey::new(0, 0), NodeKey::new(1, 0), m, default_odometry_information())
    }

    #[test]
    fn loop_labels() {
        let cfg = ClassifyConfig::default();
        let mut gt = BTreeMap::new();
        gt.insert(NodeKey::new(0, 0), Pose3::from_yaw(0.3, Vec3::new(1.0, 2.0, 0.0)));
        gt.insert(NodeKey::new(1, 0), Pose3::from_yaw(-0.2, Vec3::new(2.0, 4.0, 0.0)));
        let truth = gt[&NodeKey::new(0, 0)].between(&gt[&NodeKey::new(1, 0)]);
        assert_eq!(classify_loop(&edge(truth), &gt, &cfg).unwrap(), EdgeCategory::Correct);
        let off = truth.compose(&Pose3::from_translation(Vec3::new(1.2, 0.0, 0.0)));
        assert_eq!(classify_loop(&edge(off), &gt, &cfg).unwrap(), EdgeCategory::WrongPcr);
        let turned = truth.compose(&Pose3::from_yaw(16f64.to_radians(), Vec3::zeros()));
        assert_eq!(classify_loop(&edge(turned), &gt, &cfg).unwrap(), EdgeCategory::WrongPcr);
        gt.insert(NodeKey::new(1, 0), Pose3::from_translation(Vec3::new(41.0, 2.0, 0.0)));
        assert_eq!(classify_loop(&edge(truth), &gt, &cfg).unwrap(), EdgeCategory::WrongPr);
        gt.remove(&NodeKey::new(1, 0));
        assert!(matches!(classify_loop(&edge(truth), &gt, &cfg), Err(EvalError::MissingGroundTruth(_))));
    }

    fn report(max: f64, len: f64) -> AteReport {
        AteReport { per_pose_errors: vec![max], max, mean: max, sum: max, path_length: len, ratio_max_over_length: max / len }
    }

    #[test]
    fn success_verdicts() {
        assert!(success(&[report(4.5, 453.31)]));
        assert!(!success(&[report(4.5, 453.31), report(88.106, 453.31)]));
        assert!(success(&[]));
    }

    #[test]
    fn percentages_sum_to_hundred() {
        let c = CategoryCounts { correct: 7, wrong_pr: 2, wrong_pcr: 3, unknown: 0 };
        let s = c.percent(c.correct) + c.percent(c.wrong_pr) + c.percent(c.wrong_pcr);
        assert!((s - 100.0).abs() < 1e-9);
        assert_eq!(pct_cell(&c, 0), "-");
        assert_eq!(pct_cell(&c, 2), "16.6667");
    }

    fn full_matrix(robots: &[u32]) -> Vec<CellSummary> {
        let mut cells = Vec::new();
        for (a, b) in robot_pairs(robots) {
            for (filter, pcm) in REGIMES {
                let metrics = CellMetrics {
                    pre_pcm: CategoryCounts { correct: 5, wrong_pr: 1, wrong_pcr: 0, unknown: 0 },
                    post_pcm: CategoryCounts { correct: 5, ..Default::default() },
                    success: pcm,
                    max_ate: [(a, 0.5), (b, 1.5)].into_iter().collect(),
                    track: vec![TrackPoint { robot: a, stamp: 0.0, estimate: [0.0; 3], ground_truth: [0.0; 3] }],
                };
                cells.push(CellSummary { id: CellId { robot_a: a, robot_b: b, filter, pcm }, outcome: CellOutcome::Completed(metrics) });
            }
        }
        cells
    }

    #[test]
    fn table_files() {
        let dir = tempfile::tempdir().unwrap();
        let cells = full_matrix(&[0, 1, 2, 3]);
        assert_eq!(cells.len(), 24);
        let files = emit_tables(&cells, &[0, 1, 2, 3], dir.path()).unwrap();
        assert_eq!(files.len(), 4 + 6);
        let t2 = std::fs::read_to_string(dir.path().join("outliers_pre_pcm.csv")).unwrap();
        assert_eq!(t2.lines().nth(1).unwrap(), "\"(0,1)\",6,16.6667,-,6,16.6667,-");
        let t4 = std::fs::read_to_string(dir.path().join("success_matrix.csv")).unwrap();
        assert_eq!(t4.lines().last().unwrap(), "success_rate,0,1,0,1");

        let mut partial = cells.clone();
        let gone = partial.remove(3).id;
        match emit_tables(&partial, &[0, 1, 2, 3], dir.path()) {
            Err(EvalError::IncompleteMatrix(m)) => assert_eq!(m, vec![gone.name()]),
            other => panic!("{other:?}"),
        }
    }
}
