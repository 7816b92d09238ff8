//! The four stages behind the subcommands and their on-disk layout:
//!
//! ```text
//! <out>/dataset/manifest.json
//! <out>/dataset/robot_<id>/{ground_truth.csv, wheel_odometry.csv, scans/<k>.ply}
//! <out>/odometry/{robot_<id>_<mode>.csv, ate_summary.csv, ate_errors.csv}
//! <out>/keyframes/robot_<id>/{index.csv, <index>.ply}
//! <out>/matrix/<cell>/{initial,post_pcm,optimized}.g2o (+ .edges.csv), report.json, summary.json
//! <out>/tables/*.csv
//! ```

use crate::config::ExperimentConfig;
use crate::CliError;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use tunnelslam::eval::{
    ate, classify_loop, emit_tables, robot_pairs, success, Alignment, AteReport, CellId, CellMetrics, CellOutcome, CellSummary,
    FilterMode, TrackPoint,
};
use tunnelslam::frontend::{apply_tunnel_filter, run_odometry, select_keyframes, KeyFrame, OdometryMode};
use tunnelslam::geom::{PointCloud, Pose3};
use tunnelslam::graphcore::{write_g2o, Edge, EdgeCategory, NodeKey, PoseGraph};
use tunnelslam::io::{fmt_sig, parse_pose_csv, read_ply, trajectory_rows, write_keyframe_index, write_ply, write_pose_csv};
use tunnelslam::merge::{run_merge_session, MergeOutcome, Verifier};
use tunnelslam::placerec::attach_descriptors;
use tunnelslam::simworld::{build_world, degrade_odometry, raycast_scan, script_trajectories, Trajectory, TrajectoryConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub robots: Vec<u32>,
    pub scans: BTreeMap<u32, usize>,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, bytes).map_err(CliError::io(path))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn pose_csv(traj: &Trajectory) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_pose_csv(&trajectory_rows(traj), &mut buf).map_err(CliError::data)?;
    Ok(buf)
}

fn robot_dir(out: &Path, robot: u32) -> PathBuf {
    out.join("dataset").join(format!("robot_{robot}"))
}

fn scan_path(out: &Path, robot: u32, k: usize) -> PathBuf {
    robot_dir(out, robot).join("scans").join(format!("{k:06}.ply"))
}

/// Seed of the scan of `robot` at sample `k`.
fn scan_seed(seed: u64, robot: u32, k: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((robot as u64) << 40) ^ k as u64
}

/// Ground truth, scans and wheel odometry for every robot.
pub fn simulate(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Manifest, CliError> {
    let world = build_world(&cfg.world).map_err(|e| CliError::Config(format!("world: {e}")))?;
    let gts = script_trajectories(&world, &TrajectoryConfig { seed, robots: cfg.robots.clone() })
        .map_err(|e| CliError::Config(format!("robots: {e}")))?;
    let dataset = out.join("dataset");
    if dataset.exists() {
        fs::remove_dir_all(&dataset).map_err(CliError::io(&dataset))?;
    }
    let mut scans = BTreeMap::new();
    for gt in &gts {
        info!("robot {}: {} poses, {:.1} m", gt.robot, gt.len(), gt.path_length());
        let dir = robot_dir(out, gt.robot);
        write_file(&dir.join("ground_truth.csv"), pose_csv(gt)?)?;
        let wheel = degrade_odometry(gt, &cfg.wheel, seed);
        let integrated = Trajectory::new(gt.robot, wheel.stamps.clone(), wheel.integrate(Pose3::identity()));
        write_file(&dir.join("wheel_odometry.csv"), pose_csv(&integrated)?)?;
        fs::create_dir_all(dir.join("scans")).map_err(CliError::io(&dir))?;
        (0..gt.len()).into_par_iter().try_for_each(|k| -> Result<(), CliError> {
            let cloud = raycast_scan(&world, &gt.poses[k], &cfg.lidar, scan_seed(seed, gt.robot, k)).map_err(CliError::data)?;
            let path = scan_path(out, gt.robot, k);
            let f = fs::File::create(&path).map_err(CliError::io(&path))?;
            write_ply(&cloud, BufWriter::new(f)).map_err(CliError::data)
        })?;
        scans.insert(gt.robot, gt.len());
    }
    let manifest = Manifest { seed, robots: cfg.robot_ids(), scans };
    write_file(&dataset.join("manifest.json"), json(&manifest))?;
    Ok(manifest)
}

/// One robot's recorded data.
pub struct RobotData {
    pub robot: u32,
    pub ground_truth: Trajectory,
    /// Wheel increments between consecutive scans.
    pub wheel: Vec<Pose3>,
    pub scans: Vec<PointCloud>,
}

fn read_trajectory(path: &Path, robot: u32) -> Result<Trajectory, CliError> {
    let mut t = parse_pose_csv(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    match (t.len(), t.pop()) {
        (1, Some(t)) if t.robot == robot => Ok(t),
        _ => Err(CliError::Data(format!("{}: expected one trajectory of robot {robot}", path.display()))),
    }
}

pub fn read_manifest(out: &Path) -> Result<Manifest, CliError> {
    let path = out.join("dataset").join("manifest.json");
    if !path.exists() {
        return Err(CliError::Data(format!("no dataset at {}; run `simulate` first", out.display())));
    }
    serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn load_robot(out: &Path, robot: u32) -> Result<RobotData, CliError> {
    let dir = robot_dir(out, robot);
    let ground_truth = read_trajectory(&dir.join("ground_truth.csv"), robot)?;
    let wheel_poses = read_trajectory(&dir.join("wheel_odometry.csv"), robot)?;
    if wheel_poses.stamps != ground_truth.stamps {
        return Err(CliError::Data(format!("robot {robot}: wheel and ground-truth stamps differ")));
    }
    let wheel = wheel_poses.poses.windows(2).map(|w| w[0].between(&w[1])).collect();
    let scans = (0..ground_truth.len())
        .into_par_iter()
        .map(|k| {
            let path = scan_path(out, robot, k);
            let bytes = fs::read(&path).map_err(CliError::io(&path))?;
            read_ply(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RobotData { robot, ground_truth, wheel, scans })
}

fn mode_name(mode: OdometryMode) -> &'static str {
    match mode {
        OdometryMode::Unconstrained => "unconstrained",
        OdometryMode::Kinematic => "kinematic",
    }
}

fn odometry_path(out: &Path, robot: u32, mode: OdometryMode) -> PathBuf {
    out.join("odometry").join(format!("robot_{robot}_{}.csv", mode_name(mode)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryRow {
    pub robot: u32,
    pub mode: OdometryMode,
    pub ate: AteReport,
}

/// Runs both odometry modes for every robot and scores them against
/// ground truth with first-pose alignment.
pub fn odometry(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<OdometryRow>, CliError> {
    let manifest = read_manifest(out)?;
    let mut rows = Vec::new();
    for &robot in &manifest.robots {
        let data = load_robot(out, robot)?;
        for mode in [OdometryMode::Unconstrained, OdometryMode::Kinematic] {
            let ocfg = tunnelslam::frontend::OdometryConfig { mode, ..cfg.frontend.odometry.clone() };
            let est = run_odometry(robot, &data.ground_truth.stamps, &data.scans, Some(&data.wheel), &ocfg).map_err(CliError::data)?;
            write_file(&odometry_path(out, robot, mode), pose_csv(&est)?)?;
            let report = ate(&est, &data.ground_truth, Alignment::FirstPose).map_err(CliError::data)?;
            info!("robot {robot} {}: max ATE {:.3} m ({:.3}% of path)", mode_name(mode), report.max, 100.0 * report.ratio_max_over_length);
            rows.push(OdometryRow { robot, mode, ate: report });
        }
    }
    let mut summary = String::from("robot,mode,max,mean,sum,path_length,ratio_max_over_length\n");
    let mut errors = String::from("robot,mode,index,error\n");
    for r in &rows {
        let a = &r.ate;
        let m = mode_name(r.mode);
        writeln!(
            summary,
            "{},{m},{},{},{},{},{}",
            r.robot,
            fmt_sig(a.max, 6),
            fmt_sig(a.mean, 6),
            fmt_sig(a.sum, 6),
            fmt_sig(a.path_length, 6),
            fmt_sig(a.ratio_max_over_length, 6)
        )
        .unwrap();
        for (k, e) in a.per_pose_errors.iter().enumerate() {
            writeln!(errors, "{},{m},{k},{}", r.robot, fmt_sig(*e, 6)).unwrap();
        }
    }
    write_file(&out.join("odometry").join("ate_summary.csv"), summary)?;
    write_file(&out.join("odometry").join("ate_errors.csv"), errors)?;
    Ok(rows)
}

/// Keyframes of one robot with descriptors and tunnel-filter flags, plus
/// the ground-truth pose of each.
pub struct RobotKeyframes {
    pub keyframes: Vec<KeyFrame>,
    pub ground_truth: Trajectory,
    pub truth: BTreeMap<NodeKey, Pose3>,
}

pub fn build_keyframes(cfg: &ExperimentConfig, out: &Path, robot: u32) -> Result<RobotKeyframes, CliError> {
    let data = load_robot(out, robot)?;
    let mode = cfg.frontend.odometry.mode;
    let path = odometry_path(out, robot, mode);
    if !path.exists() {
        return Err(CliError::Data(format!("missing {}; run `odometry` first", path.display())));
    }
    let est = read_trajectory(&path, robot)?;
    if est.stamps != data.ground_truth.stamps {
        return Err(CliError::Data(format!("{}: stamps do not match the dataset", path.display())));
    }
    let mut keyframes = select_keyframes(&est, &data.scans, cfg.frontend.keyframe_distance, cfg.frontend.keyframe_voxel);
    attach_descriptors(&mut keyframes, &cfg.placerec.scan_context).map_err(CliError::data)?;
    apply_tunnel_filter(&mut keyframes, cfg.frontend.tunnel_width_threshold);
    let mut truth = BTreeMap::new();
    for kf in &keyframes {
        let k = data.ground_truth.stamps.partition_point(|&s| s < kf.stamp);
        truth.insert(kf.key(), data.ground_truth.poses[k]);
    }
    Ok(RobotKeyframes { keyframes, ground_truth: data.ground_truth, truth })
}

fn dump_keyframes(out: &Path, kfs: &RobotKeyframes, robot: u32) -> Result<(), CliError> {
    let dir = out.join("keyframes").join(format!("robot_{robot}"));
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(CliError::io(&dir))?;
    }
    let mut index = Vec::new();
    write_keyframe_index(&kfs.keyframes, &mut index).map_err(CliError::data)?;
    write_file(&dir.join("index.csv"), index)?;
    for kf in &kfs.keyframes {
        let mut buf = Vec::new();
        write_ply(&kf.cloud, &mut buf).map_err(CliError::data)?;
        write_file(&dir.join(format!("{:06}.ply", kf.index)), buf)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MatrixOptions {
    pub jobs: usize,
    pub filters: Vec<FilterMode>,
    pub pcm: Vec<bool>,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        Self { jobs: 1, filters: vec![FilterMode::All, FilterMode::Tunnel], pcm: vec![false, true] }
    }
}

/// Estimated pose of every keyframe of `robot` after the merge. Keyframes
/// left out of the graph follow the nearest graph node of the same robot
/// (the preceding one when it exists) through odometry.
fn merged_poses(graph: &PoseGraph, kfs: &[KeyFrame]) -> Vec<Pose3> {
    let in_graph: Vec<usize> = kfs.iter().enumerate().filter(|(_, k)| graph.node(&k.key()).is_some()).map(|(i, _)| i).collect();
    kfs.iter()
        .enumerate()
        .map(|(i, kf)| {
            let n = match in_graph.partition_point(|&g| g <= i) {
                0 => in_graph[0],
                p => in_graph[p - 1],
            };
            let base = graph.node(&kfs[n].key()).expect("graph node");
            base.compose(&kfs[n].pose.between(&kf.pose))
        })
        .collect()
}

/// ATE of both robots in the frame of the lower robot's first graph node,
/// aligned to that node's ground truth. The peer is only scored when at
/// least one loop survived, since otherwise its frame is unknown.
fn score_cell(outcome: &MergeOutcome, robots: [&RobotKeyframes; 2]) -> Result<(BTreeMap<u32, AteReport>, Vec<TrackPoint>), CliError> {
    let g = &outcome.optimized;
    let ra = robots[0].keyframes[0].robot;
    let anchor = g.nodes().keys().find(|k| k.robot == ra).copied().ok_or_else(|| CliError::Data(format!("robot {ra} has no graph node")))?;
    let align = robots[0].truth[&anchor].compose(&g.nodes()[&anchor].inverse());
    let merged = outcome.report.relative_pose.is_some();
    let mut reports = BTreeMap::new();
    let mut track = Vec::new();
    for (slot, rk) in robots.iter().enumerate() {
        if slot == 1 && !merged {
            continue;
        }
        let poses = merged_poses(g, &rk.keyframes);
        let robot = rk.keyframes[0].robot;
        let stamps: Vec<f64> = rk.keyframes.iter().map(|k| k.stamp).collect();
        let est = Trajectory::new(robot, stamps, poses);
        let report = ate(&est, &rk.ground_truth, Alignment::Given(align)).map_err(CliError::data)?;
        for (kf, p) in rk.keyframes.iter().zip(&est.poses) {
            let e = align.compose(p);
            let t = rk.truth[&kf.key()];
            let (e, t) = (e.translation(), t.translation());
            track.push(TrackPoint { robot, stamp: kf.stamp, estimate: [e.x, e.y, e.z], ground_truth: [t.x, t.y, t.z] });
        }
        reports.insert(robot, report);
    }
    Ok((reports, track))
}

fn write_graph(dir: &Path, name: &str, g: &PoseGraph) -> Result<(), CliError> {
    write_g2o(g, &dir.join(format!("{name}.g2o"))).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn run_cell(
    cfg: &ExperimentConfig,
    id: CellId,
    robots: [&RobotKeyframes; 2],
    verifier: &Verifier,
    dir: &Path,
) -> Result<CellMetrics, CliError> {
    let mcfg = cfg.merge_config(id.filter == FilterMode::Tunnel, id.pcm);
    let mut truth = robots[0].truth.clone();
    truth.extend(robots[1].truth.iter().map(|(k, v)| (*k, *v)));
    let classify = cfg.eval.clone();
    let label = move |e: &Edge| classify_loop(e, &truth, &classify).unwrap_or(EdgeCategory::Unknown);
    let (outcome, _) = run_merge_session(robots[0].keyframes.clone(), robots[1].keyframes.clone(), &mcfg, verifier, Some(&label))
        .map_err(CliError::data)?;
    write_graph(dir, "initial", &outcome.initial)?;
    write_graph(dir, "post_pcm", &outcome.post_pcm)?;
    write_graph(dir, "optimized", &outcome.optimized)?;
    write_file(&dir.join("report.json"), json(&outcome.report))?;
    let (ates, track) = score_cell(&outcome, robots)?;
    let reports: Vec<AteReport> = ates.values().cloned().collect();
    let ok = outcome.report.relative_pose.is_some() && success(&reports);
    Ok(CellMetrics {
        pre_pcm: outcome.report.categories_pre_pcm.clone(),
        post_pcm: outcome.report.categories_post_pcm.clone(),
        success: ok,
        max_ate: ates.into_iter().map(|(r, a)| (r, a.max)).collect(),
        track,
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned()).unwrap_or_else(|| "panic".into())
}

/// Runs every requested cell, writing each into a private directory that
/// is renamed into place when complete. Failed cells are recorded and the
/// rest continue. Tables are written when every regime was requested.
pub fn matrix(cfg: &ExperimentConfig, out: &Path, opts: &MatrixOptions) -> Result<Vec<CellSummary>, CliError> {
    let manifest = read_manifest(out)?;
    let robots = manifest.robots.clone();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build().map_err(|e| CliError::Config(e.to_string()))?;
    let kfs: BTreeMap<u32, RobotKeyframes> = pool.install(|| {
        robots.par_iter().map(|&r| build_keyframes(cfg, out, r).map(|k| (r, k))).collect::<Result<BTreeMap<_, _>, _>>()
    })?;
    for (r, k) in &kfs {
        let informative = k.keyframes.iter().filter(|k| k.informative).count();
        info!("robot {r}: {} keyframes, {informative} informative", k.keyframes.len());
        dump_keyframes(out, k, *r)?;
    }
    let pairs = robot_pairs(&robots);
    let verifiers: BTreeMap<(u32, u32), Verifier> = pairs.iter().map(|&p| (p, Verifier::new(cfg.registration.clone()))).collect();
    let mut ids = Vec::new();
    for &(a, b) in &pairs {
        for &filter in &opts.filters {
            for &pcm in &opts.pcm {
                ids.push(CellId { robot_a: a, robot_b: b, filter, pcm });
            }
        }
    }
    let matrix_dir = out.join("matrix");
    fs::create_dir_all(&matrix_dir).map_err(CliError::io(&matrix_dir))?;
    let cells: Vec<CellSummary> = pool.install(|| {
        ids.par_iter()
            .map(|&id| -> Result<CellSummary, CliError> {
                let name = id.name();
                let tmp = matrix_dir.join(format!(".tmp-{name}"));
                if tmp.exists() {
                    fs::remove_dir_all(&tmp).map_err(CliError::io(&tmp))?;
                }
                fs::create_dir_all(&tmp).map_err(CliError::io(&tmp))?;
                let pair = [&kfs[&id.robot_a], &kfs[&id.robot_b]];
                let verifier = &verifiers[&(id.robot_a, id.robot_b)];
                let outcome = match catch_unwind(AssertUnwindSafe(|| run_cell(cfg, id, pair, verifier, &tmp))) {
                    Ok(Ok(m)) => CellOutcome::Completed(m),
                    Ok(Err(e)) => CellOutcome::Failed(e.to_string()),
                    Err(p) => CellOutcome::Failed(format!("panic: {}", panic_message(p))),
                };
                if let CellOutcome::Failed(msg) = &outcome {
                    warn!("{name} failed: {msg}");
                }
                let summary = CellSummary { id, outcome };
                write_file(&tmp.join("summary.json"), json(&summary))?;
                let dest = matrix_dir.join(&name);
                if dest.exists() {
                    fs::remove_dir_all(&dest).map_err(CliError::io(&dest))?;
                }
                fs::rename(&tmp, &dest).map_err(CliError::io(&dest))?;
                Ok(summary)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let complete = opts.filters.len() == 2 && opts.pcm.len() == 2;
    if complete {
        emit_tables(&cells, &robots, &out.join("tables")).map_err(CliError::data)?;
    } else {
        info!("partial matrix: tables not written");
    }
    Ok(cells)
}

/// Rebuilds the tables from the stored cell summaries.
pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dir = out.join("matrix");
    let mut cells = Vec::new();
    if dir.exists() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir).map_err(CliError::io(&dir))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            let s = p.join("summary.json");
            if p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')) || !s.exists() {
                continue;
            }
            let summary: CellSummary = serde_json::from_str(&read_text(&s)?).map_err(|e| CliError::Data(format!("{}: {e}", s.display())))?;
            cells.push(summary);
        }
    }
    emit_tables(&cells, &cfg.robot_ids(), &out.join("tables")).map_err(CliError::data)
}
