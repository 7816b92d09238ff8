//! Acceptance suite. Every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line; the test fails if any criterion fails.
//!
//! The reference dataset is built once and shared by criteria 2, 3, 9 and 10.

use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;
use tunnelslam::eval::{classify_loop, CellOutcome, CellSummary, ClassifyConfig, FilterMode};
use tunnelslam::frontend::OdometryMode;
use tunnelslam::geom::{oriented_bbox, umeyama_align, PointCloud, Pose3, Vec3};
use tunnelslam::graphcore::{
    format_g2o, format_sidecar, optimize, parse_g2o, parse_sidecar, read_g2o, residual_jacobians, Edge, EdgeCategory, EdgeKind, NodeKey,
    OptimizeConfig, PoseGraph, RobustKernel,
};
use tunnelslam::io::{parse_keyframe_index, parse_pose_csv, read_ply};
use tunnelslam::merge::MergeReport;
use tunnelslam::registration::global_register;
use tunnelslam::robustsel::{max_clique, pairwise_consistency, pcm_filter, Adjacency, OdometryChain, DEFAULT_GAMMA, DEFAULT_VERTEX_LIMIT};
use tunnelslam::simworld::{build_world, raycast_scan};
use tunnelslam_cli::pipeline::{self, Manifest, MatrixOptions};
use tunnelslam_cli::ExperimentConfig;

type Verdict = Result<String, String>;

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_pose(rng: &mut ChaCha8Rng, max_t: f64) -> Pose3 {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(0.0..3.1);
    let r = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
    let t = Vec3::new(rng.random_range(-max_t..max_t), rng.random_range(-max_t..max_t), rng.random_range(-max_t..max_t));
    Pose3::new(r, t)
}

fn info(t: f64, r: f64) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

// ---------------------------------------------------------------- 1

fn odometry_ordering() -> Verdict {
    let cfg = config("degenerate_corridor.toml");
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ordered = 0;
    let mut accurate = 0;
    for &seed in &cfg.seeds {
        let dir = tempfile::tempdir().unwrap();
        pipeline::simulate(&cfg, seed, dir.path()).unwrap();
        let rows = pipeline::odometry(&cfg, dir.path()).unwrap();
        let max_of = |mode: OdometryMode| rows.iter().filter(|r| r.mode == mode).map(|r| r.ate.max).fold(0.0, f64::max);
        let ratio = rows.iter().filter(|r| r.mode == OdometryMode::Kinematic).map(|r| r.ate.ratio_max_over_length).fold(0.0, f64::max);
        let (free, kin) = (max_of(OdometryMode::Unconstrained), max_of(OdometryMode::Kinematic));
        ordered += usize::from(free > kin);
        accurate += usize::from(ratio < 0.01);
        lines.push(format!("seed {seed}: unconstrained {free:.2} m, kinematic {kin:.2} m ({:.2}%)", 100.0 * ratio));
    }
    let secs = start.elapsed().as_secs_f64();
    let n = cfg.seeds.len();
    check(
        n == 5 && ordered == n && accurate >= 4 && secs < 300.0,
        format!("{}; ordered {ordered}/{n}, kinematic < 1% on {accurate}/{n}, {secs:.0} s", lines.join("; ")),
    )
}

// ---------------------------------------------------------------- 2, 3

struct Reference {
    out: tempfile::TempDir,
    cfg: ExperimentConfig,
    cells: Vec<CellSummary>,
}

fn reference_run() -> Reference {
    let cfg = config("reference.toml");
    let out = tempfile::tempdir().unwrap();
    pipeline::simulate(&cfg, cfg.seeds[0], out.path()).unwrap();
    pipeline::odometry(&cfg, out.path()).unwrap();
    let cells = pipeline::matrix(&cfg, out.path(), &MatrixOptions::default()).unwrap();
    Reference { out, cfg, cells }
}

fn pcm_reduction(r: &Reference) -> Verdict {
    let mut worse = Vec::new();
    let mut best_drop = f64::NEG_INFINITY;
    let mut completed = 0;
    for c in &r.cells {
        let CellOutcome::Completed(m) = &c.outcome else { continue };
        if !c.id.pcm {
            continue;
        }
        completed += 1;
        let (pre, post) = (m.pre_pcm.outlier_percent(), m.post_pcm.outlier_percent());
        if post > pre + 1e-9 {
            worse.push(format!("{} {pre:.1}% -> {post:.1}%", c.id.name()));
        }
        best_drop = best_drop.max(pre - post);
    }
    check(
        completed == r.cells.len() / 2 && worse.is_empty() && best_drop >= 20.0,
        format!("{completed} PCM cells, largest drop {best_drop:.1} pp, increases: [{}]", worse.join(", ")),
    )
}

fn success_count(r: &Reference, filter: FilterMode, pcm: bool) -> (usize, usize) {
    let cells: Vec<&CellSummary> = r.cells.iter().filter(|c| c.id.filter == filter && c.id.pcm == pcm).collect();
    let ok = cells.iter().filter(|c| matches!(&c.outcome, CellOutcome::Completed(m) if m.success)).count();
    (ok, cells.len())
}

fn tunnel_filter_effect(r: &Reference) -> Verdict {
    let (tp, n) = success_count(r, FilterMode::Tunnel, true);
    let (ap, n2) = success_count(r, FilterMode::All, true);
    let (an, n3) = success_count(r, FilterMode::All, false);
    let (tn, _) = success_count(r, FilterMode::Tunnel, false);
    // same denominators, so compare counts exactly
    check(
        n > 0 && n == n2 && n == n3 && tp >= ap && tp >= 2 * an,
        format!("tunnel+PCM {tp}/{n}, all+PCM {ap}/{n}, all no-PCM {an}/{n}, tunnel no-PCM {tn}/{n}"),
    )
}

// ---------------------------------------------------------------- 4

fn gnc_planted() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, 1.0f64, 0.0f64);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut g = PoseGraph::new();
        let mut gt = BTreeMap::new();
        let offset = Pose3::from_yaw(0.3, Vec3::new(2.0, -1.0, 0.3));
        for r in 0..2u32 {
            let mut p = Pose3::from_translation(Vec3::new(0.0, 6.0 * r as f64, 0.0));
            for i in 0..25u32 {
                if i > 0 {
                    p = p.compose(&Pose3::from_yaw(rng.random_range(-0.1..0.1), Vec3::new(1.0, 0.0, 0.0)));
                }
                let k = NodeKey::new(r, i);
                gt.insert(k, p);
                g.add_node(k, if r == 0 { p } else { offset.compose(&p) }).unwrap();
                if i > 0 {
                    let prev = NodeKey::new(r, i - 1);
                    g.add_edge(Edge::odometry(prev, k, gt[&prev].between(&p), info(100.0, 400.0))).unwrap();
                }
            }
        }
        let mut planted = Vec::new();
        for n in 0..10u32 {
            let (a, b) = (NodeKey::new(0, (5 * n + 2) % 25), NodeKey::new(1, (3 * n + 1) % 25));
            let mut z = gt[&a].between(&gt[&b]);
            if n == 2 || n == 7 {
                let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                z = z.compose(&Pose3::from_translation(dir * 10.0));
                planted.push(g.edges().len());
            }
            g.add_edge(Edge::inter_robot(a, b, z, info(100.0, 400.0))).unwrap();
        }
        let cfg = OptimizeConfig { robust: RobustKernel::gnc(), pin_odometry: true, ..Default::default() };
        let res = optimize(&g, &cfg).unwrap();
        for (k, (e, w)) in g.edges().iter().zip(&res.edge_weights).enumerate() {
            if planted.contains(&k) {
                worst.0 = worst.0.max(*w);
            } else if e.kind == EdgeKind::InterRobot {
                worst.1 = worst.1.min(*w);
            }
        }
        let err = gt.iter().map(|(k, p)| (res.poses[k].translation() - p.translation()).norm()).fold(0.0, f64::max);
        worst.2 = worst.2.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.0 < 0.5 && worst.1 > 0.5 && worst.2 < 0.5 && secs < 10.0,
        format!("max planted weight {:.3}, min correct weight {:.3}, max ATE {:.4} m, {secs:.2} s", worst.0, worst.1, worst.2),
    )
}

// ---------------------------------------------------------------- 5

fn pcm_oracle() -> Verdict {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut rejecting = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graph = PoseGraph::new();
        let mut chains = Vec::new();
        for r in 0..2u32 {
            let mut poses = vec![Pose3::from_yaw(rng.random_range(-3.0..3.0), Vec3::new(rng.random_range(-5.0..5.0), 0.0, 0.0))];
            for _ in 1..12 {
                let step = Pose3::from_yaw(rng.random_range(-0.3..0.3), Vec3::new(1.0, rng.random_range(-0.2..0.2), 0.0));
                poses.push(poses.last().unwrap().compose(&step));
            }
            for (i, p) in poses.iter().enumerate() {
                graph.add_node(NodeKey::new(r, i as u32), *p).unwrap();
            }
            for i in 1..12u32 {
                let z = poses[i as usize - 1].between(&poses[i as usize]);
                graph.add_edge(Edge::odometry(NodeKey::new(r, i - 1), NodeKey::new(r, i), z, info(100.0, 400.0))).unwrap();
            }
            chains.push(poses);
        }
        let n = 1 + (seed as usize * 7) % 10;
        let loops: Vec<Edge> = (0..n)
            .map(|_| {
                let (i, k) = (rng.random_range(0..12usize), rng.random_range(0..12usize));
                let mut z = chains[0][i].between(&chains[1][k]);
                match rng.random_range(0..4) {
                    0 => z = z.compose(&random_pose(&mut rng, 5.0)),
                    1 => z = z.compose(&Pose3::from_translation(Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), 0.0))),
                    _ => {}
                }
                Edge::inter_robot(NodeKey::new(0, i as u32), NodeKey::new(1, k as u32), z, info(100.0, 400.0))
            })
            .collect();
        let (a, b) = (OdometryChain::from_graph(&graph, 0).unwrap(), OdometryChain::from_graph(&graph, 1).unwrap());
        let kept = pcm_filter(&loops, &a, &b, DEFAULT_GAMMA).unwrap();
        // oracle: enumerate every subset, keep the largest pairwise-consistent
        // one, lexicographically smallest index list among equals
        let ok: Vec<Vec<bool>> = (0..n)
            .map(|i| (0..n).map(|j| i == j || pairwise_consistency(&loops[i], &loops[j], &a, &b).unwrap() <= DEFAULT_GAMMA).collect())
            .collect();
        let mut best: Vec<usize> = Vec::new();
        for mask in 1u32..(1 << n) {
            let vs: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            if vs.iter().all(|&i| vs.iter().all(|&j| ok[i][j])) && (vs.len() > best.len() || (vs.len() == best.len() && vs < best)) {
                best = vs;
            }
        }
        let want: Vec<Edge> = best.iter().map(|&i| loops[i].clone()).collect();
        rejecting += usize::from(want.len() < n);
        if kept != want {
            mismatches.push(seed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches.is_empty() && secs < 60.0,
        format!("100 fixtures, {rejecting} with rejections, mismatching seeds {mismatches:?}, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- 6

fn clique_exactness() -> Verdict {
    let mut bad = Vec::new();
    for k in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
        let n = 1 + (k as usize) % 15;
        let p = [0.25, 0.5, 0.75][k as usize % 3];
        let mut adj = Adjacency::new(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(p) {
                    adj.connect(i, j);
                }
            }
        }
        let mut brute = 0;
        for mask in 0u32..(1 << n) {
            let vs: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            if vs.len() > brute && vs.iter().all(|&i| vs.iter().all(|&j| i == j || adj.has(i, j))) {
                brute = vs.len();
            }
        }
        let c = max_clique(&adj, DEFAULT_VERTEX_LIMIT).unwrap();
        if c.len() != brute || !adj.is_clique(&c) {
            bad.push(k);
        }
    }
    check(bad.is_empty(), format!("200 graphs up to 15 vertices, failures {bad:?}"))
}

// ---------------------------------------------------------------- 7

fn registration_recovery() -> Verdict {
    let cfg = config("reference.toml");
    let world = build_world(&cfg.world).unwrap();
    let voxel = cfg.frontend.keyframe_voxel;
    let junctions = [Vec3::new(40.0, 0.0, 0.0), Vec3::new(110.0, 0.0, 0.0), Vec3::new(180.0, 0.0, 0.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut good = 0;
    for k in 0..100u64 {
        let j = junctions[k as usize % 3];
        let pose = Pose3::from_yaw(rng.random_range(-3.1..3.1), j + Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), 0.0));
        let scan = raycast_scan(&world, &pose, &cfg.lidar, k).unwrap().voxel_downsample(voxel);
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let t = Pose3::new(UnitQuaternion::from_scaled_axis(axis * 60f64.to_radians()), dir * 5.0);
        let target = scan.transformed(&t);
        let Ok(r) = global_register(&scan, &target, &cfg.registration) else { continue };
        let d = r.pose.between(&t);
        if r.converged && d.translation_norm() < 0.3 && d.rotation_angle() < 3f64.to_radians() {
            good += 1;
        }
    }
    // pure corridor: at least 20 m from every junction and end cap, which is
    // the sensor range, so nothing but tube is in view
    let classify = ClassifyConfig::default();
    let mut corridor = (0, 0, 0);
    for k in 0..20u64 {
        let x = rng.random_range(62.0..84.0);
        let gap = rng.random_range(1.5..4.0);
        let pa = Pose3::from_yaw(rng.random_range(-0.2..0.2), Vec3::new(x, rng.random_range(-0.5..0.5), 0.0));
        let pb = Pose3::from_yaw(rng.random_range(-0.2..0.2), Vec3::new(x + gap, rng.random_range(-0.5..0.5), 0.0));
        let a = raycast_scan(&world, &pa, &cfg.lidar, 500 + k).unwrap().voxel_downsample(voxel);
        let b = raycast_scan(&world, &pb, &cfg.lidar, 600 + k).unwrap().voxel_downsample(voxel);
        match global_register(&b, &a, &cfg.registration) {
            Ok(r) if r.converged => {
                let (ka, kb) = (NodeKey::new(0, 0), NodeKey::new(1, 0));
                let gt = BTreeMap::from([(ka, pa), (kb, pb)]);
                match classify_loop(&Edge::inter_robot(ka, kb, r.pose, info(1.0, 1.0)), &gt, &classify).unwrap() {
                    EdgeCategory::WrongPcr => corridor.1 += 1,
                    _ => corridor.2 += 1,
                }
            }
            _ => corridor.0 += 1,
        }
    }
    check(
        good >= 95 && corridor.2 == 0,
        format!(
            "junctions {good}/100 within 0.3 m / 3 deg; corridor pairs: {} not converged, {} wrong_pcr, {} otherwise",
            corridor.0, corridor.1, corridor.2
        ),
    )
}

// ---------------------------------------------------------------- 8

fn numerical_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut jac, mut explog, mut ume, mut obb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (xi, xj) = (random_pose(&mut rng, 3.0), random_pose(&mut rng, 3.0));
        // keep the residual away from the log singularity at pi
        let z = xi.between(&xj).compose(&Pose3::exp(&(Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5)))).inverse());
        let res = |a: &Pose3, b: &Pose3| z.inverse().compose(&a.between(b)).log();
        let (ja, jb) = residual_jacobians(&z, &xi, &xj);
        let h = 1e-6;
        for c in 0..6 {
            let mut d = Vector6::zeros();
            d[c] = h;
            let na = (res(&xi.compose(&Pose3::exp(&d)), &xj) - res(&xi.compose(&Pose3::exp(&-d)), &xj)) / (2.0 * h);
            let nb = (res(&xi, &xj.compose(&Pose3::exp(&d))) - res(&xi, &xj.compose(&Pose3::exp(&-d)))) / (2.0 * h);
            jac = jac.max((na - ja.column(c)).amax()).max((nb - jb.column(c)).amax());
        }
        let xi6 = Vector6::from_fn(|k, _| if k < 3 { rng.random_range(-1.7..1.7) } else { rng.random_range(-10.0..10.0) });
        explog = explog.max((Pose3::exp(&xi6).log() - xi6).amax());
        let p = random_pose(&mut rng, 10.0);
        explog = explog.max((Pose3::exp(&p.log()).to_matrix() - p.to_matrix()).amax());

        let src: Vec<Vec3> = (0..30).map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect();
        let dst: Vec<Vec3> = src.iter().map(|q| p.transform_point(q)).collect();
        ume = ume.max((umeyama_align(&src, &dst).unwrap().to_matrix() - p.to_matrix()).amax());

        let ext = [rng.random_range(6.0..10.0), rng.random_range(3.0..5.0), rng.random_range(0.5..2.0)];
        let mut pts = Vec::new();
        for i in 0..=10 {
            for j in 0..=10 {
                for k in 0..=10 {
                    let u = Vec3::new(i as f64 / 10.0 - 0.5, j as f64 / 10.0 - 0.5, k as f64 / 10.0 - 0.5);
                    pts.push(p.transform_point(&Vec3::new(u.x * ext[0], u.y * ext[1], u.z * ext[2])));
                }
            }
        }
        let b = oriented_bbox(&PointCloud::new(pts).unwrap()).unwrap();
        for k in 0..3 {
            obb = obb.max((b.extents[k] - ext[k]).abs());
        }
        obb = obb.max((b.center - p.translation()).amax());
    }
    check(
        jac < 1e-5 && explog < 1e-9 && ume < 1e-9 && obb < 1e-6,
        format!("jacobian {jac:.1e}, exp/log {explog:.1e}, umeyama {ume:.1e}, obb {obb:.1e}"),
    )
}

// ---------------------------------------------------------------- 9

fn random_graph(rng: &mut ChaCha8Rng) -> PoseGraph {
    let mut g = PoseGraph::new();
    let robots = rng.random_range(1..4u32);
    let mut sizes = Vec::new();
    for r in 0..robots {
        let n = rng.random_range(1..30u32);
        sizes.push(n);
        for i in 0..n {
            g.add_node(NodeKey::new(r, i), random_pose(rng, 50.0)).unwrap();
        }
    }
    let spd = |rng: &mut ChaCha8Rng| {
        let b = Matrix6::from_fn(|_, _| rng.random_range(-3.0..3.0));
        b * b.transpose() + Matrix6::identity()
    };
    for r in 0..robots {
        for i in 1..sizes[r as usize] {
            let mut e = Edge::odometry(NodeKey::new(r, i - 1), NodeKey::new(r, i), random_pose(rng, 2.0), spd(rng));
            e.gnc_weight = 1.0;
            g.add_edge(e).unwrap();
        }
    }
    if robots > 1 {
        for _ in 0..rng.random_range(0..20) {
            let (ra, rb) = (rng.random_range(0..robots), rng.random_range(0..robots));
            if ra == rb {
                continue;
            }
            let a = NodeKey::new(ra, rng.random_range(0..sizes[ra as usize]));
            let b = NodeKey::new(rb, rng.random_range(0..sizes[rb as usize]));
            let mut e = Edge::inter_robot(a, b, random_pose(rng, 20.0), spd(rng));
            e.category = [EdgeCategory::Correct, EdgeCategory::WrongPr, EdgeCategory::WrongPcr, EdgeCategory::Unknown][rng.random_range(0..4)];
            e.gnc_weight = rng.random_range(0.0..1.0);
            g.add_edge(e).unwrap();
        }
    }
    g
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0)
}

fn g2o_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..100 {
        let g = random_graph(&mut rng);
        let text = format_g2o(&g).unwrap();
        let side = format_sidecar(&g).unwrap();
        let mut parsed = parse_g2o(&text).map_err(|e| format!("graph {k}: {e}"))?;
        parse_sidecar(&side, &mut parsed.graph).map_err(|e| format!("graph {k}: {e}"))?;
        if !parsed.diagnostics.is_empty() {
            return Err(format!("graph {k}: diagnostics {:?}", parsed.diagnostics));
        }
        let h = &parsed.graph;
        if h.nodes().len() != g.nodes().len() || h.edges().len() != g.edges().len() {
            return Err(format!("graph {k}: size changed"));
        }
        for (key, p) in g.nodes() {
            let q = h.node(key).ok_or(format!("graph {k}: lost {key:?}"))?;
            if !(p.to_matrix() - q.to_matrix()).iter().all(|d| d.abs() < 1e-9) {
                return Err(format!("graph {k}: node {key:?} moved"));
            }
        }
        for (e, f) in g.edges().iter().zip(h.edges()) {
            let same = e.from == f.from
                && e.to == f.to
                && e.kind == f.kind
                && e.category == f.category
                && close(e.gnc_weight, f.gnc_weight)
                && (e.measurement.to_matrix() - f.measurement.to_matrix()).amax() < 1e-9
                && e.information.iter().zip(f.information.iter()).all(|(x, y)| close(*x, *y));
            if !same {
                return Err(format!("graph {k}: edge {:?}->{:?} changed", e.from, e.to));
            }
        }
        if format_g2o(h).unwrap() != text || format_sidecar(h).unwrap() != side {
            return Err(format!("graph {k}: second write differs"));
        }
    }
    Ok("100 random graphs".into())
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn reparse(path: &Path) -> Result<(), String> {
    let name = path.file_name().unwrap().to_string_lossy().to_string();
    let text = || std::fs::read_to_string(path).map_err(|e| e.to_string());
    let err = |e: &dyn std::fmt::Display| e.to_string();
    if name.ends_with(".edges.csv") {
        // read together with its graph
        return Ok(());
    }
    if name.ends_with(".g2o") {
        let parsed = read_g2o(path).map_err(|e| err(&e))?;
        return if parsed.diagnostics.is_empty() { Ok(()) } else { Err(format!("diagnostics {:?}", parsed.diagnostics)) };
    }
    if name.ends_with(".ply") {
        return read_ply(&std::fs::read(path).map_err(|e| err(&e))?).map(|_| ()).map_err(|e| err(&e));
    }
    match name.as_str() {
        "manifest.json" => serde_json::from_str::<Manifest>(&text()?).map(|_| ()).map_err(|e| err(&e)),
        "report.json" => serde_json::from_str::<MergeReport>(&text()?).map(|_| ()).map_err(|e| err(&e)),
        "summary.json" => serde_json::from_str::<CellSummary>(&text()?).map(|_| ()).map_err(|e| err(&e)),
        "index.csv" => parse_keyframe_index(&text()?).map(|_| ()).map_err(|e| err(&e)),
        "ground_truth.csv" | "wheel_odometry.csv" => parse_pose_csv(&text()?).map(|_| ()).map_err(|e| err(&e)),
        n if n.starts_with("robot_") && n.ends_with(".csv") => parse_pose_csv(&text()?).map(|_| ()).map_err(|e| err(&e)),
        n if n.ends_with(".csv") => {
            let body = text()?;
            let mut rdr = csv::Reader::from_reader(body.as_bytes());
            for rec in rdr.records() {
                rec.map_err(|e| err(&e))?;
            }
            Ok(())
        }
        _ => Err("no parser for this file".into()),
    }
}

fn format_checks(r: &Reference) -> Verdict {
    let trip = g2o_round_trip();
    let files = files_under(r.out.path());
    let mut failures = Vec::new();
    for f in &files {
        if let Err(e) = reparse(f) {
            failures.push(format!("{}: {e}", f.strip_prefix(r.out.path()).unwrap().display()));
        }
    }
    let g2o = files.iter().filter(|p| p.extension().is_some_and(|e| e == "g2o")).count();
    check(
        trip.is_ok() && failures.is_empty() && g2o == 3 * r.cells.len(),
        format!(
            "{}; {} emitted files re-parsed ({g2o} g2o), failures: [{}]",
            trip.unwrap_or_else(|e| e),
            files.len(),
            failures.into_iter().take(5).collect::<Vec<_>>().join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 10

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    files_under(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect()
}

fn determinism(r: &Reference) -> Verdict {
    let before = snapshot(r.out.path());
    for sub in ["matrix", "tables", "keyframes"] {
        std::fs::remove_dir_all(r.out.path().join(sub)).unwrap();
    }
    pipeline::matrix(&r.cfg, r.out.path(), &MatrixOptions { jobs: 3, ..Default::default() }).unwrap();
    let after = snapshot(r.out.path());
    let differing: Vec<String> = before
        .keys()
        .chain(after.keys())
        .filter(|k| before.get(*k) != after.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    check(differing.is_empty(), format!("{} files compared after a rerun with 3 jobs, differing: {differing:?}", before.len()))
}

// ----------------------------------------------------------------

/// Writes straight to the stderr handle, which the test harness does not
/// capture, so the verdict lines show up even when the test passes.
fn report(line: String) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

#[test]
fn acceptance_criteria() {
    let mut failed = Vec::new();
    let mut run = |n: u32, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => report(format!("criterion {n:>2} PASS {name} ({secs:.1} s): {d}")),
            Err(d) => {
                report(format!("criterion {n:>2} FAIL {name} ({secs:.1} s): {d}"));
                failed.push(n);
            }
        }
    };
    run(1, "odometry degeneracy ordering", &mut odometry_ordering);
    let start = Instant::now();
    let reference = reference_run();
    report(format!("reference dataset and matrix built in {:.1} s", start.elapsed().as_secs_f64()));
    run(2, "PCM reduction", &mut || pcm_reduction(&reference));
    run(3, "tunnel-filter effect", &mut || tunnel_filter_effect(&reference));
    run(4, "GNC planted outliers", &mut gnc_planted);
    run(5, "PCM oracle equivalence", &mut pcm_oracle);
    run(6, "max-clique exactness", &mut clique_exactness);
    run(7, "registration recovery", &mut registration_recovery);
    run(8, "numerical checks", &mut numerical_checks);
    run(9, "format round trips", &mut || format_checks(&reference));
    run(10, "matrix determinism", &mut || determinism(&reference));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
