//! File formats: binary PLY scans, pose CSVs and keyframe index CSVs, plus
//! the fixed-significant-digit float formatter used by every text output.

use crate::frontend::KeyFrame;
use crate::geom::{PointCloud, Pose3, Vec3};
use crate::simworld::Trajectory;
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("PLY: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Parse { line, msg: msg.into() }
}

/// Formats `x` with `sig` significant digits in the style of C's `%g`:
/// trailing zeros are dropped and the exponent form is used only for very
/// large or small magnitudes.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    assert!(sig >= 1);
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= sig as i32 {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes a binary little-endian PLY with float x, y, z, intensity.
/// Missing intensities are written as zero.
pub fn write_ply<W: Write>(cloud: &PointCloud, mut w: W) -> Result<(), FormatError> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n",
        cloud.len()
    )?;
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let inten = cloud.intensity().map(|v| v[i]).unwrap_or(0.0);
        for v in [p.x, p.y, p.z, inten] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads the PLY layout produced by [`write_ply`].
pub fn read_ply(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| FormatError::Ply("missing end_header".into()))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| FormatError::Ply("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(FormatError::Ply("missing magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut props = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(FormatError::Ply(format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| FormatError::Ply(format!("bad vertex count {n}")))?);
            }
            ["element", other, ..] => return Err(FormatError::Ply(format!("unsupported element {other}"))),
            ["property", "float", name] => props.push(*name),
            ["property", ..] => return Err(FormatError::Ply(format!("unsupported property `{line}`"))),
            ["comment", ..] | ["end_header"] | [] => {}
            _ => return Err(FormatError::Ply(format!("unexpected header line `{line}`"))),
        }
    }
    if props != ["x", "y", "z", "intensity"] {
        return Err(FormatError::Ply(format!("expected properties x y z intensity, got {props:?}")));
    }
    let n = count.ok_or_else(|| FormatError::Ply("missing vertex count".into()))?;
    let body = &bytes[header_end..];
    let need = n.checked_mul(16).ok_or_else(|| FormatError::Ply("vertex count overflows".into()))?;
    if body.len() != need {
        return Err(FormatError::Ply(format!("expected {need} data bytes, found {}", body.len())));
    }
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in body.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push(Vec3::new(f(0), f(1), f(2)));
        intensity.push(f(3));
    }
    PointCloud::with_intensity(points, intensity).map_err(|e| FormatError::Ply(e.to_string()))
}

pub const POSE_CSV_HEADER: &str = "stamp,robot,x,y,z,qw,qx,qy,qz";

/// Writes `stamp,robot,x,y,z,qw,qx,qy,qz` rows with round-trip precision.
pub fn write_pose_csv<W: Write>(rows: &[(f64, u32, Pose3)], mut w: W) -> Result<(), FormatError> {
    writeln!(w, "{POSE_CSV_HEADER}")?;
    for (stamp, robot, p) in rows {
        let t = p.translation();
        let [qw, qx, qy, qz] = p.wxyz();
        writeln!(w, "{stamp},{robot},{},{},{},{qw},{qx},{qy},{qz}", t.x, t.y, t.z)?;
    }
    Ok(())
}

pub fn trajectory_rows(traj: &Trajectory) -> Vec<(f64, u32, Pose3)> {
    traj.stamps.iter().zip(&traj.poses).map(|(s, p)| (*s, traj.robot, *p)).collect()
}

fn parse_f64(field: &str, line: usize, name: &str) -> Result<f64, FormatError> {
    let v: f64 = field.trim().parse().map_err(|_| parse_err(line, format!("{name}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{name} is not finite")));
    }
    Ok(v)
}

fn parse_pose(fields: &[&str], line: usize) -> Result<Pose3, FormatError> {
    let v: Vec<f64> = ["x", "y", "z", "qw", "qx", "qy", "qz"]
        .iter()
        .zip(fields)
        .map(|(n, f)| parse_f64(f, line, n))
        .collect::<Result<_, _>>()?;
    Pose3::from_wxyz(v[3], v[4], v[5], v[6], Vec3::new(v[0], v[1], v[2])).ok_or_else(|| parse_err(line, "degenerate quaternion"))
}

/// Parses a pose CSV into per-robot trajectories, ordered by robot id.
/// Stamps must increase strictly within a robot.
pub fn parse_pose_csv(text: &str) -> Result<Vec<Trajectory>, FormatError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == POSE_CSV_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{POSE_CSV_HEADER}`"))),
    }
    let mut by_robot: BTreeMap<u32, Trajectory> = BTreeMap::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(parse_err(n, format!("expected 9 fields, found {}", f.len())));
        }
        let stamp = parse_f64(f[0], n, "stamp")?;
        let robot: u32 = f[1].trim().parse().map_err(|_| parse_err(n, format!("robot: `{}` is not an id", f[1])))?;
        let pose = parse_pose(&f[2..], n)?;
        let t = by_robot.entry(robot).or_insert_with(|| Trajectory::new(robot, vec![], vec![]));
        if t.stamps.last().is_some_and(|&last| stamp <= last) {
            return Err(parse_err(n, "stamps must increase within a robot"));
        }
        t.stamps.push(stamp);
        t.poses.push(pose);
    }
    Ok(by_robot.into_values().collect())
}

pub const KEYFRAME_INDEX_HEADER: &str = "robot,index,informative,x,y,z,qw,qx,qy,qz";

#[derive(Debug, Clone, PartialEq)]
pub struct KeyFrameIndexRow {
    pub robot: u32,
    pub index: u32,
    pub informative: bool,
    pub pose: Pose3,
}

pub fn write_keyframe_index<W: Write>(kfs: &[KeyFrame], mut w: W) -> Result<(), FormatError> {
    writeln!(w, "{KEYFRAME_INDEX_HEADER}")?;
    for kf in kfs {
        let t = kf.pose.translation();
        let [qw, qx, qy, qz] = kf.pose.wxyz();
        writeln!(w, "{},{},{},{},{},{},{qw},{qx},{qy},{qz}", kf.robot, kf.index, kf.informative, t.x, t.y, t.z)?;
    }
    Ok(())
}

pub fn parse_keyframe_index(text: &str) -> Result<Vec<KeyFrameIndexRow>, FormatError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == KEYFRAME_INDEX_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{KEYFRAME_INDEX_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(parse_err(n, format!("expected 10 fields, found {}", f.len())));
        }
        let robot = f[0].trim().parse().map_err(|_| parse_err(n, "bad robot id"))?;
        let index = f[1].trim().parse().map_err(|_| parse_err(n, "bad keyframe index"))?;
        let informative = match f[2].trim() {
            "true" => true,
            "false" => false,
            other => return Err(parse_err(n, format!("informative: `{other}` is not a boolean"))),
        };
        out.push(KeyFrameIndexRow { robot, index, informative, pose: parse_pose(&f[3..], n)? });
    }
    Ok(out)
}
