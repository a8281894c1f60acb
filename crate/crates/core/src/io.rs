//! File formats: CSV sensor streams, TUM trajectories, point clouds
//! (CSV and `RPC1` binary), Esri ASCII grids, feature sets and matches.
//!
//! Writers are deterministic: identical inputs give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::fusion::{GpsFix, ImuSample};
use crate::geometry::{Frame, RigidTransform};
use crate::matching::{FeatureSet, Keypoint, MatchPair, Metric};
use crate::synth::RadarScan;
use crate::terrain::{PointCloud, TerrainGrid};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Reads a headed CSV of floats with exactly `header.len()` (or, when
/// `optional` is set, one more) columns. Blank lines are skipped.
fn read_float_csv(path: &Path, header: &[&str], optional: Option<&str>) -> Result<Vec<Vec<f64>>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let head = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let names: Vec<&str> = head.iter().collect();
    let with_opt = match optional {
        Some(o) if names.len() == header.len() + 1 && names[..header.len()] == *header && names[header.len()] == o => true,
        _ if names == header => false,
        _ => {
            let mut want = header.join(",");
            if let Some(o) = optional {
                want.push_str(&format!("[,{o}]"));
            }
            return Err(parse_err(path, 1, format!("expected header '{want}', found '{}'", names.join(","))));
        }
    };
    let cols = header.len() + usize::from(with_opt);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != cols {
            return Err(parse_err(path, line, format!("expected {cols} fields, found {}", rec.len())));
        }
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(path, line, format!("'{f}' is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, line, "non-finite value"));
        }
        out.push(row);
    }
    Ok(out)
}

fn check_sorted(path: &Path, t: &[f64]) -> Result<(), IoError> {
    match t.windows(2).position(|w| w[1] <= w[0]) {
        Some(i) => Err(parse_err(path, i + 3, "timestamps must be strictly increasing")),
        None => Ok(()),
    }
}

// --- sensor streams --------------------------------------------------------

pub const IMU_HEADER: [&str; 7] = ["t", "ax", "ay", "az", "gx", "gy", "gz"];
pub const GPS_HEADER: [&str; 7] = ["t", "x", "y", "z", "sxx", "syy", "szz"];

pub fn write_imu_csv(path: &Path, imu: &[ImuSample]) -> Result<(), IoError> {
    let mut s = IMU_HEADER.join(",");
    s.push('\n');
    for m in imu {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", m.t, m.accel.x, m.accel.y, m.accel.z, m.gyro.x, m.gyro.y, m.gyro.z);
    }
    write_text(path, &s)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let rows = read_float_csv(path, &IMU_HEADER, None)?;
    let out: Vec<ImuSample> = rows
        .iter()
        .map(|r| ImuSample {
            t: r[0],
            accel: Vector3::new(r[1], r[2], r[3]),
            gyro: Vector3::new(r[4], r[5], r[6]),
        })
        .collect();
    check_sorted(path, &out.iter().map(|m| m.t).collect::<Vec<_>>())?;
    Ok(out)
}

/// GPS fixes; `sxx, syy, szz` are the diagonal of the reported position
/// covariance (m^2).
pub fn write_gps_csv(path: &Path, gps: &[GpsFix]) -> Result<(), IoError> {
    let mut s = GPS_HEADER.join(",");
    s.push('\n');
    for g in gps {
        let p = g.position;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", g.t, p.x, p.y, p.z, g.noise[(0, 0)], g.noise[(1, 1)], g.noise[(2, 2)]);
    }
    write_text(path, &s)
}

pub fn read_gps_csv(path: &Path) -> Result<Vec<GpsFix>, IoError> {
    let rows = read_float_csv(path, &GPS_HEADER, None)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if !(r[4] > 0.0 && r[5] > 0.0 && r[6] > 0.0) {
            return Err(parse_err(path, i + 2, "covariance diagonal must be positive"));
        }
        out.push(GpsFix {
            t: r[0],
            position: Vector3::new(r[1], r[2], r[3]),
            noise: Matrix3::from_diagonal(&Vector3::new(r[4], r[5], r[6])),
        });
    }
    check_sorted(path, &out.iter().map(|g| g.t).collect::<Vec<_>>())?;
    Ok(out)
}

pub const RADAR_HEADER: [&str; 4] = ["t", "x", "y", "z"];

/// Radar returns in the radar frame, one row per return, grouped by scan time.
pub fn write_radar_csv(path: &Path, scans: &[RadarScan]) -> Result<(), IoError> {
    let mut s = RADAR_HEADER.join(",");
    s.push('\n');
    for scan in scans {
        for p in &scan.points {
            let _ = writeln!(s, "{},{},{},{}", scan.t, p.x, p.y, p.z);
        }
    }
    write_text(path, &s)
}

/// Scans without any return are not represented.
pub fn read_radar_csv(path: &Path) -> Result<Vec<RadarScan>, IoError> {
    let rows = read_float_csv(path, &RADAR_HEADER, None)?;
    let mut out: Vec<RadarScan> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let p = Vector3::new(r[1], r[2], r[3]);
        match out.last_mut() {
            Some(s) if s.t == r[0] => s.points.push(p),
            Some(s) if r[0] < s.t => return Err(parse_err(path, i + 2, "scan times must be non-decreasing")),
            _ => out.push(RadarScan { t: r[0], points: vec![p] }),
        }
    }
    Ok(out)
}

// --- trajectories ----------------------------------------------------------

/// Formats `v` with 9 significant digits in positional notation.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{}", if v == 0.0 { 0.0 } else { v });
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&mag) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

/// One `t x y z qx qy qz qw` line per pose.
pub fn write_tum(path: &Path, poses: &[(f64, RigidTransform)]) -> Result<(), IoError> {
    let mut s = String::new();
    for (t, pose) in poses {
        let p = pose.translation();
        let q = pose.rotation().quaternion();
        let fields = [*t, p.x, p.y, p.z, q.i, q.j, q.k, q.w].map(sig9);
        s.push_str(&fields.join(" "));
        s.push('\n');
    }
    write_text(path, &s)
}

/// Reads a TUM file; `#` lines are comments. Poses are tagged `from -> World`.
pub fn read_tum(path: &Path, from: Frame) -> Result<Vec<(f64, RigidTransform)>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("'{f}' is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        if v.len() != 8 {
            return Err(parse_err(path, i + 1, format!("expected 8 fields, found {}", v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 1e-6) {
            return Err(parse_err(path, i + 1, "zero quaternion"));
        }
        out.push((
            v[0],
            RigidTransform::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3]), from, Frame::World),
        ));
    }
    Ok(out)
}

// --- point clouds ----------------------------------------------------------

pub fn write_cloud_csv(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut s = String::from(if cloud.intensity.is_some() { "x,y,z,intensity\n" } else { "x,y,z\n" });
    for (i, p) in cloud.points.iter().enumerate() {
        match &cloud.intensity {
            Some(v) => writeln!(s, "{},{},{},{}", p.x, p.y, p.z, v[i]),
            None => writeln!(s, "{},{},{}", p.x, p.y, p.z),
        }
        .expect("writing to a String");
    }
    write_text(path, &s)
}

pub fn read_cloud_csv(path: &Path, frame: Frame) -> Result<PointCloud, IoError> {
    let rows = read_float_csv(path, &["x", "y", "z"], Some("intensity"))?;
    let mut cloud = PointCloud::new(frame, rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect());
    if rows.first().is_some_and(|r| r.len() == 4) {
        cloud.intensity = Some(rows.iter().map(|r| r[3]).collect());
    }
    Ok(cloud)
}

pub const RPC_MAGIC: &[u8; 4] = b"RPC1";

/// `RPC1`, little-endian `u64` count, then `3 x f64` per point.
pub fn write_cloud_bin(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b);
    put(RPC_MAGIC).map_err(io_err(path))?;
    put(&(cloud.len() as u64).to_le_bytes()).map_err(io_err(path))?;
    for p in &cloud.points {
        for c in [p.x, p.y, p.z] {
            put(&c.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_cloud_bin(path: &Path, frame: Frame) -> Result<PointCloud, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[..4] != RPC_MAGIC {
        return Err(format_err(path, "missing RPC1 header"));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let body = &bytes[12..];
    if n.checked_mul(24) != Some(body.len() as u64) {
        return Err(format_err(path, format!("header announces {n} points but payload has {} bytes", body.len())));
    }
    let f = |i: usize| f64::from_le_bytes(body[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
    let points = (0..n as usize).map(|i| Vector3::new(f(3 * i), f(3 * i + 1), f(3 * i + 2))).collect();
    Ok(PointCloud::new(frame, points))
}

// --- terrain grids ---------------------------------------------------------

pub const NODATA: f64 = -9999.0;

/// Esri ASCII grid. Rows are written north to south, so the first data
/// line is the grid's last (max-y) row.
pub fn write_esri_grid(path: &Path, grid: &TerrainGrid) -> Result<(), IoError> {
    let mut s = String::new();
    let _ = writeln!(s, "ncols {}", grid.cols);
    let _ = writeln!(s, "nrows {}", grid.rows);
    let _ = writeln!(s, "xllcorner {}", grid.origin.x);
    let _ = writeln!(s, "yllcorner {}", grid.origin.y);
    let _ = writeln!(s, "cellsize {}", grid.cell_size);
    let _ = writeln!(s, "NODATA_value {NODATA}");
    for r in (0..grid.rows).rev() {
        let line: Vec<String> = (0..grid.cols)
            .map(|c| match grid.height(r, c) {
                Some(h) => format!("{h}"),
                None => format!("{NODATA}"),
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_esri_grid(path: &Path) -> Result<TerrainGrid, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut header = [None::<f64>; 6];
    let keys = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"];
    for _ in 0..6 {
        let (i, line) = lines.next().ok_or_else(|| format_err(path, "truncated header"))?;
        let line = line.map_err(io_err(path))?;
        let mut it = line.split_whitespace();
        let (Some(k), Some(v), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(path, i + 1, "expected 'key value'"));
        };
        let slot = keys
            .iter()
            .position(|key| key.eq_ignore_ascii_case(k))
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown header key '{k}'")))?;
        header[slot] = Some(v.parse().map_err(|_| parse_err(path, i + 1, format!("'{v}' is not a number")))?);
    }
    let [Some(cols), Some(rows), Some(x0), Some(y0), Some(cs), Some(nodata)] = header else {
        return Err(format_err(path, "header must define ncols, nrows, xllcorner, yllcorner, cellsize, NODATA_value"));
    };
    if !(cols >= 1.0 && rows >= 1.0 && cols.fract() == 0.0 && rows.fract() == 0.0) {
        return Err(format_err(path, "ncols and nrows must be positive integers"));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut file_rows = Vec::with_capacity(rows);
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("'{f}' is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != cols {
            return Err(parse_err(path, i + 1, format!("expected {cols} values, found {}", vals.len())));
        }
        file_rows.push(vals);
    }
    if file_rows.len() != rows {
        return Err(format_err(path, format!("expected {rows} data rows, found {}", file_rows.len())));
    }
    let mut heights = Vec::with_capacity(rows * cols);
    let mut valid = Vec::with_capacity(rows * cols);
    for row in file_rows.iter().rev() {
        for &h in row {
            let ok = h != nodata && h.is_finite();
            heights.push(if ok { h } else { 0.0 });
            valid.push(ok);
        }
    }
    TerrainGrid::from_heights(Vector2::new(x0, y0), cs, rows, cols, heights, valid)
        .map_err(|e| format_err(path, e.to_string()))
}

// --- features and matches --------------------------------------------------

const FEATURE_MAGIC: &str = "FEATURESET 1";

/// Text header terminated by `end_header`, then one little-endian record
/// per keypoint: `f64 x, f64 y, f32 response, L x f32 descriptor`.
pub fn write_features(path: &Path, set: &FeatureSet) -> Result<(), IoError> {
    if set.image_id.contains(['\n', '\r']) {
        return Err(format_err(path, "image id must be a single line"));
    }
    let metric = match set.metric() {
        Metric::L2 => "l2",
        Metric::Hamming => "hamming",
    };
    let mut buf = format!(
        "{FEATURE_MAGIC}\nimage_id {}\nwidth {}\nheight {}\ncount {}\ndescriptor_length {}\nmetric {metric}\nend_header\n",
        set.image_id,
        set.width,
        set.height,
        set.len(),
        set.desc_len()
    )
    .into_bytes();
    buf.reserve(set.len() * (20 + 4 * set.desc_len()));
    for (i, kp) in set.keypoints().iter().enumerate() {
        buf.extend_from_slice(&kp.position.x.to_le_bytes());
        buf.extend_from_slice(&kp.position.y.to_le_bytes());
        buf.extend_from_slice(&kp.response.to_le_bytes());
        for d in set.descriptor(i) {
            buf.extend_from_slice(&d.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<FeatureSet, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<fs::File>| -> Result<String, IoError> {
        line.clear();
        r.read_line(&mut line).map_err(io_err(path))?;
        if line.is_empty() {
            return Err(format_err(path, "truncated header"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next_line(&mut r)? != FEATURE_MAGIC {
        return Err(format_err(path, "not a feature file"));
    }
    let mut field = |r: &mut BufReader<fs::File>, key: &str| -> Result<String, IoError> {
        let l = next_line(r)?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(format_err(path, format!("expected header field '{key}', found '{l}'"))),
        }
    };
    let num = |v: String, key: &str| v.parse::<usize>().map_err(|_| format_err(path, format!("bad {key} '{v}'")));
    let image_id = field(&mut r, "image_id")?;
    let width = num(field(&mut r, "width")?, "width")?;
    let height = num(field(&mut r, "height")?, "height")?;
    let count = num(field(&mut r, "count")?, "count")?;
    let len = num(field(&mut r, "descriptor_length")?, "descriptor_length")?;
    let metric = match field(&mut r, "metric")?.as_str() {
        "l2" => Metric::L2,
        "hamming" => Metric::Hamming,
        m => return Err(format_err(path, format!("unknown metric '{m}'"))),
    };
    if next_line(&mut r)? != "end_header" {
        return Err(format_err(path, "missing end_header"));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(io_err(path))?;
    let rec = 20 + 4 * len;
    if body.len() != count * rec {
        return Err(format_err(path, format!("expected {} payload bytes for {count} records, found {}", count * rec, body.len())));
    }
    let (Ok(w), Ok(h)) = (u32::try_from(width), u32::try_from(height)) else {
        return Err(format_err(path, "image size out of range"));
    };
    let mut set = FeatureSet::new(image_id, w, h, metric, len);
    let mut desc = vec![0.0f32; len];
    for chunk in body.chunks_exact(rec) {
        let x = f64::from_le_bytes(chunk[0..8].try_into().expect("8 bytes"));
        let y = f64::from_le_bytes(chunk[8..16].try_into().expect("8 bytes"));
        let response = f32::from_le_bytes(chunk[16..20].try_into().expect("4 bytes"));
        for (j, d) in desc.iter_mut().enumerate() {
            *d = f32::from_le_bytes(chunk[20 + 4 * j..24 + 4 * j].try_into().expect("4 bytes"));
        }
        set.push(Keypoint { position: Vector2::new(x, y), response }, &desc)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    Ok(set)
}

pub fn write_matches_csv(path: &Path, matches: &[MatchPair]) -> Result<(), IoError> {
    let mut s = String::from("idx_a,idx_b,distance\n");
    for m in matches {
        let _ = writeln!(s, "{},{},{}", m.index_a, m.index_b, m.distance);
    }
    write_text(path, &s)
}

pub fn read_matches_csv(path: &Path) -> Result<Vec<MatchPair>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let head = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if head.iter().collect::<Vec<_>>() != ["idx_a", "idx_b", "distance"] {
        return Err(parse_err(path, 1, "expected header 'idx_a,idx_b,distance'"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, i + 2, e.to_string()))?;
        let bad = |f: &str| parse_err(path, i + 2, format!("bad field '{f}'"));
        out.push(MatchPair {
            index_a: rec[0].parse().map_err(|_| bad(&rec[0]))?,
            index_b: rec[1].parse().map_err(|_| bad(&rec[1]))?,
            distance: rec[2].parse().map_err(|_| bad(&rec[2]))?,
        });
    }
    Ok(out)
}
