//! File formats: KITTI `.bin` scans and `calib.txt`, the VXP-CAL text
//! calibration, manifest CSV, VXPD descriptor files, VXPC checkpoints, raw
//! float images, and tuple construction over manifest positions.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Matrix4;
use thiserror::Error;

use crate::geometry::{GeometryError, NormalizedIntrinsics, PointCloud, ProjectionModel};
use crate::heads::Image;
use crate::params::ParamSet;
use crate::retrieval::{build_index, IndexEntry, Metric, RetrievalIndex};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("{path}: missing key `{key}`")]
    MissingKey { path: PathBuf, key: String },
    #[error("{path}:{line}: {reason}")]
    ParseError { path: PathBuf, line: usize, reason: String },
    #[error("{path}: header mismatch: expected `{expected}`, found `{found}`")]
    HeaderMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("no anchor has a positive within the threshold")]
    EmptyResult,
    #[error("invalid thresholds: positive {pos} must be below negative {neg}")]
    InvalidThresholds { pos: f64, neg: f64 },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    VersionUnsupported(u16),
    #[error("truncated file: field at byte {offset} is incomplete")]
    TruncatedFile { offset: u64 },
    #[error("descriptor {index} has dimension {got}, expected {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// KITTI .bin

pub fn decode_point_cloud_bin(bytes: &[u8]) -> std::result::Result<Vec<[f64; 3]>, String> {
    if bytes.len() % 16 != 0 {
        return Err(format!("size {} is not a multiple of 16 bytes", bytes.len()));
    }
    let mut out = Vec::with_capacity(bytes.len() / 16);
    for q in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(q[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        out.push([f(0), f(1), f(2)]);
    }
    Ok(out)
}

pub fn encode_point_cloud_bin(points: &[[f64; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_point_cloud_bin(path: &Path, id: impl Into<String>) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let points = decode_point_cloud_bin(&bytes).map_err(|reason| DataError::MalformedFile {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok(PointCloud::new(id, points))
}

/// Writes x, y, z as 32-bit floats with zero intensity.
pub fn write_point_cloud_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_file(path, &encode_point_cloud_bin(&cloud.points))
}

// ---------------------------------------------------------------------------
// calibration

fn parse_floats(path: &Path, line: usize, text: &str, expected: usize) -> Result<Vec<f64>> {
    let vals = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| DataError::ParseError {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
    if vals.len() != expected {
        return Err(DataError::ParseError {
            path: path.to_path_buf(),
            line,
            reason: format!("expected {expected} numbers, found {}", vals.len()),
        });
    }
    Ok(vals)
}

fn extrinsic_from_rows(rows: &[f64]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..rows.len() / 4 {
        for c in 0..4 {
            m[(r, c)] = rows[r * 4 + c];
        }
    }
    m
}

/// KITTI `calib.txt`: intrinsics from `P2`, extrinsic from `Tr`. The `P2`
/// translation column is ignored.
pub fn parse_kitti_calib_str(path: &Path, text: &str, image_dims: (usize, usize)) -> Result<ProjectionModel> {
    let mut p2 = None;
    let mut tr = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        match key.trim() {
            "P2" => p2 = Some(parse_floats(path, i + 1, rest, 12)?),
            "Tr" | "Tr_velo_to_cam" => tr = Some(parse_floats(path, i + 1, rest, 12)?),
            _ => {}
        }
    }
    let missing = |key: &str| DataError::MissingKey {
        path: path.to_path_buf(),
        key: key.into(),
    };
    let p2 = p2.ok_or_else(|| missing("P2"))?;
    let tr = tr.ok_or_else(|| missing("Tr"))?;
    let (w, h) = (image_dims.0 as f64, image_dims.1 as f64);
    let intr = NormalizedIntrinsics {
        fx: p2[0] / w,
        fy: p2[5] / h,
        cx: p2[2] / w,
        cy: p2[6] / h,
    };
    Ok(ProjectionModel::new(intr, extrinsic_from_rows(&tr))?)
}

pub fn parse_kitti_calib(path: &Path, image_dims: (usize, usize)) -> Result<ProjectionModel> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_kitti_calib_str(path, &text, image_dims)
}

pub const CALIBRATION_HEADER: &str = "# VXP-CAL v1";

/// Renders VXP-CAL v1. Floats use the shortest exact representation.
pub fn render_calibration(model: &ProjectionModel) -> String {
    let i = &model.intrinsics;
    let mut s = format!("{CALIBRATION_HEADER}\n{} {} {} {}\n", i.fx, i.fy, i.cx, i.cy);
    for r in 0..3 {
        let e = &model.extrinsic;
        s.push_str(&format!("{} {} {} {}\n", e[(r, 0)], e[(r, 1)], e[(r, 2)], e[(r, 3)]));
    }
    s
}

pub fn parse_calibration_str(path: &Path, text: &str) -> Result<ProjectionModel> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if lines.len() != 4 {
        return Err(DataError::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("expected 4 data lines, found {}", lines.len()),
        });
    }
    let intr = parse_floats(path, lines[0].0, lines[0].1, 4)?;
    let mut rows = Vec::with_capacity(12);
    for &(n, l) in &lines[1..] {
        rows.extend(parse_floats(path, n, l, 4)?);
    }
    let intr = NormalizedIntrinsics {
        fx: intr[0],
        fy: intr[1],
        cx: intr[2],
        cy: intr[3],
    };
    Ok(ProjectionModel::new(intr, extrinsic_from_rows(&rows))?)
}

pub fn read_calibration(path: &Path) -> Result<ProjectionModel> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_calibration_str(path, &text)
}

pub fn write_calibration(path: &Path, model: &ProjectionModel) -> Result<()> {
    write_file(path, render_calibration(model).as_bytes())
}

// ---------------------------------------------------------------------------
// manifest

pub const MANIFEST_HEADER: [&str; 8] = ["id", "timestamp_s", "x_m", "y_m", "z_m", "cloud_path", "image_path", "run_id"];

#[derive(Clone, Debug, PartialEq)]
pub struct SampleManifestRow {
    pub id: String,
    pub timestamp_s: f64,
    pub position: [f64; 3],
    pub cloud_path: String,
    pub image_path: String,
    pub run_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub rows: Vec<SampleManifestRow>,
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.rows.iter().map(|r| r.position).collect()
    }

    pub fn load_cloud(&self, row: &SampleManifestRow) -> Result<PointCloud> {
        let mut c = load_point_cloud_bin(&self.resolve(&row.cloud_path), row.id.clone())?;
        c.timestamp = Some(row.timestamp_s);
        Ok(c)
    }

    pub fn load_image(&self, row: &SampleManifestRow) -> Result<Image> {
        read_raw_image(&self.resolve(&row.image_path))
    }
}

pub fn parse_manifest_str(path: &Path, text: &str) -> Result<Vec<SampleManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| DataError::ParseError {
        path: path.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })?;
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(DataError::HeaderMismatch {
            path: path.to_path_buf(),
            expected: MANIFEST_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut rows = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::ParseError {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let perr = |reason: String| DataError::ParseError {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(perr(format!("expected {} fields, found {}", MANIFEST_HEADER.len(), rec.len())));
        }
        let num = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| perr(format!("column `{}`: {e}", MANIFEST_HEADER[i])))
        };
        let row = SampleManifestRow {
            id: rec[0].to_string(),
            timestamp_s: num(1)?,
            position: [num(2)?, num(3)?, num(4)?],
            cloud_path: rec[5].to_string(),
            image_path: rec[6].to_string(),
            run_id: rec[7].to_string(),
        };
        if row.id.is_empty() {
            return Err(perr("empty id".into()));
        }
        if seen.insert(row.id.clone(), line).is_some() {
            return Err(DataError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: row.id,
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Manifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        rows: parse_manifest_str(path, &text)?,
    })
}

pub fn render_manifest(rows: &[SampleManifestRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.timestamp_s.to_string(),
            r.position[0].to_string(),
            r.position[1].to_string(),
            r.position[2].to_string(),
            r.cloud_path.clone(),
            r.image_path.clone(),
            r.run_id.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn write_manifest(path: &Path, rows: &[SampleManifestRow]) -> Result<()> {
    write_file(path, render_manifest(rows).as_bytes())
}

// ---------------------------------------------------------------------------
// tuples

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTuple {
    pub anchor: String,
    pub positives: BTreeSet<String>,
    pub negatives: BTreeSet<String>,
}

/// Positives strictly within `pos_thresh`, negatives strictly beyond
/// `neg_thresh`. Anchors without a positive are dropped.
pub fn build_tuples(rows: &[SampleManifestRow], pos_thresh: f64, neg_thresh: f64) -> Result<Vec<TrainingTuple>> {
    if !(pos_thresh > 0.0 && pos_thresh < neg_thresh) {
        return Err(DataError::InvalidThresholds {
            pos: pos_thresh,
            neg: neg_thresh,
        });
    }
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (i, a) in rows.iter().enumerate() {
        let mut positives = BTreeSet::new();
        let mut negatives = BTreeSet::new();
        for (j, b) in rows.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = dist(&a.position, &b.position);
            if d < pos_thresh {
                positives.insert(b.id.clone());
            } else if d > neg_thresh {
                negatives.insert(b.id.clone());
            }
        }
        if positives.is_empty() {
            dropped += 1;
            continue;
        }
        out.push(TrainingTuple {
            anchor: a.id.clone(),
            positives,
            negatives,
        });
    }
    if dropped > 0 {
        log::info!("build_tuples: dropped {dropped} anchors without a positive");
    }
    if out.is_empty() {
        return Err(DataError::EmptyResult);
    }
    Ok(out)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

// ---------------------------------------------------------------------------
// binary helpers

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::TruncatedFile { offset: self.pos as u64 });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(DataError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(self.take(2)?.read_u16::<LittleEndian>().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(self.take(4)?.read_u32::<LittleEndian>().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(self.take(8)?.read_u64::<LittleEndian>().unwrap())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut r = self.take(n.checked_mul(4).ok_or(DataError::TruncatedFile { offset: self.pos as u64 })?)?;
        let mut v = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut v).unwrap();
        Ok(v)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut r = self.take(n.checked_mul(8).ok_or(DataError::TruncatedFile { offset: self.pos as u64 })?)?;
        let mut v = vec![0f64; n];
        r.read_f64_into::<LittleEndian>(&mut v).unwrap();
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(DataError::MalformedFile {
                path: PathBuf::new(),
                reason: format!("{} trailing bytes after offset {}", self.bytes.len() - self.pos, self.pos),
            });
        }
        Ok(())
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        DataError::MalformedFile { reason, .. } => DataError::MalformedFile {
            path: path.to_path_buf(),
            reason,
        },
        e => e,
    })
}

// ---------------------------------------------------------------------------
// VXPD descriptors

pub const VXPD_MAGIC: [u8; 4] = *b"VXPD";
pub const VXPD_VERSION: u16 = 1;
pub const VXPD_HEADER_LEN: usize = 14;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub dim: usize,
    pub ids: Vec<u64>,
    /// Row-major `count × dim`.
    pub values: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_f64(dim: usize, records: &[(u64, Vec<f64>)]) -> Result<Self> {
        let mut s = Self::new(dim);
        for (i, (id, v)) in records.iter().enumerate() {
            if v.len() != dim {
                return Err(DataError::DimMismatch {
                    index: i,
                    expected: dim,
                    got: v.len(),
                });
            }
            s.ids.push(*id);
            s.values.extend(v.iter().map(|&x| x as f32));
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.values[i * self.dim..(i + 1) * self.dim].iter().map(|&x| x as f64).collect()
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.vector(i)).collect()
    }
}

pub fn encode_descriptors(set: &DescriptorSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(VXPD_HEADER_LEN + set.len() * (8 + 4 * set.dim));
    out.extend_from_slice(&VXPD_MAGIC);
    out.write_u16::<LittleEndian>(VXPD_VERSION).unwrap();
    out.write_u32::<LittleEndian>(set.dim as u32).unwrap();
    out.write_u32::<LittleEndian>(set.len() as u32).unwrap();
    for i in 0..set.len() {
        out.write_u64::<LittleEndian>(set.ids[i]).unwrap();
        for &v in &set.values[i * set.dim..(i + 1) * set.dim] {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<DescriptorSet> {
    let mut c = Cursor::new(bytes);
    c.magic(VXPD_MAGIC)?;
    let version = c.u16()?;
    if version != VXPD_VERSION {
        return Err(DataError::VersionUnsupported(version));
    }
    let dim = c.u32()? as usize;
    let count = c.u32()? as usize;
    let mut set = DescriptorSet::new(dim);
    for _ in 0..count {
        set.ids.push(c.u64()?);
        set.values.extend(c.f32s(dim)?);
    }
    c.finish()?;
    Ok(set)
}

pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<()> {
    write_file(path, &encode_descriptors(set))
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    with_path(path, decode_descriptors(&bytes))
}

// ---------------------------------------------------------------------------
// VXPI retrieval index

pub const VXPI_MAGIC: [u8; 4] = *b"VXPI";
pub const VXPI_VERSION: u16 = 1;

/// Layout after the version: metric u8 (0 = L2, 1 = L1), u32 dim, u32
/// count, then per entry u64 id, 3 × f64 position, u8 timestamp flag, f64
/// timestamp (NaN when absent), dim × f64 descriptor.
pub fn encode_index(index: &RetrievalIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&VXPI_MAGIC);
    out.write_u16::<LittleEndian>(VXPI_VERSION).unwrap();
    out.write_u8(match index.metric() {
        Metric::L2 => 0,
        Metric::L1 => 1,
    })
    .unwrap();
    out.write_u32::<LittleEndian>(index.dim() as u32).unwrap();
    out.write_u32::<LittleEndian>(index.len() as u32).unwrap();
    for e in index.entries() {
        out.write_u64::<LittleEndian>(e.id).unwrap();
        for &p in &e.position {
            out.write_f64::<LittleEndian>(p).unwrap();
        }
        out.write_u8(e.timestamp.is_some() as u8).unwrap();
        out.write_f64::<LittleEndian>(e.timestamp.unwrap_or(f64::NAN)).unwrap();
        for &v in &e.descriptor {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_index(bytes: &[u8]) -> Result<RetrievalIndex> {
    let mut c = Cursor::new(bytes);
    c.magic(VXPI_MAGIC)?;
    let version = c.u16()?;
    if version != VXPI_VERSION {
        return Err(DataError::VersionUnsupported(version));
    }
    let metric = match c.u8()? {
        0 => Metric::L2,
        1 => Metric::L1,
        m => {
            return Err(DataError::MalformedFile {
                path: PathBuf::new(),
                reason: format!("unknown metric tag {m}"),
            })
        }
    };
    let dim = c.u32()? as usize;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = c.u64()?;
        let p = c.f64s(3)?;
        let has_ts = c.u8()? != 0;
        let ts = c.f64s(1)?[0];
        entries.push(IndexEntry {
            id,
            position: [p[0], p[1], p[2]],
            timestamp: has_ts.then_some(ts),
            descriptor: c.f64s(dim)?,
        });
    }
    c.finish()?;
    build_index(entries, metric).map_err(|e| DataError::MalformedFile {
        path: PathBuf::new(),
        reason: e.to_string(),
    })
}

pub fn write_index(path: &Path, index: &RetrievalIndex) -> Result<()> {
    write_file(path, &encode_index(index))
}

pub fn read_index(path: &Path) -> Result<RetrievalIndex> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    with_path(path, decode_index(&bytes))
}

// ---------------------------------------------------------------------------
// VXPC checkpoints

pub const VXPC_MAGIC: [u8; 4] = *b"VXPC";
pub const VXPC_VERSION: u16 = 1;

/// Layout after the version: u32 tensor count, then per tensor the name
/// (u16 length + UTF-8), rank u8, u32 extents, f64 values.
pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&VXPC_MAGIC);
    out.write_u16::<LittleEndian>(VXPC_VERSION).unwrap();
    out.write_u32::<LittleEndian>(params.len() as u32).unwrap();
    for (name, t) in params.iter() {
        out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u8(t.shape().len() as u8).unwrap();
        for &e in t.shape() {
            out.write_u32::<LittleEndian>(e as u32).unwrap();
        }
        for &v in t.data() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut c = Cursor::new(bytes);
    c.magic(VXPC_MAGIC)?;
    let version = c.u16()?;
    if version != VXPC_VERSION {
        return Err(DataError::VersionUnsupported(version));
    }
    let count = c.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let at = c.pos;
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| DataError::MalformedFile {
                path: PathBuf::new(),
                reason: format!("tensor name at byte {at}: {e}"),
            })?
            .to_string();
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or(DataError::MalformedFile {
            path: PathBuf::new(),
            reason: format!("tensor `{name}` extents overflow"),
        })?;
        let data = c.f64s(n)?;
        if params.contains(&name) {
            return Err(DataError::MalformedFile {
                path: PathBuf::new(),
                reason: format!("duplicate tensor `{name}` at byte {at}"),
            });
        }
        params.insert(name, Tensor::new(shape, data).expect("extents match value count"));
    }
    c.finish()?;
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    write_file(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    with_path(path, decode_checkpoint(&bytes))
}

// ---------------------------------------------------------------------------
// raw images: u32 width, u32 height, then height × width f32, row-major

pub fn encode_raw_image(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + image.data.len() * 4);
    out.write_u32::<LittleEndian>(image.width as u32).unwrap();
    out.write_u32::<LittleEndian>(image.height as u32).unwrap();
    for y in 0..image.height {
        for x in 0..image.width {
            out.write_f32::<LittleEndian>(image.at(x, y, 0) as f32).unwrap();
        }
    }
    out
}

pub fn decode_raw_image(bytes: &[u8]) -> Result<Image> {
    let mut c = Cursor::new(bytes);
    let w = c.u32()? as usize;
    let h = c.u32()? as usize;
    let vals = c.f32s(w.checked_mul(h).ok_or(DataError::TruncatedFile { offset: 8 })?)?;
    c.finish()?;
    let mut img = Image::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            *img.at_mut(x, y, 0) = vals[y * w + x] as f64;
        }
    }
    Ok(img)
}

pub fn write_raw_image(path: &Path, image: &Image) -> Result<()> {
    write_file(path, &encode_raw_image(image))
}

pub fn read_raw_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    with_path(path, decode_raw_image(&bytes))
}

// ---------------------------------------------------------------------------
// loss history

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn write_loss_history(path: &Path, records: &[LossRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut body = String::from("epoch,step,loss\n");
    for r in records {
        body.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut v = Vec::new();
    f.read_to_end(&mut v).map_err(io_err(path))?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn bin_sizes() {
        let bytes = encode_point_cloud_bin(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(bytes.len(), 32);
        assert_eq!(decode_point_cloud_bin(&bytes).unwrap().len(), 2);
        assert!(decode_point_cloud_bin(&[0u8; 17]).is_err());
    }

    #[test]
    fn kitti_calib_identity() {
        let text = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nP2: 1 0 0.5 0 0 1 0.5 0 0 0 1 0\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        let m = parse_kitti_calib_str(p(), text, (1, 1)).unwrap();
        assert_eq!(
            m.intrinsics,
            NormalizedIntrinsics {
                fx: 1.0,
                fy: 1.0,
                cx: 0.5,
                cy: 0.5
            }
        );
        assert_eq!(m.extrinsic, Matrix4::identity());
    }

    #[test]
    fn kitti_calib_normalizes_by_width() {
        let text = "P2: 500 0 500 0 0 400 200 0 0 0 1 0\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        let m = parse_kitti_calib_str(p(), text, (1000, 400)).unwrap();
        assert_eq!(m.intrinsics.fx, 0.5);
        assert_eq!(m.intrinsics.fy, 1.0);
    }

    #[test]
    fn kitti_calib_errors() {
        let e = parse_kitti_calib_str(p(), "P2: 1 0 0.5 0 0 1 0.5 0 0 0 1 0\n", (1, 1)).unwrap_err();
        assert!(matches!(e, DataError::MissingKey { ref key, .. } if key == "Tr"));
        let e = parse_kitti_calib_str(p(), "P2: 1 0 x\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n", (1, 1)).unwrap_err();
        assert!(matches!(e, DataError::ParseError { line: 1, .. }));
    }

    #[test]
    fn manifest_cases() {
        let ok = "id,timestamp_s,x_m,y_m,z_m,cloud_path,image_path,run_id\na,0,0,0,0,a.bin,a.img,r0\nb,1,5,0,0,b.bin,b.img,r0\n";
        assert_eq!(parse_manifest_str(p(), ok).unwrap().len(), 2);
        let dup = "id,timestamp_s,x_m,y_m,z_m,cloud_path,image_path,run_id\na,0,0,0,0,a.bin,a.img,r0\na,1,5,0,0,b.bin,b.img,r0\n";
        match parse_manifest_str(p(), dup).unwrap_err() {
            DataError::DuplicateId { id, line, .. } => {
                assert_eq!(id, "a");
                assert_eq!(line, 3);
            }
            e => panic!("{e}"),
        }
        let missing = "id,timestamp_s,x_m,y_m,cloud_path,image_path,run_id\n";
        assert!(matches!(parse_manifest_str(p(), missing), Err(DataError::HeaderMismatch { .. })));
        let bad = "id,timestamp_s,x_m,y_m,z_m,cloud_path,image_path,run_id\na,zero,0,0,0,a.bin,a.img,r0\n";
        assert!(matches!(parse_manifest_str(p(), bad), Err(DataError::ParseError { line: 2, .. })));
    }

    fn row(id: &str, x: f64) -> SampleManifestRow {
        SampleManifestRow {
            id: id.into(),
            timestamp_s: 0.0,
            position: [x, 0.0, 0.0],
            cloud_path: String::new(),
            image_path: String::new(),
            run_id: "r".into(),
        }
    }

    #[test]
    fn tuples_thresholds() {
        let t = build_tuples(&[row("a", 0.0), row("b", 5.0)], 10.0, 25.0).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].positives.contains("b"));
        let r = build_tuples(&[row("a", 0.0), row("b", 15.0)], 10.0, 25.0);
        assert!(matches!(r, Err(DataError::EmptyResult)));
        let t = build_tuples(&[row("a", 0.0), row("b", 5.0), row("c", 15.0)], 10.0, 25.0).unwrap();
        assert!(t[0].negatives.is_empty());
        assert!(!t[0].positives.contains("c"));
    }

    #[test]
    fn descriptor_sizes() {
        let empty = DescriptorSet::new(4);
        assert_eq!(encode_descriptors(&empty).len(), 14);
        let one = DescriptorSet::from_f64(4, &[(9, vec![1.0, 2.0, 3.0, 4.0])]).unwrap();
        let bytes = encode_descriptors(&one);
        assert_eq!(bytes.len(), 14 + 8 + 16);
        assert_eq!(decode_descriptors(&bytes).unwrap(), one);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_descriptors(&bad), Err(DataError::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_descriptors(&v2), Err(DataError::VersionUnsupported(2))));
        assert!(matches!(decode_descriptors(&bytes[..20]), Err(DataError::TruncatedFile { .. })));
    }

    #[test]
    fn index_round_trip() {
        let e = |id, d: Vec<f64>, ts| IndexEntry {
            id,
            descriptor: d,
            position: [id as f64, 1.0, 0.0],
            timestamp: ts,
        };
        let idx = build_index(vec![e(3, vec![1.0, 2.0], Some(4.5)), e(1, vec![0.0, -1.0], None)], Metric::L1).unwrap();
        let bytes = encode_index(&idx);
        assert_eq!(bytes.len(), 15 + 2 * (8 + 24 + 1 + 8 + 16));
        let back = decode_index(&bytes).unwrap();
        assert_eq!(back.content_hash(), idx.content_hash());
        assert_eq!(back.metric(), Metric::L1);
        assert_eq!(back.entries()[0].timestamp, None);
        assert!(matches!(decode_index(&bytes[..30]), Err(DataError::TruncatedFile { .. })));
    }
}
