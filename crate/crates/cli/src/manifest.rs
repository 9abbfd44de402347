//! The CSV index written by `synth` and read by `pretrain` and `probe`.
//!
//! One row per cloud with header `path,domain,seed,frames,poses`. Paths are
//! relative to the manifest's directory. Indoor rows list their frame files
//! separated by `;` and name a pose file; other rows leave both empty. Pose
//! files hold one row-major 4x4 matrix per frame.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use pointfound::distill::{Frames, Sample};
use pointfound::pcdata::{read_native, Domain};
use pointfound::{Error, Result};

pub const HEADER: &str = "path,domain,seed,frames,poses";
pub const POSES_HEADER: &str = "frame,m00,m01,m02,m03,m10,m11,m12,m13,m20,m21,m22,m23,m30,m31,m32,m33";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: String,
    pub domain: Domain,
    pub seed: u64,
    pub frames: Vec<String>,
    pub poses: Option<String>,
}

impl Entry {
    fn record(&self) -> Result<[String; 5]> {
        if let Some(f) = self.frames.iter().find(|f| f.contains(';')) {
            return Err(Error::InvalidArgument(format!("frame path `{f}` cannot contain `;`")));
        }
        Ok([
            self.path.clone(),
            self.domain.to_string(),
            self.seed.to_string(),
            self.frames.join(";"),
            self.poses.clone().unwrap_or_default(),
        ])
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

fn to_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn render(entries: &[Entry]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER.split(',')).map_err(csv_error)?;
    for e in entries {
        w.write_record(e.record()?).map_err(csv_error)?;
    }
    to_string(w)
}

fn bad(line: u64, msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("manifest line {line}: {msg}"))
}

fn reader<'a>(text: &'a str, header: &str) -> Result<csv::Reader<&'a [u8]>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let found = r.headers().map_err(csv_error)?;
    if !found.iter().eq(header.split(',')) {
        return Err(bad(1, format!("expected header `{header}`")));
    }
    Ok(r)
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for rec in reader(text, HEADER)?.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let domain = rec[1].parse().map_err(|e| bad(line, e))?;
        let seed = rec[2].parse().map_err(|e| bad(line, e))?;
        let frames = if rec[3].is_empty() { Vec::new() } else { rec[3].split(';').map(str::to_string).collect() };
        let poses = (!rec[4].is_empty()).then(|| rec[4].to_string());
        if frames.is_empty() != poses.is_none() {
            return Err(bad(line, "frames and poses must be given together"));
        }
        out.push(Entry {
            path: rec[0].to_string(),
            domain,
            seed,
            frames,
            poses,
        });
    }
    Ok(out)
}

pub fn render_poses(poses: &[Matrix4<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(POSES_HEADER.split(',')).map_err(csv_error)?;
    for (j, m) in poses.iter().enumerate() {
        let row = std::iter::once(j.to_string()).chain((0..16).map(|k| format!("{:?}", m[(k / 4, k % 4)])));
        w.write_record(row).map_err(csv_error)?;
    }
    to_string(w)
}

pub fn parse_poses(text: &str) -> Result<Vec<Matrix4<f64>>> {
    reader(text, POSES_HEADER)?
        .records()
        .map(|rec| {
            let rec = rec.map_err(csv_error)?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("pose row {rec:?}: {e}")))?;
            Ok(Matrix4::from_fn(|r, c| vals[r * 4 + c]))
        })
        .collect()
}

/// Reads a manifest and resolves its paths against the manifest's directory.
pub fn load(path: &Path) -> Result<(PathBuf, Vec<Entry>)> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, parse(&fs::read_to_string(path)?)?))
}

pub fn load_sample(dir: &Path, e: &Entry) -> Result<Sample> {
    let cloud = read_native(dir.join(&e.path))?;
    check_domain(e, cloud.domain)?;
    let Some(poses) = &e.poses else {
        return Ok(Sample::new(cloud));
    };
    let clouds = e.frames.iter().map(|f| read_native(dir.join(f))).collect::<Result<Vec<_>>>()?;
    let poses = parse_poses(&fs::read_to_string(dir.join(poses))?)?;
    if poses.len() != clouds.len() {
        return Err(Error::InvalidArgument(format!("{}: {} frames but {} poses", e.path, clouds.len(), poses.len())));
    }
    Ok(Sample::with_frames(cloud, Frames { clouds, poses }))
}

pub fn check_domain(e: &Entry, found: Domain) -> Result<()> {
    if found != e.domain {
        return Err(Error::InvalidArgument(format!("{} holds a {found} cloud, manifest says {}", e.path, e.domain)));
    }
    Ok(())
}
