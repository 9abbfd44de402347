//! Granularity alignment, voxel grid sampling and domain-conditioned
//! geometric augmentation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::pcdata::{DomainProfile, PointCloud};
use crate::rng::{jitter_factor, symmetric};

/// Voxel index of a point at the given grid size.
#[inline]
pub fn voxel_of(p: [f64; 3], grid: f64) -> [i64; 3] {
    p.map(|v| (v / grid).floor() as i64)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// Multiplies coordinates by `factor` and records `grid` as the new native
/// granularity. Normals are unaffected by a positive isotropic scale.
pub fn scale_coords(pc: &PointCloud, factor: f64, grid: f64) -> PointCloud {
    let mut out = pc.clone();
    for p in &mut out.coords {
        *p = p.map(|v| v * factor);
    }
    out.native_grid = grid;
    out
}

/// Rescales `pc` so that its native granularity maps onto `canonical_grid`.
pub fn rescale_to_granularity(pc: &PointCloud, canonical_grid: f64) -> Result<PointCloud> {
    positive("canonical grid", canonical_grid)?;
    positive("native grid", pc.native_grid)?;
    Ok(scale_coords(pc, canonical_grid / pc.native_grid, canonical_grid))
}

/// Draws `(canonical / native) × u` with `u ~ U[1 - jitter, 1 + jitter]`.
pub fn sample_rescale_factor<R: Rng + ?Sized>(
    pc: &PointCloud,
    canonical_grid: f64,
    jitter_fraction: f64,
    rng: &mut R,
) -> Result<f64> {
    positive("canonical grid", canonical_grid)?;
    positive("native grid", pc.native_grid)?;
    if !(0.0..1.0).contains(&jitter_fraction) {
        return Err(Error::invalid("jitter fraction must lie in [0, 1)"));
    }
    Ok(canonical_grid / pc.native_grid * jitter_factor(rng, jitter_fraction))
}

/// Voxel membership produced by [`grid_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    /// Cell id of every source point.
    pub cell_of_point: Vec<usize>,
    /// Source index kept for each cell; output point `c` is
    /// `representative_of_cell[c]`.
    pub representative_of_cell: Vec<usize>,
    /// Source indices of each cell, ascending.
    pub members: Vec<Vec<usize>>,
    /// Integer voxel coordinates of each cell.
    pub cells: Vec<[i64; 3]>,
}

impl GridMap {
    /// Groups points by voxel. Cells are numbered in order of first occurrence.
    pub fn build(coords: &[[f64; 3]], grid: f64) -> Result<Self> {
        positive("grid", grid)?;
        let mut index: HashMap<[i64; 3], usize> = HashMap::with_capacity(coords.len());
        let mut cell_of_point = Vec::with_capacity(coords.len());
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut cells = Vec::new();
        for (i, p) in coords.iter().enumerate() {
            let key = voxel_of(*p, grid);
            let id = *index.entry(key).or_insert_with(|| {
                members.push(Vec::new());
                cells.push(key);
                members.len() - 1
            });
            members[id].push(i);
            cell_of_point.push(id);
        }
        let representative_of_cell = members.iter().map(|m| m[0]).collect();
        Ok(GridMap {
            cell_of_point,
            representative_of_cell,
            members,
            cells,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.members.len()
    }

    /// Partition as a sorted set of sorted member lists, for comparisons that
    /// ignore cell numbering.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut p = self.members.clone();
        p.sort();
        p
    }
}

/// Training-time grid sampling: one uniformly random member per voxel.
pub fn grid_sample<R: Rng + ?Sized>(
    pc: &PointCloud,
    grid: f64,
    rng: &mut R,
) -> Result<(PointCloud, GridMap)> {
    let mut map = GridMap::build(&pc.coords, grid)?;
    for (rep, members) in map.representative_of_cell.iter_mut().zip(&map.members) {
        *rep = members[rng.random_range(0..members.len())];
    }
    let mut out = pc.select(&map.representative_of_cell);
    out.native_grid = grid;
    Ok((out, map))
}

/// Evaluation-time grid sampling: the minimum-index member of every voxel.
pub fn grid_sample_eval(pc: &PointCloud, grid: f64) -> Result<(PointCloud, GridMap)> {
    let map = GridMap::build(&pc.coords, grid)?;
    let mut out = pc.select(&map.representative_of_cell);
    out.native_grid = grid;
    Ok((out, map))
}

/// Geometric transform applied to a view.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRecord {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub shift: Vector3<f64>,
    pub frame_count: usize,
}

impl AugmentRecord {
    pub fn identity() -> Self {
        AugmentRecord {
            rotation: Matrix3::identity(),
            scale: 1.0,
            shift: Vector3::zeros(),
            frame_count: 1,
        }
    }
}

/// `Rz(yaw) · Ry(pitch) · Rx(roll)`.
pub fn euler_rotation(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

fn mul3(m: &Matrix3<f64>, v: [f64; 3]) -> [f64; 3] {
    [
        m[(0, 0)] * v[0] + m[(0, 1)] * v[1] + m[(0, 2)] * v[2],
        m[(1, 0)] * v[0] + m[(1, 1)] * v[1] + m[(1, 2)] * v[2],
        m[(2, 0)] * v[0] + m[(2, 1)] * v[1] + m[(2, 2)] * v[2],
    ]
}

/// Applies `x ↦ R·x` to coordinates and normals.
pub fn rotate(pc: &PointCloud, rotation: &Matrix3<f64>) -> PointCloud {
    let mut out = pc.clone();
    for p in &mut out.coords {
        *p = mul3(rotation, *p);
    }
    for (n, &m) in out.normals.iter_mut().zip(&pc.mask) {
        if m & crate::pcdata::NORMAL_BIT != 0 {
            *n = mul3(rotation, *n);
        }
    }
    out
}

/// Random rotation drawn from the profile's yaw and roll/pitch ranges.
pub fn augment_rotate<R: Rng + ?Sized>(
    pc: &PointCloud,
    profile: &DomainProfile,
    rng: &mut R,
) -> Result<(PointCloud, AugmentRecord)> {
    if profile.domain != pc.domain {
        return Err(Error::invalid(format!(
            "profile for {} applied to a {} cloud",
            profile.domain, pc.domain
        )));
    }
    let roll = symmetric(rng, profile.roll_pitch_range);
    let pitch = symmetric(rng, profile.roll_pitch_range);
    let yaw = symmetric(rng, profile.yaw_range);
    let rotation = euler_rotation(roll, pitch, yaw);
    let record = AugmentRecord {
        rotation,
        ..AugmentRecord::identity()
    };
    Ok((rotate(pc, &rotation), record))
}

/// `x ↦ s·x + t` with `s ~ U[1 ± scale_jitter]` and each shift component
/// drawn from `[-max_shift, max_shift]`.
pub fn augment_scale_shift<R: Rng + ?Sized>(
    pc: &PointCloud,
    profile: &DomainProfile,
    rng: &mut R,
) -> (PointCloud, AugmentRecord) {
    let scale = jitter_factor(rng, profile.scale_jitter);
    let shift = Vector3::new(
        symmetric(rng, profile.max_shift),
        symmetric(rng, profile.max_shift),
        symmetric(rng, profile.max_shift),
    );
    (
        scale_shift(pc, scale, &shift),
        AugmentRecord {
            scale,
            shift,
            ..AugmentRecord::identity()
        },
    )
}

pub fn scale_shift(pc: &PointCloud, scale: f64, shift: &Vector3<f64>) -> PointCloud {
    let mut out = pc.clone();
    for p in &mut out.coords {
        *p = [
            scale * p[0] + shift[0],
            scale * p[1] + shift[1],
            scale * p[2] + shift[2],
        ];
    }
    out
}

/// Tolerance on the orthonormality of pose rotation blocks.
pub const RIGID_TOLERANCE: f64 = 1e-6;

pub fn is_rigid(pose: &Matrix4<f64>) -> bool {
    let r: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into();
    let ortho = (r * r.transpose() - Matrix3::identity()).abs().max() <= RIGID_TOLERANCE;
    let proper = (r.determinant() - 1.0).abs() <= RIGID_TOLERANCE;
    let bottom = pose[(3, 0)] == 0.0 && pose[(3, 1)] == 0.0 && pose[(3, 2)] == 0.0 && pose[(3, 3)] == 1.0;
    ortho && proper && bottom
}

/// Transforms every frame by its pose and concatenates the results.
pub fn frame_aggregate(frames: &[PointCloud], poses: &[Matrix4<f64>]) -> Result<PointCloud> {
    if frames.is_empty() || frames.len() != poses.len() {
        return Err(Error::invalid(format!(
            "{} frames with {} poses",
            frames.len(),
            poses.len()
        )));
    }
    let first = &frames[0];
    let labelled = first.labels.is_some();
    let mut out = PointCloud::new(Vec::new(), first.domain, first.native_grid);
    out.labels = labelled.then(Vec::new);
    for (k, (frame, pose)) in frames.iter().zip(poses).enumerate() {
        if !is_rigid(pose) {
            return Err(Error::invalid(format!("pose {k} is not rigid")));
        }
        if frame.domain != first.domain {
            return Err(Error::invalid("frames from different domains"));
        }
        if frame.labels.is_some() != labelled {
            return Err(Error::invalid("frames disagree on label presence"));
        }
        let r: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into();
        let t = [pose[(0, 3)], pose[(1, 3)], pose[(2, 3)]];
        let moved = rotate(frame, &r);
        out.coords.extend(moved.coords.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]));
        out.colors.extend_from_slice(&moved.colors);
        out.normals.extend_from_slice(&moved.normals);
        out.mask.extend_from_slice(&moved.mask);
        if let (Some(dst), Some(src)) = (out.labels.as_mut(), moved.labels.as_ref()) {
            dst.extend_from_slice(src);
        }
    }
    Ok(out)
}

/// How views are brought to a common granularity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GridStrategy {
    /// Each domain keeps its own native grid and scale.
    Origin,
    /// Native grid multiplied by a random factor in `1 ± jitter`.
    Jitter,
    /// Coordinates rescaled so the native grid maps onto one global grid.
    #[default]
    FixedRescale,
}

impl GridStrategy {
    pub const ALL: [GridStrategy; 3] = [GridStrategy::Origin, GridStrategy::Jitter, GridStrategy::FixedRescale];

    pub fn as_str(self) -> &'static str {
        match self {
            GridStrategy::Origin => "origin",
            GridStrategy::Jitter => "jitter",
            GridStrategy::FixedRescale => "fixed_rescale",
        }
    }
}

impl fmt::Display for GridStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GridStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "origin" => Ok(GridStrategy::Origin),
            "jitter" => Ok(GridStrategy::Jitter),
            "fixed_rescale" => Ok(GridStrategy::FixedRescale),
            other => Err(Error::config(format!("unknown grid strategy `{other}`"))),
        }
    }
}

/// `grid.*` configuration keys.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub strategy: GridStrategy,
    /// Global grid size used by [`GridStrategy::FixedRescale`].
    pub size: f64,
    /// Half-width of the grid multiplier used by [`GridStrategy::Jitter`].
    pub jitter: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            strategy: GridStrategy::FixedRescale,
            size: 0.02,
            jitter: 0.2,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        positive("grid.size", self.size)?;
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config("grid.jitter must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Coordinate factor and sampling grid for a training view.
    pub fn train_scale<R: Rng + ?Sized>(&self, pc: &PointCloud, rng: &mut R) -> Result<(f64, f64)> {
        positive("native grid", pc.native_grid)?;
        Ok(match self.strategy {
            GridStrategy::Origin => (1.0, pc.native_grid),
            GridStrategy::Jitter => (1.0, pc.native_grid * jitter_factor(rng, self.jitter)),
            GridStrategy::FixedRescale => (self.size / pc.native_grid, self.size),
        })
    }

    /// Deterministic factor and grid for evaluation.
    pub fn eval_scale(&self, pc: &PointCloud) -> Result<(f64, f64)> {
        positive("native grid", pc.native_grid)?;
        Ok(match self.strategy {
            GridStrategy::Origin | GridStrategy::Jitter => (1.0, pc.native_grid),
            GridStrategy::FixedRescale => (self.size / pc.native_grid, self.size),
        })
    }
}
