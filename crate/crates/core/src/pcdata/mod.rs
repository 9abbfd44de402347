//! Point-cloud representation, validation and file IO.
//!
//! A [`PointCloud`] always carries coordinate, color and normal arrays of the
//! same length. Whether the color or normal row of a point is meaningful is
//! recorded in its modality mask; a cleared bit means the row is exactly zero.

mod native;
mod ply;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

pub use native::{read_native, read_native_from, write_native, write_native_to, NATIVE_MAGIC, NATIVE_VERSION};
pub use ply::{read_ply, read_ply_from, write_ply, write_ply_to};

use crate::error::{Error, Result};

/// Mask bit: the color row of this point is present.
pub const COLOR_BIT: u8 = 0b01;
/// Mask bit: the normal row of this point is present.
pub const NORMAL_BIT: u8 = 0b10;

/// Tolerance on the norm of a present normal.
pub const NORMAL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Object,
    Indoor,
    Outdoor,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Object, Domain::Indoor, Domain::Outdoor];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Object => "object",
            Domain::Indoor => "indoor",
            Domain::Outdoor => "outdoor",
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            Domain::Object => 0,
            Domain::Indoor => 1,
            Domain::Outdoor => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Domain::Object),
            1 => Some(Domain::Indoor),
            2 => Some(Domain::Outdoor),
            _ => None,
        }
    }

    /// Scenes are gravity aligned; objects are not.
    pub fn is_scene(self) -> bool {
        !matches!(self, Domain::Object)
    }

    /// Default discretization granularity of the domain.
    pub fn default_native_grid(self) -> f64 {
        match self {
            Domain::Object => 0.01,
            Domain::Indoor => 0.02,
            Domain::Outdoor => 0.05,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Domain::Object),
            "indoor" => Ok(Domain::Indoor),
            "outdoor" => Ok(Domain::Outdoor),
            other => Err(Error::invalid(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    /// Colors in [0, 1]; zero rows where the color bit is clear.
    pub colors: Vec<[f64; 3]>,
    /// Unit normals; zero rows where the normal bit is clear.
    pub normals: Vec<[f64; 3]>,
    pub mask: Vec<u8>,
    pub labels: Option<Vec<i32>>,
    pub domain: Domain,
    /// Desired discretization granularity for this cloud, in its own units.
    pub native_grid: f64,
}

impl PointCloud {
    /// Coordinates only: both modality bits clear everywhere.
    pub fn new(coords: Vec<[f64; 3]>, domain: Domain, native_grid: f64) -> Self {
        let n = coords.len();
        PointCloud {
            coords,
            colors: vec![[0.0; 3]; n],
            normals: vec![[0.0; 3]; n],
            mask: vec![0; n],
            labels: None,
            domain,
            native_grid,
        }
    }

    /// Sets every color row and the color bit of every point.
    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Self {
        assert_eq!(colors.len(), self.len(), "color count");
        self.colors = colors;
        self.mask.iter_mut().for_each(|m| *m |= COLOR_BIT);
        self
    }

    /// Sets every normal row and the normal bit of every point.
    pub fn with_normals(mut self, normals: Vec<[f64; 3]>) -> Self {
        assert_eq!(normals.len(), self.len(), "normal count");
        self.normals = normals;
        self.mask.iter_mut().for_each(|m| *m |= NORMAL_BIT);
        self
    }

    pub fn with_labels(mut self, labels: Vec<i32>) -> Self {
        assert_eq!(labels.len(), self.len(), "label count");
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn has_color(&self, i: usize) -> bool {
        self.mask[i] & COLOR_BIT != 0
    }

    pub fn has_normal(&self, i: usize) -> bool {
        self.mask[i] & NORMAL_BIT != 0
    }

    pub fn any_color(&self) -> bool {
        self.mask.iter().any(|m| m & COLOR_BIT != 0)
    }

    pub fn any_normal(&self) -> bool {
        self.mask.iter().any(|m| m & NORMAL_BIT != 0)
    }

    /// New cloud holding the given points, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            mask: indices.iter().map(|&i| self.mask[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
            native_grid: self.native_grid,
        }
    }

    /// Clears the color channel of point `i`.
    pub fn clear_color(&mut self, i: usize) {
        self.colors[i] = [0.0; 3];
        self.mask[i] &= !COLOR_BIT;
    }

    /// Clears the normal channel of point `i`.
    pub fn clear_normal(&mut self, i: usize) {
        self.normals[i] = [0.0; 3];
        self.mask[i] &= !NORMAL_BIT;
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.coords {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.len().max(1) as f64;
        c.map(|v| v / n)
    }

    /// Returns an error naming the first invariant violation, if any.
    pub fn check(&self) -> Result<()> {
        match validate(self).into_iter().next() {
            None => Ok(()),
            Some(v) if v.kind == ViolationKind::Empty => Err(Error::EmptyCloud),
            Some(v) => Err(Error::invalid(v.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    Empty,
    /// Channel arrays do not all have the point count.
    LengthMismatch,
    NonPositiveGrid,
    NonFiniteCoord,
    NonFiniteChannel,
    NormalNotUnit { norm: f64 },
    ColorOutOfRange,
    /// Modality bit clear but the channel row is not zero.
    ClearedChannelNonZero { channel: &'static str },
    UnknownMaskBits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// Offending point, or `None` for cloud-level problems.
    pub index: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "point {i}: {:?}", self.kind),
            None => write!(f, "{:?}", self.kind),
        }
    }
}

/// Lists every invariant violation of `pc`. Empty iff the cloud is valid.
pub fn validate(pc: &PointCloud) -> Vec<Violation> {
    let mut out = Vec::new();
    let cloud = |kind| Violation { index: None, kind };
    let n = pc.coords.len();
    if n == 0 {
        out.push(cloud(ViolationKind::Empty));
    }
    let lengths_ok = pc.colors.len() == n
        && pc.normals.len() == n
        && pc.mask.len() == n
        && pc.labels.as_ref().is_none_or(|l| l.len() == n);
    if !lengths_ok {
        out.push(cloud(ViolationKind::LengthMismatch));
        return out;
    }
    if !(pc.native_grid > 0.0 && pc.native_grid.is_finite()) {
        out.push(cloud(ViolationKind::NonPositiveGrid));
    }
    for i in 0..n {
        let at = |kind| Violation {
            index: Some(i),
            kind,
        };
        let m = pc.mask[i];
        if pc.coords[i].iter().any(|v| !v.is_finite()) {
            out.push(at(ViolationKind::NonFiniteCoord));
        }
        if pc.colors[i].iter().chain(&pc.normals[i]).any(|v| !v.is_finite()) {
            out.push(at(ViolationKind::NonFiniteChannel));
            continue;
        }
        if m & !(COLOR_BIT | NORMAL_BIT) != 0 {
            out.push(at(ViolationKind::UnknownMaskBits));
        }
        if m & COLOR_BIT != 0 {
            if pc.colors[i].iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                out.push(at(ViolationKind::ColorOutOfRange));
            }
        } else if pc.colors[i] != [0.0; 3] {
            out.push(at(ViolationKind::ClearedChannelNonZero { channel: "color" }));
        }
        if m & NORMAL_BIT != 0 {
            let norm = norm3(pc.normals[i]);
            if (norm - 1.0).abs() > NORMAL_TOLERANCE {
                out.push(at(ViolationKind::NormalNotUnit { norm }));
            }
        } else if pc.normals[i] != [0.0; 3] {
            out.push(at(ViolationKind::ClearedChannelNonZero { channel: "normal" }));
        }
    }
    out
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Per-domain augmentation and granularity policy.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainProfile {
    pub domain: Domain,
    /// Half-width of the yaw (z rotation) range, radians.
    pub yaw_range: f64,
    /// Half-width of the roll and pitch (x, y rotation) ranges, radians.
    pub roll_pitch_range: f64,
    /// Scale factors are drawn from `1 ± scale_jitter`.
    pub scale_jitter: f64,
    pub color_drop_prob: f64,
    pub normal_drop_prob: f64,
    pub per_point_drop_prob: f64,
    pub native_grid: f64,
    /// Bound on each shift component, in the cloud's coordinate units.
    pub max_shift: f64,
}

impl DomainProfile {
    /// Full yaw with mild roll/pitch for scenes, independent full rotations
    /// about all three axes for objects.
    pub fn default_for(domain: Domain) -> Self {
        let (roll_pitch_range, scale_jitter) = if domain.is_scene() {
            (PI / 64.0, 0.10)
        } else {
            (PI, 0.50)
        };
        DomainProfile {
            domain,
            yaw_range: PI,
            roll_pitch_range,
            scale_jitter,
            color_drop_prob: 0.3,
            normal_drop_prob: 0.3,
            per_point_drop_prob: 0.2,
            native_grid: domain.default_native_grid(),
            max_shift: 2.0 * 0.02,
        }
    }

    /// No rotation, scaling, shift or blinding.
    pub fn identity(domain: Domain) -> Self {
        DomainProfile {
            domain,
            yaw_range: 0.0,
            roll_pitch_range: 0.0,
            scale_jitter: 0.0,
            color_drop_prob: 0.0,
            normal_drop_prob: 0.0,
            per_point_drop_prob: 0.0,
            native_grid: domain.default_native_grid(),
            max_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.color_drop_prob,
            self.normal_drop_prob,
            self.per_point_drop_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("profile probabilities must lie in [0, 1]"));
        }
        let ranges = [
            self.yaw_range,
            self.roll_pitch_range,
            self.scale_jitter,
            self.max_shift,
        ];
        if ranges.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::invalid("profile ranges must be nonnegative"));
        }
        if self.scale_jitter >= 1.0 {
            return Err(Error::invalid("scale jitter must be below 1"));
        }
        if !(self.native_grid > 0.0) {
            return Err(Error::invalid("native grid must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_cloud() -> PointCloud {
        PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]], Domain::Indoor, 0.02)
            .with_colors(vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5]])
            .with_normals(vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
            .with_labels(vec![0, 1])
    }

    #[test]
    fn valid_cloud_has_empty_report() {
        assert!(validate(&full_cloud()).is_empty());
        assert!(validate(&PointCloud::new(vec![[1.0; 3]], Domain::Object, 0.01)).is_empty());
    }

    #[test]
    fn short_normal_is_reported_at_its_index() {
        let mut pc = full_cloud();
        pc.normals[1] = [0.5, 0.0, 0.0];
        let report = validate(&pc);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].index, Some(1));
        assert!(matches!(report[0].kind, ViolationKind::NormalNotUnit { .. }));
    }

    #[test]
    fn cleared_color_bit_with_nonzero_row() {
        let mut pc = full_cloud();
        pc.mask[0] &= !COLOR_BIT;
        let report = validate(&pc);
        assert_eq!(
            report,
            vec![Violation {
                index: Some(0),
                kind: ViolationKind::ClearedChannelNonZero { channel: "color" }
            }]
        );
    }

    #[test]
    fn empty_and_bad_grid() {
        let pc = PointCloud::new(vec![], Domain::Object, 0.0);
        let kinds: Vec<_> = validate(&pc).into_iter().map(|v| v.kind).collect();
        assert_eq!(kinds, vec![ViolationKind::Empty, ViolationKind::NonPositiveGrid]);
        assert!(matches!(pc.check(), Err(Error::EmptyCloud)));
    }

    #[test]
    fn nonfinite_coordinate() {
        let mut pc = full_cloud();
        pc.coords[1][2] = f64::NAN;
        assert_eq!(validate(&pc)[0].kind, ViolationKind::NonFiniteCoord);
    }

    #[test]
    fn select_keeps_channels_together() {
        let pc = full_cloud().select(&[1, 1, 0]);
        assert_eq!(pc.len(), 3);
        assert_eq!(pc.labels, Some(vec![1, 1, 0]));
        assert_eq!(pc.colors[2], [0.1, 0.2, 0.3]);
        assert!(validate(&pc).is_empty());
    }

    #[test]
    fn domain_names_roundtrip() {
        for d in Domain::ALL {
            assert_eq!(d.as_str().parse::<Domain>().unwrap(), d);
            assert_eq!(Domain::from_u8(d.to_u8()), Some(d));
        }
        assert!("lidar".parse::<Domain>().is_err());
    }

    #[test]
    fn default_profiles() {
        let scene = DomainProfile::default_for(Domain::Indoor);
        assert_eq!(scene.yaw_range, PI);
        assert_eq!(scene.roll_pitch_range, PI / 64.0);
        assert_eq!(scene.scale_jitter, 0.10);
        let object = DomainProfile::default_for(Domain::Object);
        assert_eq!(object.roll_pitch_range, PI);
        assert_eq!(object.scale_jitter, 0.50);
        for d in Domain::ALL {
            DomainProfile::default_for(d).validate().unwrap();
        }
        let mut bad = scene.clone();
        bad.color_drop_prob = 1.5;
        assert!(bad.validate().is_err());
    }
}
