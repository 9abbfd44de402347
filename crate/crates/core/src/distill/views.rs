use std::ops::Range;

use nalgebra::{Matrix4, Vector3};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use super::{DistillConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::harmonize::{augment_rotate, frame_aggregate, grid_sample, grid_sample_eval, scale_coords, scale_shift, voxel_of, GridConfig, GridMap};
use crate::modality::{unify_features, BlindingStage};
use crate::pcdata::{DomainProfile, PointCloud};
use crate::rng::{jitter_factor, symmetric};
use crate::serialize::{layout_from_cells, AxisOrder};

/// Sensor frames of a sample, each in its own coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub clouds: Vec<PointCloud>,
    pub poses: Vec<Matrix4<f64>>,
}

/// One training item: a cloud and, for scans, the frames it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub frames: Option<Frames>,
}

impl Sample {
    pub fn new(cloud: PointCloud) -> Self {
        Sample { cloud, frames: None }
    }

    pub fn with_frames(cloud: PointCloud, frames: Frames) -> Self {
        Sample {
            cloud,
            frames: Some(frames),
        }
    }

    /// The teacher's source cloud and the index range of every frame in it.
    pub fn sources(&self) -> Result<(PointCloud, Vec<Range<usize>>)> {
        match &self.frames {
            Some(f) => {
                let agg = frame_aggregate(&f.clouds, &f.poses)?;
                let mut start = 0;
                let ranges = f
                    .clouds
                    .iter()
                    .map(|c| {
                        let r = start..start + c.len();
                        start = r.end;
                        r
                    })
                    .collect();
                Ok((agg, ranges))
            }
            None => Ok((self.cloud.clone(), vec![0..self.cloud.len()])),
        }
    }
}

/// An augmented, grid-sampled view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub cloud: PointCloud,
    /// Index of every point's origin in the teacher's source cloud.
    pub source: Vec<usize>,
    /// Grid the view was sampled at; also its level-0 layout grid.
    pub grid: f64,
    /// Points whose features are replaced by the mask token.
    pub masked: Vec<bool>,
}

impl View {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn features(&self) -> Array2<f64> {
        unify_features(&self.cloud)
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    fn select(&self, idx: &[usize]) -> View {
        View {
            cloud: self.cloud.select(idx),
            source: idx.iter().map(|&i| self.source[i]).collect(),
            grid: self.grid,
            masked: idx.iter().map(|&i| self.masked[i]).collect(),
        }
    }
}

/// Teacher view, masked student view, local crops and the teacher match of
/// every student point.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub teacher: View,
    pub masked: View,
    pub locals: Vec<View>,
    /// Per student view (masked first, then locals), the matching teacher
    /// point of every student point.
    pub correspondences: Vec<Vec<Option<usize>>>,
}

impl ViewPair {
    pub fn students(&self) -> impl Iterator<Item = &View> {
        std::iter::once(&self.masked).chain(&self.locals)
    }

    /// Matched `(student, teacher)` pairs that enter the loss for student
    /// view `v`: masked points of the global view, every point of a crop.
    pub fn loss_pairs(&self, v: usize) -> Vec<(usize, usize)> {
        let view = if v == 0 { &self.masked } else { &self.locals[v - 1] };
        self.correspondences[v]
            .iter()
            .enumerate()
            .filter(|&(i, _)| v > 0 || view.masked[i])
            .filter_map(|(i, t)| t.map(|t| (i, t)))
            .collect()
    }
}

/// Scale by the strategy factor times a profile jitter, rotate, shift by at
/// most `max_shift_cells` cells, grid sample and cap the size.
fn augmented_view<R: Rng + ?Sized>(
    pc: &PointCloud,
    source: Vec<usize>,
    profile: &DomainProfile,
    grid_cfg: &GridConfig,
    max_shift_cells: f64,
    max_points: usize,
    rng: &mut R,
) -> Result<View> {
    let (factor, grid) = grid_cfg.train_scale(pc, rng)?;
    let scale = factor * jitter_factor(rng, profile.scale_jitter);
    let scaled = scale_coords(pc, scale, grid);
    let (rotated, _) = augment_rotate(&scaled, profile, rng)?;
    let bound = max_shift_cells * grid;
    let shift = Vector3::new(symmetric(rng, bound), symmetric(rng, bound), symmetric(rng, bound));
    let shifted = scale_shift(&rotated, 1.0, &shift);
    let (sampled, map) = grid_sample(&shifted, grid, rng)?;
    let mut view = View {
        source: map.representative_of_cell.iter().map(|&r| source[r]).collect(),
        masked: vec![false; sampled.len()],
        cloud: sampled,
        grid,
    };
    if view.len() > max_points {
        let mut keep = sample(rng, view.len(), max_points).into_vec();
        keep.sort_unstable();
        view = view.select(&keep);
    }
    Ok(view)
}

/// Masks `round(ρ · patches)` random patches of `patch_size` consecutive
/// points in Z-order, zeroing their color and normal channels.
pub(crate) fn mask_patches<R: Rng + ?Sized>(view: &mut View, cfg: &DistillConfig, rng: &mut R) -> Result<()> {
    let cells: Vec<[i64; 3]> = view.cloud.coords.iter().map(|p| voxel_of(*p, view.grid)).collect();
    let mut min = cells[0];
    for c in &cells {
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
        }
    }
    let rel: Vec<[i64; 3]> = cells
        .iter()
        .map(|c| [c[0] - min[0], c[1] - min[1], c[2] - min[2]])
        .collect();
    let layout = layout_from_cells(&rel, cfg.patch_size, AxisOrder::Xyz, 0)?;
    let n_patches = layout.windows.len();
    let k = ((cfg.mask_ratio * n_patches as f64).round() as usize).min(n_patches);
    for w in sample(rng, n_patches, k) {
        for &i in &layout.order[layout.windows[w].clone()] {
            view.masked[i] = true;
            view.cloud.clear_color(i);
            view.cloud.clear_normal(i);
        }
    }
    Ok(())
}

/// A ball around a random point of `view` with radius `local_fraction`
/// times the view's radius about its centroid.
pub(crate) fn ball_crop<R: Rng + ?Sized>(view: &View, cfg: &DistillConfig, rng: &mut R) -> Result<View> {
    let c = view.cloud.centroid();
    let radius = view
        .cloud
        .coords
        .iter()
        .map(|p| dist2(*p, c))
        .fold(0.0, f64::max)
        .sqrt()
        * cfg.local_fraction;
    let r2 = radius * radius;
    for _ in 0..cfg.crop_attempts {
        let center = view.cloud.coords[rng.random_range(0..view.len())];
        let members: Vec<usize> = (0..view.len())
            .filter(|&i| dist2(view.cloud.coords[i], center) <= r2)
            .collect();
        if members.len() >= cfg.min_crop_points {
            let mut crop = view.select(&members);
            crop.masked.fill(false);
            return Ok(crop);
        }
    }
    Err(Error::DegenerateCrop {
        min_points: cfg.min_crop_points,
        attempts: cfg.crop_attempts,
    })
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn match_teacher(teacher: &View, n_source: usize, student: &View) -> Vec<Option<usize>> {
    let mut of_source = vec![None; n_source];
    for (t, &s) in teacher.source.iter().enumerate() {
        of_source[s] = Some(t);
    }
    student.source.iter().map(|&s| of_source[s]).collect()
}

/// Builds the teacher view, the masked student view and the local crops of
/// one sample.
pub fn make_views<R: Rng + ?Sized>(sample_in: &Sample, cfg: &PretrainConfig, rng: &mut R) -> Result<ViewPair> {
    let (mut source, frames) = sample_in.sources()?;
    let profile = cfg.profile(source.domain);
    let stage = cfg.modality.stage;
    if stage == BlindingStage::AtLoading {
        source = cfg.modality.apply(&source, rng)?;
    }
    let n_source = source.len();
    let all: Vec<usize> = (0..n_source).collect();
    let teacher = augmented_view(&source, all, &profile, &cfg.grid, cfg.aug.max_shift_cells, cfg.max_points, rng)?;

    let frame = frames[rng.random_range(0..frames.len())].clone();
    let student_idx: Vec<usize> = frame.collect();
    let student_src = source.select(&student_idx);
    let mut global = augmented_view(&student_src, student_idx, &profile, &cfg.grid, cfg.aug.max_shift_cells, cfg.max_points, rng)?;

    let mut locals = Vec::with_capacity(cfg.distill.n_local);
    for _ in 0..cfg.distill.n_local {
        let mut crop = ball_crop(&global, &cfg.distill, rng)?;
        if stage == BlindingStage::AtLocalViews {
            crop.cloud = cfg.modality.apply(&crop.cloud, rng)?;
        }
        locals.push(crop);
    }
    if stage == BlindingStage::AtMaskedViews {
        global.cloud = cfg.modality.apply(&global.cloud, rng)?;
    }
    mask_patches(&mut global, &cfg.distill, rng)?;

    let correspondences = std::iter::once(&global)
        .chain(&locals)
        .map(|v| match_teacher(&teacher, n_source, v))
        .collect();
    Ok(ViewPair {
        teacher,
        masked: global,
        locals,
        correspondences,
    })
}

/// Deterministic evaluation view: strategy scale, no augmentation, the
/// minimum-index point of every cell.
pub fn eval_view(pc: &PointCloud, grid_cfg: &GridConfig) -> Result<(PointCloud, GridMap)> {
    let (factor, grid) = grid_cfg.eval_scale(pc)?;
    grid_sample_eval(&scale_coords(pc, factor, grid), grid)
}
