//! Synthetic multi-domain data, frozen-feature probes and the ablation
//! harness built on them.

mod ablate;
mod gen;
mod probe;

pub use ablate::{ablate, Ablation, AblationReport, ReportRow};
pub use gen::{
    estimate_ring_normals, gen_cloud, gen_indoor, gen_object, gen_object_prepose, gen_outdoor, gen_sample, normalize_unit_ball,
    random_rotation, ring_radii, sample_parts, IndoorScene, PreposeObject, Primitive, AZIMUTH_STEP_DEG, FLOOR, FURNITURE, GROUND,
    RING_COUNT, SENSOR_HEIGHT, VEHICLE, WALL,
};
pub use probe::{
    featurize_export, gravity_probe, gravity_score, linear_probe, pca, pca_colors, segmentation_metrics, ProbeConfig, ProbeReport,
};

use ndarray::Array2;
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::distill::{eval_view, Sample};
use crate::encoder::{Encoder, Params};
use crate::error::{Error, Result};
use crate::harmonize::GridConfig;
use crate::modality::{drop_channels, unify_features};
use crate::pcdata::{Domain, PointCloud};
use crate::rng::{derive_seed, rng_for, PfRng};

/// `data.*` configuration keys other than the view budget.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Seeds data generation, initialization, views and probe splits.
    pub seed: u64,
    /// Ablations average over this many consecutive seeds from `seed`.
    pub repeats: usize,
    pub train_per_domain: usize,
    pub eval_per_domain: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            repeats: 3,
            train_per_domain: 20,
            eval_per_domain: 6,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.train_per_domain == 0 || self.eval_per_domain == 0 {
            return Err(Error::config("data.repeats, data.train_per_domain and data.eval_per_domain must be positive"));
        }
        Ok(())
    }
}

const TRAIN_STREAM: u64 = 0x7a1;
const EVAL_STREAM: u64 = 0xe7a;

/// Generator seed of item `k` of `domain` in the training or evaluation
/// split of run `seed`.
pub fn item_seed(seed: u64, domain: Domain, k: usize, eval: bool) -> u64 {
    let stream = if eval { EVAL_STREAM } else { TRAIN_STREAM };
    derive_seed(&[seed, stream, domain.to_u8() as u64, k as u64])
}

/// Training mixture: `per_domain` samples of every domain, domain-major.
pub fn train_set(per_domain: usize, seed: u64) -> Vec<Sample> {
    let jobs: Vec<(Domain, usize)> = Domain::ALL.iter().flat_map(|&d| (0..per_domain).map(move |k| (d, k))).collect();
    jobs.par_iter().map(|&(d, k)| gen_sample(d, item_seed(seed, d, k, false))).collect()
}

/// Held-out labeled clouds, domain-major.
pub fn eval_set(per_domain: usize, seed: u64) -> Vec<PointCloud> {
    let jobs: Vec<(Domain, usize)> = Domain::ALL.iter().flat_map(|&d| (0..per_domain).map(move |k| (d, k))).collect();
    jobs.par_iter().map(|&(d, k)| gen_cloud(d, item_seed(seed, d, k, true))).collect()
}

/// Channels forced off at evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Condition {
    pub drop_color: bool,
    pub drop_normal: bool,
}

impl Condition {
    pub const FULL: Condition = Condition {
        drop_color: false,
        drop_normal: false,
    };

    pub fn name(self) -> &'static str {
        match (self.drop_color, self.drop_normal) {
            (false, false) => "full",
            (true, false) => "drop_color",
            (false, true) => "drop_normal",
            (true, true) => "drop_color_normal",
        }
    }
}

/// Frozen features of one cloud's evaluation view, capped at `max_points`
/// points by a seeded subset.
pub struct Featurized {
    pub view: PointCloud,
    pub features: Array2<f64>,
    /// Index of every view point in the input cloud.
    pub source: Vec<usize>,
}

pub fn featurize(
    enc: &Encoder,
    params: &Params,
    pc: &PointCloud,
    grid: &GridConfig,
    max_points: usize,
    cap_seed: u64,
    cond: Condition,
) -> Result<Featurized> {
    let pc = drop_channels(pc, cond.drop_color, cond.drop_normal);
    let (mut view, map) = eval_view(&pc, grid)?;
    let mut source = map.representative_of_cell.clone();
    if view.len() > max_points {
        let mut keep = sample(&mut rng_for(&[cap_seed, 0xca9]), view.len(), max_points).into_vec();
        keep.sort_unstable();
        view = view.select(&keep);
        source = keep.iter().map(|&i| source[i]).collect();
    }
    let geom = enc.geometry(&view.coords, view.native_grid, None::<&mut PfRng>)?;
    let features = enc.features(params, unify_features(&view).view(), &geom)?;
    Ok(Featurized { view, features, source })
}

/// Probe of every domain present in `clouds`, plus the object gravity score.
pub struct Evaluation {
    pub domains: Vec<(Domain, ProbeReport)>,
    pub gravity: Option<f64>,
}

/// Featurizes every cloud and runs one linear probe per domain.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    enc: &Encoder,
    params: &Params,
    clouds: &[PointCloud],
    grid: &GridConfig,
    probe: &ProbeConfig,
    seed: u64,
    cond: Condition,
) -> Result<Evaluation> {
    let feats: Vec<Featurized> = clouds
        .par_iter()
        .enumerate()
        .map(|(k, pc)| featurize(enc, params, pc, grid, probe.max_points, derive_seed(&[seed, k as u64]), cond))
        .collect::<Result<_>>()?;
    let mut domains = Vec::new();
    for d in Domain::ALL {
        let items: Vec<&Featurized> = feats.iter().zip(clouds).filter(|(_, c)| c.domain == d).map(|(f, _)| f).collect();
        if items.is_empty() {
            continue;
        }
        let views: Vec<_> = items.iter().map(|f| f.features.view()).collect();
        let x = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let mut labels = Vec::with_capacity(x.nrows());
        for f in &items {
            let l = f
                .view
                .labels
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("{d} cloud without labels cannot be probed")))?;
            labels.extend_from_slice(l);
        }
        domains.push((d, linear_probe(x.view(), &labels, seed, probe)?));
    }
    let objects: Vec<(Array2<f64>, Vec<[f64; 3]>)> = feats
        .iter()
        .zip(clouds)
        .filter(|(_, c)| c.domain == Domain::Object)
        .map(|(f, _)| (f.features.clone(), f.view.coords.clone()))
        .collect();
    let gravity = (!objects.is_empty()).then(|| gravity_probe(&objects));
    Ok(Evaluation { domains, gravity })
}

#[cfg(test)]
mod tests;
