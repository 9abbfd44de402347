//! Unified modality interface and causal modality blinding.
//!
//! Every cloud is presented to the encoder as `[coords | colors | normals]`
//! with zeros for missing channels. Blinding removes optional channels at
//! random, either for a whole sample or point by point.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pcdata::{PointCloud, COLOR_BIT, NORMAL_BIT};

/// Width of the unified feature row.
pub const UNIFIED_WIDTH: usize = 9;

pub fn unify_features(pc: &PointCloud) -> Array2<f64> {
    let mut out = Array2::zeros((pc.len(), UNIFIED_WIDTH));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let m = pc.mask[i];
        for a in 0..3 {
            row[a] = pc.coords[i][a];
            if m & COLOR_BIT != 0 {
                row[3 + a] = pc.colors[i][a];
            }
            if m & NORMAL_BIT != 0 {
                row[6 + a] = pc.normals[i][a];
            }
        }
    }
    out
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// Drops the whole color channel with probability `color_p` and,
/// independently, the whole normal channel with probability `normal_p`.
pub fn blind_per_sample<R: Rng + ?Sized>(
    pc: &PointCloud,
    color_p: f64,
    normal_p: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    check_prob("color drop probability", color_p)?;
    check_prob("normal drop probability", normal_p)?;
    let drop_color = rng.random::<f64>() < color_p;
    let drop_normal = rng.random::<f64>() < normal_p;
    Ok(drop_channels(pc, drop_color, drop_normal))
}

/// Clears the selected channels on every point.
pub fn drop_channels(pc: &PointCloud, color: bool, normal: bool) -> PointCloud {
    let mut out = pc.clone();
    for i in 0..out.len() {
        if color {
            out.clear_color(i);
        }
        if normal {
            out.clear_normal(i);
        }
    }
    out
}

/// Independently clears each present modality of each point with
/// probability `rate`.
pub fn blind_per_point<R: Rng + ?Sized>(pc: &PointCloud, rate: f64, rng: &mut R) -> Result<PointCloud> {
    check_prob("per-point drop rate", rate)?;
    let mut out = pc.clone();
    for i in 0..out.len() {
        if out.has_color(i) && rng.random::<f64>() < rate {
            out.clear_color(i);
        }
        if out.has_normal(i) && rng.random::<f64>() < rate {
            out.clear_normal(i);
        }
    }
    Ok(out)
}

/// Where the trainer applies blinding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlindingStage {
    /// Once per sample before any view is built; teacher and students all
    /// see the blinded cloud.
    #[default]
    AtLoading,
    /// Only on the student's masked global view.
    AtMaskedViews,
    /// Only on the student's local crops.
    AtLocalViews,
    Off,
}

impl BlindingStage {
    pub fn as_str(self) -> &'static str {
        match self {
            BlindingStage::AtLoading => "loading",
            BlindingStage::AtMaskedViews => "masked",
            BlindingStage::AtLocalViews => "local",
            BlindingStage::Off => "off",
        }
    }
}

impl fmt::Display for BlindingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlindingStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loading" | "at_loading" => Ok(BlindingStage::AtLoading),
            "masked" | "at_masked_views" => Ok(BlindingStage::AtMaskedViews),
            "local" | "at_local_views" => Ok(BlindingStage::AtLocalViews),
            "off" => Ok(BlindingStage::Off),
            other => Err(Error::config(format!("unknown blinding stage `{other}`"))),
        }
    }
}

/// `modality.*` configuration keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityConfig {
    pub color_drop: f64,
    pub normal_drop: f64,
    pub point_drop: f64,
    pub stage: BlindingStage,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        ModalityConfig {
            color_drop: 0.3,
            normal_drop: 0.3,
            point_drop: 0.2,
            stage: BlindingStage::AtLoading,
        }
    }
}

impl ModalityConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob("modality.color_drop", self.color_drop)?;
        check_prob("modality.normal_drop", self.normal_drop)?;
        check_prob("modality.point_drop", self.point_drop)
    }

    /// Per-sample blinding followed by per-point blinding.
    pub fn apply<R: Rng + ?Sized>(&self, pc: &PointCloud, rng: &mut R) -> Result<PointCloud> {
        let sample = blind_per_sample(pc, self.color_drop, self.normal_drop, rng)?;
        blind_per_point(&sample, self.point_drop, rng)
    }
}

pub fn blinding_stage(config: &ModalityConfig) -> BlindingStage {
    config.stage
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcdata::{validate, Domain};
    use crate::rng::rng_for;

    fn full(n: usize) -> PointCloud {
        let coords = (0..n).map(|i| [i as f64, -(i as f64), 0.5]).collect();
        PointCloud::new(coords, Domain::Indoor, 0.02)
            .with_colors(vec![[0.2, 0.4, 0.6]; n])
            .with_normals(vec![[0.0, 0.0, 1.0]; n])
    }

    /// Two-sided 99% binomial interval half-width.
    fn binomial_halfwidth(p: f64, n: usize) -> f64 {
        2.5758 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn unified_blocks() {
        let bare = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4], Domain::Outdoor, 0.05);
        let f = unify_features(&bare);
        assert_eq!(f.shape(), &[4, 9]);
        assert!(f.slice(ndarray::s![.., 3..]).iter().all(|&v| v == 0.0));

        let colors_only = PointCloud::new(vec![[1.0, 2.0, 3.0]; 2], Domain::Indoor, 0.02)
            .with_colors(vec![[0.1, 0.2, 0.3]; 2]);
        let f = unify_features(&colors_only);
        assert!(f.slice(ndarray::s![.., 6..]).iter().all(|&v| v == 0.0));
        assert_eq!(f.row(1).to_vec()[3..6], [0.1, 0.2, 0.3]);

        let pc = full(3);
        let f = unify_features(&pc);
        for i in 0..3 {
            for a in 0..3 {
                assert_eq!(f[[i, a]], pc.coords[i][a]);
                assert_eq!(f[[i, 3 + a]], pc.colors[i][a]);
                assert_eq!(f[[i, 6 + a]], pc.normals[i][a]);
            }
        }
    }

    #[test]
    fn certain_and_impossible_drops() {
        let pc = full(10);
        let mut rng = rng_for(&[1]);
        let out = blind_per_sample(&pc, 1.0, 0.0, &mut rng).unwrap();
        assert!(!out.any_color());
        assert!(out.colors.iter().all(|c| *c == [0.0; 3]));
        assert_eq!(out.normals, pc.normals);
        assert_eq!(blind_per_sample(&pc, 0.0, 0.0, &mut rng).unwrap(), pc);
        assert_eq!(blind_per_point(&pc, 0.0, &mut rng).unwrap(), pc);
        let all = blind_per_point(&pc, 1.0, &mut rng).unwrap();
        assert!(all.mask.iter().all(|&m| m == 0));
        assert!(validate(&all).is_empty());
        assert!(blind_per_point(&pc, 1.5, &mut rng).is_err());
    }

    #[test]
    fn per_sample_rate_is_binomial() {
        let pc = full(2);
        let trials = 10_000;
        let mut drops = 0;
        for t in 0..trials {
            let mut rng = rng_for(&[2, t as u64]);
            if !blind_per_sample(&pc, 0.3, 0.0, &mut rng).unwrap().any_color() {
                drops += 1;
            }
        }
        let rate = drops as f64 / trials as f64;
        assert!((rate - 0.3).abs() <= binomial_halfwidth(0.3, trials), "rate {rate}");
    }

    #[test]
    fn per_point_rate_is_binomial() {
        let pc = full(50_000);
        let mut rng = rng_for(&[3]);
        let out = blind_per_point(&pc, 0.2, &mut rng).unwrap();
        let cleared = out.mask.iter().filter(|&&m| m & COLOR_BIT == 0).count();
        let rate = cleared as f64 / pc.len() as f64;
        assert!((rate - 0.2).abs() <= binomial_halfwidth(0.2, pc.len()), "rate {rate}");
    }

    #[test]
    fn blinding_is_idempotent_and_keeps_coords() {
        let pc = full(500);
        let cfg = ModalityConfig::default();
        let mut rng = rng_for(&[4]);
        for _ in 0..20 {
            let once = cfg.apply(&pc, &mut rng).unwrap();
            assert_eq!(once.coords, pc.coords);
            let twice_color = drop_channels(&drop_channels(&once, true, false), true, false);
            assert_eq!(twice_color, drop_channels(&once, true, false));
            let f = unify_features(&once);
            for i in 0..once.len() {
                if !once.has_color(i) {
                    assert!((3..6).all(|c| f[[i, c]] == 0.0));
                }
                if !once.has_normal(i) {
                    assert!((6..9).all(|c| f[[i, c]] == 0.0));
                }
            }
        }
    }

    #[test]
    fn stage_names() {
        assert_eq!(blinding_stage(&ModalityConfig::default()), BlindingStage::AtLoading);
        assert_eq!("off".parse::<BlindingStage>().unwrap(), BlindingStage::Off);
        assert_eq!("local".parse::<BlindingStage>().unwrap(), BlindingStage::AtLocalViews);
        assert_eq!("masked".parse::<BlindingStage>().unwrap(), BlindingStage::AtMaskedViews);
        assert!("sometimes".parse::<BlindingStage>().is_err());
    }
}
