//! Rotary positional embedding over three spatial axes.
//!
//! A head vector is split into three contiguous blocks, one per axis, and
//! each block is rotated pairwise by angles proportional to that axis'
//! position. Positions are measured in canonical grid cells, optionally
//! perturbed by a per-cloud axis-wise jitter and an isotropic rescale.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::symmetric;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    pub base: f64,
    pub head_dim: usize,
    /// Axis-wise multiplicative jitter lies in `[1/γ, γ]`.
    pub jitter_degree: f64,
    /// Isotropic rescale lies in `[1/η, η]`.
    pub scaling_degree: f64,
    pub enabled: bool,
    /// Perturb positions during training. Never applied at inference.
    pub perturb: bool,
}

impl Default for RopeConfig {
    fn default() -> Self {
        RopeConfig {
            base: 10.0,
            head_dim: 6,
            jitter_degree: 1.2,
            scaling_degree: 1.2,
            enabled: true,
            perturb: true,
        }
    }
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 6 != 0 {
            return Err(Error::config(format!(
                "head dimension {} is not divisible by 6",
                self.head_dim
            )));
        }
        if !(self.base > 0.0) {
            return Err(Error::config("rope.base must be positive"));
        }
        if !(self.jitter_degree > 1.0) || !(self.scaling_degree > 1.0) {
            return Err(Error::config("rope jitter and scaling degrees must exceed 1"));
        }
        Ok(())
    }

    pub fn axis_dim(&self) -> usize {
        self.head_dim / 3
    }
}

/// Canonical grid-unit positions and their perturbed counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeCoords {
    pub p_hat: Vec<[f64; 3]>,
    pub p_rj: Vec<[f64; 3]>,
}

/// Coordinates divided by the canonical grid.
pub fn canonical_positions(coords: &[[f64; 3]], canonical_grid: f64) -> Vec<[f64; 3]> {
    coords.iter().map(|p| p.map(|v| v / canonical_grid)).collect()
}

/// One per-cloud draw of the positional perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub jitter: [f64; 3],
    pub scale: f64,
}

impl Perturbation {
    pub const IDENTITY: Perturbation = Perturbation {
        jitter: [1.0; 3],
        scale: 1.0,
    };

    /// `j = exp(ε_j)`, `ε_j ~ U(-log γ, log γ)³`; `r = exp(ε_s)`,
    /// `ε_s ~ U(-log η, log η)`. Degrees of exactly 1 give the identity.
    pub fn sample<R: Rng + ?Sized>(gamma: f64, eta: f64, rng: &mut R) -> Self {
        let lg = gamma.ln();
        let jitter = [0; 3].map(|_| symmetric(rng, lg).exp());
        let scale = symmetric(rng, eta.ln()).exp();
        Perturbation { jitter, scale }
    }

    /// `r · (j ⊙ p)`.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.scale * (self.jitter[0] * p[0]),
            self.scale * (self.jitter[1] * p[1]),
            self.scale * (self.jitter[2] * p[2]),
        ]
    }
}

pub fn perturb_coords<R: Rng + ?Sized>(p_hat: &[[f64; 3]], gamma: f64, eta: f64, rng: &mut R) -> Vec<[f64; 3]> {
    let draw = Perturbation::sample(gamma, eta, rng);
    p_hat.iter().map(|p| draw.apply(*p)).collect()
}

/// Rotation frequency of pair `k` in a block of `axis_dim` channels.
#[inline]
pub fn frequency(base: f64, k: usize, axis_dim: usize) -> f64 {
    base.powf(-2.0 * k as f64 / axis_dim as f64)
}

/// Rotates pairs `(v[2k], v[2k+1])` by `p · B^(-2k/d)`.
pub fn rope1d(v: &[f64], p: f64, base: f64) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::invalid(format!("rope needs an even dimension, got {}", v.len())));
    }
    let d = v.len();
    let mut out = v.to_vec();
    for k in 0..d / 2 {
        let (s, c) = (p * frequency(base, k, d)).sin_cos();
        let (a, b) = (v[2 * k], v[2 * k + 1]);
        out[2 * k] = a * c - b * s;
        out[2 * k + 1] = a * s + b * c;
    }
    Ok(out)
}

/// Applies [`rope1d`] to the x, y and z thirds of `v`.
pub fn rope3d(v: &[f64], p: [f64; 3], cfg: &RopeConfig) -> Result<Vec<f64>> {
    if v.len() != cfg.head_dim {
        return Err(Error::Shape(format!("vector of {} for head dim {}", v.len(), cfg.head_dim)));
    }
    if v.len() % 6 != 0 {
        return Err(Error::config(format!("head dimension {} is not divisible by 6", v.len())));
    }
    if !cfg.enabled {
        return Ok(v.to_vec());
    }
    let d = v.len() / 3;
    let mut out = Vec::with_capacity(v.len());
    for axis in 0..3 {
        out.extend(rope1d(&v[axis * d..(axis + 1) * d], p[axis], cfg.base)?);
    }
    Ok(out)
}

/// Precomputed cos/sin of every (point, pair) angle for one level.
#[derive(Clone, Debug)]
pub struct RopeTable {
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: &[[f64; 3]], head_dim: usize, base: f64) -> Self {
        let d = head_dim / 3;
        let per_axis = d / 2;
        let pairs = 3 * per_axis;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        let freqs: Vec<f64> = (0..per_axis).map(|k| frequency(base, k, d)).collect();
        for p in positions {
            for axis in 0..3 {
                for f in &freqs {
                    let (s, c) = (p[axis] * f).sin_cos();
                    cos.push(c);
                    sin.push(s);
                }
            }
        }
        RopeTable { pairs, cos, sin }
    }

    /// Rotates one head vector of point `i` in place.
    #[inline]
    pub fn rotate(&self, i: usize, v: &mut [f64]) {
        let base = i * self.pairs;
        for k in 0..self.pairs {
            let (c, s) = (self.cos[base + k], self.sin[base + k]);
            let (a, b) = (v[2 * k], v[2 * k + 1]);
            v[2 * k] = a * c - b * s;
            v[2 * k + 1] = a * s + b * c;
        }
    }

    /// Applies the transpose (inverse) rotation in place.
    #[inline]
    pub fn rotate_back(&self, i: usize, v: &mut [f64]) {
        let base = i * self.pairs;
        for k in 0..self.pairs {
            let (c, s) = (self.cos[base + k], self.sin[base + k]);
            let (a, b) = (v[2 * k], v[2 * k + 1]);
            v[2 * k] = a * c + b * s;
            v[2 * k + 1] = -a * s + b * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_position_is_identity() {
        let v = [0.3, -1.2, 4.0, 0.5];
        assert_eq!(rope1d(&v, 0.0, 10.0).unwrap(), v);
        let cfg = RopeConfig { head_dim: 12, ..RopeConfig::default() };
        let w: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
        assert_eq!(rope3d(&w, [0.0; 3], &cfg).unwrap(), w);
    }

    #[test]
    fn unit_angle_oracle() {
        let out = rope1d(&[1.0, 0.0], 1.0, 10.0).unwrap();
        assert!((out[0] - 0.540_302_305_868_139_8).abs() < 1e-12);
        assert!((out[1] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!(rope1d(&[1.0, 0.0, 2.0], 1.0, 10.0).is_err());
    }

    #[test]
    fn only_the_x_block_rotates() {
        let cfg = RopeConfig::default();
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = rope3d(&v, [1.0, 0.0, 0.0], &cfg).unwrap();
        let (s, c) = 1.0f64.sin_cos();
        assert!((out[0] - (c - 2.0 * s)).abs() < 1e-15);
        assert!((out[1] - (s + 2.0 * c)).abs() < 1e-15);
        assert_eq!(&out[2..], &v[2..]);
    }

    #[test]
    fn divisibility_and_disabled() {
        let bad = RopeConfig { head_dim: 8, ..RopeConfig::default() };
        assert!(bad.validate().is_err());
        assert!(rope3d(&[0.0; 8], [1.0; 3], &bad).is_err());
        let off = RopeConfig { enabled: false, ..RopeConfig::default() };
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(rope3d(&v, [3.0, -2.0, 7.0], &off).unwrap(), v);
    }

    #[test]
    fn perturbation_ranges() {
        let mut rng = rng_for(&[1]);
        let p_hat = vec![[1.0, -2.0, 3.0], [0.5, 0.25, -4.0]];
        assert_eq!(perturb_coords(&p_hat, 1.0, 1.0, &mut rng), p_hat);
        let (g, e) = (1.2f64, 1.3f64);
        for _ in 0..1000 {
            let d = Perturbation::sample(g, e, &mut rng);
            assert!(d.jitter.iter().all(|j| (1.0 / g..=g).contains(j)));
            assert!((1.0 / e..=e).contains(&d.scale));
        }
    }

    #[test]
    fn log_jitter_is_centered() {
        let gamma = 1.2f64;
        let mut rng = rng_for(&[2]);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| Perturbation::sample(gamma, 1.2, &mut rng).jitter[0].ln())
            .sum::<f64>()
            / n as f64;
        let sigma = 2.0 * gamma.ln() / 12f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn table_matches_direct_rotation() {
        let cfg = RopeConfig { head_dim: 12, base: 7.0, ..RopeConfig::default() };
        let p = [[0.7, -3.1, 12.0]];
        let table = RopeTable::new(&p, 12, 7.0);
        let v: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut w = v.clone();
        table.rotate(0, &mut w);
        let direct = rope3d(&v, p[0], &cfg).unwrap();
        for (a, b) in w.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
        table.rotate_back(0, &mut w);
        for (a, b) in w.iter().zip(&v) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((norm(&direct) - norm(&v)).abs() < 1e-12);
    }
}
