//! Linear probing, the gravity probe and PCA coloring of frozen features.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::pcdata::{write_ply, PointCloud};
use crate::rng::rng_for;

/// `probe.*` configuration keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_fraction: f64,
    /// Evaluation views larger than this are randomly subsampled.
    pub max_points: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.5,
            momentum: 0.9,
            train_fraction: 0.7,
            max_points: 4096,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::config("probe.epochs and probe.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("probe.momentum must lie in [0, 1)"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("probe.train_fraction must lie in (0, 1)"));
        }
        if self.max_points == 0 {
            return Err(Error::config("probe.max_points must be positive"));
        }
        Ok(())
    }
}

/// Segmentation metrics on the held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// IoU of every class id; `None` for classes absent from both the
    /// ground truth and the predictions of the held-out split.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub all_acc: f64,
}

/// Relative eigenvalue floor below which feature directions are dropped.
const WHITEN_FLOOR: f64 = 1e-9;

/// Mean and whitening map fitted on `x`.
struct Whitener {
    mean: Array1<f64>,
    map: Array2<f64>,
}

impl Whitener {
    fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
        let xc = &x - &mean;
        let cov = xc.t().dot(&xc) / n;
        let d = cov.nrows();
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..d)
            .filter(|&k| eig.eigenvalues[k] > WHITEN_FLOOR * top && eig.eigenvalues[k] > 0.0)
            .collect();
        let mut map = Array2::zeros((d, keep.len()));
        for (c, &k) in keep.iter().enumerate() {
            let s = 1.0 / eig.eigenvalues[k].sqrt();
            for i in 0..d {
                map[[i, c]] = eig.eigenvectors[(i, k)] * s;
            }
        }
        Whitener { mean, map }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean).dot(&self.map)
    }
}

fn softmax_inplace(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Affine softmax classifier on whitened features, trained by full-batch
/// gradient descent with momentum on a seeded split, scored on the rest.
pub fn linear_probe(features: ArrayView2<f64>, labels: &[i32], split_seed: u64, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::Shape("one label per feature row required".into()));
    }
    if n < 2 {
        return Err(Error::invalid("probe needs at least two points"));
    }
    if labels.iter().any(|&l| l < 0) {
        return Err(Error::invalid("probe labels must be nonnegative"));
    }
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { layer: "probe input".into() });
    }
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(&[split_seed, 0x5b1]));
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let xtr = features.select(Axis(0), train_idx);
    let xte = features.select(Axis(0), test_idx);
    let white = Whitener::fit(xtr.view());
    let ztr = white.apply(xtr.view());
    let zte = white.apply(xte.view());
    let d = ztr.ncols();

    let mut y = Array2::<f64>::zeros((n_train, classes));
    for (r, &i) in train_idx.iter().enumerate() {
        y[[r, labels[i] as usize]] = 1.0;
    }
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let mut vw = w.clone();
    let mut vb = b.clone();
    let inv_n = 1.0 / n_train as f64;
    for _ in 0..cfg.epochs {
        let mut p = ztr.dot(&w) + &b;
        softmax_inplace(&mut p);
        let g = (p - &y) * inv_n;
        let gw = ztr.t().dot(&g);
        let gb = g.sum_axis(Axis(0));
        vw = vw * cfg.momentum - gw * cfg.lr;
        vb = vb * cfg.momentum - gb * cfg.lr;
        w += &vw;
        b += &vb;
    }
    let scores = zte.dot(&w) + &b;
    let pred: Vec<usize> = scores
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect();
    let truth: Vec<usize> = test_idx.iter().map(|&i| labels[i] as usize).collect();
    Ok(segmentation_metrics(&pred, &truth, classes))
}

/// IoU, mean class accuracy and overall accuracy of predictions.
pub fn segmentation_metrics(pred: &[usize], truth: &[usize], classes: usize) -> ProbeReport {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class_iou: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len().max(1) as f64;
    let accs: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fn_[c] > 0)
        .map(|c| tp[c] as f64 / (tp[c] + fn_[c]) as f64)
        .collect();
    let macc = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
    let all_acc = tp.iter().sum::<usize>() as f64 / truth.len().max(1) as f64;
    ProbeReport {
        per_class_iou,
        miou,
        macc,
        all_acc,
    }
}

/// Principal directions of `x`, largest variance first, each with its
/// largest-magnitude loading made positive. Returns `(mean, components,
/// variances)` with components as columns.
pub fn pca(x: ArrayView2<f64>, k: usize) -> (Array1<f64>, Array2<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    let xc = &x - &mean;
    let cov = xc.t().dot(&xc) / n;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let k = k.min(d);
    let mut comps = Array2::zeros((d, k));
    let mut vars = Vec::with_capacity(k);
    for (c, &e) in idx.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(e);
        let lead = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            comps[[i, c]] = sign * col[i];
        }
        vars.push(eig.eigenvalues[e].max(0.0));
    }
    (mean, comps, vars)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let d = (saa * sbb).sqrt();
    if d > 0.0 {
        sab / d
    } else {
        0.0
    }
}

/// Tolerance below which a variance counts as zero, relative to the total.
const FLAT_VARIANCE: f64 = 1e-12;

/// `|corr(PC1(features), z)|` of one cloud; 0 when the features are flat.
pub fn gravity_score(features: ArrayView2<f64>, coords: &[[f64; 3]]) -> f64 {
    let (mean, comps, vars) = pca(features, 1);
    let total: f64 = features.var_axis(Axis(0), 0.0).sum();
    if vars.is_empty() || vars[0] <= FLAT_VARIANCE * total.max(f64::MIN_POSITIVE) {
        return 0.0;
    }
    let proj: Vec<f64> = (&features - &mean).dot(&comps.column(0)).to_vec();
    let z: Vec<f64> = coords.iter().map(|p| p[2]).collect();
    pearson(&proj, &z).abs()
}

/// Mean [`gravity_score`] over clouds.
pub fn gravity_probe(items: &[(Array2<f64>, Vec<[f64; 3]>)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(|(f, c)| gravity_score(f.view(), c)).sum::<f64>() / items.len() as f64
}

/// Maps the first three principal components of `features` to RGB by
/// per-component min-max scaling. Flat components map to 0.5.
pub fn pca_colors(features: ArrayView2<f64>) -> Vec<[f64; 3]> {
    let n = features.nrows();
    let (mean, comps, _) = pca(features, 3);
    let proj = (&features - &mean).dot(&comps);
    let scale = features.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut out = vec![[0.5; 3]; n];
    for c in 0..proj.ncols() {
        let col = proj.column(c);
        let lo = col.fold(f64::INFINITY, |m, &v| m.min(v));
        let hi = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if !(hi - lo > 1e-9 * scale) {
            continue;
        }
        for (i, v) in col.iter().enumerate() {
            out[i][c] = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Writes `pc`'s coordinates with PCA colors of `features` as binary PLY.
pub fn featurize_export(features: ArrayView2<f64>, pc: &PointCloud, path: impl AsRef<Path>) -> Result<PointCloud> {
    if features.nrows() != pc.len() {
        return Err(Error::Shape("one feature row per point required".into()));
    }
    let mut out = PointCloud::new(pc.coords.clone(), pc.domain, pc.native_grid).with_colors(pca_colors(features));
    out.labels = None;
    write_ply(&out, path)?;
    Ok(out)
}
