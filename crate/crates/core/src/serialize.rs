//! Z-order serialization, attention windows and hierarchical grid pooling.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::harmonize::voxel_of;

/// Added to every cell component so negative cells encode as unsigned.
pub const MORTON_BIAS: i64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AxisOrder {
    /// x takes the most significant bit of every triple.
    Xyz,
    /// y takes the most significant bit of every triple.
    Yxz,
}

impl AxisOrder {
    /// Order used by block `b`; consecutive blocks alternate.
    pub fn for_block(b: usize) -> Self {
        if b % 2 == 0 {
            AxisOrder::Xyz
        } else {
            AxisOrder::Yxz
        }
    }

    fn index(self) -> usize {
        match self {
            AxisOrder::Xyz => 0,
            AxisOrder::Yxz => 1,
        }
    }
}

#[inline]
fn split_by_3(a: u64) -> u64 {
    let mut x = a & 0x1f_ffff;
    x = (x | x << 32) & 0x1f_0000_0000_ffff;
    x = (x | x << 16) & 0x1f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact_by_3(code: u64) -> u64 {
    let mut x = code & 0x1249_2492_4924_9249;
    x = (x ^ (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x ^ (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x ^ (x >> 8)) & 0x1f_0000_ff00_00ff;
    x = (x ^ (x >> 16)) & 0x1f_0000_0000_ffff;
    x = (x ^ (x >> 32)) & 0x1f_ffff;
    x
}

/// Interleaves the biased 21-bit cell components.
pub fn morton_encode(cell: [i64; 3], order: AxisOrder) -> Result<u64> {
    if cell.iter().any(|c| c.abs() >= MORTON_BIAS) {
        return Err(Error::invalid(format!("cell {cell:?} outside the Morton range")));
    }
    let [x, y, z] = cell.map(|c| split_by_3((c + MORTON_BIAS) as u64));
    Ok(match order {
        AxisOrder::Xyz => x << 2 | y << 1 | z,
        AxisOrder::Yxz => y << 2 | x << 1 | z,
    })
}

pub fn morton_decode(code: u64, order: AxisOrder) -> [i64; 3] {
    let hi = compact_by_3(code >> 2) as i64 - MORTON_BIAS;
    let mid = compact_by_3(code >> 1) as i64 - MORTON_BIAS;
    let z = compact_by_3(code) as i64 - MORTON_BIAS;
    match order {
        AxisOrder::Xyz => [hi, mid, z],
        AxisOrder::Yxz => [mid, hi, z],
    }
}

/// Serialized order of a point set and its attention windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SerializedLayout {
    pub codes: Vec<u64>,
    /// `order[k]` is the point at sorted position `k`.
    pub order: Vec<usize>,
    /// `inverse[i]` is the sorted position of point `i`.
    pub inverse: Vec<usize>,
    /// Contiguous ranges over sorted positions, each at most the window size.
    pub windows: Vec<Range<usize>>,
    pub level: usize,
}

/// Layout over `floor(coords / grid)`.
pub fn build_layout(
    coords: &[[f64; 3]],
    grid: f64,
    window: usize,
    order: AxisOrder,
) -> Result<SerializedLayout> {
    if !(grid > 0.0) {
        return Err(Error::invalid("grid must be positive"));
    }
    let cells: Vec<[i64; 3]> = coords.iter().map(|p| voxel_of(*p, grid)).collect();
    layout_from_cells(&cells, window, order, 0)
}

/// Stable sort of cells by Morton code, cut into windows of `window` points.
pub fn layout_from_cells(
    cells: &[[i64; 3]],
    window: usize,
    axis_order: AxisOrder,
    level: usize,
) -> Result<SerializedLayout> {
    if window == 0 {
        return Err(Error::invalid("window size must be at least 1"));
    }
    let codes = cells
        .iter()
        .map(|c| morton_encode(*c, axis_order))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by_key(|&i| codes[i]);
    let mut inverse = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        inverse[i] = k;
    }
    let n = cells.len();
    let windows = (0..n.div_ceil(window))
        .map(|w| w * window..((w + 1) * window).min(n))
        .collect();
    Ok(SerializedLayout {
        codes,
        order,
        inverse,
        windows,
        level,
    })
}

/// Fine-to-coarse assignment of one pooling step.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolMap {
    pub parent_of: Vec<usize>,
    /// Fine indices of every coarse point, ascending.
    pub children_of: Vec<Vec<usize>>,
    /// Mean of member coordinates.
    pub coarse_coords: Vec<[f64; 3]>,
    /// Integer cells of the coarse level.
    pub coarse_cells: Vec<[i64; 3]>,
}

impl PoolMap {
    /// Groups fine cells by `cell.div_euclid(factor)`. Coarse points are
    /// ordered by their Morton code so the result does not depend on the
    /// order of the fine points.
    pub fn from_cells(coords: &[[f64; 3]], cells: &[[i64; 3]], factor: i64) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid("pooling factor must be at least 2"));
        }
        let parent_cells: Vec<[i64; 3]> = cells.iter().map(|c| c.map(|v| v.div_euclid(factor))).collect();
        let mut unique: Vec<[i64; 3]> = parent_cells.clone();
        let mut keyed = unique
            .drain(..)
            .map(|c| Ok((morton_encode(c, AxisOrder::Xyz)?, c)))
            .collect::<Result<Vec<_>>>()?;
        keyed.sort_unstable();
        keyed.dedup();
        let index: HashMap<[i64; 3], usize> = keyed.iter().enumerate().map(|(k, (_, c))| (*c, k)).collect();
        let m = keyed.len();
        let mut children_of = vec![Vec::new(); m];
        let mut parent_of = Vec::with_capacity(cells.len());
        for (i, pc) in parent_cells.iter().enumerate() {
            let p = index[pc];
            parent_of.push(p);
            children_of[p].push(i);
        }
        let coarse_coords = children_of
            .iter()
            .map(|ch| {
                let mut s = [0.0; 3];
                for &i in ch {
                    for a in 0..3 {
                        s[a] += coords[i][a];
                    }
                }
                s.map(|v| v / ch.len() as f64)
            })
            .collect();
        Ok(PoolMap {
            parent_of,
            children_of,
            coarse_coords,
            coarse_cells: keyed.into_iter().map(|(_, c)| c).collect(),
        })
    }

    pub fn num_coarse(&self) -> usize {
        self.children_of.len()
    }

    pub fn num_fine(&self) -> usize {
        self.parent_of.len()
    }
}

/// Mean of member features per coarse point.
pub fn pool_mean(features: ArrayView2<f64>, map: &PoolMap) -> Array2<f64> {
    let mut out = Array2::zeros((map.num_coarse(), features.ncols()));
    for (p, children) in map.children_of.iter().enumerate() {
        let mut row = out.row_mut(p);
        for &i in children {
            row += &features.row(i);
        }
        row /= children.len() as f64;
    }
    out
}

/// Adjoint of [`pool_mean`]: each child receives its parent's gradient
/// divided by the parent's member count.
pub fn pool_mean_adjoint(grad_coarse: ArrayView2<f64>, map: &PoolMap) -> Array2<f64> {
    let mut out = Array2::zeros((map.num_fine(), grad_coarse.ncols()));
    for (p, children) in map.children_of.iter().enumerate() {
        let g = &grad_coarse.row(p) / children.len() as f64;
        for &i in children {
            out.row_mut(i).assign(&g);
        }
    }
    out
}

/// Groups points by `floor(cell / factor)` at the given fine grid.
pub fn grid_pool(
    coords: &[[f64; 3]],
    features: ArrayView2<f64>,
    grid: f64,
    factor: i64,
) -> Result<(Vec<[f64; 3]>, Array2<f64>, PoolMap)> {
    if features.nrows() != coords.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} points",
            features.nrows(),
            coords.len()
        )));
    }
    if !(grid > 0.0) {
        return Err(Error::invalid("grid must be positive"));
    }
    let cells: Vec<[i64; 3]> = coords.iter().map(|p| voxel_of(*p, grid)).collect();
    let map = PoolMap::from_cells(coords, &cells, factor)?;
    let pooled = pool_mean(features, &map);
    Ok((map.coarse_coords.clone(), pooled, map))
}

/// Fine feature `i` is the coarse feature of its parent.
pub fn broadcast(coarse: ArrayView2<f64>, map: &PoolMap) -> Array2<f64> {
    let mut out = Array2::zeros((map.num_fine(), coarse.ncols()));
    for (i, &p) in map.parent_of.iter().enumerate() {
        out.row_mut(i).assign(&coarse.row(p));
    }
    out
}

/// Adjoint of [`broadcast`]: sums child gradients into the parent.
pub fn broadcast_adjoint(grad_fine: ArrayView2<f64>, map: &PoolMap) -> Array2<f64> {
    let mut out = Array2::zeros((map.num_coarse(), grad_fine.ncols()));
    for (i, &p) in map.parent_of.iter().enumerate() {
        let mut row = out.row_mut(p);
        row += &grad_fine.row(i);
    }
    out
}

/// One resolution level of the encoder hierarchy.
#[derive(Clone, Debug)]
pub struct Level {
    pub coords: Vec<[f64; 3]>,
    pub cells: Vec<[i64; 3]>,
    /// Layouts for [`AxisOrder::Xyz`] and [`AxisOrder::Yxz`].
    pub layouts: [SerializedLayout; 2],
    /// Pooling into the next level, if there is one.
    pub pool: Option<PoolMap>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn layout(&self, order: AxisOrder) -> &SerializedLayout {
        &self.layouts[order.index()]
    }
}

/// Levels of a point set: level 0 uses cells at `grid`, each further level
/// doubles the cell size. Cells are taken relative to the per-axis minimum
/// cell, so a shift by whole cells leaves every layout unchanged.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
    pub grid: f64,
}

impl Hierarchy {
    pub fn build(coords: &[[f64; 3]], grid: f64, windows: &[usize]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !(grid > 0.0) {
            return Err(Error::invalid("grid must be positive"));
        }
        let mut cells: Vec<[i64; 3]> = coords.iter().map(|p| voxel_of(*p, grid)).collect();
        let mut min = cells[0];
        for c in &cells {
            for a in 0..3 {
                min[a] = min[a].min(c[a]);
            }
        }
        for c in &mut cells {
            for a in 0..3 {
                c[a] -= min[a];
            }
        }
        let mut levels = Vec::with_capacity(windows.len());
        let mut coords = coords.to_vec();
        for (s, &w) in windows.iter().enumerate() {
            let layouts = [
                layout_from_cells(&cells, w, AxisOrder::Xyz, s)?,
                layout_from_cells(&cells, w, AxisOrder::Yxz, s)?,
            ];
            let pool = if s + 1 < windows.len() {
                Some(PoolMap::from_cells(&coords, &cells, 2)?)
            } else {
                None
            };
            let next = pool.as_ref().map(|p| (p.coarse_coords.clone(), p.coarse_cells.clone()));
            levels.push(Level {
                coords: std::mem::take(&mut coords),
                cells: std::mem::take(&mut cells),
                layouts,
                pool,
            });
            if let Some((c, k)) = next {
                coords = c;
                cells = k;
            }
        }
        Ok(Hierarchy { levels, grid })
    }

    /// Level `s` index of every level-0 point.
    pub fn ancestors(&self, s: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.levels[0].len()).collect();
        for level in &self.levels[..s] {
            let pool = level.pool.as_ref().expect("pool between levels");
            for v in &mut idx {
                *v = pool.parent_of[*v];
            }
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    const MORTON_BITS: u32 = 21;

    /// Bit-by-bit interleave: most significant triple first, the first axis
    /// of `order` first within each triple.
    fn brute_interleave(cell: [i64; 3], order: AxisOrder) -> u64 {
        let b = cell.map(|c| (c + MORTON_BIAS) as u64);
        let axes = match order {
            AxisOrder::Xyz => [b[0], b[1], b[2]],
            AxisOrder::Yxz => [b[1], b[0], b[2]],
        };
        let mut code = 0u64;
        for bit in (0..MORTON_BITS).rev() {
            for v in axes {
                code = code << 1 | (v >> bit & 1);
            }
        }
        code
    }

    #[test]
    fn origin_encodes_the_bias() {
        for order in [AxisOrder::Xyz, AxisOrder::Yxz] {
            let code = morton_encode([0, 0, 0], order).unwrap();
            assert_eq!(code, 0b111 << 60);
            let bias = morton_encode([0, 0, 0], order).unwrap();
            assert_eq!(code ^ bias, 0);
            assert_eq!(morton_decode(code, order), [0, 0, 0]);
        }
    }

    #[test]
    fn monotone_in_each_axis() {
        let zero = morton_encode([0, 0, 0], AxisOrder::Xyz).unwrap();
        assert!(morton_encode([1, 0, 0], AxisOrder::Xyz).unwrap() > zero);
        let mut rng = rng_for(&[1]);
        for _ in 0..1000 {
            let c = [0; 3].map(|_| rng.random_range(-1000i64..1000));
            for order in [AxisOrder::Xyz, AxisOrder::Yxz] {
                for a in 0..3 {
                    let mut d = c;
                    d[a] += 1;
                    assert!(morton_encode(d, order).unwrap() > morton_encode(c, order).unwrap());
                }
            }
        }
    }

    #[test]
    fn out_of_range_cells() {
        assert!(morton_encode([MORTON_BIAS, 0, 0], AxisOrder::Xyz).is_err());
        assert!(morton_encode([0, -MORTON_BIAS, 0], AxisOrder::Xyz).is_err());
        let edge = MORTON_BIAS - 1;
        let code = morton_encode([edge, -edge, 5], AxisOrder::Yxz).unwrap();
        assert_eq!(morton_decode(code, AxisOrder::Yxz), [edge, -edge, 5]);
    }

    #[test]
    fn exhaustive_small_grid_matches_brute_force() {
        for order in [AxisOrder::Xyz, AxisOrder::Yxz] {
            let mut seen = std::collections::HashSet::new();
            for x in 0..8 {
                for y in 0..8 {
                    for z in 0..8 {
                        let code = morton_encode([x, y, z], order).unwrap();
                        assert_eq!(code, brute_interleave([x, y, z], order));
                        assert!(seen.insert(code));
                    }
                }
            }
        }
    }

    #[test]
    fn window_tiling() {
        let coords: Vec<[f64; 3]> = (0..33).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let l = build_layout(&coords, 0.05, 16, AxisOrder::Xyz).unwrap();
        let sizes: Vec<usize> = l.windows.iter().map(|w| w.len()).collect();
        assert_eq!(sizes, vec![16, 16, 1]);
        let l = build_layout(&coords[..10], 0.05, 16, AxisOrder::Xyz).unwrap();
        assert_eq!(l.windows, vec![0..10]);
        assert!(build_layout(&coords, 0.05, 0, AxisOrder::Xyz).is_err());
    }

    #[test]
    fn ties_keep_input_order() {
        let coords = vec![[0.011, 0.012, 0.013]; 7];
        let l = build_layout(&coords, 0.02, 4, AxisOrder::Yxz).unwrap();
        assert!(l.codes.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(l.order, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn layout_permutation_invariants() {
        let mut rng = rng_for(&[2]);
        for _ in 0..20 {
            let n = rng.random_range(1..300);
            let coords: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-3.0..3.0))).collect();
            for order in [AxisOrder::Xyz, AxisOrder::Yxz] {
                let l = build_layout(&coords, 0.1, 16, order).unwrap();
                for i in 0..n {
                    assert_eq!(l.order[l.inverse[i]], i);
                }
                assert!(l.order.iter().map(|&i| l.codes[i]).collect::<Vec<_>>().windows(2).all(|w| w[0] <= w[1]));
                let covered: usize = l.windows.iter().map(|w| w.len()).sum();
                assert_eq!(covered, n);
                assert_eq!(l.windows.first().unwrap().start, 0);
                assert!(l.windows.windows(2).all(|w| w[0].end == w[1].start));
            }
        }
    }

    #[test]
    fn pooling_cases() {
        let coords = vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [0.0, 0.03, 0.0]];
        let feats = ndarray::array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
        let (cc, cf, map) = grid_pool(&coords, feats.view(), 0.02, 2).unwrap();
        assert_eq!(map.num_coarse(), 1);
        assert_eq!(cf, ndarray::array![[3.0, 5.0]]);
        assert!((cc[0][0] - 0.01 / 3.0).abs() < 1e-15 && (cc[0][1] - 0.01).abs() < 1e-15);
        let back = broadcast(cf.view(), &map);
        assert_eq!(back, ndarray::array![[3.0, 5.0], [3.0, 5.0], [3.0, 5.0]]);
        assert!(grid_pool(&coords, feats.view(), 0.02, 1).is_err());
    }

    #[test]
    fn pooling_is_linear_and_broadcast_follows_parents() {
        let mut rng = rng_for(&[3]);
        let coords: Vec<[f64; 3]> = (0..200).map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0))).collect();
        let a = Array2::from_shape_fn((200, 4), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((200, 4), |_| rng.random_range(-1.0..1.0));
        let (_, pa, map) = grid_pool(&coords, a.view(), 0.1, 2).unwrap();
        let (_, pb, _) = grid_pool(&coords, b.view(), 0.1, 2).unwrap();
        let (_, pab, _) = grid_pool(&coords, (&a + &b).view(), 0.1, 2).unwrap();
        assert!((&pab - &(&pa + &pb)).iter().all(|d| d.abs() < 1e-12));
        let up = broadcast(pa.view(), &map);
        for i in 0..200 {
            assert_eq!(up.row(i), pa.row(map.parent_of[i]));
        }
        let mut fine_seen = vec![false; 200];
        for ch in &map.children_of {
            for &i in ch {
                assert!(!fine_seen[i]);
                fine_seen[i] = true;
            }
        }
        assert!(fine_seen.into_iter().all(|s| s));
    }

    #[test]
    fn adjoints_match_inner_products() {
        let mut rng = rng_for(&[4]);
        let coords: Vec<[f64; 3]> = (0..120).map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0))).collect();
        let cells: Vec<[i64; 3]> = coords.iter().map(|p| voxel_of(*p, 0.1)).collect();
        let map = PoolMap::from_cells(&coords, &cells, 2).unwrap();
        let x = Array2::from_shape_fn((120, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((map.num_coarse(), 3), |_| rng.random_range(-1.0..1.0));
        let lhs = (&pool_mean(x.view(), &map) * &y).sum();
        let rhs = (&x * &pool_mean_adjoint(y.view(), &map)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = (&broadcast(y.view(), &map) * &x).sum();
        let rhs = (&y * &broadcast_adjoint(x.view(), &map)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn alternating_orders_never_drop_points() {
        let mut rng = rng_for(&[5]);
        let coords: Vec<[f64; 3]> = (0..500).map(|_| [0; 3].map(|_| rng.random_range(-2.0..2.0))).collect();
        let h = Hierarchy::build(&coords, 0.05, &[16, 16, 16]).unwrap();
        for level in &h.levels {
            let mut a: Vec<usize> = level.layout(AxisOrder::Xyz).order.clone();
            let mut b: Vec<usize> = level.layout(AxisOrder::Yxz).order.clone();
            assert_ne!(a, b);
            a.sort();
            b.sort();
            assert_eq!(a, (0..level.len()).collect::<Vec<_>>());
            assert_eq!(a, b);
        }
        assert!(h.levels[1].len() < h.levels[0].len());
    }

    #[test]
    fn whole_cell_shift_keeps_hierarchy() {
        let mut rng = rng_for(&[6]);
        let coords: Vec<[f64; 3]> = (0..300).map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0))).collect();
        let shifted: Vec<[f64; 3]> = coords.iter().map(|p| [p[0] + 0.25, p[1] - 0.5, p[2] + 1.75]).collect();
        let a = Hierarchy::build(&coords, 0.0625, &[8, 8]).unwrap();
        let b = Hierarchy::build(&shifted, 0.0625, &[8, 8]).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.cells, lb.cells);
            assert_eq!(la.layouts, lb.layouts);
        }
    }

    /// Points sorted along the curve are spatially closer within a window
    /// than random groups of the same size.
    #[test]
    fn windows_are_local() {
        let mut better = 0;
        let trials = 100;
        for t in 0..trials {
            let mut rng = rng_for(&[7, t]);
            let coords: Vec<[f64; 3]> = (0..256).map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0))).collect();
            let l = build_layout(&coords, 0.02, 16, AxisOrder::Xyz).unwrap();
            let spread = |group: &[usize]| {
                let mut s = 0.0;
                let mut c = 0;
                for (k, &i) in group.iter().enumerate() {
                    for &j in &group[..k] {
                        s += crate::pcdata::norm3([0, 1, 2].map(|a| coords[i][a] - coords[j][a]));
                        c += 1;
                    }
                }
                s / c as f64
            };
            let sorted: f64 = l.windows.iter().map(|w| spread(&l.order[w.clone()])).sum();
            let mut shuffled: Vec<usize> = (0..256).collect();
            for i in (1..256).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let random: f64 = shuffled.chunks(16).map(spread).sum();
            if sorted <= random {
                better += 1;
            }
        }
        assert!(better >= 95, "{better}/100");
    }
}
