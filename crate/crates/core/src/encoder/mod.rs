//! Serialized-attention point encoder with rotary positions.
//!
//! Each stage runs pre-norm transformer blocks whose attention is restricted
//! to contiguous windows of the Z-order serialization; consecutive blocks
//! alternate the axis order. Queries and keys are rotated by 3D RoPE before
//! the dot product. Stages are separated by 2× grid pooling, and the final
//! per-point features concatenate every stage's normalized output broadcast
//! back to the finest level, followed by a linear projection.
//!
//! Gradients are computed by hand in [`Encoder::backward`].

mod checkpoint;
mod ops;
mod params;

pub(crate) use checkpoint::{read_section, read_tensors, write_tensors};
pub use checkpoint::{read_encoder, read_encoder_from, write_encoder, write_encoder_to, ENCODER_MAGIC, ENCODER_VERSION};
pub use ops::{gelu, layer_norm, linear, LN_EPS};
pub use params::{Params, Tensor};

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::UNIFIED_WIDTH;
use crate::rope::{canonical_positions, Perturbation, RopeConfig, RopeCoords, RopeTable};
use crate::serialize::{pool_mean, pool_mean_adjoint, AxisOrder, Hierarchy};
use ops::{gelu_back, layer_norm_back, linear_back, LnCache};

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub channels: usize,
    pub heads: usize,
    pub blocks: usize,
    pub window: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads.max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Size of one RoPE position unit, in view coordinates.
    pub canonical_grid: f64,
    /// Base, perturbation degrees and flags. `head_dim` is taken per stage.
    pub rope: RopeConfig,
}

impl Default for EncoderConfig {
    /// Two stages of 24 and 48 channels with 6-dimensional heads.
    fn default() -> Self {
        EncoderConfig {
            stages: vec![
                StageConfig {
                    channels: 24,
                    heads: 4,
                    blocks: 2,
                    window: 16,
                },
                StageConfig {
                    channels: 48,
                    heads: 8,
                    blocks: 2,
                    window: 16,
                },
            ],
            in_channels: UNIFIED_WIDTH,
            out_channels: 48,
            canonical_grid: 0.02,
            rope: RopeConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("encoder needs at least one stage"));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.heads == 0 || st.channels % st.heads != 0 {
                return Err(Error::config(format!(
                    "stage {s}: {} channels do not split into {} heads",
                    st.channels, st.heads
                )));
            }
            if st.head_dim() % 6 != 0 {
                return Err(Error::config(format!(
                    "stage {s}: head dimension {} is not divisible by 6",
                    st.head_dim()
                )));
            }
            if st.blocks == 0 || st.window == 0 {
                return Err(Error::config(format!("stage {s}: blocks and window must be positive")));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if !(self.canonical_grid > 0.0) {
            return Err(Error::config("canonical grid must be positive"));
        }
        RopeConfig {
            head_dim: self.stages[0].head_dim(),
            ..self.rope.clone()
        }
        .validate()
    }

    pub fn windows(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.window).collect()
    }
}

struct BlockIndex {
    norm1_w: usize,
    norm1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_w: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

struct StageIndex {
    down: Option<(usize, usize)>,
    blocks: Vec<BlockIndex>,
    norm_w: usize,
    norm_b: usize,
}

struct Index {
    embed_w: usize,
    embed_b: usize,
    mask_token: usize,
    stages: Vec<StageIndex>,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Xavier-uniform for an `in × out` matrix.
    Xavier,
    Normal(f64),
}

struct Declared {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn declare(cfg: &EncoderConfig) -> (Index, Vec<Declared>) {
    let mut decl = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        decl.push(Declared { name, shape, init });
        decl.len() - 1
    };
    let c0 = cfg.stages[0].channels;
    let embed_w = push("embed.weight".into(), vec![cfg.in_channels, c0], Init::Xavier);
    let embed_b = push("embed.bias".into(), vec![c0], Init::Zeros);
    let mask_token = push("mask_token".into(), vec![c0], Init::Normal(0.02));
    let mut stages = Vec::new();
    let mut prev = c0;
    for (s, st) in cfg.stages.iter().enumerate() {
        let c = st.channels;
        let down = (s > 0).then(|| {
            (
                push(format!("stage{s}.down.weight"), vec![prev, c], Init::Xavier),
                push(format!("stage{s}.down.bias"), vec![c], Init::Zeros),
            )
        });
        let blocks = (0..st.blocks)
            .map(|b| {
                let p = format!("stage{s}.block{b}");
                BlockIndex {
                    norm1_w: push(format!("{p}.norm1.weight"), vec![c], Init::Ones),
                    norm1_b: push(format!("{p}.norm1.bias"), vec![c], Init::Zeros),
                    qkv_w: push(format!("{p}.attn.qkv.weight"), vec![c, 3 * c], Init::Xavier),
                    qkv_b: push(format!("{p}.attn.qkv.bias"), vec![3 * c], Init::Zeros),
                    proj_w: push(format!("{p}.attn.proj.weight"), vec![c, c], Init::Xavier),
                    proj_b: push(format!("{p}.attn.proj.bias"), vec![c], Init::Zeros),
                    norm2_w: push(format!("{p}.norm2.weight"), vec![c], Init::Ones),
                    norm2_b: push(format!("{p}.norm2.bias"), vec![c], Init::Zeros),
                    fc1_w: push(format!("{p}.mlp.fc1.weight"), vec![c, 4 * c], Init::Xavier),
                    fc1_b: push(format!("{p}.mlp.fc1.bias"), vec![4 * c], Init::Zeros),
                    fc2_w: push(format!("{p}.mlp.fc2.weight"), vec![4 * c, c], Init::Xavier),
                    fc2_b: push(format!("{p}.mlp.fc2.bias"), vec![c], Init::Zeros),
                }
            })
            .collect();
        let norm_w = push(format!("stage{s}.norm.weight"), vec![c], Init::Ones);
        let norm_b = push(format!("stage{s}.norm.bias"), vec![c], Init::Zeros);
        stages.push(StageIndex {
            down,
            blocks,
            norm_w,
            norm_b,
        });
        prev = c;
    }
    let total: usize = cfg.stages.iter().map(|s| s.channels).sum();
    let head_w = push("head.weight".into(), vec![total, cfg.out_channels], Init::Xavier);
    let head_b = push("head.bias".into(), vec![cfg.out_channels], Init::Zeros);
    (
        Index {
            embed_w,
            embed_b,
            mask_token,
            stages,
            head_w,
            head_b,
        },
        decl,
    )
}

/// Serialization hierarchy and rotary tables of one point set.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub hierarchy: Hierarchy,
    /// Level-0 positions before and after perturbation.
    pub rope_coords: RopeCoords,
    /// One table per level; `None` when RoPE is disabled.
    tables: Vec<Option<RopeTable>>,
    /// Level-0 index → level-s index, per level.
    ancestors: Vec<Vec<usize>>,
}

impl Geometry {
    pub fn num_points(&self) -> usize {
        self.hierarchy.levels[0].len()
    }
}

pub struct Encoder {
    cfg: EncoderConfig,
    index: Index,
    declared: Vec<Declared>,
}

struct BlockCache {
    heads: usize,
    ln1: LnCache,
    h: Array2<f64>,
    /// Rotated queries and keys, and values, each `N × C`.
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights, window by window and head by head.
    attn: Vec<f64>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct StageCache {
    /// Input of the stage's first linear map: centered unified features for
    /// stage 0, pooled features otherwise.
    input: Array2<f64>,
    blocks: Vec<BlockCache>,
    out_ln: LnCache,
}

/// Intermediate values kept by [`Encoder::forward`] for the backward pass.
pub struct ForwardCache {
    stages: Vec<StageCache>,
    upcast: Array2<f64>,
    masked: Vec<usize>,
}

impl ForwardCache {
    /// Sums of every stored attention row, for every block of every stage.
    pub fn attention_row_sums(&self, geom: &Geometry) -> Vec<f64> {
        let mut sums = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let level = &geom.hierarchy.levels[s];
            for (b, block) in stage.blocks.iter().enumerate() {
                let layout = level.layout(AxisOrder::for_block(b));
                let mut cursor = 0;
                for w in &layout.windows {
                    let m = w.len();
                    for _ in 0..block.heads * m {
                        sums.push(block.attn[cursor..cursor + m].iter().sum());
                        cursor += m;
                    }
                }
            }
        }
        sums
    }
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (index, declared) = declare(&cfg);
        Ok(Encoder {
            cfg,
            index,
            declared,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Parameter names and shapes in declaration order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.declared
            .iter()
            .map(|d| (d.name.clone(), d.shape.clone()))
            .collect()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        let tensors = self
            .declared
            .iter()
            .map(|d| {
                let mut t = Tensor::zeros(d.name.clone(), d.shape.clone());
                match d.init {
                    Init::Zeros => {}
                    Init::Ones => t.data.fill(1.0),
                    Init::Xavier => {
                        let limit = (6.0 / (d.shape[0] + d.shape[1]) as f64).sqrt();
                        t.data.iter_mut().for_each(|x| *x = rng.random_range(-limit..limit));
                    }
                    Init::Normal(std) => t
                        .data
                        .iter_mut()
                        .for_each(|x| *x = std * crate::rng::normal(rng)),
                }
                t
            })
            .collect();
        Params { tensors }
    }

    pub fn check_params(&self, params: &Params) -> Result<()> {
        let ok = params.tensors.len() == self.declared.len()
            && params
                .tensors
                .iter()
                .zip(&self.declared)
                .all(|(t, d)| t.shape == d.shape && t.data.len() == d.shape.iter().product::<usize>());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameters do not match the encoder configuration".into()))
        }
    }

    /// Builds the hierarchy over `coords` with level-0 cells of `layout_grid`
    /// and RoPE positions `coords / canonical_grid`, perturbed once per call
    /// when a generator is given and perturbation is enabled.
    pub fn geometry<R: Rng + ?Sized>(
        &self,
        coords: &[[f64; 3]],
        layout_grid: f64,
        perturb: Option<&mut R>,
    ) -> Result<Geometry> {
        let hierarchy = Hierarchy::build(coords, layout_grid, &self.cfg.windows())?;
        let rope = &self.cfg.rope;
        let draw = match perturb {
            Some(rng) if rope.perturb && rope.enabled => {
                Perturbation::sample(rope.jitter_degree, rope.scaling_degree, rng)
            }
            _ => Perturbation::IDENTITY,
        };
        let mut p0 = None;
        let tables = hierarchy
            .levels
            .iter()
            .zip(&self.cfg.stages)
            .map(|(level, st)| {
                let p_hat = canonical_positions(&level.coords, self.cfg.canonical_grid);
                let p_rj: Vec<[f64; 3]> = p_hat.iter().map(|p| draw.apply(*p)).collect();
                let table = rope
                    .enabled
                    .then(|| RopeTable::new(&p_rj, st.head_dim(), rope.base));
                if p0.is_none() {
                    p0 = Some(RopeCoords { p_hat, p_rj });
                }
                table
            })
            .collect();
        let ancestors = (0..hierarchy.levels.len())
            .map(|s| hierarchy.ancestors(s))
            .collect();
        Ok(Geometry {
            hierarchy,
            rope_coords: p0.expect("at least one level"),
            tables,
            ancestors,
        })
    }

    /// Geometry with rotary positions supplied directly for level 0; coarser
    /// levels use member means.
    pub fn geometry_with_positions(
        &self,
        coords: &[[f64; 3]],
        layout_grid: f64,
        positions: &[[f64; 3]],
    ) -> Result<Geometry> {
        if positions.len() != coords.len() {
            return Err(Error::Shape("one position per point required".into()));
        }
        let hierarchy = Hierarchy::build(coords, layout_grid, &self.cfg.windows())?;
        let rope = &self.cfg.rope;
        let mut level_pos = positions.to_vec();
        let mut tables = Vec::new();
        for (level, st) in hierarchy.levels.iter().zip(&self.cfg.stages) {
            tables.push(rope.enabled.then(|| RopeTable::new(&level_pos, st.head_dim(), rope.base)));
            if let Some(pool) = &level.pool {
                level_pos = pool
                    .children_of
                    .iter()
                    .map(|ch| {
                        let mut m = [0.0; 3];
                        for &i in ch {
                            for a in 0..3 {
                                m[a] += level_pos[i][a];
                            }
                        }
                        m.map(|v| v / ch.len() as f64)
                    })
                    .collect();
            }
        }
        let ancestors = (0..hierarchy.levels.len())
            .map(|s| hierarchy.ancestors(s))
            .collect();
        Ok(Geometry {
            hierarchy,
            rope_coords: RopeCoords {
                p_hat: positions.to_vec(),
                p_rj: positions.to_vec(),
            },
            tables,
            ancestors,
        })
    }

    /// Per-point features at the finest level, `N × out_channels`.
    pub fn forward(
        &self,
        params: &Params,
        features: ArrayView2<f64>,
        geom: &Geometry,
        masked: Option<&[bool]>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_params(params)?;
        let n = geom.num_points();
        if features.nrows() != n || features.ncols() != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "features {:?} for {n} points and {} input channels",
                features.shape(),
                self.cfg.in_channels
            )));
        }
        if masked.is_some_and(|m| m.len() != n) {
            return Err(Error::Shape("mask length differs from point count".into()));
        }
        let p = &params.tensors;
        let idx = &self.index;

        // Coordinates enter relative to the cloud's centroid.
        let mut input = features.to_owned();
        let coord_cols = 3.min(input.ncols());
        for a in 0..coord_cols {
            let mean = input.column(a).sum() / n as f64;
            input.column_mut(a).mapv_inplace(|v| v - mean);
        }
        let masked_rows: Vec<usize> = masked
            .map(|m| m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
            .unwrap_or_default();

        let mut x = linear(input.view(), p[idx.embed_w].matrix(), p[idx.embed_b].vector());
        for &i in &masked_rows {
            let mut row = x.row_mut(i);
            row += &p[idx.mask_token].vector();
        }
        let mut stages = Vec::with_capacity(self.cfg.stages.len());
        let mut normed_outputs = Vec::with_capacity(self.cfg.stages.len());
        let mut stage_input = input;
        for (s, (st, sidx)) in self.cfg.stages.iter().zip(&idx.stages).enumerate() {
            let level = &geom.hierarchy.levels[s];
            if let Some((dw, db)) = sidx.down {
                let prev_pool = geom.hierarchy.levels[s - 1].pool.as_ref().expect("pool");
                stage_input = pool_mean(x.view(), prev_pool);
                x = linear(stage_input.view(), p[dw].matrix(), p[db].vector());
            }
            check_finite(&x, || format!("stage{s}.input"))?;
            let mut block_caches = Vec::with_capacity(st.blocks);
            for (b, bidx) in sidx.blocks.iter().enumerate() {
                let layout = level.layout(AxisOrder::for_block(b));
                let (next, cache) = self.block_forward(p, bidx, st, &x, &layout.order, &layout.windows, geom.tables[s].as_ref());
                x = next;
                check_finite(&x, || format!("stage{s}.block{b}"))?;
                block_caches.push(cache);
            }
            let (normed, out_ln) = layer_norm(x.view(), p[sidx.norm_w].vector(), p[sidx.norm_b].vector());
            normed_outputs.push(normed);
            stages.push(StageCache {
                input: std::mem::replace(&mut stage_input, Array2::zeros((0, 0))),
                blocks: block_caches,
                out_ln,
            });
        }

        let total: usize = self.cfg.stages.iter().map(|s| s.channels).sum();
        let mut upcast = Array2::zeros((n, total));
        let mut col = 0;
        for (s, normed) in normed_outputs.iter().enumerate() {
            let c = normed.ncols();
            let anc = &geom.ancestors[s];
            let mut dst = upcast.slice_mut(s![.., col..col + c]);
            for (i, &a) in anc.iter().enumerate() {
                dst.row_mut(i).assign(&normed.row(a));
            }
            col += c;
        }
        let out = linear(upcast.view(), p[idx.head_w].matrix(), p[idx.head_b].vector());
        check_finite(&out, || "head".to_string())?;
        Ok((
            out,
            ForwardCache {
                stages,
                upcast,
                masked: masked_rows,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        p: &[Tensor],
        bidx: &BlockIndex,
        st: &StageConfig,
        x: &Array2<f64>,
        order: &[usize],
        windows: &[std::ops::Range<usize>],
        table: Option<&RopeTable>,
    ) -> (Array2<f64>, BlockCache) {
        let c = st.channels;
        let hd = st.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n = x.nrows();

        let (h, ln1) = layer_norm(x.view(), p[bidx.norm1_w].vector(), p[bidx.norm1_b].vector());
        let qkv = linear(h.view(), p[bidx.qkv_w].matrix(), p[bidx.qkv_b].vector());
        let mut q = qkv.slice(s![.., 0..c]).to_owned();
        let mut k = qkv.slice(s![.., c..2 * c]).to_owned();
        let v = qkv.slice(s![.., 2 * c..3 * c]).to_owned();
        if let Some(table) = table {
            for i in 0..n {
                let qi = q.row_mut(i).into_slice().expect("contiguous");
                for head in qi.chunks_exact_mut(hd) {
                    table.rotate(i, head);
                }
                let ki = k.row_mut(i).into_slice().expect("contiguous");
                for head in ki.chunks_exact_mut(hd) {
                    table.rotate(i, head);
                }
            }
        }

        let qs = q.as_slice().expect("contiguous");
        let ks = k.as_slice().expect("contiguous");
        let vs = v.as_slice().expect("contiguous");
        let mut o = Array2::<f64>::zeros((n, c));
        let os = o.as_slice_mut().expect("contiguous");
        let mut attn = Vec::with_capacity(windows.iter().map(|w| w.len() * w.len()).sum::<usize>() * st.heads);
        let mut scores = Vec::new();
        for w in windows {
            let ids = &order[w.clone()];
            let m = ids.len();
            for head in 0..st.heads {
                let off = head * hd;
                for &a in ids {
                    let qa = &qs[a * c + off..a * c + off + hd];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for &b in ids {
                        let kb = &ks[b * c + off..b * c + off + hd];
                        let sc = qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() * scale;
                        max = max.max(sc);
                        scores.push(sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let oa = &mut os[a * c + off..a * c + off + hd];
                    for (sc, &b) in scores.iter_mut().zip(ids) {
                        *sc /= z;
                        let vb = &vs[b * c + off..b * c + off + hd];
                        for (dst, val) in oa.iter_mut().zip(vb) {
                            *dst += *sc * val;
                        }
                    }
                    attn.extend_from_slice(&scores[..m]);
                }
            }
        }

        let mut x_mid = linear(o.view(), p[bidx.proj_w].matrix(), p[bidx.proj_b].vector());
        x_mid += x;
        let (h2, ln2) = layer_norm(x_mid.view(), p[bidx.norm2_w].vector(), p[bidx.norm2_b].vector());
        let u = linear(h2.view(), p[bidx.fc1_w].matrix(), p[bidx.fc1_b].vector());
        let g = gelu(u.view());
        let mut out = linear(g.view(), p[bidx.fc2_w].matrix(), p[bidx.fc2_b].vector());
        out += &x_mid;
        (
            out,
            BlockCache {
                heads: st.heads,
                ln1,
                h,
                q,
                k,
                v,
                attn,
                o,
                ln2,
                h2,
                u,
                g,
            },
        )
    }

    /// Gradients of `⟨forward(params), d_out⟩` with respect to every
    /// parameter, in declaration order.
    pub fn backward(&self, params: &Params, cache: &ForwardCache, geom: &Geometry, d_out: ArrayView2<f64>) -> Result<Params> {
        self.check_params(params)?;
        let n = geom.num_points();
        if d_out.shape() != [n, self.cfg.out_channels] {
            return Err(Error::Shape(format!("upstream gradient {:?}", d_out.shape())));
        }
        let p = &params.tensors;
        let idx = &self.index;
        let mut grads = params.zeros_like();
        let g = &mut grads.tensors;

        let (d_up, dw, db) = linear_back(d_out, cache.upcast.view(), p[idx.head_w].matrix());
        g[idx.head_w].matrix_mut().assign(&dw);
        g[idx.head_b].vector_mut().assign(&db);

        // Split the upcast gradient back onto each level.
        let mut d_normed = Vec::with_capacity(self.cfg.stages.len());
        let mut col = 0;
        for (s, st) in self.cfg.stages.iter().enumerate() {
            let c = st.channels;
            let level_n = geom.hierarchy.levels[s].len();
            let mut d = Array2::<f64>::zeros((level_n, c));
            let src = d_up.slice(s![.., col..col + c]);
            for (i, &a) in geom.ancestors[s].iter().enumerate() {
                let mut row = d.row_mut(a);
                row += &src.row(i);
            }
            d_normed.push(d);
            col += c;
        }

        let mut carry: Option<Array2<f64>> = None;
        for s in (0..self.cfg.stages.len()).rev() {
            let st = &self.cfg.stages[s];
            let sidx = &idx.stages[s];
            let sc = &cache.stages[s];
            let level = &geom.hierarchy.levels[s];
            let (mut dx, dw, db) = layer_norm_back(d_normed[s].view(), &sc.out_ln, p[sidx.norm_w].vector());
            g[sidx.norm_w].vector_mut().assign(&dw);
            g[sidx.norm_b].vector_mut().assign(&db);
            if let Some(c) = carry.take() {
                dx += &c;
            }
            for (b, bidx) in sidx.blocks.iter().enumerate().rev() {
                let layout = level.layout(AxisOrder::for_block(b));
                dx = self.block_backward(p, g, bidx, st, &sc.blocks[b], dx, &layout.order, &layout.windows, geom.tables[s].as_ref());
            }
            match sidx.down {
                Some((dw_i, db_i)) => {
                    let (d_in, dw, db) = linear_back(dx.view(), sc.input.view(), p[dw_i].matrix());
                    g[dw_i].matrix_mut().assign(&dw);
                    g[db_i].vector_mut().assign(&db);
                    let prev_pool = geom.hierarchy.levels[s - 1].pool.as_ref().expect("pool");
                    carry = Some(pool_mean_adjoint(d_in.view(), prev_pool));
                }
                None => {
                    let mut dmask = Array1::<f64>::zeros(st.channels);
                    for &i in &cache.masked {
                        dmask += &dx.row(i);
                    }
                    g[idx.mask_token].vector_mut().assign(&dmask);
                    let (_, dw, db) = linear_back(dx.view(), sc.input.view(), p[idx.embed_w].matrix());
                    g[idx.embed_w].matrix_mut().assign(&dw);
                    g[idx.embed_b].vector_mut().assign(&db);
                }
            }
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                layer: "backward".into(),
            });
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        p: &[Tensor],
        g: &mut [Tensor],
        bidx: &BlockIndex,
        st: &StageConfig,
        bc: &BlockCache,
        d_out: Array2<f64>,
        order: &[usize],
        windows: &[std::ops::Range<usize>],
        table: Option<&RopeTable>,
    ) -> Array2<f64> {
        let c = st.channels;
        let hd = st.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n = d_out.nrows();

        // Feed-forward branch.
        let (dg, dw, db) = linear_back(d_out.view(), bc.g.view(), p[bidx.fc2_w].matrix());
        g[bidx.fc2_w].matrix_mut().assign(&dw);
        g[bidx.fc2_b].vector_mut().assign(&db);
        let du = gelu_back(dg.view(), bc.u.view());
        let (dh2, dw, db) = linear_back(du.view(), bc.h2.view(), p[bidx.fc1_w].matrix());
        g[bidx.fc1_w].matrix_mut().assign(&dw);
        g[bidx.fc1_b].vector_mut().assign(&db);
        let (dx_ln2, dw, db) = layer_norm_back(dh2.view(), &bc.ln2, p[bidx.norm2_w].vector());
        g[bidx.norm2_w].vector_mut().assign(&dw);
        g[bidx.norm2_b].vector_mut().assign(&db);
        let d_mid = d_out + dx_ln2;

        // Attention branch.
        let (d_o, dw, db) = linear_back(d_mid.view(), bc.o.view(), p[bidx.proj_w].matrix());
        g[bidx.proj_w].matrix_mut().assign(&dw);
        g[bidx.proj_b].vector_mut().assign(&db);

        let qs = bc.q.as_slice().expect("contiguous");
        let ks = bc.k.as_slice().expect("contiguous");
        let vs = bc.v.as_slice().expect("contiguous");
        let dos = d_o.as_slice().expect("contiguous");
        let mut dqkv = Array2::<f64>::zeros((n, 3 * c));
        {
            let dst = dqkv.as_slice_mut().expect("contiguous");
            let row = 3 * c;
            let mut cursor = 0;
            let mut d_a = Vec::new();
            for w in windows {
                let ids = &order[w.clone()];
                let m = ids.len();
                for head in 0..st.heads {
                    let off = head * hd;
                    for &a in ids {
                        let weights = &bc.attn[cursor..cursor + m];
                        cursor += m;
                        let doa = &dos[a * c + off..a * c + off + hd];
                        d_a.clear();
                        let mut dot = 0.0;
                        for (wgt, &b) in weights.iter().zip(ids) {
                            let vb = &vs[b * c + off..b * c + off + hd];
                            let da = doa.iter().zip(vb).map(|(x, y)| x * y).sum::<f64>();
                            dot += wgt * da;
                            d_a.push(da);
                            // dv_b += A_ab do_a
                            let dvb = &mut dst[b * row + 2 * c + off..b * row + 2 * c + off + hd];
                            for (t, x) in dvb.iter_mut().zip(doa) {
                                *t += wgt * x;
                            }
                        }
                        let qa = &qs[a * c + off..a * c + off + hd];
                        for ((wgt, da), &b) in weights.iter().zip(&d_a).zip(ids) {
                            let ds = wgt * (da - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kb = &ks[b * c + off..b * c + off + hd];
                            let dqa = &mut dst[a * row + off..a * row + off + hd];
                            for (t, x) in dqa.iter_mut().zip(kb) {
                                *t += ds * x;
                            }
                            let dkb = &mut dst[b * row + c + off..b * row + c + off + hd];
                            for (t, x) in dkb.iter_mut().zip(qa) {
                                *t += ds * x;
                            }
                        }
                    }
                }
            }
            if let Some(table) = table {
                for i in 0..n {
                    let r = &mut dst[i * row..i * row + 2 * c];
                    for head in r.chunks_exact_mut(hd) {
                        table.rotate_back(i, head);
                    }
                }
            }
        }
        let (dh, dw, db) = linear_back(dqkv.view(), bc.h.view(), p[bidx.qkv_w].matrix());
        g[bidx.qkv_w].matrix_mut().assign(&dw);
        g[bidx.qkv_b].vector_mut().assign(&db);
        let (dx_ln1, dw, db) = layer_norm_back(dh.view(), &bc.ln1, p[bidx.norm1_w].vector());
        g[bidx.norm1_w].vector_mut().assign(&dw);
        g[bidx.norm1_b].vector_mut().assign(&db);
        d_mid + dx_ln1
    }

    /// Forward pass without keeping the cache.
    pub fn features(&self, params: &Params, features: ArrayView2<f64>, geom: &Geometry) -> Result<Array2<f64>> {
        Ok(self.forward(params, features, geom, None)?.0)
    }
}

fn check_finite(a: &Array2<f64>, layer: impl FnOnce() -> String) -> Result<()> {
    if ops::all_finite(a) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

#[cfg(test)]
mod tests;
