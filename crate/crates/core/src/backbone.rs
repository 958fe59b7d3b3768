//! Fragment attention backbone: 3D patch embedding followed by stages of
//! windowed transformer blocks (gated relative position biases, shifted
//! windows on odd blocks) with 2x2 patch merging between stages. The final
//! token grid is average-pooled to one feature vector per mini-patch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{partition_windows, AttnCache, Window, WindowAttention};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, join, LayerNorm, Linear, Module, NormCache, Param, Real};
use crate::sampler::SamplerConfig;
use crate::video::VideoTensor;

const PIXEL_MEAN: f32 = 0.45;
const PIXEL_STD: f32 = 0.225;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Attention window `(t, h, w)` in tokens.
    pub window: [usize; 3],
    pub depths: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub heads: Vec<usize>,
    /// Patch-embedding kernel and stride `(t, h, w)` in pixels.
    pub patch_embed: [usize; 3],
    pub mlp_ratio: usize,
    pub variant_tag: String,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            window: [8, 7, 7],
            depths: vec![2, 2],
            embed_dims: vec![96, 768],
            heads: vec![3, 12],
            patch_embed: [2, 4, 4],
            mlp_ratio: 4,
            variant_tag: "fanet".into(),
        }
    }
}

impl BackboneConfig {
    /// Branch variant with a shorter temporal window and coarser temporal embedding.
    pub fn faster_variant() -> Self {
        Self {
            window: [4, 7, 7],
            patch_embed: [4, 4, 4],
            variant_tag: "faster".into(),
            ..Self::default()
        }
    }

    /// Small trunk for CPU-scale training runs.
    pub fn tiny() -> Self {
        Self {
            window: [4, 4, 4],
            depths: vec![1, 1],
            embed_dims: vec![16, 32],
            heads: vec![2, 4],
            patch_embed: [2, 4, 4],
            mlp_ratio: 2,
            variant_tag: "tiny".into(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.embed_dims.last().copied().unwrap_or(0)
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::BadConfig(msg));
        let n = self.depths.len();
        if n == 0 || self.embed_dims.len() != n || self.heads.len() != n {
            return bad(format!(
                "depths, embed_dims and heads must have the same non-zero length ({}, {}, {})",
                n,
                self.embed_dims.len(),
                self.heads.len()
            ));
        }
        if self.window.iter().chain(&self.patch_embed).any(|&v| v == 0) || self.mlp_ratio == 0 {
            return bad("window, patch_embed and mlp_ratio must be positive".into());
        }
        for (s, (&dim, &heads)) in self.embed_dims.iter().zip(&self.heads).enumerate() {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return bad(format!("stage {s}: dim {dim} not divisible by {heads} heads"));
            }
        }
        Ok(())
    }

    /// Checks that fragments from `sampler` map onto whole tokens at every stage.
    pub fn validate_for(&self, sampler: &SamplerConfig) -> Result<()> {
        self.validate()?;
        let [pt, ph, pw] = self.patch_embed;
        let p = sampler.patch_size;
        let scale = 1usize << (self.stages() - 1);
        if ph != pw || p % (ph * scale) != 0 {
            return Err(Error::BadConfig(format!(
                "patch size {p} must be a multiple of embed stride {ph}x{pw} times 2^{}",
                self.stages() - 1
            )));
        }
        if sampler.t_frames % pt != 0 {
            return Err(Error::BadConfig(format!(
                "t_frames {} must be a multiple of the temporal embed stride {pt}",
                sampler.t_frames
            )));
        }
        Ok(())
    }
}

/// One feature vector per mini-patch per pooled time step, `t x g x g x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub t: usize,
    pub g: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(t: usize, g: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != t * g * g * c {
            return Err(Error::ShapeMismatch(format!(
                "feature map {t}x{g}x{g}x{c} needs {} values, got {}",
                t * g * g * c,
                data.len()
            )));
        }
        Ok(Self { t, g, c, data })
    }

    pub fn positions(&self) -> usize {
        self.t * self.g * self.g
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.t, self.g, self.g, self.c)
    }
}

#[derive(Debug, Clone)]
struct SwinBlock<T> {
    norm1: LayerNorm<T>,
    attn: WindowAttention<T>,
    norm2: LayerNorm<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    shifted: bool,
}

#[derive(Debug, Clone, Default)]
struct BlockCache<T> {
    n1: NormCache<T>,
    attn: AttnCache<T>,
    n2: NormCache<T>,
    xn2: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

impl<T: Real> SwinBlock<T> {
    fn new<R: Rng>(dim: usize, heads: usize, cfg: &BackboneConfig, shifted: bool, rng: &mut R) -> Result<Self> {
        let hidden = dim * cfg.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(dim),
            attn: WindowAttention::new(dim, heads, cfg.window, rng)?,
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, true, rng),
            fc2: Linear::new(hidden, dim, true, rng),
            shifted,
        })
    }

    fn forward(&self, x: &[T], windows: &[Window], cache: Option<&mut BlockCache<T>>) -> Vec<T> {
        let dim = self.norm1.dim;
        let rows = x.len() / dim;
        let mut c = cache;
        let xn1 = self
            .norm1
            .forward(x, rows, c.as_deref_mut().map(|c| &mut c.n1));
        let a = self
            .attn
            .forward(&xn1, windows, c.as_deref_mut().map(|c| &mut c.attn));
        let y1: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let xn2 = self
            .norm2
            .forward(&y1, rows, c.as_deref_mut().map(|c| &mut c.n2));
        let pre = self.fc1.forward(&xn2, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let m = self.fc2.forward(&act, rows);
        let out = y1.iter().zip(&m).map(|(&u, &v)| u + v).collect();
        if let Some(c) = c {
            c.xn2 = xn2;
            c.pre = pre;
            c.act = act;
        }
        out
    }

    fn backward(&mut self, cache: &BlockCache<T>, windows: &[Window], dy: &[T]) -> Vec<T> {
        let dim = self.norm1.dim;
        let rows = dy.len() / dim;
        let dact = self.fc2.backward(&cache.act, dy, rows);
        let dpre: Vec<T> = dact
            .iter()
            .zip(&cache.pre)
            .map(|(&g, &p)| g * gelu_grad(p))
            .collect();
        let dxn2 = self.fc1.backward(&cache.xn2, &dpre, rows);
        let dn2 = self.norm2.backward(&cache.n2, &dxn2, rows);
        let dy1: Vec<T> = dy.iter().zip(&dn2).map(|(&a, &b)| a + b).collect();
        let dxn1 = self.attn.backward(&cache.attn, windows, &dy1);
        let dn1 = self.norm1.backward(&cache.n1, &dxn1, rows);
        dy1.iter().zip(&dn1).map(|(&a, &b)| a + b).collect()
    }
}

impl<T: Real> Module<T> for SwinBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

/// 2x2 spatial merge: concatenate neighbours, normalize, project.
#[derive(Debug, Clone)]
struct PatchMerging<T> {
    norm: LayerNorm<T>,
    reduction: Linear<T>,
}

#[derive(Debug, Clone, Default)]
struct MergeCache<T> {
    norm: NormCache<T>,
    normed: Vec<T>,
}

impl<T: Real> PatchMerging<T> {
    fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(4 * in_dim),
            reduction: Linear::new(4 * in_dim, out_dim, false, rng),
        }
    }

    fn gather(x: &[T], grid: [usize; 3], c: usize) -> Vec<T> {
        let [t, h, w] = grid;
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(t * h2 * w2 * 4 * c);
        for ti in 0..t {
            for y in 0..h2 {
                for xx in 0..w2 {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let src = ((ti * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        out.extend_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        out
    }

    fn scatter(dg: &[T], grid: [usize; 3], c: usize) -> Vec<T> {
        let [t, h, w] = grid;
        let (h2, w2) = (h / 2, w / 2);
        let mut dx = vec![T::zero(); t * h * w * c];
        let mut src = 0;
        for ti in 0..t {
            for y in 0..h2 {
                for xx in 0..w2 {
                    for (dy, ddx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let dst = ((ti * h + 2 * y + dy) * w + 2 * xx + ddx) * c;
                        dx[dst..dst + c].copy_from_slice(&dg[src..src + c]);
                        src += c;
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, x: &[T], grid: [usize; 3], c: usize, cache: Option<&mut MergeCache<T>>) -> Vec<T> {
        let gathered = Self::gather(x, grid, c);
        let rows = gathered.len() / (4 * c);
        let mut cache = cache;
        let normed = self
            .norm
            .forward(&gathered, rows, cache.as_deref_mut().map(|c| &mut c.norm));
        let out = self.reduction.forward(&normed, rows);
        if let Some(c) = cache {
            c.normed = normed;
        }
        out
    }

    fn backward(&mut self, cache: &MergeCache<T>, grid: [usize; 3], c: usize, dy: &[T]) -> Vec<T> {
        let rows = cache.normed.len() / (4 * c);
        let dn = self.reduction.backward(&cache.normed, dy, rows);
        let dg = self.norm.backward(&cache.norm, &dn, rows);
        Self::scatter(&dg, grid, c)
    }
}

impl<T: Real> Module<T> for PatchMerging<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.reduction.visit_params(&join(prefix, "reduction"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.reduction.visit_params_mut(&join(prefix, "reduction"), f);
    }
}

#[derive(Debug, Clone)]
struct Stage<T> {
    merge: Option<PatchMerging<T>>,
    blocks: Vec<SwinBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    cfg: BackboneConfig,
    embed: Linear<T>,
    embed_norm: LayerNorm<T>,
    stages: Vec<Stage<T>>,
    final_norm: LayerNorm<T>,
}

#[derive(Debug, Clone, Default)]
struct StageCache<T> {
    grid: [usize; 3],
    merge: Option<MergeCache<T>>,
    windows: [Vec<Window>; 2],
    blocks: Vec<BlockCache<T>>,
}

/// Activations kept by a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct BackboneCache<T> {
    patches: Vec<T>,
    embed_norm: NormCache<T>,
    stages: Vec<StageCache<T>>,
    final_norm: NormCache<T>,
    final_grid: [usize; 3],
    pool: usize,
}

/// Token grids and activations after every transformer block.
#[derive(Debug, Clone, Default)]
pub struct BlockTrace<T> {
    pub outputs: Vec<([usize; 3], Vec<T>)>,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [pt, ph, pw] = cfg.patch_embed;
        let d0 = cfg.embed_dims[0];
        let mut stages = Vec::with_capacity(cfg.stages());
        for s in 0..cfg.stages() {
            let dim = cfg.embed_dims[s];
            let merge = (s > 0).then(|| PatchMerging::new(cfg.embed_dims[s - 1], dim, rng));
            let blocks = (0..cfg.depths[s])
                .map(|b| SwinBlock::new(dim, cfg.heads[s], cfg, b % 2 == 1, rng))
                .collect::<Result<_>>()?;
            stages.push(Stage { merge, blocks });
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed: Linear::new(pt * ph * pw * 3, d0, true, rng),
            embed_norm: LayerNorm::new(d0),
            stages,
            final_norm: LayerNorm::new(cfg.feature_dim()),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Non-overlapping 3D patches of the normalized fragment, one row per token.
    fn embed_input(&self, frag: &VideoTensor) -> Result<(Vec<T>, [usize; 3])> {
        let [pt, ph, pw] = self.cfg.patch_embed;
        let (t, h, w) = frag.dims();
        if t % pt != 0 || h % ph != 0 || w % pw != 0 || frag.channels() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "fragment {t}x{h}x{w}x{} is not divisible by patch embedding {:?}",
                frag.channels(),
                self.cfg.patch_embed
            )));
        }
        let grid = [t / pt, h / ph, w / pw];
        let row = pt * ph * pw * 3;
        let mut out = Vec::with_capacity(grid.iter().product::<usize>() * row);
        let inv_std = 1.0 / PIXEL_STD;
        for gt in 0..grid[0] {
            for gy in 0..grid[1] {
                for gx in 0..grid[2] {
                    for dt in 0..pt {
                        for dy in 0..ph {
                            let src = frag.index(gt * pt + dt, gy * ph + dy, gx * pw, 0);
                            for &v in &frag.data()[src..src + pw * 3] {
                                out.push(T::lit(((v - PIXEL_MEAN) * inv_std) as f64));
                            }
                        }
                    }
                }
            }
        }
        Ok((out, grid))
    }

    fn tokens_per_patch(&self, patch_size: usize, stage: usize, grid: [usize; 3]) -> Result<[usize; 3]> {
        let stride = self.cfg.patch_embed[1] << stage;
        if patch_size % stride != 0 {
            return Err(Error::ShapeMismatch(format!(
                "patch size {patch_size} does not map to whole tokens at stage {stage} (stride {stride})"
            )));
        }
        // mini-patches are aligned over the whole clip
        Ok([grid[0], patch_size / stride, patch_size / stride])
    }

    fn layouts(&self, grid: [usize; 3], tpp: [usize; 3]) -> Result<[Vec<Window>; 2]> {
        let w = self.cfg.window;
        let shift = [w[0] / 2, w[1] / 2, w[2] / 2];
        Ok([
            partition_windows(grid, w, [0, 0, 0], tpp)?,
            partition_windows(grid, w, shift, tpp)?,
        ])
    }

    /// Runs the backbone on a fragment of `grid_count x grid_count` mini-patches.
    pub fn forward(
        &self,
        frag: &VideoTensor,
        grid_count: usize,
        cache: Option<&mut BackboneCache<T>>,
    ) -> Result<FeatureMap<T>> {
        self.forward_impl(frag, grid_count, cache, None)
    }

    /// Forward pass that also records the output of every block.
    pub fn trace(&self, frag: &VideoTensor, grid_count: usize) -> Result<(FeatureMap<T>, BlockTrace<T>)> {
        let mut trace = BlockTrace::default();
        let fm = self.forward_impl(frag, grid_count, None, Some(&mut trace))?;
        Ok((fm, trace))
    }

    fn forward_impl(
        &self,
        frag: &VideoTensor,
        grid_count: usize,
        cache: Option<&mut BackboneCache<T>>,
        mut trace: Option<&mut BlockTrace<T>>,
    ) -> Result<FeatureMap<T>> {
        let side = frag.height();
        if grid_count == 0 || frag.width() != side || side % grid_count != 0 {
            return Err(Error::ShapeMismatch(format!(
                "fragment {}x{} is not a square grid of {grid_count} patches",
                frag.height(),
                frag.width()
            )));
        }
        let patch_size = side / grid_count;
        let (patches, mut grid) = self.embed_input(frag)?;
        let rows = patches.len() / self.embed.in_dim;
        let mut cache = cache;
        let embedded = self.embed.forward(&patches, rows);
        let mut x = self.embed_norm.forward(
            &embedded,
            rows,
            cache.as_deref_mut().map(|c| &mut c.embed_norm),
        );
        let mut stage_caches = Vec::new();
        let mut dim = self.cfg.embed_dims[0];
        for (s, stage) in self.stages.iter().enumerate() {
            let mut sc = StageCache::default();
            if let Some(merge) = &stage.merge {
                if grid[1] % 2 != 0 || grid[2] % 2 != 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "cannot merge odd token grid {grid:?}"
                    )));
                }
                let mut mc = MergeCache::default();
                x = merge.forward(&x, grid, dim, cache.is_some().then_some(&mut mc));
                sc.grid = grid;
                sc.merge = Some(mc);
                grid = [grid[0], grid[1] / 2, grid[2] / 2];
                dim = self.cfg.embed_dims[s];
            }
            let tpp = self.tokens_per_patch(patch_size, s, grid)?;
            let windows = self.layouts(grid, tpp)?;
            for block in &stage.blocks {
                let layout = &windows[block.shifted as usize];
                if cache.is_some() {
                    let mut bc = BlockCache::default();
                    x = block.forward(&x, layout, Some(&mut bc));
                    sc.blocks.push(bc);
                } else {
                    x = block.forward(&x, layout, None);
                }
                if let Some(tr) = trace.as_deref_mut() {
                    tr.outputs.push((grid, x.clone()));
                }
            }
            sc.windows = windows;
            stage_caches.push(sc);
        }
        let rows = x.len() / dim;
        let normed = self
            .final_norm
            .forward(&x, rows, cache.as_deref_mut().map(|c| &mut c.final_norm));

        let [t, h, w] = grid;
        if h % grid_count != 0 || w % grid_count != 0 || h / grid_count == 0 {
            return Err(Error::ShapeMismatch(format!(
                "final token grid {h}x{w} cannot be pooled to {grid_count}x{grid_count}"
            )));
        }
        let k = h / grid_count;
        let inv = T::lit(1.0 / (k * k) as f64);
        let mut pooled = vec![T::zero(); t * grid_count * grid_count * dim];
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((ti * h + y) * w + xx) * dim;
                    let dst = ((ti * grid_count + y / k) * grid_count + xx / k) * dim;
                    for c in 0..dim {
                        pooled[dst + c] += normed[src + c] * inv;
                    }
                }
            }
        }
        if let Some(c) = cache {
            c.patches = patches;
            c.stages = stage_caches;
            c.final_grid = grid;
            c.pool = k;
        }
        FeatureMap::new(t, grid_count, dim, pooled)
    }

    /// Accumulates parameter gradients given `dL/dF`.
    pub fn backward(&mut self, cache: &BackboneCache<T>, d_features: &FeatureMap<T>) {
        let [t, h, w] = cache.final_grid;
        let g = d_features.g;
        let dim = d_features.c;
        let k = cache.pool;
        let inv = T::lit(1.0 / (k * k) as f64);
        let mut dx = vec![T::zero(); t * h * w * dim];
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    let dst = ((ti * h + y) * w + xx) * dim;
                    let src = ((ti * g + y / k) * g + xx / k) * dim;
                    for c in 0..dim {
                        dx[dst + c] = d_features.data[src + c] * inv;
                    }
                }
            }
        }
        let rows = t * h * w;
        let mut dx = self.final_norm.backward(&cache.final_norm, &dx, rows);
        for (s, stage) in self.stages.iter_mut().enumerate().rev() {
            let sc = &cache.stages[s];
            for (b, block) in stage.blocks.iter_mut().enumerate().rev() {
                let layout = &sc.windows[block.shifted as usize];
                dx = block.backward(&sc.blocks[b], layout, &dx);
            }
            if let (Some(merge), Some(mc)) = (stage.merge.as_mut(), sc.merge.as_ref()) {
                dx = merge.backward(mc, sc.grid, self.cfg.embed_dims[s - 1], &dx);
            }
        }
        let rows = cache.patches.len() / self.embed.in_dim;
        let de = self.embed_norm.backward(&cache.embed_norm, &dx, rows);
        self.embed.accumulate(&cache.patches, &de, rows);
    }

    /// Direct access to every attention layer, in forward order.
    pub fn attention_layers_mut(&mut self) -> Vec<&mut WindowAttention<T>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.blocks.iter_mut().map(|b| &mut b.attn))
            .collect()
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.embed.visit_params(&join(prefix, "embed"), f);
        self.embed_norm.visit_params(&join(prefix, "embed_norm"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            let sp = join(prefix, &format!("stage{s}"));
            if let Some(m) = &stage.merge {
                m.visit_params(&join(&sp, "merge"), f);
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                block.visit_params(&join(&sp, &format!("block{b}")), f);
            }
        }
        self.final_norm.visit_params(&join(prefix, "final_norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.embed.visit_params_mut(&join(prefix, "embed"), f);
        self.embed_norm.visit_params_mut(&join(prefix, "embed_norm"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let sp = join(prefix, &format!("stage{s}"));
            if let Some(m) = &mut stage.merge {
                m.visit_params_mut(&join(&sp, "merge"), f);
            }
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_params_mut(&join(&sp, &format!("block{b}")), f);
            }
        }
        self.final_norm.visit_params_mut(&join(prefix, "final_norm"), f);
    }
}
