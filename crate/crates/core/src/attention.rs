//! Windowed multi-head self-attention with gated relative position biases.
//!
//! Token pairs inside one window get an additive position bias looked up by
//! their relative displacement. Two tables exist per head: one for pairs whose
//! tokens come from the same source mini-patch and one for pairs that straddle
//! mini-patches. The gate picks the table per pair.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, matmul, softmax_rows, Linear, Module, Param, Real};

/// Token coordinate `(t, y, x)` on a stage's token grid.
pub type Coord = [usize; 3];

/// Pairwise "same mini-patch" relation for the tokens of one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateMask {
    n: usize,
    bits: Vec<bool>,
}

impl GateMask {
    /// Builds the mask from absolute token coordinates; tokens are in the same
    /// mini-patch when their coordinates fall in the same patch-sized block on
    /// every axis.
    pub fn from_coords(coords: &[Coord], tokens_per_patch: [usize; 3]) -> Self {
        let patch = |c: &Coord| {
            [
                c[0] / tokens_per_patch[0],
                c[1] / tokens_per_patch[1],
                c[2] / tokens_per_patch[2],
            ]
        };
        let ids: Vec<_> = coords.iter().map(patch).collect();
        let n = coords.len();
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                bits[i * n + j] = ids[i] == ids[j];
            }
        }
        Self { n, bits }
    }

    pub fn all(n: usize, value: bool) -> Self {
        Self {
            n,
            bits: vec![value; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn count_intra(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Gate mask for a window whose origin sits on a mini-patch boundary.
///
/// On every axis the patch extent (in tokens) must divide the window extent or
/// cover the whole window.
pub fn build_gate_mask(window: [usize; 3], tokens_per_patch: [usize; 3]) -> Result<GateMask> {
    if window.iter().chain(tokens_per_patch.iter()).any(|&v| v == 0) {
        return Err(Error::BadConfig(format!(
            "window {window:?} and tokens_per_patch {tokens_per_patch:?} must be positive"
        )));
    }
    for axis in 0..3 {
        let (w, p) = (window[axis], tokens_per_patch[axis]);
        if w % p != 0 && p < w {
            return Err(Error::BadConfig(format!(
                "patch extent {p} neither divides nor covers window extent {w} on axis {axis}"
            )));
        }
    }
    Ok(GateMask::from_coords(&window_coords(window), tokens_per_patch))
}

/// Coordinates of a full window anchored at the origin, in grid order.
pub fn window_coords(window: [usize; 3]) -> Vec<Coord> {
    let mut out = Vec::with_capacity(window.iter().product());
    for t in 0..window[0] {
        for y in 0..window[1] {
            for x in 0..window[2] {
                out.push([t, y, x]);
            }
        }
    }
    out
}

/// Number of entries in a relative-position table for `window`.
pub fn table_len(window: [usize; 3]) -> usize {
    window.iter().map(|&w| 2 * w - 1).product()
}

/// Table index of the displacement from token `b` to token `a`.
#[inline]
pub fn relative_index(a: &Coord, b: &Coord, window: [usize; 3]) -> usize {
    let d = |axis: usize| a[axis] + window[axis] - 1 - b[axis];
    (d(0) * (2 * window[1] - 1) + d(1)) * (2 * window[2] - 1) + d(2)
}

/// Intra- and cross-patch bias tables, `heads x table_len` each.
#[derive(Debug, Clone)]
pub struct BiasTables<T> {
    pub intra: Param<T>,
    pub cross: Param<T>,
}

impl<T: Real> BiasTables<T> {
    pub fn new<R: Rng>(heads: usize, window: [usize; 3], rng: &mut R) -> Self {
        let len = table_len(window);
        Self {
            intra: Param::normal(&[heads, len], 0.02, rng, false),
            cross: Param::normal(&[heads, len], 0.02, rng, false),
        }
    }

    pub fn heads(&self) -> usize {
        self.intra.shape[0]
    }

    pub fn table_len(&self) -> usize {
        self.intra.shape[1]
    }

    /// Makes the cross-patch table an exact copy of the intra-patch one.
    pub fn tie(&mut self) {
        self.cross.value = self.intra.value.clone();
    }
}

/// One attention window: its tokens (indices into the stage's token list),
/// pairwise table indices, and gate.
#[derive(Debug, Clone)]
pub struct Window {
    pub tokens: Vec<usize>,
    pub rel_index: Vec<u32>,
    pub gate: GateMask,
}

impl Window {
    pub fn from_coords(
        tokens: Vec<usize>,
        coords: &[Coord],
        window: [usize; 3],
        tokens_per_patch: [usize; 3],
    ) -> Result<Self> {
        let n = coords.len();
        if tokens.len() != n {
            return Err(Error::ShapeMismatch("token and coordinate counts differ".into()));
        }
        let mut rel_index = Vec::with_capacity(n * n);
        for a in coords {
            for b in coords {
                for axis in 0..3 {
                    if a[axis].abs_diff(b[axis]) >= window[axis] {
                        return Err(Error::ShapeMismatch(format!(
                            "tokens {a:?} and {b:?} do not fit in window {window:?}"
                        )));
                    }
                }
                rel_index.push(relative_index(a, b, window) as u32);
            }
        }
        Ok(Self {
            tokens,
            rel_index,
            gate: GateMask::from_coords(coords, tokens_per_patch),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Partition of a `t x h x w` token grid into (optionally shifted) windows.
///
/// Windows larger than the grid are clamped to it (with no shift on that
/// axis). A shift of `s` moves window boundaries to `s + k * window`; the
/// partial windows at the edges are kept as smaller windows.
pub fn partition_windows(
    grid: [usize; 3],
    window: [usize; 3],
    shift: [usize; 3],
    tokens_per_patch: [usize; 3],
) -> Result<Vec<Window>> {
    if grid.iter().chain(window.iter()).any(|&v| v == 0) {
        return Err(Error::BadConfig(format!(
            "grid {grid:?} and window {window:?} must be positive"
        )));
    }
    let mut eff = window;
    let mut sh = shift;
    for axis in 0..3 {
        if window[axis] >= grid[axis] {
            eff[axis] = grid[axis];
            sh[axis] = 0;
        }
        sh[axis] %= eff[axis];
    }
    let bucket = |c: usize, axis: usize| (c + eff[axis] - sh[axis]) / eff[axis];
    let counts: Vec<usize> = (0..3).map(|a| bucket(grid[a] - 1, a) + 1).collect();
    let mut members: Vec<Vec<(usize, Coord)>> = vec![Vec::new(); counts.iter().product()];
    let mut idx = 0;
    for t in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                let w = (bucket(t, 0) * counts[1] + bucket(y, 1)) * counts[2] + bucket(x, 2);
                members[w].push((idx, [t, y, x]));
                idx += 1;
            }
        }
    }
    members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let (tokens, coords): (Vec<usize>, Vec<Coord>) = m.into_iter().unzip();
            // bias tables are sized for the configured window
            Window::from_coords(tokens, &coords, window, tokens_per_patch)
        })
        .collect()
}

/// QKV projection, gated-bias attention inside windows, output projection.
#[derive(Debug, Clone)]
pub struct WindowAttention<T> {
    pub dim: usize,
    pub heads: usize,
    pub window: [usize; 3],
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub tables: BiasTables<T>,
}

#[derive(Debug, Clone, Default)]
pub struct AttnCache<T> {
    input: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<Vec<T>>,
    mixed: Vec<T>,
}

impl<T: Real> WindowAttention<T> {
    pub fn new<R: Rng>(dim: usize, heads: usize, window: [usize; 3], rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::BadConfig(format!(
                "dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            dim,
            heads,
            window,
            qkv: Linear::new(dim, 3 * dim, true, rng),
            proj: Linear::new(dim, dim, true, rng),
            tables: BiasTables::new(heads, window, rng),
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Attention over every window of a token list `x` (`tokens x dim`).
    pub fn forward(&self, x: &[T], windows: &[Window], cache: Option<&mut AttnCache<T>>) -> Vec<T> {
        let rows = x.len() / self.dim;
        let qkv = self.qkv.forward(x, rows);
        let mut mixed = vec![T::zero(); rows * self.dim];
        let keep = cache.is_some();
        let mut probs = Vec::new();
        for w in windows {
            for h in 0..self.heads {
                let p = self.attend(&qkv, w, h, &mut mixed);
                if keep {
                    probs.push(p);
                }
            }
        }
        let out = self.proj.forward(&mixed, rows);
        if let Some(c) = cache {
            c.input = x.to_vec();
            c.qkv = qkv;
            c.probs = probs;
            c.mixed = mixed;
        }
        out
    }

    /// Attention for a single window of `coords.len()` tokens with an explicit gate.
    pub fn grpb_attention(&self, x: &[T], coords: &[Coord], gate: &GateMask) -> Result<Vec<T>> {
        let n = coords.len();
        if x.len() != n * self.dim || gate.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} tokens of dim {} with a {n}x{n} gate, got {} values and a {}x{} gate",
                self.dim,
                x.len(),
                gate.len(),
                gate.len()
            )));
        }
        let mut window = Window::from_coords((0..n).collect(), coords, self.window, [1, 1, 1])?;
        window.gate = gate.clone();
        Ok(self.forward(x, &[window], None))
    }

    fn gather(&self, qkv: &[T], w: &Window, part: usize, h: usize) -> Vec<T> {
        let d = self.head_dim();
        let stride = 3 * self.dim;
        let off = part * self.dim + h * d;
        let mut out = Vec::with_capacity(w.len() * d);
        for &t in &w.tokens {
            out.extend_from_slice(&qkv[t * stride + off..t * stride + off + d]);
        }
        out
    }

    fn attend(&self, qkv: &[T], w: &Window, h: usize, mixed: &mut [T]) -> Vec<T> {
        let n = w.len();
        let d = self.head_dim();
        let q = self.gather(qkv, w, 0, h);
        let k = self.gather(qkv, w, 1, h);
        let v = self.gather(qkv, w, 2, h);
        let mut s = vec![T::zero(); n * n];
        matmul(&q, &k, &mut s, n, d, n, false, true, T::zero());
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let len = self.tables.table_len();
        let intra = &self.tables.intra.value[h * len..(h + 1) * len];
        let cross = &self.tables.cross.value[h * len..(h + 1) * len];
        for (idx, sv) in s.iter_mut().enumerate() {
            let rel = w.rel_index[idx] as usize;
            let bias = if w.gate.bits()[idx] { intra[rel] } else { cross[rel] };
            *sv = *sv * scale + bias;
        }
        softmax_rows(&mut s, n);
        let mut o = vec![T::zero(); n * d];
        matmul(&s, &v, &mut o, n, n, d, false, false, T::zero());
        for (r, &t) in w.tokens.iter().enumerate() {
            let dst = t * self.dim + h * d;
            mixed[dst..dst + d].copy_from_slice(&o[r * d..(r + 1) * d]);
        }
        s
    }

    pub fn backward(&mut self, cache: &AttnCache<T>, windows: &[Window], dy: &[T]) -> Vec<T> {
        let rows = cache.input.len() / self.dim;
        let d = self.head_dim();
        let dim = self.dim;
        let dmixed = self.proj.backward(&cache.mixed, dy, rows);
        let mut dqkv = vec![T::zero(); rows * 3 * dim];
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let len = self.tables.table_len();
        let mut probs = cache.probs.iter();
        for w in windows {
            let n = w.len();
            for h in 0..self.heads {
                let a = probs.next().expect("attention cache out of sync");
                let q = self.gather(&cache.qkv, w, 0, h);
                let k = self.gather(&cache.qkv, w, 1, h);
                let v = self.gather(&cache.qkv, w, 2, h);
                let mut d_o = Vec::with_capacity(n * d);
                for &t in &w.tokens {
                    d_o.extend_from_slice(&dmixed[t * dim + h * d..t * dim + (h + 1) * d]);
                }
                let mut da = vec![T::zero(); n * n];
                matmul(&d_o, &v, &mut da, n, d, n, false, true, T::zero());
                let mut dv = vec![T::zero(); n * d];
                matmul(a, &d_o, &mut dv, n, n, d, true, false, T::zero());
                // softmax backward: dS = A * (dA - rowsum(dA * A))
                let mut ds = da;
                for r in 0..n {
                    let arow = &a[r * n..(r + 1) * n];
                    let drow = &mut ds[r * n..(r + 1) * n];
                    let dot: T = arow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum();
                    for (g, &p) in drow.iter_mut().zip(arow) {
                        *g = p * (*g - dot);
                    }
                }
                let intra = &mut self.tables.intra.grad[h * len..(h + 1) * len];
                for (idx, &g) in ds.iter().enumerate() {
                    if w.gate.bits()[idx] {
                        intra[w.rel_index[idx] as usize] += g;
                    }
                }
                let cross = &mut self.tables.cross.grad[h * len..(h + 1) * len];
                for (idx, &g) in ds.iter().enumerate() {
                    if !w.gate.bits()[idx] {
                        cross[w.rel_index[idx] as usize] += g;
                    }
                }
                ds.iter_mut().for_each(|g| *g *= scale);
                let mut dq = vec![T::zero(); n * d];
                matmul(&ds, &k, &mut dq, n, n, d, false, false, T::zero());
                let mut dk = vec![T::zero(); n * d];
                matmul(&ds, &q, &mut dk, n, n, d, true, false, T::zero());
                for (r, &t) in w.tokens.iter().enumerate() {
                    let base = t * 3 * dim + h * d;
                    for (part, src) in [(0, &dq), (1, &dk), (2, &dv)] {
                        let dst = &mut dqkv[base + part * dim..base + part * dim + d];
                        for (o, &g) in dst.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                            *o += g;
                        }
                    }
                }
            }
        }
        self.qkv.backward(&cache.input, &dqkv, rows)
    }
}

impl<T: Real> Module<T> for WindowAttention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
        f(&join(prefix, "bias_intra"), &self.tables.intra);
        f(&join(prefix, "bias_cross"), &self.tables.cross);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.qkv.visit_params_mut(&join(prefix, "qkv"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
        f(&join(prefix, "bias_intra"), &mut self.tables.intra);
        f(&join(prefix, "bias_cross"), &mut self.tables.cross);
    }
}
