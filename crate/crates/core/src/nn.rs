//! Dense building blocks with hand-written backward passes.
//!
//! Every layer is generic over [`Real`] so the same code trains in `f32` and
//! runs gradient checks in `f64`. Activations are row-major `rows x features`
//! matrices stored in flat `Vec`s.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing
    /// `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c (m x n) = op(a) * op(b) + beta * c`.
///
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k`
/// when `tb`), all row-major.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a unique borrow distinct from a, b.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Whether decoupled weight decay applies (off for norms, biases, tables).
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize], decay: bool) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            decay,
        }
    }

    pub fn filled(shape: &[usize], v: T, decay: bool) -> Self {
        let mut p = Self::zeros(shape, decay);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R, decay: bool) -> Self {
        let mut p = Self::zeros(shape, decay);
        for v in &mut p.value {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::lit(z.clamp(-2.0, 2.0) * std);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Real> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `in_dim x out_dim`, so `y = x W + b`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: Param::normal(&[in_dim, out_dim], std, rng, true),
            bias: bias.then(|| Param::zeros(&[out_dim], false)),
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = match &self.bias {
            Some(b) => {
                let mut y = Vec::with_capacity(rows * self.out_dim);
                for _ in 0..rows {
                    y.extend_from_slice(&b.value);
                }
                y
            }
            None => vec![T::zero(); rows * self.out_dim],
        };
        let beta = if self.bias.is_some() { T::one() } else { T::zero() };
        matmul(
            x,
            &self.weight.value,
            &mut y,
            rows,
            self.in_dim,
            self.out_dim,
            false,
            false,
            beta,
        );
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
        self.accumulate(x, dy, rows);
        let mut dx = vec![T::zero(); rows * self.in_dim];
        matmul(
            dy,
            &self.weight.value,
            &mut dx,
            rows,
            self.out_dim,
            self.in_dim,
            false,
            true,
            T::zero(),
        );
        dx
    }

    /// Parameter gradients only; for layers whose input needs no gradient.
    pub fn accumulate(&mut self, x: &[T], dy: &[T], rows: usize) {
        matmul(
            x,
            dy,
            &mut self.weight.grad,
            self.in_dim,
            rows,
            self.out_dim,
            true,
            false,
            T::one(),
        );
        if let Some(b) = &mut self.bias {
            for row in dy.chunks_exact(self.out_dim) {
                for (g, &d) in b.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub dim: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

#[derive(Debug, Clone, Default)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gamma: Param::filled(&[dim], T::one(), false),
            beta: Param::zeros(&[dim], false),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[T], rows: usize, cache: Option<&mut NormCache<T>>) -> Vec<T> {
        let d = self.dim;
        let inv_d = T::lit(1.0 / d as f64);
        let eps = T::lit(self.eps);
        let mut y = vec![T::zero(); rows * d];
        let keep = cache.is_some();
        let mut xhat_all = if keep { vec![T::zero(); rows * d] } else { Vec::new() };
        let mut rstd_all = if keep { vec![T::zero(); rows] } else { Vec::new() };
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = (var + eps).sqrt().recip();
            let out = &mut y[r * d..(r + 1) * d];
            for i in 0..d {
                let xh = (row[i] - mean) * rstd;
                out[i] = xh * self.gamma.value[i] + self.beta.value[i];
                if keep {
                    xhat_all[r * d + i] = xh;
                }
            }
            if keep {
                rstd_all[r] = rstd;
            }
        }
        if let Some(c) = cache {
            c.xhat = xhat_all;
            c.rstd = rstd_all;
        }
        y
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &[T], rows: usize) -> Vec<T> {
        let d = self.dim;
        let inv_d = T::lit(1.0 / d as f64);
        let mut dx = vec![T::zero(); rows * d];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for i in 0..d {
                self.gamma.grad[i] += g[i] * xh[i];
                self.beta.grad[i] += g[i];
                dxhat[i] = g[i] * self.gamma.value[i];
                mean_dxhat += dxhat[i];
                mean_dxhat_xhat += dxhat[i] * xh[i];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            let rstd = cache.rstd[r];
            for i in 0..d {
                dx[r * d + i] = rstd * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let x2 = x * x;
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x2 * x);
    let th = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x2);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * dinner
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place row-wise softmax of a `rows x cols` matrix.
pub fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every parameter of `module`.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        let mut idx = 0;
        module.visit_params_mut("", &mut |_, p| {
            if moments.len() <= idx {
                moments.push((vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            }
            let (m, v) = &mut moments[idx];
            idx += 1;
            for i in 0..p.len() {
                let g = p.grad[i].to_f64().unwrap();
                let mi = b1 * m[i].to_f64().unwrap() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64().unwrap() + (1.0 - b2) * g * g;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let mut w = p.value[i].to_f64().unwrap();
                if p.decay {
                    w -= lr * wd * w;
                }
                w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p.value[i] = T::lit(w);
            }
        });
    }
}
