#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sbvqa_core::attention::{relative_index, Coord, WindowAttention};
use sbvqa_core::nn::Module;
use sbvqa_core::VideoTensor;

pub fn random_video(t: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoTensor::from_fn(t, h, w, |_, _, _, _| rng.gen::<f32>()).unwrap()
}

pub fn flat_grads<M: Module<f64>>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, p| out.extend_from_slice(&p.grad));
    out
}

pub fn shift_params<M: Module<f64>>(m: &mut M, dir: &[f64], step: f64) {
    let mut i = 0;
    m.visit_params_mut("", &mut |_, p| {
        for v in p.value.iter_mut() {
            *v += step * dir[i];
            i += 1;
        }
    });
}

/// Worst relative error between the analytic directional derivative and a
/// central difference, over `directions` random unit directions.
///
/// `grad` fills parameter gradients of the scalar `loss` (after zeroing them).
pub fn directional_check<M: Module<f64> + Clone>(
    net: &M,
    directions: usize,
    seed: u64,
    loss: impl Fn(&M) -> f64,
    grad: impl Fn(&mut M),
) -> f64 {
    let mut model = net.clone();
    model.zero_grad();
    grad(&mut model);
    let g = flat_grads(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut dir: Vec<f64> = (0..g.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let mut plus = net.clone();
        shift_params(&mut plus, &dir, eps);
        let mut minus = net.clone();
        shift_params(&mut minus, &dir, -eps);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}

/// Plain relative-position-bias window attention over one window, written
/// out loop by loop. `table` is `heads x table_len`.
pub fn reference_attention(attn: &WindowAttention<f64>, x: &[f64], coords: &[Coord], table: &[f64]) -> Vec<f64> {
    let n = coords.len();
    let dim = attn.dim;
    let heads = attn.heads;
    let d = dim / heads;
    let tl = table.len() / heads;
    let linear = |input: &[f64], w: &[f64], b: Option<&[f64]>, i_dim: usize, o_dim: usize| -> Vec<f64> {
        let rows = input.len() / i_dim;
        let mut out = vec![0.0; rows * o_dim];
        for r in 0..rows {
            for o in 0..o_dim {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for i in 0..i_dim {
                    acc += input[r * i_dim + i] * w[i * o_dim + o];
                }
                out[r * o_dim + o] = acc;
            }
        }
        out
    };
    let qkv = linear(
        x,
        &attn.qkv.weight.value,
        attn.qkv.bias.as_ref().map(|b| b.value.as_slice()),
        dim,
        3 * dim,
    );
    let get = |tok: usize, part: usize, h: usize, i: usize| qkv[tok * 3 * dim + part * dim + h * d + i];
    let mut mixed = vec![0.0; n * dim];
    for h in 0..heads {
        for a in 0..n {
            let mut logits = vec![0.0; n];
            for b in 0..n {
                let dot: f64 = (0..d).map(|i| get(a, 0, h, i) * get(b, 1, h, i)).sum();
                logits[b] = dot / (d as f64).sqrt() + table[h * tl + relative_index(&coords[a], &coords[b], attn.window)];
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for i in 0..d {
                mixed[a * dim + h * d + i] = (0..n).map(|b| e[b] / z * get(b, 2, h, i)).sum();
            }
        }
    }
    linear(
        &mixed,
        &attn.proj.weight.value,
        attn.proj.bias.as_ref().map(|b| b.value.as_slice()),
        dim,
        dim,
    )
}
