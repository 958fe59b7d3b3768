mod common;

use common::{directional_check, random_video, reference_attention};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbvqa_core::attention::{build_gate_mask, window_coords, GateMask, WindowAttention};
use sbvqa_core::model::BranchCache;
use sbvqa_core::nn::Module;
use sbvqa_core::{Backbone, BackboneConfig, BranchNet, FeatureMap, HeadConfig, VideoTensor};

fn small(window: [usize; 3], depths: Vec<usize>, dims: Vec<usize>, heads: Vec<usize>, embed: [usize; 3]) -> BackboneConfig {
    BackboneConfig {
        window,
        depths,
        embed_dims: dims,
        heads,
        patch_embed: embed,
        mlp_ratio: 2,
        variant_tag: "test".into(),
    }
}

fn randomize<M: Module<f64>>(m: &mut M, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_params_mut("", &mut |_, p| {
        for v in p.value.iter_mut() {
            *v += std * (rng.gen::<f64>() - 0.5);
        }
    });
}

fn branch_grad_error(cfg: &BackboneConfig, grid: usize, frames: usize, side: usize, seed: u64) -> f64 {
    let head = HeadConfig {
        in_channels: cfg.feature_dim(),
        hidden_channels: 4,
        ..HeadConfig::default()
    };
    let mut net = BranchNet::<f64>::new(cfg, &head, seed).unwrap();
    // move biases, norms and tables away from their symmetric init
    randomize(&mut net, seed + 1, 0.2);
    let frag = random_video(frames, side, side, seed + 2);
    directional_check(
        &net,
        50,
        seed + 3,
        |n| n.forward(&frag, grid, None).unwrap(),
        |n| {
            let mut cache = BranchCache::default();
            n.forward(&frag, grid, Some(&mut cache)).unwrap();
            n.backward(&cache, 1.0);
        },
    )
}

#[test]
fn gradients_single_block_single_head() {
    let cfg = small([1, 2, 2], vec![1], vec![8], vec![1], [1, 2, 2]);
    let err = branch_grad_error(&cfg, 2, 2, 8, 10);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradients_shifted_windows_with_cross_pairs() {
    let cfg = small([2, 4, 4], vec![2], vec![8], vec![2], [1, 2, 2]);
    let err = branch_grad_error(&cfg, 3, 4, 12, 20);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradients_through_patch_merging() {
    let cfg = small([1, 2, 2], vec![1, 1], vec![4, 8], vec![1, 2], [2, 2, 2]);
    let err = branch_grad_error(&cfg, 2, 4, 16, 30);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn backbone_gradients_for_a_feature_loss() {
    let cfg = small([1, 4, 4], vec![2], vec![8], vec![2], [1, 2, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Backbone::<f64>::new(&cfg, &mut rng).unwrap();
    randomize(&mut net, 6, 0.2);
    let frag = random_video(2, 8, 8, 7);
    let probe: Vec<f64> = (0..2 * 2 * 2 * 8).map(|_| rng.gen::<f64>() - 0.5).collect();
    let err = directional_check(
        &net,
        50,
        8,
        |n| {
            let f = n.forward(&frag, 2, None).unwrap();
            f.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        },
        |n| {
            let mut cache = Default::default();
            n.forward(&frag, 2, Some(&mut cache)).unwrap();
            let d = FeatureMap::new(2, 2, 8, probe.clone()).unwrap();
            n.backward(&cache, &d);
        },
    );
    assert!(err < 1e-4, "relative error {err}");
}

fn attention(dim: usize, heads: usize, window: [usize; 3], seed: u64) -> WindowAttention<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attn = WindowAttention::new(dim, heads, window, &mut rng).unwrap();
    randomize(&mut attn, seed + 1, 1.0);
    attn
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gate_mask_symmetric_with_true_diagonal(
        wt in 1usize..4, wh in 1usize..6, ww in 1usize..6,
        pt in 1usize..4, ph in 1usize..6, pw in 1usize..6,
    ) {
        let window = [wt, wh, ww];
        let tpp = [pt, ph, pw];
        let fits = (0..3).all(|a| window[a] % tpp[a] == 0 || tpp[a] >= window[a]);
        match build_gate_mask(window, tpp) {
            Ok(g) => {
                prop_assert!(fits);
                let n = g.len();
                prop_assert_eq!(n, wt * wh * ww);
                for i in 0..n {
                    prop_assert!(g.get(i, i));
                    for j in 0..n {
                        prop_assert_eq!(g.get(i, j), g.get(j, i));
                    }
                }
                let cells: usize = (0..3).map(|a| window[a].div_ceil(tpp[a])).product();
                let per: usize = (0..3).map(|a| tpp[a].min(window[a])).product();
                prop_assert_eq!(g.count_intra(), cells * per * per);
            }
            Err(_) => prop_assert!(!fits),
        }
    }

    #[test]
    fn tied_tables_reduce_to_plain_bias_attention(
        seed in any::<u64>(), heads in 1usize..3, wh in 1usize..4, ww in 1usize..4, ph in 1usize..3,
    ) {
        let window = [2, wh, ww];
        let mut attn = attention(4 * heads, heads, window, seed);
        attn.tables.tie();
        let coords = window_coords(window);
        let n = coords.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x: Vec<f64> = (0..n * attn.dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let gate = GateMask::from_coords(&coords, [1, ph, ph]);
        let gated = attn.grpb_attention(&x, &coords, &gate).unwrap();
        let ungated = attn.grpb_attention(&x, &coords, &GateMask::all(n, true)).unwrap();
        prop_assert_eq!(&gated, &ungated);
        let reference = reference_attention(&attn, &x, &coords, &attn.tables.intra.value);
        for (a, b) in gated.iter().zip(&reference) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn output_grid_equals_sampler_grid(
        stages in 1usize..3, d0 in 1usize..3, d1 in 1usize..3, g in 1usize..4, w in 1usize..4, seed in any::<u64>(),
    ) {
        let depths = vec![d0, d1][..stages].to_vec();
        let cfg = small([1, w, w], depths, vec![4, 8][..stages].to_vec(), vec![1, 2][..stages].to_vec(), [2, 2, 2]);
        let p = 2 << (stages - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Backbone::<f32>::new(&cfg, &mut rng).unwrap();
        let fm = net.forward(&random_video(4, g * p, g * p, seed), g, None).unwrap();
        prop_assert_eq!(fm.shape(), (2, g, g, cfg.feature_dim()));
    }
}

#[test]
fn cross_table_is_ignored_by_all_intra_windows() {
    let window = [1, 4, 4];
    let attn = attention(8, 2, window, 3);
    let coords = window_coords(window);
    let n = coords.len();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..n * 8).map(|_| rng.gen::<f64>() - 0.5).collect();
    let single_cell = GateMask::from_coords(&coords, [1, 4, 4]);
    assert_eq!(single_cell.count_intra(), n * n);
    let split = GateMask::from_coords(&coords, [1, 2, 2]);

    let mut perturbed = attn.clone();
    perturbed.tables.cross.value.iter_mut().for_each(|v| *v += 3.0 * rng.gen::<f64>());
    assert_eq!(
        attn.grpb_attention(&x, &coords, &single_cell).unwrap(),
        perturbed.grpb_attention(&x, &coords, &single_cell).unwrap()
    );
    assert_ne!(
        attn.grpb_attention(&x, &coords, &split).unwrap(),
        perturbed.grpb_attention(&x, &coords, &split).unwrap()
    );
}

#[test]
fn zero_projections_give_bias_softmax_weighted_values() {
    let window = [1, 2, 3];
    let mut attn = attention(4, 1, window, 9);
    let coords = window_coords(window);
    let n = coords.len();
    // zero query/key columns, identity value and output projections
    for i in 0..4 {
        for o in 0..12 {
            attn.qkv.weight.value[i * 12 + o] = if o >= 8 && o - 8 == i { 1.0 } else { 0.0 };
        }
        for o in 0..4 {
            attn.proj.weight.value[i * 4 + o] = if i == o { 1.0 } else { 0.0 };
        }
    }
    attn.qkv.bias.as_mut().unwrap().value.iter_mut().for_each(|v| *v = 0.0);
    attn.proj.bias.as_mut().unwrap().value.iter_mut().for_each(|v| *v = 0.0);
    let gate = GateMask::from_coords(&coords, [1, 1, 3]);
    let x: Vec<f64> = (0..n * 4).map(|i| (i as f64 * 0.37).sin()).collect();
    let out = attn.grpb_attention(&x, &coords, &gate).unwrap();
    for a in 0..n {
        let bias: Vec<f64> = (0..n)
            .map(|b| {
                let idx = sbvqa_core::attention::relative_index(&coords[a], &coords[b], window);
                if gate.get(a, b) {
                    attn.tables.intra.value[idx]
                } else {
                    attn.tables.cross.value[idx]
                }
            })
            .collect();
        let z: f64 = bias.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let expect: f64 = (0..n).map(|b| bias[b].exp() / z * x[b * 4 + c]).sum();
            assert!((out[a * 4 + c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn changing_one_tile_leaves_distant_windows_untouched() {
    let cfg = small([2, 4, 4], vec![1, 1], vec![8, 16], vec![1, 2], [2, 4, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = Backbone::<f64>::new(&cfg, &mut rng).unwrap();
    // G = 4, P = 8: each tile is 2x2 stage-1 tokens
    let a = random_video(4, 32, 32, 13);
    let mut b = a.clone();
    for t in 0..4 {
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let i = b.index(t, y, x, c);
                    b.data_mut()[i] = 1.0 - b.data()[i];
                }
            }
        }
    }
    let (fa, ta) = net.trace(&a, 4).unwrap();
    let (fb, tb) = net.trace(&b, 4).unwrap();
    let (grid, first_a) = &ta.outputs[0];
    let first_b = &tb.outputs[0].1;
    assert_eq!(*grid, [2, 8, 8]);
    let dim = 8;
    let mut changed_near = false;
    for t in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                let i = ((t * grid[1] + y) * grid[2] + x) * dim;
                let same = first_a[i..i + dim] == first_b[i..i + dim];
                if y >= 4 || x >= 4 {
                    assert!(same, "token ({t},{y},{x}) outside the edited window changed");
                } else if !same {
                    changed_near = true;
                }
            }
        }
    }
    assert!(changed_near);
    assert_ne!(fa.data[..16], fb.data[..16]);
}

#[test]
fn default_config_maps_full_clip_to_seven_by_seven() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Backbone::<f32>::new(&BackboneConfig::default(), &mut rng).unwrap();
    let frag = VideoTensor::from_fn(16, 224, 224, |t, y, x, c| ((t + y * 3 + x * 7 + c) % 17) as f32 / 16.0).unwrap();
    let fm = net.forward(&frag, 7, None).unwrap();
    assert_eq!(fm.shape(), (8, 7, 7, 768));
    assert!(fm.data.iter().all(|v| v.is_finite()));
}
