mod common;

use std::collections::HashMap;

use common::directional_check;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbvqa_core::head::{combine, HeadCache, PatchScores, WeightActivation};
use sbvqa_core::nn::Module;
use sbvqa_core::{FeatureMap, HeadConfig, QualityHead};

fn head(c: usize, hidden: usize, seed: u64) -> QualityHead<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = QualityHead::new(
        &HeadConfig {
            in_channels: c,
            hidden_channels: hidden,
            weight_activation: WeightActivation::Sigmoid,
        },
        &mut rng,
    )
    .unwrap();
    h.visit_params_mut("", &mut |_, p| {
        p.value.iter_mut().for_each(|v| *v += rng.gen::<f64>() * 0.4 - 0.2)
    });
    h
}

fn features(t: usize, g: usize, c: usize, seed: u64) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(t, g, c, (0..t * g * g * c).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()).unwrap()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Two dense layers with a GELU between them, applied to one feature vector.
fn dense(params: &HashMap<String, Vec<f64>>, branch: &str, x: &[f64], hidden: usize) -> f64 {
    let w1 = &params[&format!("{branch}.conv1.weight")];
    let b1 = &params[&format!("{branch}.conv1.bias")];
    let w2 = &params[&format!("{branch}.conv2.weight")];
    let b2 = &params[&format!("{branch}.conv2.bias")];
    let mut out = b2[0];
    for j in 0..hidden {
        let pre: f64 = b1[j] + x.iter().enumerate().map(|(i, v)| v * w1[i * hidden + j]).sum::<f64>();
        out += gelu(pre) * w2[j];
    }
    out
}

#[test]
fn branches_match_dense_layer_oracle() {
    let (c, hidden) = (24, 6);
    let h = head(c, hidden, 1);
    let f = features(2, 3, c, 2);
    let mut params = HashMap::new();
    h.visit_params("", &mut |name, p| {
        params.insert(name.to_string(), p.value.clone());
    });
    let scores = h.score_branch(&f).unwrap();
    let weights = h.weight_branch(&f).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..f.positions() {
        let x = &f.data[i * c..(i + 1) * c];
        let s = dense(&params, "score", x, hidden);
        let w = 1.0 / (1.0 + (-dense(&params, "weight", x, hidden)).exp());
        assert!((scores[i] - s).abs() < 1e-6);
        assert!((weights[i] - w).abs() < 1e-6);
        assert!(weights[i] > 0.0 && weights[i] < 1.0);
        num += w * s;
        den += w;
    }
    assert!((h.forward(&f, None).unwrap() - num / (den + 1e-8)).abs() < 1e-6);
}

#[test]
fn head_gradients_match_finite_differences() {
    let h = head(12, 5, 3);
    let f = features(2, 2, 12, 4);
    let err = directional_check(
        &h,
        50,
        5,
        |m| m.forward(&f, None).unwrap(),
        |m| {
            let mut cache = HeadCache::default();
            m.forward(&f, Some(&mut cache)).unwrap();
            m.backward(&cache, &f, 1.0);
        },
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn feature_gradients_match_finite_differences() {
    let mut h = head(6, 3, 6);
    let f = features(1, 2, 6, 7);
    let mut cache = HeadCache::default();
    h.forward(&f, Some(&mut cache)).unwrap();
    let df = h.backward(&cache, &f, 1.0);
    let eps = 1e-6;
    for i in 0..f.data.len() {
        let mut plus = f.clone();
        plus.data[i] += eps;
        let mut minus = f.clone();
        minus.data[i] -= eps;
        let numeric = (h.forward(&plus, None).unwrap() - h.forward(&minus, None).unwrap()) / (2.0 * eps);
        assert!((numeric - df.data[i]).abs() <= 1e-6 * (1.0 + numeric.abs()));
    }
}

#[test]
fn constant_weight_branch_gives_plain_mean() {
    let mut h = head(8, 4, 8);
    // the weight branch ignores its input when its last layer is zero
    h.visit_params_mut("", &mut |name, p| {
        if name == "weight.conv2.weight" {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    });
    let f = features(2, 3, 8, 9);
    let s = h.score_branch(&f).unwrap();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    assert!((h.forward(&f, None).unwrap() - mean).abs() < 1e-6);
}

fn patch_scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(1e-3f64..1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn combine_is_permutation_invariant((s, w) in patch_scores(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let ps: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let pw: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
        prop_assert!((combine(&s, &w) - combine(&ps, &pw)).abs() < 1e-12);
    }

    #[test]
    fn combine_stays_within_score_range((s, w) in patch_scores()) {
        let q = PatchScores::new(s.clone(), w).unwrap().combine();
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // the epsilon in the denominator pulls the result slightly toward zero
        let w_sum: f64 = 1e-3;
        let slack = lo.abs().max(hi.abs()) * 1e-8 / w_sum + 1e-15;
        prop_assert!(q >= lo - slack && q <= hi + slack, "{} outside [{}, {}]", q, lo, hi);
    }

    #[test]
    fn raising_one_score_raises_the_result((s, w) in patch_scores(), pick in any::<prop::sample::Index>(), bump in 1e-3f64..2.0) {
        let i = pick.index(s.len());
        let mut up = s.clone();
        up[i] += bump;
        prop_assert!(combine(&up, &w) > combine(&s, &w));
    }

    #[test]
    // the epsilon shifts the result by |mean| * eps / sum(w), kept under 1e-6 here
    fn equal_weights_give_the_mean(s in prop::collection::vec(-3.0f64..3.0, 1..40), w in 0.05f64..1.0) {
        let ws = vec![w; s.len()];
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        prop_assert!((combine(&s, &ws) - mean).abs() < 1e-6);
    }
}

#[test]
fn combine_examples() {
    assert!((combine::<f64>(&[0.2, 0.4, 0.6], &[0.5; 3]) - 0.4).abs() < 1e-7);
    assert!((combine::<f64>(&[0.9], &[0.01]) - 0.9).abs() < 1e-5);
    assert!((combine::<f64>(&[1.0, 0.0], &[3.0, 1.0]) - 0.75).abs() < 1e-8);
    assert!(PatchScores::new(vec![1.0], vec![0.0]).is_err());
    assert!(PatchScores::new(vec![1.0, 2.0], vec![1.0]).is_err());
}
