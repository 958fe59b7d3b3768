use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbvqa_core::metrics::EvalReport;
use sbvqa_core::{main_score, plcc, srcc};

/// Rank by counting: strictly smaller values plus half of the other ties.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

fn tied_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = rng.gen_range(2..8);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(0..levels) as f64
            } else {
                rng.gen::<f64>() * levels as f64
            }
        })
        .collect()
}

#[test]
fn agree_with_brute_force_on_tied_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.gen_range(2..60);
        let x = tied_vector(&mut rng, n);
        let y = tied_vector(&mut rng, n);
        let (Ok(s), Ok(p)) = (srcc(&x, &y), plcc(&x, &y)) else {
            continue;
        };
        assert!((s - brute_pearson(&brute_ranks(&x), &brute_ranks(&y))).abs() < 1e-12);
        assert!((p - brute_pearson(&x, &y)).abs() < 1e-12);
        checked += 1;
    }
}

#[test]
fn published_row_arithmetic() {
    assert!((main_score(0.7350, 0.7310) - 0.7330).abs() < 1e-12);
    assert!((main_score(0.862, 0.857) - 0.8595).abs() < 1e-12);
    let r = EvalReport::from_pairs(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap();
    for v in [r.srcc, r.plcc, r.main_score] {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(srcc(&[1.0], &[2.0]).is_err());
    assert!(srcc(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    assert!(plcc(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(plcc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn srcc_ignores_monotone_transforms((x, y) in pairs()) {
        let s = srcc(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let ty: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        prop_assert!((srcc(&tx, &ty).unwrap() - s).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((srcc(&neg, &y).unwrap() + s).abs() < 1e-12);
    }

    #[test]
    fn plcc_ignores_affine_maps((x, y) in pairs(), a in 0.1f64..10.0, b in -10.0f64..10.0) {
        let p = plcc(&x, &y).unwrap();
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((plcc(&ax, &y).unwrap() - p).abs() < 1e-9);
        let nx: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((plcc(&nx, &y).unwrap() + p).abs() < 1e-9);
    }

    #[test]
    fn report_is_bounded_and_averaged((x, y) in pairs()) {
        let r = EvalReport::from_pairs(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r.srcc) && (-1.0..=1.0).contains(&r.plcc));
        prop_assert_eq!(r.main_score, (r.srcc + r.plcc) / 2.0);
    }
}
