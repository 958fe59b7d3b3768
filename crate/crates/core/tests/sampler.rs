use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbvqa_core::sampler::{plan_fragment, sample_fragment};
use sbvqa_core::{SampleMode, SamplerConfig, VideoTensor};

fn random_video(t: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoTensor::from_fn(t, h, w, |_, _, _, _| rng.gen::<f32>()).unwrap()
}

fn mode_of(train: bool) -> SampleMode {
    if train {
        SampleMode::Train
    } else {
        SampleMode::Eval
    }
}

prop_compose! {
    fn setup()(g in 1usize..5, p in 1usize..9, t_frames in 1usize..6)
              (g in Just(g), p in Just(p), t_frames in Just(t_frames),
               extra_h in 0usize..20, extra_w in 0usize..20, extra_t in 0usize..10,
               seed in any::<u64>(), train in any::<bool>())
              -> (usize, usize, usize, (usize, usize, usize), u64, bool) {
        (g, p, t_frames, (t_frames + extra_t, g * p + extra_h, g * p + extra_w), seed, train)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiles_are_verbatim_source_windows((g, p, tf, (t, h, w), seed, train) in setup()) {
        let video = random_video(t, h, w, seed);
        let plan = plan_fragment(video.dims(), g, p, tf, mode_of(train), seed).unwrap();
        let frag = sample_fragment(&video, plan.clone()).unwrap();
        prop_assert_eq!(frag.video.dims(), (tf, g * p, g * p));
        let (ch, cw) = plan.cell_size();
        for (i, &src_t) in plan.temporal_indices.iter().enumerate() {
            for gy in 0..g {
                for gx in 0..g {
                    let (dy, dx) = plan.offset(gy, gx);
                    prop_assert!(dy + p <= ch && dx + p <= cw);
                    let (sy, sx) = (gy * ch + dy, gx * cw + dx);
                    for y in 0..p {
                        for x in 0..p {
                            for c in 0..3 {
                                prop_assert_eq!(
                                    frag.video.at(i, gy * p + y, gx * p + x, c),
                                    video.at(src_t, sy + y, sx + x, c)
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_indices_increase_within_clip((g, p, tf, (t, h, w), seed, train) in setup()) {
        let plan = plan_fragment((t, h, w), g, p, tf, mode_of(train), seed).unwrap();
        prop_assert_eq!(plan.temporal_indices.len(), tf);
        prop_assert!(plan.temporal_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.temporal_indices.iter().all(|&i| i < t));
        prop_assert_eq!(plan.offsets.len(), g * g);
    }

    #[test]
    fn sampling_is_deterministic((g, p, tf, (t, h, w), seed, train) in setup(), other in any::<u64>()) {
        let cfg = SamplerConfig { grid_count: g, patch_size: p, t_frames: tf, eval_samples: 1 };
        let video = random_video(t, h, w, seed ^ 0x55);
        let a = cfg.fragment(&video, mode_of(train), seed).unwrap();
        let b = cfg.fragment(&video, mode_of(train), seed).unwrap();
        prop_assert_eq!(&a, &b);
        let e1 = cfg.fragment(&video, SampleMode::Eval, seed).unwrap();
        let e2 = cfg.fragment(&video, SampleMode::Eval, other).unwrap();
        prop_assert_eq!(e1.video, e2.video);
    }
}

#[test]
fn short_clips_are_stretched_to_the_sampled_length() {
    let cfg = SamplerConfig {
        grid_count: 2,
        patch_size: 4,
        t_frames: 8,
        eval_samples: 1,
    };
    let video = VideoTensor::from_fn(3, 8, 8, |t, _, _, _| t as f32).unwrap();
    let frag = cfg.fragment(&video, SampleMode::Eval, 0).unwrap();
    assert_eq!(frag.video.frames(), 8);
    let firsts: Vec<f32> = (0..8).map(|i| frag.video.at(i, 0, 0, 0)).collect();
    assert!(firsts.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(firsts[0], 0.0);
    assert_eq!(firsts[7], 2.0);
}

#[test]
fn too_small_frames_are_rejected() {
    let video = VideoTensor::filled(4, 10, 40, 0.0).unwrap();
    assert!(plan_fragment(video.dims(), 2, 8, 2, SampleMode::Eval, 0).is_err());
}
