mod common;

use common::random_video;
use proptest::prelude::*;
use sbvqa_core::pgc::{
    correlate_heatmap, ladder_study, minmax_scale, psnr, segment_bounds, segment_video, synth_compress,
    HeatmapBin, HeatmapSeries, LadderEntry, SegmentScoreSeries,
};
use sbvqa_core::{Error, VideoTensor};

fn bins(edges: &[f64], values: &[f64]) -> Vec<HeatmapBin> {
    edges
        .windows(2)
        .zip(values)
        .map(|(e, &value)| HeatmapBin {
            start_sec: e[0],
            end_sec: e[1],
            value,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn segments_tile_the_timeline(frames in 1usize..500, len in 1usize..60) {
        let b = segment_bounds(frames, len);
        prop_assert_eq!(b[0].0, 0);
        prop_assert_eq!(b.last().unwrap().1, frames);
        prop_assert!(b.windows(2).all(|w| w[0].1 == w[1].0));
        prop_assert!(b.iter().all(|(s, e)| e > s));
        // only the last segment may differ from len, and never by half or more
        for (s, e) in &b[..b.len() - 1] {
            prop_assert_eq!(e - s, len);
        }
        let last = b.last().unwrap();
        if b.len() > 1 {
            prop_assert!((last.1 - last.0) * 2 > len && (last.1 - last.0) * 2 <= 3 * len);
        }
    }

    #[test]
    fn resampling_a_constant_heatmap_keeps_it(
        widths in prop::collection::vec(0.05f64..3.0, 1..20), c in 0.0f64..=1.0, a in 0.0f64..1.0, len in 0.01f64..10.0,
    ) {
        let mut edges = vec![0.0];
        for w in &widths {
            edges.push(edges.last().unwrap() + w);
        }
        let hm = HeatmapSeries::new("v", bins(&edges, &vec![c; widths.len()])).unwrap();
        let start = a * edges.last().unwrap();
        let got = hm.mean_over(start, start + len).unwrap();
        prop_assert!((got - c).abs() < 1e-12);
    }

    #[test]
    fn minmax_is_idempotent(v in prop::collection::vec(-100.0f64..100.0, 2..50)) {
        let (once, constant) = minmax_scale(&v).unwrap();
        prop_assert!(once.iter().all(|x| (0.0..=1.0).contains(x)));
        if !constant {
            let (twice, _) = minmax_scale(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn stronger_compression_lowers_psnr_almost_always() {
    let trials = 100;
    let mut ok = 0;
    for seed in 0..trials {
        let v = random_video(2, 16 + (seed as usize % 3) * 8, 16, seed);
        let weak = synth_compress(&v, 0.3, seed).unwrap();
        let strong = synth_compress(&v, 0.9, seed).unwrap();
        if psnr(&v, &weak).unwrap() > psnr(&v, &strong).unwrap() {
            ok += 1;
        }
    }
    assert!(ok >= 95, "{ok}/{trials}");
    let v = random_video(2, 16, 16, 1);
    assert_eq!(synth_compress(&v, 0.0, 3).unwrap(), v);
    assert!(synth_compress(&v, 1.5, 3).is_err());
}

#[test]
fn identical_and_reversed_series_correlate_perfectly() {
    let raw: Vec<(f64, f64, f64)> = (0..6).map(|i| (i as f64 * 2.0, i as f64 * 2.0 + 2.0, (i * i) as f64)).collect();
    let preds = SegmentScoreSeries::from_raw("v", &raw).unwrap();
    let edges: Vec<f64> = (0..=6).map(|i| i as f64 * 2.0).collect();
    let values: Vec<f64> = preds.segments.iter().map(|s| s.scaled_pred).collect();
    let same = HeatmapSeries::new("v", bins(&edges, &values)).unwrap();
    let c = correlate_heatmap(&preds, &same).unwrap();
    assert_eq!((c.srcc, c.n), (1.0, 6));
    assert!((c.plcc - 1.0).abs() < 1e-12);
    let rev: Vec<f64> = values.iter().map(|v| 1.0 - v).collect();
    let c = correlate_heatmap(&preds, &HeatmapSeries::new("v", bins(&edges, &rev)).unwrap()).unwrap();
    assert_eq!(c.srcc, -1.0);

    let far = HeatmapSeries::new("v", bins(&[100.0, 101.0], &[0.5])).unwrap();
    assert!(matches!(correlate_heatmap(&preds, &far), Err(Error::NoOverlap)));
}

#[test]
fn segment_video_uses_the_frame_rate() {
    let v = VideoTensor::filled(36, 4, 4, 0.0).unwrap().with_frame_rate(4.0);
    let segs = segment_video(&v, 2.0).unwrap();
    let spans: Vec<(f64, f64)> = segs.iter().map(|s| (s.start_sec, s.end_sec)).collect();
    assert_eq!(spans, vec![(0.0, 2.0), (2.0, 4.0), (4.0, 6.0), (6.0, 9.0)]);
    assert_eq!(segs[3].video.frames(), 12);
    let no_rate = VideoTensor::filled(8, 4, 4, 0.0).unwrap();
    assert!(segment_video(&no_rate, 2.0).is_err());
}

#[test]
fn ladder_study_reports_each_clip() {
    let mut entries = Vec::new();
    for clip in ["a", "b", "c"] {
        for level in 1..=3 {
            entries.push(LadderEntry {
                clip_id: clip.into(),
                resolution: "8x8".into(),
                level: level as f64,
                video_path: format!("{clip}/{level}").into(),
            });
        }
    }
    // clip c is scored against its levels
    let report = ladder_study(&entries, |p| {
        let s = p.to_str().unwrap();
        let level: f64 = s[2..].parse().unwrap();
        Ok(if s.starts_with('c') { -level } else { level })
    })
    .unwrap();
    assert_eq!(report.clips.len(), 3);
    assert_eq!(report.positive, 2);
    assert!((report.fraction_positive - 2.0 / 3.0).abs() < 1e-12);
}
