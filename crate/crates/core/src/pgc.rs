//! Segment-level scoring, audience heatmap correlation and bitrate-ladder
//! monotonicity studies for professionally produced content.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters;
use crate::metrics;
use crate::video::VideoTensor;

pub const DEFAULT_SEGMENT_SECS: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct VideoSegment {
    pub start_sec: f64,
    pub end_sec: f64,
    pub video: VideoTensor,
}

/// Splits a clip into consecutive segments of `seg_len_sec`. A trailing
/// remainder longer than half a segment becomes its own segment; a shorter
/// one (or exactly half) is merged into the previous segment.
pub fn segment_video(video: &VideoTensor, seg_len_sec: f64) -> Result<Vec<VideoSegment>> {
    if !(seg_len_sec > 0.0) {
        return Err(Error::BadConfig(format!("segment length must be positive, got {seg_len_sec}")));
    }
    let fps = match video.frame_rate {
        Some(f) if f > 0.0 => f as f64,
        _ => return Err(Error::BadConfig("segmenting needs a known frame rate".into())),
    };
    let bounds = segment_bounds(video.frames(), (seg_len_sec * fps).round().max(1.0) as usize);
    bounds
        .into_iter()
        .map(|(a, b)| {
            Ok(VideoSegment {
                start_sec: a as f64 / fps,
                end_sec: b as f64 / fps,
                video: video.slice_frames(a, b)?,
            })
        })
        .collect()
}

/// Frame ranges for `frames` frames cut every `len` frames.
pub fn segment_bounds(frames: usize, len: usize) -> Vec<(usize, usize)> {
    if frames == 0 {
        return Vec::new();
    }
    let full = frames / len;
    let rem = frames % len;
    if full == 0 {
        return vec![(0, frames)];
    }
    let mut out: Vec<(usize, usize)> = (0..full).map(|i| (i * len, (i + 1) * len)).collect();
    if rem * 2 > len {
        out.push((full * len, frames));
    } else if rem > 0 {
        out.last_mut().unwrap().1 = frames;
    }
    out
}

/// `(x - min) / (max - min)`. A constant series maps to 0.5 everywhere and
/// sets the returned flag.
pub fn minmax_scale(series: &[f64]) -> Result<(Vec<f64>, bool)> {
    if series.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "min-max scaling needs at least 2 values, got {}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite value in series".into()));
    }
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        log::warn!("constant series; scaled to 0.5");
        return Ok((vec![0.5; series.len()], true));
    }
    Ok((series.iter().map(|v| (v - lo) / (hi - lo)).collect(), false))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBin {
    #[serde(rename = "start")]
    pub start_sec: f64,
    #[serde(rename = "end")]
    pub end_sec: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSeries {
    pub video_id: String,
    pub segments: Vec<HeatmapBin>,
}

impl HeatmapSeries {
    pub fn new(video_id: impl Into<String>, segments: Vec<HeatmapBin>) -> Result<Self> {
        let h = Self {
            video_id: video_id.into(),
            segments,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::DegenerateInput("heatmap has no segments".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.end_sec > s.start_sec) || !(0.0..=1.0).contains(&s.value) {
                return Err(Error::DegenerateInput(format!("heatmap segment {i} is invalid: {s:?}")));
            }
            if i > 0 && (s.start_sec - self.segments[i - 1].end_sec).abs() > 1e-9 {
                return Err(Error::DegenerateInput(format!(
                    "heatmap segment {i} does not start where segment {} ends",
                    i - 1
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let h: Self = serde_json::from_slice(&bytes)?;
        h.validate()?;
        Ok(h)
    }

    /// Time-weighted mean of the bins overlapping `[start, end)`, or `None`
    /// when nothing overlaps.
    pub fn mean_over(&self, start: f64, end: f64) -> Option<f64> {
        let mut acc = 0.0;
        let mut total = 0.0;
        for s in &self.segments {
            let overlap = end.min(s.end_sec) - start.max(s.start_sec);
            if overlap > 0.0 {
                acc += overlap * s.value;
                total += overlap;
            }
        }
        (total > 0.0).then(|| acc / total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub start_sec: f64,
    pub end_sec: f64,
    pub raw_pred: f64,
    pub scaled_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScoreSeries {
    pub video_id: String,
    pub segments: Vec<SegmentScore>,
    /// Raw predictions were constant, so every scaled value is 0.5.
    pub constant: bool,
}

impl SegmentScoreSeries {
    /// Builds the series from `(start, end, raw)` triples.
    pub fn from_raw(video_id: impl Into<String>, raw: &[(f64, f64, f64)]) -> Result<Self> {
        let preds: Vec<f64> = raw.iter().map(|r| r.2).collect();
        let (scaled, constant) = minmax_scale(&preds)?;
        Ok(Self {
            video_id: video_id.into(),
            segments: raw
                .iter()
                .zip(scaled)
                .map(|(&(start_sec, end_sec, raw_pred), scaled_pred)| SegmentScore {
                    start_sec,
                    end_sec,
                    raw_pred,
                    scaled_pred,
                })
                .collect(),
            constant,
        })
    }
}

/// Scores every segment of a clip with `predict` in parallel.
pub fn score_segments<F>(
    video_id: &str,
    video: &VideoTensor,
    seg_len_sec: f64,
    predict: F,
) -> Result<SegmentScoreSeries>
where
    F: Fn(&VideoTensor) -> Result<f64> + Sync,
{
    let segments = segment_video(video, seg_len_sec)?;
    let raw = segments
        .par_iter()
        .map(|s| predict(&s.video).map(|p| (s.start_sec, s.end_sec, p)))
        .collect::<Result<Vec<_>>>()?;
    SegmentScoreSeries::from_raw(video_id, &raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCorrelation {
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
    /// `(scaled prediction, resampled heatmap value)` per overlapping segment.
    pub aligned_pairs: Vec<(f64, f64)>,
}

/// Resamples the heatmap onto the prediction segments and correlates it with
/// the scaled predictions.
pub fn correlate_heatmap(preds: &SegmentScoreSeries, hm: &HeatmapSeries) -> Result<HeatmapCorrelation> {
    let aligned_pairs: Vec<(f64, f64)> = preds
        .segments
        .iter()
        .filter_map(|s| hm.mean_over(s.start_sec, s.end_sec).map(|v| (s.scaled_pred, v)))
        .collect();
    if aligned_pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    let p: Vec<f64> = aligned_pairs.iter().map(|a| a.0).collect();
    let h: Vec<f64> = aligned_pairs.iter().map(|a| a.1).collect();
    Ok(HeatmapCorrelation {
        srcc: metrics::srcc(&p, &h)?,
        plcc: metrics::plcc(&p, &h)?,
        n: aligned_pairs.len(),
        aligned_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderEntry {
    pub clip_id: String,
    pub resolution: String,
    /// Higher level means higher bitrate (less compression).
    pub level: f64,
    pub video_path: PathBuf,
}

/// Loads a `clip_id,resolution,level,video_path` CSV; relative paths are
/// resolved against the file's directory.
pub fn load_ladder(path: &Path) -> Result<Vec<LadderEntry>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let mut e: LadderEntry = row?;
        if e.video_path.is_relative() {
            e.video_path = base.join(&e.video_path);
        }
        out.push(e);
    }
    validate_ladder(&out)?;
    Ok(out)
}

pub fn save_ladder(path: &Path, entries: &[LadderEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn group_ladder(entries: &[LadderEntry]) -> BTreeMap<(String, String), Vec<&LadderEntry>> {
    let mut groups: BTreeMap<(String, String), Vec<&LadderEntry>> = BTreeMap::new();
    for e in entries {
        groups
            .entry((e.clip_id.clone(), e.resolution.clone()))
            .or_default()
            .push(e);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.level.total_cmp(&b.level));
    }
    groups
}

/// Every (clip, resolution) needs at least two distinct, finite levels.
pub fn validate_ladder(entries: &[LadderEntry]) -> Result<()> {
    for ((clip, res), g) in group_ladder(entries) {
        if g.len() < 2 {
            return Err(Error::Manifest(format!("{clip}/{res}: ladder needs at least 2 levels")));
        }
        if g.iter().any(|e| !e.level.is_finite()) {
            return Err(Error::Manifest(format!("{clip}/{res}: non-finite level")));
        }
        if g.windows(2).any(|w| w[0].level == w[1].level) {
            return Err(Error::Manifest(format!("{clip}/{res}: duplicate level")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipLadder {
    pub clip_id: String,
    pub resolution: String,
    pub levels: Vec<f64>,
    pub preds: Vec<f64>,
    /// Rank correlation of level and prediction; 0 when all predictions tie.
    pub srcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub clips: Vec<ClipLadder>,
    pub positive: usize,
    pub fraction_positive: f64,
}

impl LadderReport {
    pub fn from_clips(clips: Vec<ClipLadder>) -> Self {
        let positive = clips.iter().filter(|c| c.srcc > 0.0).count();
        let fraction_positive = if clips.is_empty() { 0.0 } else { positive as f64 / clips.len() as f64 };
        Self {
            clips,
            positive,
            fraction_positive,
        }
    }
}

pub fn ladder_srcc(levels: &[f64], preds: &[f64]) -> Result<f64> {
    match metrics::srcc(levels, preds) {
        Err(Error::DegenerateInput(_)) if preds.iter().all(|&p| p == preds[0]) && preds.len() >= 2 => Ok(0.0),
        other => other,
    }
}

/// Predicts every rung and reports per-clip level/score rank agreement.
pub fn ladder_study<F>(entries: &[LadderEntry], predict: F) -> Result<LadderReport>
where
    F: Fn(&Path) -> Result<f64> + Sync,
{
    validate_ladder(entries)?;
    let preds: Vec<f64> = entries
        .par_iter()
        .map(|e| predict(&e.video_path).map_err(|err| Error::for_item(&e.clip_id, err)))
        .collect::<Result<_>>()?;
    let pred_of: BTreeMap<(String, String, u64), f64> = entries
        .iter()
        .zip(&preds)
        .map(|(e, &p)| ((e.clip_id.clone(), e.resolution.clone(), e.level.to_bits()), p))
        .collect();
    let clips = group_ladder(entries)
        .into_iter()
        .map(|((clip_id, resolution), g)| {
            let levels: Vec<f64> = g.iter().map(|e| e.level).collect();
            let preds: Vec<f64> = g
                .iter()
                .map(|e| pred_of[&(clip_id.clone(), resolution.clone(), e.level.to_bits())])
                .collect();
            let srcc = ladder_srcc(&levels, &preds)?;
            Ok(ClipLadder {
                clip_id,
                resolution,
                levels,
                preds,
                srcc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LadderReport::from_clips(clips))
}

/// Stand-in for transcoding at a lower bitrate: 8x8 block DCT quantization
/// plus Gaussian noise, both scaled by `strength`. Strength 0 returns the
/// input unchanged.
pub fn synth_compress(video: &VideoTensor, strength: f64, seed: u64) -> Result<VideoTensor> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::BadConfig(format!("strength {strength} outside [0, 1]")));
    }
    let mut out = video.clone();
    if strength == 0.0 {
        return Ok(out);
    }
    filters::block_quantize(&mut out, 0.25 * strength as f32);
    let noise = Normal::new(0.0f32, 0.04 * strength as f32).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.data_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`; infinite for
/// identical inputs.
pub fn psnr(reference: &VideoTensor, test: &VideoTensor) -> Result<f64> {
    if reference.dims() != test.dims() || reference.channels() != test.channels() {
        return Err(Error::ShapeMismatch("PSNR inputs differ in shape".into()));
    }
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / reference.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn svg_polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Prediction curve (blue) against the heatmap (orange) over time.
pub fn heatmap_svg(preds: &SegmentScoreSeries, hm: &HeatmapSeries) -> String {
    let (w, h, m) = (640.0, 240.0, 30.0);
    let t_end = preds
        .segments
        .iter()
        .map(|s| s.end_sec)
        .chain(hm.segments.iter().map(|s| s.end_sec))
        .fold(0.0, f64::max)
        .max(1e-9);
    let px = |t: f64| m + t / t_end * (w - 2.0 * m);
    let py = |v: f64| h - m - v * (h - 2.0 * m);
    let mid = |a: f64, b: f64| 0.5 * (a + b);
    let p: Vec<(f64, f64)> = preds
        .segments
        .iter()
        .map(|s| (px(mid(s.start_sec, s.end_sec)), py(s.scaled_pred)))
        .collect();
    let q: Vec<(f64, f64)> = hm
        .segments
        .iter()
        .map(|s| (px(mid(s.start_sec, s.end_sec)), py(s.value)))
        .collect();
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(
        svg,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    );
    svg.push_str(&svg_polyline(&p, "#1f77b4"));
    svg.push_str(&svg_polyline(&q, "#ff7f0e"));
    let _ = writeln!(svg, "<text x=\"{m}\" y=\"20\" font-size=\"12\">{}</text>", preds.video_id);
    svg.push_str("</svg>\n");
    svg
}

/// One group of bars per clip, one bar per level, height = prediction.
pub fn ladder_svg(report: &LadderReport) -> String {
    let (bar, gap, h, m) = (8.0, 12.0, 240.0, 30.0);
    let lo = report.clips.iter().flat_map(|c| &c.preds).copied().fold(f64::INFINITY, f64::min);
    let hi = report.clips.iter().flat_map(|c| &c.preds).copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width: f64 = 2.0 * m
        + report
            .clips
            .iter()
            .map(|c| c.preds.len() as f64 * bar + gap)
            .sum::<f64>();
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{h}\">\n");
    let mut x = m;
    for c in &report.clips {
        for (i, p) in c.preds.iter().enumerate() {
            let bh = 10.0 + (p - lo) / span * (h - 2.0 * m - 10.0);
            let shade = 80 + (i * 150 / c.preds.len().max(1)) as u32;
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bar}\" height=\"{bh:.1}\" fill=\"rgb(40,{shade},180)\"/>",
                h - m - bh
            );
            x += bar;
        }
        x += gap;
    }
    svg.push_str("</svg>\n");
    svg
}
