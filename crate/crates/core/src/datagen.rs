//! Synthetic dataset of procedurally rendered clips with graded distortions
//! and known quality ordering.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters;
pub use crate::filters::laplacian_variance;
use crate::model::derive_seed;
use crate::pgc::LadderEntry;
use crate::stacker::{DatasetManifest, ManifestEntry, Split};
use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    Blur,
    Noise,
    BlockQuant,
    Brightness,
    Contrast,
    Shake,
}

impl Distortion {
    pub const ALL: [Distortion; 6] = [
        Distortion::Blur,
        Distortion::Noise,
        Distortion::BlockQuant,
        Distortion::Brightness,
        Distortion::Contrast,
        Distortion::Shake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Distortion::Blur => "blur",
            Distortion::Noise => "noise",
            Distortion::BlockQuant => "block_quant",
            Distortion::Brightness => "brightness",
            Distortion::Contrast => "contrast",
            Distortion::Shake => "shake",
        }
    }

    /// Applies the distortion in place; strength 0 leaves the clip untouched.
    pub fn apply(self, video: &mut VideoTensor, strength: f64, seed: u64) {
        if strength <= 0.0 {
            return;
        }
        let s = strength as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Distortion::Blur => filters::gaussian_blur(video, 2.5 * s),
            Distortion::Noise => {
                let n = Normal::new(0.0f32, 0.12 * s).expect("valid sigma");
                for v in video.data_mut() {
                    *v += n.sample(&mut rng);
                }
            }
            Distortion::BlockQuant => filters::block_quantize(video, 0.35 * s),
            Distortion::Brightness => video.data_mut().iter_mut().for_each(|v| *v += 0.3 * s),
            Distortion::Contrast => video
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.5 + (*v - 0.5) * (1.0 - 0.75 * s)),
            Distortion::Shake => shake(video, s, &mut rng),
        }
        for v in video.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Per-frame random rotation about the centre plus translation.
fn shake(video: &mut VideoTensor, s: f32, rng: &mut ChaCha8Rng) {
    let (t, h, w) = video.dims();
    let c = video.channels();
    let max_shift = 0.12 * h.min(w) as f32 * s;
    let max_angle = 6.0f32.to_radians() * s;
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    for f in 0..t {
        let dy = rng.gen_range(-1.0..=1.0f32) * max_shift;
        let dx = rng.gen_range(-1.0..=1.0f32) * max_shift;
        let a = rng.gen_range(-1.0..=1.0f32) * max_angle;
        let (sin, cos) = a.sin_cos();
        let src = video.frame(f).to_vec();
        let dst = video.frame_mut(f);
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = (y as f32 - cy - dy, x as f32 - cx - dx);
                let sy = cy + cos * ry - sin * rx;
                let sx = cx + sin * ry + cos * rx;
                for ch in 0..c {
                    dst[(y * w + x) * c + ch] = filters::sample_bilinear(&src, h, w, c, ch, sy, sx);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f32,
    /// Clip `i` uses `distortion_types[i % len]`.
    pub distortion_types: Vec<Distortion>,
    pub strength_grid: Vec<f64>,
    pub mos_range: (f64, f64),
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 24,
            frames: 16,
            height: 112,
            width: 112,
            fps: 8.0,
            distortion_types: Distortion::ALL.to_vec(),
            strength_grid: vec![0.0, 0.5, 1.0],
            mos_range: (1.0, 5.0),
            val_fraction: 0.0,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.n_clips == 0 || self.frames == 0 {
            return bad("n_clips and frames must be positive".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("frames must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.distortion_types.is_empty() {
            return bad("at least one distortion type is required".into());
        }
        if self.strength_grid.is_empty()
            || self.strength_grid.iter().any(|s| !(0.0..=1.0).contains(s))
            || self.strength_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "strength grid must be strictly ascending within [0, 1], got {:?}",
                self.strength_grid
            ));
        }
        if !(self.mos_range.0 < self.mos_range.1) {
            return bad(format!("empty mos_range {:?}", self.mos_range));
        }
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || self.val_fraction + self.test_fraction >= 1.0 {
            return bad("split fractions must leave a non-empty train share".into());
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        Ok(())
    }

    pub fn mos_for(&self, strength: f64) -> f64 {
        let (lo, hi) = self.mos_range;
        (hi - lo) * (1.0 - strength) + lo
    }
}

/// One rendered variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub id: String,
    pub clip: usize,
    pub distortion: Distortion,
    pub strength: f64,
    pub mos: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub variants: Vec<Variant>,
}

impl SynthDataset {
    /// One ladder per base clip in `split`; weaker distortion = higher level.
    pub fn ladder(&self, split: Split, spec: &SynthSpec) -> Vec<LadderEntry> {
        let paths: std::collections::HashMap<&str, &ManifestEntry> =
            self.manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();
        let n = spec.strength_grid.len();
        self.variants
            .iter()
            .filter(|v| v.split == split)
            .map(|v| {
                let rank = spec.strength_grid.iter().position(|&s| s == v.strength).unwrap_or(0);
                LadderEntry {
                    clip_id: format!("clip{:03}", v.clip),
                    resolution: format!("{}x{}", spec.height, spec.width),
                    level: (n - rank) as f64,
                    video_path: paths[v.id.as_str()].video_path.clone(),
                }
            })
            .collect()
    }
}

/// Renders base clip `clip`: two drifting gratings, a fine texture layer and
/// a few striped shapes moving at constant velocity. Spatial frequencies and
/// amplitudes are the same for every clip; orientation, phase, colour and
/// motion are drawn per clip, so clips differ in content but not in detail.
pub fn base_clip(spec: &SynthSpec, clip: usize) -> Result<VideoTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, clip as u64, 1]));
    let (h, w) = (spec.height as f32, spec.width as f32);
    let tau = std::f32::consts::TAU;
    // (ky, kx, phase, temporal drift) for periods of 12 px, 7 px and 3.5 px
    let gratings: Vec<(f32, f32, f32, f32)> = [12.0f32, 7.0, 3.5]
        .iter()
        .map(|period| {
            let theta = rng.gen_range(0.0..tau);
            let k = tau / period;
            (k * theta.sin(), k * theta.cos(), rng.gen_range(0.0..tau), rng.gen_range(-0.2..0.2))
        })
        .collect();
    let amps = [0.12f32, 0.08, 0.06];
    let tint: [f32; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    struct Shape {
        cy: f32,
        cx: f32,
        vy: f32,
        vx: f32,
        r: f32,
        square: bool,
        color: [f32; 3],
        diag: f32,
    }
    let shapes: Vec<Shape> = (0..4)
        .map(|_| Shape {
            cy: rng.gen_range(0.0..h),
            cx: rng.gen_range(0.0..w),
            vy: rng.gen_range(-1.5..1.5),
            vx: rng.gen_range(-1.5..1.5),
            r: 0.15 * h.min(w),
            square: rng.gen_bool(0.5),
            color: [rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6)],
            diag: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        })
        .collect();
    let v = VideoTensor::from_fn(spec.frames, spec.height, spec.width, |t, y, x, c| {
        let (tf, yf, xf) = (t as f32, y as f32, x as f32);
        let mut v = 0.5 + tint[c];
        for (&(ky, kx, ph, dr), a) in gratings.iter().zip(amps) {
            v += a * (ky * yf + kx * xf + ph + dr * tf).sin();
        }
        for s in &shapes {
            let (py, px) = (s.cy + s.vy * tf, s.cx + s.vx * tf);
            let (dy, dx) = (yf - py, xf - px);
            let inside = if s.square {
                dy.abs() < s.r && dx.abs() < s.r
            } else {
                dy * dy + dx * dx < s.r * s.r
            };
            if inside {
                let stripes = if ((dx + s.diag * dy) / 3.0).rem_euclid(2.0) < 1.0 { 0.12 } else { -0.12 };
                v = s.color[c] + stripes;
            }
        }
        v.clamp(0.0, 1.0)
    })?;
    Ok(v.with_frame_rate(spec.fps))
}

/// Assigns whole base clips to splits, balanced within each distortion type.
fn clip_splits(spec: &SynthSpec) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, 2]));
    let mut splits = vec![Split::Train; spec.n_clips];
    let n_types = spec.distortion_types.len();
    for d in 0..n_types {
        let mut members: Vec<usize> = (d..spec.n_clips).step_by(n_types).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_test = (n * spec.test_fraction).round() as usize;
        let n_val = (n * spec.val_fraction).round() as usize;
        for (k, &i) in members.iter().enumerate() {
            splits[i] = if k < n_test {
                Split::Test
            } else if k < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    splits
}

/// Renders every variant in memory, in id order.
pub fn render(spec: &SynthSpec) -> Result<Vec<(Variant, VideoTensor)>> {
    spec.validate()?;
    let splits = clip_splits(spec);
    let per_clip = (0..spec.n_clips)
        .into_par_iter()
        .map(|clip| -> Result<Vec<(Variant, VideoTensor)>> {
            let base = base_clip(spec, clip)?;
            let distortion = spec.distortion_types[clip % spec.distortion_types.len()];
            spec.strength_grid
                .iter()
                .enumerate()
                .map(|(k, &strength)| {
                    let mut v = base.clone();
                    distortion.apply(&mut v, strength, derive_seed(&[spec.seed, clip as u64, 3, k as u64]));
                    let variant = Variant {
                        id: format!("clip{clip:03}_{}_s{k}", distortion.name()),
                        clip,
                        distortion,
                        strength,
                        mos: spec.mos_for(strength),
                        split: splits[clip],
                    };
                    Ok((variant, v))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

/// Writes every variant as an 8-bit raw tensor plus `manifest.jsonl`,
/// `variants.csv` and `ladder.csv` (test-split clips) under `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthDataset> {
    spec.validate()?;
    let video_dir = out_dir.join("videos");
    fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;
    let rendered = render(spec)?;
    rendered
        .par_iter()
        .map(|(var, v)| v.write_raw_u8(&video_dir.join(format!("{}.sbvt", var.id))))
        .collect::<Result<Vec<_>>>()?;
    let entries = rendered
        .iter()
        .map(|(var, _)| ManifestEntry {
            id: var.id.clone(),
            video_path: video_dir.join(format!("{}.sbvt", var.id)),
            mos: var.mos,
            split: var.split,
        })
        .collect();
    let manifest = DatasetManifest::new(entries, spec.mos_range)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    let variants: Vec<Variant> = rendered.into_iter().map(|(v, _)| v).collect();
    let vpath = out_dir.join("variants.csv");
    let mut w = csv::Writer::from_path(&vpath)?;
    for v in &variants {
        w.serialize(v)?;
    }
    w.flush().map_err(|e| Error::io(&vpath, e))?;
    let ds = SynthDataset { manifest, variants };
    let mut ladder = ds.ladder(Split::Test, spec);
    for e in &mut ladder {
        if let Ok(rel) = e.video_path.strip_prefix(out_dir) {
            e.video_path = rel.to_path_buf();
        }
    }
    if !ladder.is_empty() {
        crate::pgc::save_ladder(&out_dir.join("ladder.csv"), &ladder)?;
    }
    Ok(ds)
}
