//! Grid mini-patch sampling.
//!
//! Each frame is split into a `G x G` grid of equal cells (floor division; the
//! residual bottom rows and right columns are never sampled). One `P x P`
//! window is chosen per cell and the same window is used in every sampled
//! frame, so the spliced fragment keeps both local texture at native
//! resolution and the temporal signal of each region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Eval,
}

/// Sampler hyperparameters shared by every branch of an ensemble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub grid_count: usize,
    pub patch_size: usize,
    pub t_frames: usize,
    /// Number of fragments averaged per video at evaluation time.
    pub eval_samples: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            grid_count: 7,
            patch_size: 32,
            t_frames: 16,
            eval_samples: 1,
        }
    }
}

impl SamplerConfig {
    pub fn fragment_side(&self) -> usize {
        self.grid_count * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_count == 0 || self.patch_size == 0 || self.t_frames == 0 {
            return Err(Error::BadConfig(format!(
                "grid_count, patch_size and t_frames must be positive (got {}, {}, {})",
                self.grid_count, self.patch_size, self.t_frames
            )));
        }
        if self.eval_samples == 0 {
            return Err(Error::BadConfig("eval_samples must be at least 1".into()));
        }
        Ok(())
    }

    pub fn plan(&self, video: &VideoTensor, mode: SampleMode, seed: u64) -> Result<FragmentPlan> {
        plan_fragment(
            video.dims(),
            self.grid_count,
            self.patch_size,
            self.t_frames,
            mode,
            seed,
        )
    }

    /// Samples a fragment, first repeating frames of clips shorter than `t_frames`.
    pub fn fragment(&self, video: &VideoTensor, mode: SampleMode, seed: u64) -> Result<Fragment> {
        if video.frames() < self.t_frames {
            let stretched = stretch_frames(video, self.t_frames)?;
            let plan = self.plan(&stretched, mode, seed)?;
            return sample_fragment(&stretched, plan);
        }
        let plan = self.plan(video, mode, seed)?;
        sample_fragment(video, plan)
    }
}

/// Where every mini-patch of a fragment comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentPlan {
    pub grid_count: usize,
    pub patch_size: usize,
    /// Source video dims `(T, H, W)` the plan was drawn for.
    pub source_dims: (usize, usize, usize),
    pub temporal_indices: Vec<usize>,
    /// Row-major `G x G` list of `(dy, dx)` offsets inside each cell.
    pub offsets: Vec<(usize, usize)>,
    pub mode: SampleMode,
    pub seed: u64,
}

impl FragmentPlan {
    pub fn cell_size(&self) -> (usize, usize) {
        let (_, h, w) = self.source_dims;
        (h / self.grid_count, w / self.grid_count)
    }

    pub fn side(&self) -> usize {
        self.grid_count * self.patch_size
    }

    pub fn offset(&self, gy: usize, gx: usize) -> (usize, usize) {
        self.offsets[gy * self.grid_count + gx]
    }

    /// Top-left corner in the source frame of the window for cell `(gy, gx)`.
    pub fn source_origin(&self, gy: usize, gx: usize) -> (usize, usize) {
        let (ch, cw) = self.cell_size();
        let (dy, dx) = self.offset(gy, gx);
        (gy * ch + dy, gx * cw + dx)
    }
}

/// A spliced `T_f x (G*P) x (G*P) x 3` video.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub video: VideoTensor,
    pub plan: FragmentPlan,
}

pub fn plan_fragment(
    dims: (usize, usize, usize),
    grid_count: usize,
    patch_size: usize,
    t_frames: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<FragmentPlan> {
    if grid_count == 0 || patch_size == 0 || t_frames == 0 {
        return Err(Error::BadConfig(format!(
            "grid_count, patch_size and t_frames must be positive (got {grid_count}, {patch_size}, {t_frames})"
        )));
    }
    let (frames, height, width) = dims;
    if frames == 0 {
        return Err(Error::EmptyVideo);
    }
    let side = grid_count * patch_size;
    if height < side || width < side {
        return Err(Error::FrameTooSmall {
            height,
            width,
            required: side,
        });
    }
    if t_frames > frames {
        return Err(Error::BadConfig(format!(
            "t_frames {t_frames} exceeds the clip length {frames}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = match mode {
        SampleMode::Train => rng.gen::<f64>(),
        SampleMode::Eval => 0.5,
    };
    let step = frames as f64 / t_frames as f64;
    let temporal_indices = (0..t_frames)
        .map(|i| (((i as f64 + phase) * step).floor() as usize).min(frames - 1))
        .collect();

    let slack_h = height / grid_count - patch_size;
    let slack_w = width / grid_count - patch_size;
    let offsets = (0..grid_count * grid_count)
        .map(|_| match mode {
            SampleMode::Train => (rng.gen_range(0..=slack_h), rng.gen_range(0..=slack_w)),
            SampleMode::Eval => (slack_h / 2, slack_w / 2),
        })
        .collect();

    Ok(FragmentPlan {
        grid_count,
        patch_size,
        source_dims: dims,
        temporal_indices,
        offsets,
        mode,
        seed,
    })
}

pub fn sample_fragment(video: &VideoTensor, plan: FragmentPlan) -> Result<Fragment> {
    if video.dims() != plan.source_dims {
        return Err(Error::PlanMismatch(format!(
            "plan drawn for {:?}, video is {:?}",
            plan.source_dims,
            video.dims()
        )));
    }
    if video.channels() != 3 {
        return Err(Error::PlanMismatch(format!(
            "expected 3 channels, got {}",
            video.channels()
        )));
    }
    if plan.offsets.len() != plan.grid_count * plan.grid_count
        || plan.temporal_indices.iter().any(|&t| t >= video.frames())
    {
        return Err(Error::PlanMismatch("plan is malformed".into()));
    }
    let (ch, cw) = plan.cell_size();
    if plan
        .offsets
        .iter()
        .any(|&(dy, dx)| dy + plan.patch_size > ch || dx + plan.patch_size > cw)
    {
        return Err(Error::PlanMismatch("offset leaves its grid cell".into()));
    }

    let g = plan.grid_count;
    let p = plan.patch_size;
    let side = g * p;
    let row_len = p * 3;
    let mut data = vec![0f32; plan.temporal_indices.len() * side * side * 3];
    for (out_t, &src_t) in plan.temporal_indices.iter().enumerate() {
        for gy in 0..g {
            for gx in 0..g {
                let (sy, sx) = plan.source_origin(gy, gx);
                for row in 0..p {
                    let src = video.index(src_t, sy + row, sx, 0);
                    let dst = ((out_t * side + gy * p + row) * side + gx * p) * 3;
                    data[dst..dst + row_len].copy_from_slice(&video.data()[src..src + row_len]);
                }
            }
        }
    }
    let out = VideoTensor::new(plan.temporal_indices.len(), side, side, 3, data)?;
    Ok(Fragment { video: out, plan })
}

/// Nearest-frame temporal resampling to exactly `frames` frames.
pub fn stretch_frames(video: &VideoTensor, frames: usize) -> Result<VideoTensor> {
    if frames == 0 {
        return Err(Error::BadConfig("target frame count must be positive".into()));
    }
    let n = video.frame_len();
    let mut data = Vec::with_capacity(frames * n);
    for t in 0..frames {
        let src = t * video.frames() / frames;
        data.extend_from_slice(video.frame(src));
    }
    let mut out = VideoTensor::new(frames, video.height(), video.width(), 3, data)?;
    out.frame_rate = video.frame_rate;
    Ok(out)
}
