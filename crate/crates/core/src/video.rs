//! Video tensors, the raw tensor file format, and ingestion.
//!
//! A [`VideoTensor`] holds frames as unit-scaled `f32` values laid out
//! `T x H x W x C` in row-major order. Ingestion normalizes every decoded clip
//! to three channels and upscales it when it is too small for the sampler.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"SBVT";
const RAW_VERSION: u16 = 1;

/// Extension used for raw tensor video files.
pub const RAW_EXTENSION: &str = "sbvt";

#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    pub frame_rate: Option<f32>,
}

impl VideoTensor {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::EmptyVideo);
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "video dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = frames * height * width * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} values for {frames}x{height}x{width}x{channels}, got {}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
            frame_rate: None,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            frames,
            height,
            width,
            3,
            vec![value; frames * height * width * 3],
        )
    }

    /// Builds a three-channel video from a per-pixel function `f(t, y, x, c)`.
    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * height * width * 3);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..3 {
                        data.push(f(t, y, x, c));
                    }
                }
            }
        }
        Self::new(frames, height, width, 3, data)
    }

    pub fn with_frame_rate(mut self, fps: f32) -> Self {
        self.frame_rate = Some(fps);
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    /// Duration in seconds, when the frame rate is known.
    pub fn duration_secs(&self) -> Option<f64> {
        self.frame_rate
            .filter(|fps| *fps > 0.0)
            .map(|fps| self.frames as f64 / fps as f64)
    }

    /// Copies frames `start..end` into a new tensor.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::BadConfig(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames
            )));
        }
        let n = self.frame_len();
        let mut out = Self::new(
            end - start,
            self.height,
            self.width,
            self.channels,
            self.data[start * n..end * n].to_vec(),
        )?;
        out.frame_rate = self.frame_rate;
        Ok(out)
    }

    /// Replicates a single-channel video to three channels.
    pub fn to_rgb(&self) -> Result<Self> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                let mut out = Self::new(self.frames, self.height, self.width, 3, data)?;
                out.frame_rate = self.frame_rate;
                Ok(out)
            }
            4 => {
                let data = self
                    .data
                    .chunks_exact(4)
                    .flat_map(|px| [px[0], px[1], px[2]])
                    .collect();
                let mut out = Self::new(self.frames, self.height, self.width, 3, data)?;
                out.frame_rate = self.frame_rate;
                Ok(out)
            }
            c => Err(Error::ShapeMismatch(format!(
                "cannot convert {c}-channel video to RGB"
            ))),
        }
    }

    /// Bilinear resize of every frame (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> Result<Self> {
        if new_height == 0 || new_width == 0 {
            return Err(Error::BadConfig("resize target must be positive".into()));
        }
        let c = self.channels;
        let sy = self.height as f32 / new_height as f32;
        let sx = self.width as f32 / new_width as f32;
        let axis = |i: usize, scale: f32, len: usize| {
            let pos = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, pos - i0 as f32)
        };
        let ys: Vec<_> = (0..new_height).map(|y| axis(y, sy, self.height)).collect();
        let xs: Vec<_> = (0..new_width).map(|x| axis(x, sx, self.width)).collect();
        let mut data = Vec::with_capacity(self.frames * new_height * new_width * c);
        for t in 0..self.frames {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    for ch in 0..c {
                        let a = self.at(t, y0, x0, ch);
                        let b = self.at(t, y0, x1, ch);
                        let p = self.at(t, y1, x0, ch);
                        let q = self.at(t, y1, x1, ch);
                        let top = a + (b - a) * fx;
                        let bottom = p + (q - p) * fx;
                        data.push(top + (bottom - top) * fy);
                    }
                }
            }
        }
        let mut out = Self::new(self.frames, new_height, new_width, c, data)?;
        out.frame_rate = self.frame_rate;
        Ok(out)
    }

    /// Writes the tensor as a raw `.sbvt` file with 8-bit samples.
    pub fn write_raw_u8(&self, path: &Path) -> Result<()> {
        let payload: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        self.write_raw(path, RawDtype::U8, &payload)
    }

    /// Writes the tensor as a raw `.sbvt` file with `f32` samples.
    pub fn write_raw_f32(&self, path: &Path) -> Result<()> {
        let payload: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.write_raw(path, RawDtype::F32, &payload)
    }

    fn write_raw(&self, path: &Path, dtype: RawDtype, payload: &[u8]) -> Result<()> {
        let mut buf = Vec::with_capacity(payload.len() + 32);
        buf.extend_from_slice(RAW_MAGIC);
        buf.extend_from_slice(&RAW_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.channels as u16).to_le_bytes());
        buf.extend_from_slice(&(self.frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&self.frame_rate.unwrap_or(0.0).to_le_bytes());
        buf.push(dtype as u8);
        buf.extend_from_slice(payload);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a raw `.sbvt` file without any normalization.
    pub fn read_raw(path: &Path) -> Result<Self> {
        let decode_err = |reason: &str| Error::Decode {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 25 || &bytes[0..4] != RAW_MAGIC {
            return Err(decode_err("missing SBVT header"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != RAW_VERSION {
            return Err(decode_err(&format!("unsupported version {version}")));
        }
        let channels = u16_at(6) as usize;
        let frames = u32_at(8) as usize;
        let height = u32_at(12) as usize;
        let width = u32_at(16) as usize;
        let fps = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let dtype = bytes[24];
        let count = frames
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| decode_err("dimension overflow"))?;
        let body = &bytes[25..];
        let data: Vec<f32> = match dtype {
            d if d == RawDtype::U8 as u8 => {
                if body.len() != count {
                    return Err(decode_err("truncated payload"));
                }
                body.iter().map(|&b| b as f32 / 255.0).collect()
            }
            d if d == RawDtype::F32 as u8 => {
                if body.len() != count * 4 {
                    return Err(decode_err("truncated payload"));
                }
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            _ => return Err(decode_err("unknown sample type")),
        };
        if frames == 0 {
            return Err(Error::EmptyVideo);
        }
        let mut video = Self::new(frames, height, width, channels, data)
            .map_err(|e| decode_err(&e.to_string()))?;
        if fps > 0.0 {
            video.frame_rate = Some(fps);
        }
        Ok(video)
    }
}

#[derive(Debug, Clone, Copy)]
#[repr(u8)]
enum RawDtype {
    U8 = 0,
    F32 = 1,
}

/// Decodes a file or directory into frames.
pub trait FrameDecoder: Send + Sync {
    fn can_decode(&self, path: &Path) -> bool;
    fn decode(&self, path: &Path) -> Result<VideoTensor>;
}

/// Raw `.sbvt` tensor files.
pub struct RawTensorDecoder;

impl FrameDecoder for RawTensorDecoder {
    fn can_decode(&self, path: &Path) -> bool {
        path.extension().and_then(|e| e.to_str()) == Some(RAW_EXTENSION)
    }

    fn decode(&self, path: &Path) -> Result<VideoTensor> {
        VideoTensor::read_raw(path)
    }
}

/// A directory of still images (PNG/JPEG) taken in lexicographic order.
pub struct FrameDirDecoder {
    pub frame_rate: Option<f32>,
}

impl FrameDecoder for FrameDirDecoder {
    fn can_decode(&self, path: &Path) -> bool {
        path.is_dir()
    }

    fn decode(&self, path: &Path) -> Result<VideoTensor> {
        let decode_err = |reason: String| Error::Decode {
            path: path.to_path_buf(),
            reason,
        };
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension()
                        .and_then(|e| e.to_str())
                        .map(|e| e.to_ascii_lowercase())
                        .as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyVideo);
        }
        let mut data = Vec::new();
        let mut dims = None;
        for file in &files {
            let img = image::open(file)
                .map_err(|e| decode_err(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            match dims {
                None => dims = Some((h as usize, w as usize)),
                Some(d) if d != (h as usize, w as usize) => {
                    return Err(decode_err("frames have inconsistent sizes".into()))
                }
                _ => {}
            }
            data.extend(img.as_raw().iter().map(|&b| b as f32 / 255.0));
        }
        let (h, w) = dims.unwrap();
        let mut video = VideoTensor::new(files.len(), h, w, 3, data)?;
        video.frame_rate = self.frame_rate;
        Ok(video)
    }
}

/// How decoded clips are normalized before sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestionPolicy {
    /// Both spatial dims are upscaled to at least this size (the fragment side).
    pub min_side: usize,
    /// Directory for decoded-frame cache entries.
    pub cache_dir: Option<PathBuf>,
}

impl IngestionPolicy {
    pub fn for_fragment(grid_count: usize, patch_size: usize) -> Self {
        Self {
            min_side: grid_count * patch_size,
            cache_dir: None,
        }
    }

    pub fn with_cache(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }
}

pub fn default_decoders() -> Vec<Box<dyn FrameDecoder>> {
    vec![
        Box::new(RawTensorDecoder),
        Box::new(FrameDirDecoder { frame_rate: None }),
    ]
}

/// Decodes `path` with the default decoders and normalizes it.
pub fn ingest_video(path: &Path, policy: &IngestionPolicy) -> Result<VideoTensor> {
    ingest_with(path, policy, &default_decoders())
}

pub fn ingest_with(
    path: &Path,
    policy: &IngestionPolicy,
    decoders: &[Box<dyn FrameDecoder>],
) -> Result<VideoTensor> {
    let cache_path = policy
        .cache_dir
        .as_ref()
        .and_then(|dir| cache_key(path, policy).map(|k| dir.join(format!("{k}.{RAW_EXTENSION}"))));
    if let Some(cached) = cache_path.as_ref().filter(|p| p.exists()) {
        match VideoTensor::read_raw(cached) {
            Ok(video) => return Ok(video),
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", cached.display()),
        }
    }

    let decoder = decoders
        .iter()
        .find(|d| d.can_decode(path))
        .ok_or_else(|| Error::Decode {
            path: path.to_path_buf(),
            reason: "no decoder accepts this file".into(),
        })?;
    let raw = decoder.decode(path)?;
    let video = normalize(raw, policy)?;

    if let Some(cached) = cache_path {
        if let Err(e) = video.write_raw_f32(&cached) {
            log::warn!("could not write cache entry {}: {e}", cached.display());
        }
    }
    Ok(video)
}

/// Applies the ingestion policy to an already decoded clip.
pub fn normalize(raw: VideoTensor, policy: &IngestionPolicy) -> Result<VideoTensor> {
    let mut video = raw.to_rgb()?;
    for v in video.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let short = video.height().min(video.width());
    if short < policy.min_side {
        let scale = policy.min_side as f64 / short as f64;
        let h = ((video.height() as f64 * scale).ceil() as usize).max(policy.min_side);
        let w = ((video.width() as f64 * scale).ceil() as usize).max(policy.min_side);
        video = video.resize_bilinear(h, w)?;
    }
    Ok(video)
}

fn cache_key(path: &Path, policy: &IngestionPolicy) -> Option<String> {
    let meta = fs::metadata(path).ok()?;
    let mut hasher = DefaultHasher::new();
    fs::canonicalize(path).ok()?.hash(&mut hasher);
    meta.len().hash(&mut hasher);
    meta.modified()
        .ok()
        .and_then(|m| m.duration_since(std::time::UNIX_EPOCH).ok())
        .map(|d| d.as_nanos())
        .hash(&mut hasher);
    policy.min_side.hash(&mut hasher);
    Some(format!("{:016x}", hasher.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grayscale_clip_is_upscaled_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.sbvt");
        let gray = VideoTensor::new(2, 100, 100, 1, vec![0.25; 2 * 100 * 100]).unwrap();
        gray.write_raw_u8(&path).unwrap();

        let video = ingest_video(&path, &IngestionPolicy::for_fragment(7, 32)).unwrap();
        assert_eq!(video.channels(), 3);
        assert!(video.height().min(video.width()) >= 224);
        assert_eq!(video.frames(), 2);
    }

    #[test]
    fn conforming_clip_keeps_dims() {
        let raw = VideoTensor::filled(1, 1080, 1920, 0.5).unwrap();
        let video = normalize(raw, &IngestionPolicy::for_fragment(7, 32)).unwrap();
        assert_eq!((video.height(), video.width()), (1080, 1920));
    }

    #[test]
    fn corrupt_file_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sbvt");
        fs::write(&path, b"SBVT\x01\x00garbage").unwrap();
        let err = ingest_video(&path, &IngestionPolicy::for_fragment(7, 32)).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }), "{err:?}");

        let path = dir.path().join("clip.mp4");
        fs::write(&path, b"not a video").unwrap();
        let err = ingest_video(&path, &IngestionPolicy::for_fragment(7, 32)).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }), "{err:?}");
    }

    #[test]
    fn raw_round_trip_keeps_frame_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.sbvt");
        let video = VideoTensor::from_fn(3, 4, 5, |t, y, x, c| (t + y + x + c) as f32 / 16.0)
            .unwrap()
            .with_frame_rate(12.5);
        video.write_raw_f32(&path).unwrap();
        assert_eq!(VideoTensor::read_raw(&path).unwrap(), video);
    }

    #[test]
    fn cache_entry_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache");
        let path = dir.path().join("v.sbvt");
        VideoTensor::filled(1, 10, 10, 0.5)
            .unwrap()
            .write_raw_u8(&path)
            .unwrap();
        let policy = IngestionPolicy::for_fragment(2, 8).with_cache(Some(cache.clone()));
        let first = ingest_video(&path, &policy).unwrap();
        assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
        let second = ingest_video(&path, &policy).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn frame_directory_decodes_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for (i, v) in [10u8, 200].iter().enumerate() {
            let img = image::RgbImage::from_pixel(8, 6, image::Rgb([*v, *v, *v]));
            img.save(dir.path().join(format!("f{i:03}.png"))).unwrap();
        }
        let video = ingest_video(dir.path(), &IngestionPolicy::for_fragment(1, 4)).unwrap();
        assert_eq!(video.dims(), (2, 6, 8));
        assert!((video.at(0, 0, 0, 0) - 10.0 / 255.0).abs() < 1e-6);
        assert!((video.at(1, 5, 7, 2) - 200.0 / 255.0).abs() < 1e-6);
    }
}
