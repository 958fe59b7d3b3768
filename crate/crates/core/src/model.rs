//! A single quality branch (backbone + patch-weighted head), its training
//! loss, the training loop, and the checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{HeadCache, HeadConfig, QualityHead};
use crate::nn::{join, AdamW, Module, Param, Real};
use crate::sampler::{SampleMode, SamplerConfig};
use crate::video::VideoTensor;

const CKPT_MAGIC: &[u8; 10] = b"SBVQA-CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    pub grad_clip: Option<f64>,
    pub rank_weight: f64,
    pub mse_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_frac: 0.05,
            grad_clip: Some(1.0),
            rank_weight: 0.3,
            mse_weight: 1.0,
            seed: 0,
        }
    }
}

/// Everything needed to build and train one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl BranchConfig {
    pub fn validate(&self, sampler: &SamplerConfig) -> Result<()> {
        self.backbone.validate_for(sampler)?;
        self.head.validate()?;
        if self.head.in_channels != self.backbone.feature_dim() {
            return Err(Error::BadConfig(format!(
                "head expects {} channels but the backbone produces {}",
                self.head.in_channels,
                self.backbone.feature_dim()
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || !(t.lr > 0.0) {
            return Err(Error::BadConfig(
                "epochs, batch_size and lr must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BranchNet<T> {
    pub backbone: Backbone<T>,
    pub head: QualityHead<T>,
}

#[derive(Debug, Clone, Default)]
pub struct BranchCache<T> {
    backbone: BackboneCache<T>,
    features: Option<crate::backbone::FeatureMap<T>>,
    head: HeadCache<T>,
}

impl<T: Real> BranchNet<T> {
    pub fn new(backbone: &BackboneConfig, head: &HeadConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(backbone, &mut rng)?;
        let head = QualityHead::new(head, &mut rng)?;
        if head.config().in_channels != backbone.config().feature_dim() {
            return Err(Error::BadConfig(format!(
                "head expects {} channels but the backbone produces {}",
                head.config().in_channels,
                backbone.config().feature_dim()
            )));
        }
        Ok(Self { backbone, head })
    }

    /// Score for one fragment of `grid_count x grid_count` mini-patches.
    pub fn forward(
        &self,
        fragment: &VideoTensor,
        grid_count: usize,
        cache: Option<&mut BranchCache<T>>,
    ) -> Result<T> {
        match cache {
            None => {
                let f = self.backbone.forward(fragment, grid_count, None)?;
                self.head.forward(&f, None)
            }
            Some(c) => {
                let f = self
                    .backbone
                    .forward(fragment, grid_count, Some(&mut c.backbone))?;
                let out = self.head.forward(&f, Some(&mut c.head))?;
                c.features = Some(f);
                Ok(out)
            }
        }
    }

    pub fn backward(&mut self, cache: &BranchCache<T>, dscore: T) {
        let f = cache
            .features
            .as_ref()
            .expect("backward called without a training forward pass");
        let df = self.head.backward(&cache.head, f, dscore);
        self.backbone.backward(&cache.backbone, &df);
    }
}

impl<T: Real> Module<T> for BranchNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_params_mut(&join(prefix, "backbone"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

impl BranchNet<f32> {
    /// Normalized-space prediction for an ingested video; eval-mode sampling.
    pub fn predict(&self, video: &VideoTensor, sampler: &SamplerConfig) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..sampler.eval_samples {
            let (mode, seed) = if i == 0 {
                (SampleMode::Eval, 0)
            } else {
                (SampleMode::Train, i as u64)
            };
            let frag = sampler.fragment(video, mode, seed)?;
            total += self.forward(&frag.video, sampler.grid_count, None)? as f64;
        }
        Ok(total / sampler.eval_samples as f64)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    backbone: BackboneConfig,
    head: HeadConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes a checkpoint: magic, version, JSON header length, JSON header,
/// then little-endian `f32` tensor data.
pub fn save_checkpoint<T: Real>(net: &BranchNet<T>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    net.visit_params("", &mut |name, p| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
            offset: payload.len() / 4,
        });
        for v in &p.value {
            payload.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        backbone: net.backbone.config().clone(),
        head: net.head.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut write = |bytes: &[u8]| file.write_all(bytes).map_err(|e| Error::io(&tmp, e));
    write(CKPT_MAGIC)?;
    write(&CKPT_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    write(&payload)?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<BranchNet<f32>> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 22 || &bytes[..10] != CKPT_MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[14..22].try_into().unwrap()) as usize;
    let body = bytes
        .get(22..22 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data: Vec<f32> = bytes[22 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut net = BranchNet::<f32>::new(&header.backbone, &header.head, 0)?;
    let index: std::collections::HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problem = None;
    net.visit_params_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        match index.get(name) {
            Some(t) if t.shape == p.shape && t.offset + p.len() <= data.len() => {
                let n = p.len();
                p.value.copy_from_slice(&data[t.offset..t.offset + n]);
            }
            Some(_) => problem = Some(format!("tensor {name} has the wrong shape or is truncated")),
            None => problem = Some(format!("tensor {name} missing")),
        }
    });
    match problem {
        Some(reason) => Err(bad(reason)),
        None => Ok(net),
    }
}

/// Batch loss and its gradient with respect to each prediction.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: f64,
    pub plcc: f64,
    pub rank: f64,
    pub mse: f64,
    pub grad: Vec<f64>,
}

/// `(1 - PLCC) + rank_weight * pairwise hinge + mse_weight * MSE`.
///
/// The PLCC term is dropped when the batch labels are constant (correlation
/// is undefined there); the MSE term anchors predictions to the label scale.
pub fn quality_loss(pred: &[f64], label: &[f64], rank_weight: f64, mse_weight: f64) -> LossTerms {
    let n = pred.len();
    assert_eq!(n, label.len());
    let nf = n as f64;
    let mut grad = vec![0.0; n];

    let mse = pred.iter().zip(label).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / nf;
    for i in 0..n {
        grad[i] += mse_weight * 2.0 * (pred[i] - label[i]) / nf;
    }

    let pm = pred.iter().sum::<f64>() / nf;
    let ym = label.iter().sum::<f64>() / nf;
    let a: Vec<f64> = pred.iter().map(|p| p - pm).collect();
    let b: Vec<f64> = label.iter().map(|y| y - ym).collect();
    let sb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut plcc_term = 0.0;
    if n >= 2 && sb > 1e-12 {
        let sa = (a.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        let r = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (sa * sb);
        plcc_term = 1.0 - r;
        for i in 0..n {
            grad[i] -= b[i] / (sa * sb) - r * a[i] / (sa * sa);
        }
    }

    let mut rank = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if label[i] > label[j] {
                pairs += 1;
                let gap = pred[j] - pred[i];
                if gap > 0.0 {
                    rank += gap;
                }
            }
        }
    }
    if pairs > 0 {
        rank /= pairs as f64;
        let scale = rank_weight / pairs as f64;
        for i in 0..n {
            for j in 0..n {
                if label[i] > label[j] && pred[j] > pred[i] {
                    grad[j] += scale;
                    grad[i] -= scale;
                }
            }
        }
    }

    LossTerms {
        total: plcc_term + rank_weight * rank + mse_weight * mse,
        plcc: plcc_term,
        rank,
        mse,
        grad,
    }
}

/// One labelled training clip.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub video: Arc<VideoTensor>,
    /// Normalized MOS in `[0, 1]`.
    pub target: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// Every id that contributed a gradient.
    pub trained_ids: Vec<String>,
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warmup = ((total as f64 * cfg.warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        cfg.lr * (step + 1) as f64 / warmup as f64
    } else {
        let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    mix_seed(parts)
}

/// Trains a fresh branch on `items`. Fragments are re-drawn every epoch.
pub fn train_branch(
    cfg: &BranchConfig,
    sampler: &SamplerConfig,
    items: &[TrainItem],
) -> Result<(BranchNet<f32>, TrainLog)> {
    cfg.validate(sampler)?;
    if items.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let tc = &cfg.train;
    let mut net = BranchNet::<f32>::new(&cfg.backbone, &cfg.head, tc.seed)?;
    let mut opt = AdamW::<f32>::new(tc.lr, tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[tc.seed, 1]));
    let batches_per_epoch = items.len().div_ceil(tc.batch_size);
    let total_steps = batches_per_epoch * tc.epochs;
    let mut log = TrainLog::default();
    let mut seen = std::collections::BTreeSet::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            net.zero_grad();
            let mut caches = Vec::with_capacity(batch.len());
            let mut preds = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = &items[i];
                let frag_seed = mix_seed(&[tc.seed, epoch as u64, i as u64]);
                let frag = sampler.fragment(&item.video, SampleMode::Train, frag_seed)?;
                let mut cache = BranchCache::default();
                let p = net.forward(&frag.video, sampler.grid_count, Some(&mut cache))?;
                caches.push(cache);
                preds.push(p as f64);
                labels.push(item.target);
                seen.insert(item.id.clone());
            }
            let loss = quality_loss(&preds, &labels, tc.rank_weight, tc.mse_weight);
            if !loss.total.is_finite() {
                return Err(Error::DivergedTraining {
                    epoch,
                    loss: loss.total,
                });
            }
            epoch_loss += loss.total * batch.len() as f64;
            for (cache, g) in caches.iter().zip(&loss.grad) {
                net.backward(cache, *g as f32);
            }
            if let Some(max_norm) = tc.grad_clip {
                clip_grad_norm(&mut net, max_norm);
            }
            opt.step(&mut net, lr_at(tc, step, total_steps));
            step += 1;
        }
        let mean = epoch_loss / items.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    log.trained_ids = seen.into_iter().collect();
    Ok((net, log))
}

fn clip_grad_norm<T: Real, M: Module<T>>(net: &mut M, max_norm: f64) {
    let mut sq = 0.0;
    net.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::lit(max_norm / norm);
        net.visit_params_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= scale));
    }
}
