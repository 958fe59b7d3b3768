//! Patch-weighted quality head.
//!
//! Two pointwise branches read the feature map: one predicts a quality score
//! per mini-patch, the other a positive importance weight. The clip score is
//! the weight-normalized sum of patch scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, join, sigmoid, Linear, Module, Param, Real};

/// Guards the weight normalization.
pub const COMBINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightActivation {
    Sigmoid,
    Softplus,
}

impl WeightActivation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            WeightActivation::Sigmoid => sigmoid(x),
            WeightActivation::Softplus => {
                if x > T::lit(20.0) {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation.
    fn grad<T: Real>(self, x: T) -> T {
        match self {
            WeightActivation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            WeightActivation::Softplus => sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub weight_activation: WeightActivation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            in_channels: 768,
            hidden_channels: 128,
            weight_activation: WeightActivation::Sigmoid,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::BadConfig("head channels must be positive".into()));
        }
        Ok(())
    }
}

/// Per-patch scores and positive weights, flattened over `t x g x g`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScores<T> {
    pub scores: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> PatchScores<T> {
    pub fn new(scores: Vec<T>, weights: Vec<T>) -> Result<Self> {
        if scores.len() != weights.len() || scores.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores vs {} weights",
                scores.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w > T::zero())) {
            return Err(Error::BadConfig("patch weights must be positive".into()));
        }
        Ok(Self { scores, weights })
    }

    /// `sum(w * s) / (sum(w) + eps)`.
    pub fn combine(&self) -> T {
        combine(&self.scores, &self.weights)
    }
}

pub fn combine<T: Real>(scores: &[T], weights: &[T]) -> T {
    let num: T = scores.iter().zip(weights).map(|(&s, &w)| s * w).sum();
    let den: T = weights.iter().copied().sum::<T>() + T::lit(COMBINE_EPS);
    num / den
}

/// `1x1x1` conv, GELU, `1x1x1` conv.
#[derive(Debug, Clone)]
struct PointwiseBranch<T> {
    fc1: Linear<T>,
    fc2: Linear<T>,
}

#[derive(Debug, Clone, Default)]
struct BranchCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
    out: Vec<T>,
}

impl<T: Real> PointwiseBranch<T> {
    fn new<R: Rng>(cfg: &HeadConfig, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(cfg.in_channels, cfg.hidden_channels, true, rng),
            fc2: Linear::new(cfg.hidden_channels, 1, true, rng),
        }
    }

    fn forward(&self, x: &[T], rows: usize, cache: Option<&mut BranchCache<T>>) -> Vec<T> {
        let pre = self.fc1.forward(x, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let out = self.fc2.forward(&act, rows);
        if let Some(c) = cache {
            c.pre = pre;
            c.act = act;
            c.out = out.clone();
        }
        out
    }

    fn backward(&mut self, x: &[T], cache: &BranchCache<T>, dout: &[T], rows: usize) -> Vec<T> {
        let dact = self.fc2.backward(&cache.act, dout, rows);
        let dpre: Vec<T> = dact
            .iter()
            .zip(&cache.pre)
            .map(|(&g, &p)| g * gelu_grad(p))
            .collect();
        self.fc1.backward(x, &dpre, rows)
    }
}

impl<T: Real> Module<T> for PointwiseBranch<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit_params(&join(prefix, "conv1"), f);
        self.fc2.visit_params(&join(prefix, "conv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_params_mut(&join(prefix, "conv1"), f);
        self.fc2.visit_params_mut(&join(prefix, "conv2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct QualityHead<T> {
    cfg: HeadConfig,
    score: PointwiseBranch<T>,
    weight: PointwiseBranch<T>,
}

#[derive(Debug, Clone, Default)]
pub struct HeadCache<T> {
    features: Vec<T>,
    score: BranchCache<T>,
    weight: BranchCache<T>,
    scores: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> QualityHead<T> {
    pub fn new<R: Rng>(cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            score: PointwiseBranch::new(cfg, rng),
            weight: PointwiseBranch::new(cfg, rng),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    fn check(&self, f: &FeatureMap<T>) -> Result<usize> {
        if f.c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} channels, feature map has {}",
                self.cfg.in_channels, f.c
            )));
        }
        Ok(f.positions())
    }

    /// Raw per-patch quality scores.
    pub fn score_branch(&self, f: &FeatureMap<T>) -> Result<Vec<T>> {
        let rows = self.check(f)?;
        Ok(self.score.forward(&f.data, rows, None))
    }

    /// Per-patch weights after the positivity activation.
    pub fn weight_branch(&self, f: &FeatureMap<T>) -> Result<Vec<T>> {
        let rows = self.check(f)?;
        let act = self.cfg.weight_activation;
        Ok(self
            .weight
            .forward(&f.data, rows, None)
            .into_iter()
            .map(|v| act.apply(v))
            .collect())
    }

    pub fn patch_scores(&self, f: &FeatureMap<T>) -> Result<PatchScores<T>> {
        Ok(PatchScores {
            scores: self.score_branch(f)?,
            weights: self.weight_branch(f)?,
        })
    }

    /// Clip score; fills `cache` for a later [`QualityHead::backward`].
    pub fn forward(&self, f: &FeatureMap<T>, cache: Option<&mut HeadCache<T>>) -> Result<T> {
        let rows = self.check(f)?;
        let act = self.cfg.weight_activation;
        match cache {
            None => Ok(self.patch_scores(f)?.combine()),
            Some(c) => {
                let scores = self.score.forward(&f.data, rows, Some(&mut c.score));
                let raw = self.weight.forward(&f.data, rows, Some(&mut c.weight));
                let weights: Vec<T> = raw.iter().map(|&v| act.apply(v)).collect();
                let out = combine(&scores, &weights);
                c.features = f.data.clone();
                c.scores = scores;
                c.weights = weights;
                Ok(out)
            }
        }
    }

    /// Accumulates head gradients for `dL/dscore` and returns `dL/dF`.
    pub fn backward(&mut self, cache: &HeadCache<T>, f: &FeatureMap<T>, dscore: T) -> FeatureMap<T> {
        let rows = cache.scores.len();
        let sum_w: T = cache.weights.iter().copied().sum::<T>() + T::lit(COMBINE_EPS);
        let q = combine(&cache.scores, &cache.weights);
        let act = self.cfg.weight_activation;
        let ds: Vec<T> = cache.weights.iter().map(|&w| dscore * w / sum_w).collect();
        let dw_raw: Vec<T> = cache
            .scores
            .iter()
            .zip(&cache.weight.out)
            .map(|(&s, &raw)| dscore * (s - q) / sum_w * act.grad(raw))
            .collect();
        let dfs = self.score.backward(&cache.features, &cache.score, &ds, rows);
        let dfw = self.weight.backward(&cache.features, &cache.weight, &dw_raw, rows);
        FeatureMap {
            t: f.t,
            g: f.g,
            c: f.c,
            data: dfs.iter().zip(&dfw).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Real> Module<T> for QualityHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.score.visit_params(&join(prefix, "score"), f);
        self.weight.visit_params(&join(prefix, "weight"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.score.visit_params_mut(&join(prefix, "score"), f);
        self.weight.visit_params_mut(&join(prefix, "weight"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(seed: u64, c: usize, h: usize) -> QualityHead<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QualityHead::new(
            &HeadConfig {
                in_channels: c,
                hidden_channels: h,
                weight_activation: WeightActivation::Sigmoid,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn zero_params(h: &mut QualityHead<f64>) {
        h.visit_params_mut("", &mut |name, p| {
            if name.ends_with("bias") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }

    #[test]
    fn zero_features_give_zero_scores_and_half_weights() {
        let mut h = head(1, 8, 4);
        zero_params(&mut h);
        let f = FeatureMap::new(2, 3, 8, vec![0.0; 2 * 9 * 8]).unwrap();
        assert!(h.score_branch(&f).unwrap().iter().all(|&s| s == 0.0));
        assert!(h.weight_branch(&f).unwrap().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn identical_patches_get_identical_scores() {
        let h = head(2, 8, 4);
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let data = v.iter().copied().cycle().take(4 * 8).collect();
        let f = FeatureMap::new(1, 2, 8, data).unwrap();
        let s = h.score_branch(&f).unwrap();
        assert!(s.iter().all(|&x| x == s[0]));
    }

    #[test]
    fn combine_examples() {
        let uniform = PatchScores::new(vec![0.2f64, 0.4, 0.6], vec![0.7; 3]).unwrap();
        assert!((uniform.combine() - 0.4).abs() < 1e-7);
        let single = PatchScores::new(vec![0.9f64], vec![0.013]).unwrap();
        assert!((single.combine() - 0.9).abs() < 1e-6);
        let skewed = PatchScores::new(vec![1.0f64, 0.0], vec![3.0, 1.0]).unwrap();
        assert!((skewed.combine() - 0.75).abs() < 1e-8);
    }

    #[test]
    fn patch_scores_validate() {
        assert!(PatchScores::new(vec![1.0f64], vec![0.0]).is_err());
        assert!(PatchScores::new(vec![1.0f64, 2.0], vec![1.0]).is_err());
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let h = head(3, 8, 4);
        let f = FeatureMap::new(1, 1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(h.score_branch(&f), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softplus_weights_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = QualityHead::<f64>::new(
            &HeadConfig {
                in_channels: 4,
                hidden_channels: 3,
                weight_activation: WeightActivation::Softplus,
            },
            &mut rng,
        )
        .unwrap();
        let f = FeatureMap::new(1, 2, 4, (0..16).map(|i| i as f64 - 8.0).collect()).unwrap();
        assert!(h.weight_branch(&f).unwrap().iter().all(|&w| w > 0.0));
    }
}
