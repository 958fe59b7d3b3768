//! Rank and linear correlation metrics and the evaluation report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], label: &[f64]) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::DegenerateInput(format!(
            "length mismatch: {} predictions vs {} labels",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 items, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(label).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite value".into()));
    }
    for (name, v) in [("prediction", pred), ("label", label)] {
        if v.iter().all(|&x| x == v[0]) {
            return Err(Error::DegenerateInput(format!("{name} vector is constant")));
        }
    }
    Ok(())
}

/// Average (fractional) ranks, 1-based.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    Ok(pearson_unchecked(pred, label))
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    Ok(pearson_unchecked(&average_ranks(pred), &average_ranks(label)))
}

pub fn main_score(srcc: f64, plcc: f64) -> f64 {
    (srcc + plcc) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub mos: f64,
    pub pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub srcc: f64,
    pub plcc: f64,
    pub main_score: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_item: Option<Vec<ItemResult>>,
}

impl EvalReport {
    pub fn from_pairs(pred: &[f64], label: &[f64]) -> Result<Self> {
        let s = srcc(pred, label)?;
        let p = plcc(pred, label)?;
        Ok(Self {
            srcc: s,
            plcc: p,
            main_score: main_score(s, p),
            n: pred.len(),
            per_item: None,
        })
    }

    pub fn from_items(items: Vec<ItemResult>, keep_items: bool) -> Result<Self> {
        let pred: Vec<f64> = items.iter().map(|i| i.pred).collect();
        let mos: Vec<f64> = items.iter().map(|i| i.mos).collect();
        let mut report = Self::from_pairs(&pred, &mos)?;
        if keep_items {
            report.per_item = Some(items);
        }
        Ok(report)
    }

    pub fn table(&self) -> String {
        format!(
            "{:<12}{:>10}\n{:<12}{:>10.4}\n{:<12}{:>10.4}\n{:<12}{:>10.4}\n{:<12}{:>10}\n",
            "metric", "value", "SRCC", self.srcc, "PLCC", self.plcc, "main", self.main_score, "n", self.n
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Writes `id,mos,pred` rows; no-op when per-item results were not kept.
    pub fn write_items_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for item in self.per_item.iter().flatten() {
            w.serialize(item)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Anything that maps an item to a prediction on the MOS scale.
pub trait Predictor: Sync {
    fn predict_item(&self, id: &str, video_path: &Path) -> Result<f64>;
}

impl<F> Predictor for F
where
    F: Fn(&str, &Path) -> Result<f64> + Sync,
{
    fn predict_item(&self, id: &str, video_path: &Path) -> Result<f64> {
        self(id, video_path)
    }
}

/// Predicts every entry of a split and scores it. Entries are processed in
/// parallel on the current rayon pool and reduced in id order.
pub fn evaluate<P: Predictor + ?Sized>(
    entries: &[crate::stacker::ManifestEntry],
    predictor: &P,
    keep_items: bool,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if entries.is_empty() {
        return Err(Error::DegenerateInput("evaluation split is empty".into()));
    }
    let mut items = entries
        .par_iter()
        .map(|e| {
            predictor
                .predict_item(&e.id, &e.video_path)
                .map(|pred| ItemResult {
                    id: e.id.clone(),
                    mos: e.mos,
                    pred,
                })
                .map_err(|err| Error::for_item(&e.id, err))
        })
        .collect::<Result<Vec<_>>>()?;
    items.sort_by(|a, b| a.id.cmp(&b.id));
    EvalReport::from_items(items, keep_items)
}
