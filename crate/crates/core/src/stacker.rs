//! Two-stage stacked ensemble.
//!
//! Stage one trains `J` copies of each of `K` branches; copy `j` never sees
//! fold `j` and predicts it instead, giving an out-of-fold (OOF) prediction
//! for every training clip and branch. Stage two fits boosted trees from the
//! `K` OOF predictions to the label. At inference each branch averages its
//! copies and the meta-model maps the `K` averages to the final score.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{BoostParams, BoostedTrees};
use crate::model::{
    derive_seed, load_checkpoint, save_checkpoint, train_branch, BranchConfig, BranchNet,
    TrainItem,
};
use crate::sampler::SamplerConfig;
use crate::video::{ingest_video, IngestionPolicy, VideoTensor};

pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub video_path: PathBuf,
    pub mos: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub mos_range: (f64, f64),
}

#[derive(Debug, Deserialize)]
struct RangeLine {
    mos_range: (f64, f64),
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, mos_range: (f64, f64)) -> Result<Self> {
        let m = Self { entries, mos_range };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mos_range;
        if !(lo < hi) {
            return Err(Error::Manifest(format!("mos_range ({lo}, {hi}) is empty")));
        }
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {:?}", e.id)));
            }
            if !(e.mos >= lo && e.mos <= hi) {
                return Err(Error::Manifest(format!(
                    "{}: mos {} outside [{lo}, {hi}]",
                    e.id, e.mos
                )));
            }
        }
        Ok(())
    }

    /// Loads JSON lines (optionally led by a `{"mos_range": [lo, hi]}` line)
    /// or CSV with header `id,video_path,mos,split`. Relative video paths are
    /// resolved against the manifest directory. Without an explicit range the
    /// observed MOS min and max are used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_csv = path.extension().and_then(|e| e.to_str()) == Some("csv");
        let mut range = None;
        let mut entries = Vec::new();
        if is_csv {
            let mut rdr = csv::Reader::from_reader(text.as_bytes());
            for row in rdr.deserialize() {
                entries.push(row?);
            }
        } else {
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                if let Ok(r) = serde_json::from_str::<RangeLine>(line) {
                    range = Some(r.mos_range);
                    continue;
                }
                let entry: ManifestEntry = serde_json::from_str(line)
                    .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
                entries.push(entry);
            }
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut entries {
            if e.video_path.is_relative() {
                e.video_path = base.join(&e.video_path);
            }
        }
        let range = match range {
            Some(r) => r,
            None => {
                let lo = entries.iter().map(|e| e.mos).fold(f64::INFINITY, f64::min);
                let hi = entries.iter().map(|e| e.mos).fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        };
        Self::new(entries, range)
    }

    /// Writes JSON lines with a leading range line; paths relative to `path`'s
    /// directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = serde_json::to_string(&serde_json::json!({ "mos_range": self.mos_range }))?;
        out.push('\n');
        for e in &self.entries {
            let mut e = e.clone();
            if let Ok(rel) = e.video_path.strip_prefix(base) {
                e.video_path = rel.to_path_buf();
            }
            out.push_str(&serde_json::to_string(&e)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .cloned()
            .collect()
    }

    pub fn normalize(&self, mos: f64) -> f64 {
        normalize(mos, self.mos_range)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        denormalize(v, self.mos_range)
    }
}

pub fn normalize(mos: f64, (lo, hi): (f64, f64)) -> f64 {
    (mos - lo) / (hi - lo)
}

pub fn denormalize(v: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + v * (hi - lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: usize,
    pub fold_of: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> BTreeSet<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        for &f in self.fold_of.values() {
            s[f] += 1;
        }
        s
    }
}

/// MOS-stratified folds over the train split: clips are sorted by MOS and
/// each consecutive run of `J` clips is spread over distinct folds in a
/// seeded order, so fold sizes differ by at most one.
pub fn make_folds(manifest: &DatasetManifest, folds: usize, seed: u64) -> Result<FoldAssignment> {
    let mut train = manifest.split(Split::Train);
    make_folds_for(&mut train, folds, seed)
}

pub fn make_folds_for(train: &mut [ManifestEntry], folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(Error::BadConfig(format!("need at least 2 folds, got {folds}")));
    }
    if train.len() < folds {
        return Err(Error::TooFewSamples {
            needed: folds,
            got: train.len(),
        });
    }
    train.sort_by(|a, b| a.mos.total_cmp(&b.mos).then_with(|| a.id.cmp(&b.id)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![0usize; folds];
    let mut fold_of = BTreeMap::new();
    for chunk in train.chunks(folds) {
        let mut order: Vec<usize> = (0..folds).collect();
        order.shuffle(&mut rng);
        // the trailing partial chunk goes to the currently smallest folds
        order.sort_by_key(|&f| sizes[f]);
        for (entry, &f) in chunk.iter().zip(&order) {
            fold_of.insert(entry.id.clone(), f);
            sizes[f] += 1;
        }
    }
    Ok(FoldAssignment {
        folds,
        fold_of,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub branches: Vec<BranchConfig>,
    pub folds: usize,
    #[serde(default)]
    pub meta: BoostParams,
    #[serde(default)]
    pub seed: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        let mut branches = vec![BranchConfig::default(); 3];
        let faster = crate::backbone::BackboneConfig::faster_variant();
        branches[2].backbone = faster;
        for (k, b) in branches.iter_mut().enumerate() {
            b.train.seed = k as u64;
        }
        Self {
            sampler: SamplerConfig::default(),
            branches,
            folds: 3,
            meta: BoostParams::default(),
            seed: 0,
        }
    }
}

impl StackConfig {
    pub fn k(&self) -> usize {
        self.branches.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.branches.is_empty() {
            return Err(Error::BadConfig("at least one branch is required".into()));
        }
        if self.folds < 2 {
            return Err(Error::BadConfig(format!(
                "at least 2 folds are required, got {}",
                self.folds
            )));
        }
        for b in &self.branches {
            b.validate(&self.sampler)?;
        }
        self.meta.validate()
    }
}

/// Out-of-fold predictions, one row per training clip, one column per branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OofTable {
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

/// What one branch copy produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyRecord {
    pub branch: usize,
    pub fold: usize,
    /// Normalized predictions for every id of the held-out fold.
    pub predictions: BTreeMap<String, f64>,
    pub trained_ids: Vec<String>,
    pub epoch_loss: Vec<f64>,
    pub fingerprint: String,
}

/// Builds the OOF table. `labels` maps train ids to normalized MOS.
pub fn assemble_oof(
    records: &[CopyRecord],
    k: usize,
    j: usize,
    labels: &BTreeMap<String, f64>,
) -> Result<OofTable> {
    let mut grid: HashMap<(usize, usize), &CopyRecord> = HashMap::new();
    for r in records {
        grid.insert((r.branch, r.fold), r);
    }
    for branch in 0..k {
        for fold in 0..j {
            if !grid.contains_key(&(branch, fold)) {
                return Err(Error::IncompleteGrid { branch, fold });
            }
        }
    }
    let ids: Vec<String> = labels.keys().cloned().collect();
    let mut features = vec![vec![f64::NAN; k]; ids.len()];
    let row_of: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    for branch in 0..k {
        for fold in 0..j {
            for (id, &p) in &grid[&(branch, fold)].predictions {
                let row = *row_of.get(id.as_str()).ok_or_else(|| {
                    Error::Manifest(format!("prediction for unknown train id {id:?}"))
                })?;
                if !features[row][branch].is_nan() {
                    return Err(Error::Manifest(format!(
                        "id {id:?} predicted twice by branch {branch}"
                    )));
                }
                features[row][branch] = p;
            }
        }
    }
    for (row, id) in ids.iter().enumerate() {
        if let Some(branch) = features[row].iter().position(|v| v.is_nan()) {
            return Err(Error::Manifest(format!(
                "id {id:?} has no out-of-fold prediction from branch {branch}"
            )));
        }
    }
    let labels = ids.iter().map(|id| labels[id]).collect();
    Ok(OofTable {
        ids,
        features,
        labels,
    })
}

/// Checks that every copy predicted exactly its held-out fold and never
/// trained on it.
pub fn check_oof_partition(folds: &FoldAssignment, records: &[CopyRecord]) -> Result<()> {
    for r in records {
        let held_out = folds.members(r.fold);
        let predicted: BTreeSet<String> = r.predictions.keys().cloned().collect();
        if predicted != held_out {
            return Err(Error::Manifest(format!(
                "branch {} fold {} predicted {} ids, fold has {}",
                r.branch,
                r.fold,
                predicted.len(),
                held_out.len()
            )));
        }
        if let Some(leak) = r.trained_ids.iter().find(|id| held_out.contains(*id)) {
            return Err(Error::Manifest(format!(
                "branch {} fold {} trained on held-out id {leak:?}",
                r.branch, r.fold
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub arity: usize,
    pub trees: BoostedTrees,
    /// Set when the labels were constant and the model is a constant.
    pub degenerate: bool,
}

impl MetaModel {
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.arity {
            return Err(Error::ShapeMismatch(format!(
                "meta-model expects {} features, got {}",
                self.arity,
                features.len()
            )));
        }
        Ok(self.trees.predict(features))
    }
}

/// Fits the meta-model on the OOF table. Unless `params.monotone` says
/// otherwise, the fit is constrained to be non-decreasing in every branch
/// score.
pub fn fit_meta(oof: &OofTable, params: &BoostParams) -> Result<MetaModel> {
    if oof.features.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let arity = oof.features[0].len();
    let mut params = params.clone();
    if params.monotone.is_empty() {
        params.monotone = vec![1; arity];
    }
    let params = &params;
    let degenerate = oof.labels.iter().all(|&y| y == oof.labels[0]);
    if degenerate {
        log::warn!("meta-model labels are constant; fitting a constant predictor");
        let trees = BoostedTrees::fit(
            &oof.features,
            &oof.labels,
            &BoostParams {
                n_trees: 0,
                ..params.clone()
            },
        )?;
        return Ok(MetaModel {
            arity,
            trees,
            degenerate,
        });
    }
    Ok(MetaModel {
        arity,
        trees: BoostedTrees::fit(&oof.features, &oof.labels, params)?,
        degenerate,
    })
}

/// A training clip held in memory.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub entry: ManifestEntry,
    pub video: Arc<VideoTensor>,
}

/// Ingests every entry in parallel on the current rayon pool.
pub fn load_items(entries: &[ManifestEntry], policy: &IngestionPolicy) -> Result<Vec<LoadedItem>> {
    entries
        .par_iter()
        .map(|e| {
            ingest_video(&e.video_path, policy)
                .map(|v| LoadedItem {
                    entry: e.clone(),
                    video: Arc::new(v),
                })
                .map_err(|err| Error::for_item(&e.id, err))
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn copy_fingerprint(cfg: &StackConfig, branch: usize, fold: usize, folds: &FoldAssignment) -> Result<String> {
    let payload = serde_json::to_vec(&(
        &cfg.sampler,
        &cfg.branches[branch],
        branch,
        fold,
        &folds.fold_of,
    ))?;
    Ok(format!("{:016x}", fnv1a(&payload)))
}

/// Trains copy `fold` of branch `branch`: fits on every other fold and
/// predicts the held-out one.
pub fn train_branch_copy(
    cfg: &StackConfig,
    branch: usize,
    items: &[LoadedItem],
    mos_range: (f64, f64),
    folds: &FoldAssignment,
    fold: usize,
) -> Result<(BranchNet<f32>, CopyRecord)> {
    let mut bcfg = cfg.branches[branch].clone();
    bcfg.train.seed = derive_seed(&[cfg.seed, bcfg.train.seed, branch as u64, fold as u64]);
    let held_out = |id: &str| folds.fold_of.get(id) == Some(&fold);
    let train: Vec<TrainItem> = items
        .iter()
        .filter(|it| folds.fold_of.contains_key(&it.entry.id) && !held_out(&it.entry.id))
        .map(|it| TrainItem {
            id: it.entry.id.clone(),
            video: it.video.clone(),
            target: normalize(it.entry.mos, mos_range),
        })
        .collect();
    let (net, log) = train_branch(&bcfg, &cfg.sampler, &train)?;
    let mut predictions = BTreeMap::new();
    for it in items.iter().filter(|it| held_out(&it.entry.id)) {
        let p = net
            .predict(&it.video, &cfg.sampler)
            .map_err(|e| Error::for_item(&it.entry.id, e))?;
        predictions.insert(it.entry.id.clone(), p);
    }
    let record = CopyRecord {
        branch,
        fold,
        predictions,
        trained_ids: log.trained_ids,
        epoch_loss: log.epoch_loss,
        fingerprint: copy_fingerprint(cfg, branch, fold, folds)?,
    };
    Ok((net, record))
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub config: StackConfig,
    pub mos_range: (f64, f64),
    /// `copies[k][j]`.
    pub copies: Vec<Vec<BranchNet<f32>>>,
    pub meta: MetaModel,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleFile {
    version: u32,
    config: StackConfig,
    mos_range: (f64, f64),
}

fn copy_paths(dir: &Path, branch: usize, fold: usize) -> (PathBuf, PathBuf) {
    let d = dir.join(format!("branch_{branch}"));
    (
        d.join(format!("fold_{fold}.ckpt")),
        d.join(format!("fold_{fold}.json")),
    )
}

impl Ensemble {
    pub fn checkpoint_count(&self) -> usize {
        self.copies.iter().map(Vec::len).sum()
    }

    /// Per-branch mean of the copies' normalized predictions.
    pub fn branch_features(&self, video: &VideoTensor) -> Result<Vec<f64>> {
        self.copies
            .iter()
            .map(|copies| {
                let mut sum = 0.0;
                for net in copies {
                    sum += net.predict(video, &self.config.sampler)?;
                }
                Ok(sum / copies.len() as f64)
            })
            .collect()
    }

    /// Meta-model output in normalized space, clamped to `[0, 1]`.
    pub fn predict_normalized(&self, video: &VideoTensor) -> Result<f64> {
        let f = self.branch_features(video)?;
        Ok(self.meta.predict(&f)?.clamp(0.0, 1.0))
    }

    /// Final score on the MOS scale.
    pub fn predict(&self, video: &VideoTensor) -> Result<f64> {
        Ok(denormalize(self.predict_normalized(video)?, self.mos_range))
    }

    pub fn ingestion_policy(&self) -> IngestionPolicy {
        IngestionPolicy::for_fragment(self.config.sampler.grid_count, self.config.sampler.patch_size)
    }

    pub fn predict_path(&self, path: &Path, cache_dir: Option<PathBuf>) -> Result<f64> {
        let video = ingest_video(path, &self.ingestion_policy().with_cache(cache_dir))?;
        self.predict(&video)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = EnsembleFile {
            version: ENSEMBLE_VERSION,
            config: self.config.clone(),
            mos_range: self.mos_range,
        };
        write_json(&dir.join("config.json"), &file)?;
        for (k, copies) in self.copies.iter().enumerate() {
            for (j, net) in copies.iter().enumerate() {
                save_checkpoint(net, &copy_paths(dir, k, j).0)?;
            }
        }
        write_json(&dir.join("meta.json"), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: EnsembleFile = read_json(&dir.join("config.json"))?;
        if file.version != ENSEMBLE_VERSION {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: format!("unsupported ensemble version {}", file.version),
            });
        }
        let mut copies = Vec::new();
        for k in 0..file.config.k() {
            let mut row = Vec::new();
            for j in 0..file.config.folds {
                let (ckpt, _) = copy_paths(dir, k, j);
                if !ckpt.exists() {
                    return Err(Error::IncompleteGrid { branch: k, fold: j });
                }
                row.push(load_checkpoint(&ckpt)?);
            }
            copies.push(row);
        }
        let meta: MetaModel = read_json(&dir.join("meta.json"))?;
        if meta.arity != file.config.k() {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: format!("meta-model arity {} != {} branches", meta.arity, file.config.k()),
            });
        }
        Ok(Self {
            config: file.config,
            mos_range: file.mos_range,
            copies,
            meta,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Result of a full two-stage training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ensemble: Ensemble,
    pub folds: FoldAssignment,
    pub records: Vec<CopyRecord>,
    pub oof: OofTable,
    /// `(branch, fold)` pairs restored from a previous run instead of trained.
    pub resumed: Vec<(usize, usize)>,
}

/// Runs both training stages on the train items. Copies train in parallel on
/// the current rayon pool; results do not depend on the pool size. With an
/// output directory, finished copies are written as they complete and reused
/// by a later run with the same configuration.
pub fn train_ensemble(
    cfg: &StackConfig,
    train: &[LoadedItem],
    mos_range: (f64, f64),
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut entries: Vec<ManifestEntry> = train.iter().map(|t| t.entry.clone()).collect();
    let folds = make_folds_for(&mut entries, cfg.folds, cfg.seed)?;
    let labels: BTreeMap<String, f64> = train
        .iter()
        .map(|t| (t.entry.id.clone(), normalize(t.entry.mos, mos_range)))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..cfg.k())
        .flat_map(|k| (0..cfg.folds).map(move |j| (k, j)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(k, j)| -> Result<(BranchNet<f32>, CopyRecord, bool)> {
            if let Some(dir) = out_dir {
                let (ckpt, rec) = copy_paths(dir, k, j);
                if ckpt.exists() && rec.exists() {
                    let record: CopyRecord = read_json(&rec)?;
                    if record.fingerprint == copy_fingerprint(cfg, k, j, &folds)? {
                        log::info!("branch {k} fold {j}: reusing finished copy");
                        return Ok((load_checkpoint(&ckpt)?, record, true));
                    }
                }
            }
            log::info!("branch {k} fold {j}: training");
            let (net, record) = train_branch_copy(cfg, k, train, mos_range, &folds, j)?;
            if let Some(dir) = out_dir {
                let (ckpt, rec) = copy_paths(dir, k, j);
                save_checkpoint(&net, &ckpt)?;
                write_json(&rec, &record)?;
            }
            Ok((net, record, false))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut copies: Vec<Vec<BranchNet<f32>>> = vec![Vec::new(); cfg.k()];
    let mut records = Vec::new();
    let mut resumed = Vec::new();
    for ((k, j), (net, record, reused)) in jobs.iter().zip(results) {
        copies[*k].push(net);
        if reused {
            resumed.push((*k, *j));
        }
        records.push(record);
    }
    check_oof_partition(&folds, &records)?;
    let oof = assemble_oof(&records, cfg.k(), cfg.folds, &labels)?;
    let meta = fit_meta(&oof, &cfg.meta)?;
    let ensemble = Ensemble {
        config: cfg.clone(),
        mos_range,
        copies,
        meta,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("oof.json"), &oof)?;
        write_json(&dir.join("folds.json"), &folds)?;
        ensemble.save(dir)?;
    }
    Ok(TrainOutcome {
        ensemble,
        folds,
        records,
        oof,
        resumed,
    })
}
