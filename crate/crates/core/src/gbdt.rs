//! Second-order gradient-boosted regression trees (squared error, exact
//! greedy splits, L2 leaf regularization).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum loss reduction to make a split.
    pub gamma: f64,
    /// Minimum hessian sum (sample count, for squared error) per child.
    pub min_child_weight: f64,
    /// Per-feature monotonicity: +1 increasing, -1 decreasing, 0 free.
    /// Empty means unconstrained.
    pub monotone: Vec<i8>,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 3,
            learning_rate: 0.05,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            monotone: Vec::new(),
        }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.lambda < 0.0 || self.gamma < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::BadConfig(format!("invalid boosting parameters {self:?}")));
        }
        if self.monotone.iter().any(|c| !(-1..=1).contains(c)) {
            return Err(Error::BadConfig(format!("monotone constraints must be -1, 0 or 1, got {:?}", self.monotone)));
        }
        Ok(())
    }

    fn constraint(&self, feature: usize) -> i8 {
        self.monotone.get(feature).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] < *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedTrees {
    pub n_features: usize,
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    params: &'a BoostParams,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    /// Unshrunk optimal leaf weight, clamped to the monotonicity bounds.
    fn weight(&self, g: f64, h: f64, (lo, hi): (f64, f64)) -> f64 {
        (-g / (h + self.params.lambda)).clamp(lo, hi)
    }

    /// Loss reduction achieved by weight `w` for a node with sums `g`, `h`.
    fn gain_of(&self, g: f64, h: f64, w: f64) -> f64 {
        -(2.0 * g * w + (h + self.params.lambda) * w * w)
    }

    fn build(&mut self, rows: &mut [usize], depth: usize, bounds: (f64, f64)) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h = rows.len() as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.weight(g, h, bounds) * self.params.learning_rate,
        });
        if depth >= self.params.max_depth || rows.len() < 2 {
            return id;
        }
        let parent = self.gain_of(g, h, self.weight(g, h, bounds));
        let mut best: Option<(f64, usize, f64, f64, f64)> = None;
        let n_features = self.x[rows[0]].len();
        for f in 0..n_features {
            let c = self.params.constraint(f);
            rows.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut gl = 0.0;
            for k in 0..rows.len() - 1 {
                gl += self.grad[rows[k]];
                let (va, vb) = (self.x[rows[k]][f], self.x[rows[k + 1]][f]);
                if va == vb {
                    continue;
                }
                let hl = (k + 1) as f64;
                let hr = h - hl;
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let wl = self.weight(gl, hl, bounds);
                let wr = self.weight(g - gl, hr, bounds);
                if (c > 0 && wl > wr) || (c < 0 && wl < wr) {
                    continue;
                }
                let gain = 0.5 * (self.gain_of(gl, hl, wl) + self.gain_of(g - gl, hr, wr) - parent)
                    - self.params.gamma;
                if gain > 1e-12 && best.map_or(true, |b| gain > b.0) {
                    best = Some((gain, f, 0.5 * (va + vb), wl, wr));
                }
            }
        }
        let Some((_, feature, threshold, wl, wr)) = best else {
            return id;
        };
        let mid = 0.5 * (wl + wr);
        let (lb, rb) = match self.params.constraint(feature) {
            c if c > 0 => ((bounds.0, mid), (mid, bounds.1)),
            c if c < 0 => ((mid, bounds.1), (bounds.0, mid)),
            _ => (bounds, bounds),
        };
        rows.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]));
        let split = rows.partition_point(|&r| self.x[r][feature] < threshold);
        let (lo, hi) = rows.split_at_mut(split);
        let left = self.build(lo, depth + 1, lb);
        let right = self.build(hi, depth + 1, rb);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl BoostedTrees {
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &BoostParams) -> Result<Self> {
        params.validate()?;
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::DegenerateInput(format!(
                "{} rows vs {} labels",
                x.len(),
                y.len()
            )));
        }
        let n_features = x[0].len();
        if n_features == 0 || x.iter().any(|r| r.len() != n_features) {
            return Err(Error::DegenerateInput("ragged or empty feature rows".into()));
        }
        let base_score = y.iter().sum::<f64>() / y.len() as f64;
        let mut pred = vec![base_score; y.len()];
        let mut trees = Vec::with_capacity(params.n_trees);
        let mut rows: Vec<usize> = (0..y.len()).collect();
        for _ in 0..params.n_trees {
            let grad: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
            let mut b = Builder {
                x,
                grad: &grad,
                params,
                nodes: Vec::new(),
            };
            b.build(&mut rows, 0, (f64::NEG_INFINITY, f64::INFINITY));
            let tree = Tree { nodes: b.nodes };
            for (p, row) in pred.iter_mut().zip(x) {
                *p += tree.predict(row);
            }
            trees.push(tree);
        }
        Ok(Self {
            n_features,
            base_score,
            trees,
        })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }
}
