use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, ModelError, Reader, Result};

const MAGIC: &[u8; 8] = b"APFOREST";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_split: usize,
    /// `None` means `floor(sqrt(d))`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 16,
            min_split: 2,
            features_per_split: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn features_for(&self, dim: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (dim as f64).sqrt().floor() as usize)
            .clamp(1, dim.max(1))
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(ModelError::InvalidParams("n_trees must be at least 1".into()));
        }
        if self.min_split < 2 {
            return Err(ModelError::InvalidParams("min_split must be at least 2".into()));
        }
        if self.features_per_split == Some(0) {
            return Err(ModelError::InvalidParams(
                "features_per_split must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf { negatives: u32, positives: u32 },
}

/// Nodes in preorder; the root is `nodes[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf_for(&self, x: &[f64]) -> (u32, u32) {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
                Node::Leaf {
                    negatives,
                    positives,
                } => return (negatives, positives),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    /// Fraction of positive training examples at the reached leaf.
    pub fn leaf_probability(&self, x: &[f64]) -> f64 {
        let (neg, pos) = self.leaf_for(x);
        pos as f64 / (pos + neg) as f64
    }
}

/// An immutable trained forest.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    dim: usize,
    version: u64,
    seed: u64,
    /// Microseconds since the Unix epoch; 0 when unset.
    trained_at_micros: i64,
}

impl Forest {
    pub fn from_trees(dim: usize, trees: Vec<Tree>) -> Result<Self> {
        let forest = Self {
            trees,
            dim,
            version: 0,
            seed: 0,
            trained_at_micros: 0,
        };
        forest.validate()?;
        Ok(forest)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trained_at(&self) -> Option<chrono::DateTime<chrono::Utc>> {
        (self.trained_at_micros != 0)
            .then(|| chrono::DateTime::from_timestamp_micros(self.trained_at_micros))
            .flatten()
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn with_trained_at(mut self, at: chrono::DateTime<chrono::Utc>) -> Self {
        self.trained_at_micros = at.timestamp_micros();
        self
    }

    /// Mean over trees of the positive fraction at the reached leaf.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if self.trees.is_empty() {
            return Err(ModelError::EmptyForest);
        }
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.leaf_probability(x)).sum();
        Ok((sum / self.trees.len() as f64).clamp(0.0, 1.0))
    }

    /// Features referenced by at least one split.
    pub fn used_features(&self) -> std::collections::BTreeSet<usize> {
        self.trees
            .iter()
            .flat_map(|t| t.nodes.iter())
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature as usize),
                Node::Leaf { .. } => None,
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(ModelError::EmptyForest);
        }
        for (ti, tree) in self.trees.iter().enumerate() {
            let n = tree.nodes.len();
            if n == 0 {
                return Err(ModelError::Corrupt(format!("tree {ti} has no nodes")));
            }
            for (i, node) in tree.nodes.iter().enumerate() {
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let (l, r) = (left as usize, right as usize);
                        if feature as usize >= self.dim
                            || !threshold.is_finite()
                            || l <= i
                            || r <= i
                            || l >= n
                            || r >= n
                        {
                            return Err(ModelError::Corrupt(format!(
                                "tree {ti} node {i} is malformed"
                            )));
                        }
                    }
                    Node::Leaf {
                        negatives,
                        positives,
                    } => {
                        if negatives as u64 + positives as u64 == 0 {
                            return Err(ModelError::Corrupt(format!(
                                "tree {ti} leaf {i} is empty"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Binary encoding: magic, format version, header fields, then each
    /// tree's preorder node list. Little endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.trained_at_micros.to_le_bytes());
        out.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        for tree in &self.trees {
            out.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
            for node in &tree.nodes {
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        out.push(1);
                        out.extend_from_slice(&feature.to_le_bytes());
                        out.extend_from_slice(&threshold.to_le_bytes());
                        out.extend_from_slice(&left.to_le_bytes());
                        out.extend_from_slice(&right.to_le_bytes());
                    }
                    Node::Leaf {
                        negatives,
                        positives,
                    } => {
                        out.push(0);
                        out.extend_from_slice(&negatives.to_le_bytes());
                        out.extend_from_slice(&positives.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let dim = r.u64()? as usize;
        let version = r.u64()?;
        let seed = r.u64()?;
        let trained_at_micros = r.i64()?;
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees.min(4096));
        for _ in 0..n_trees {
            let n_nodes = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
            for _ in 0..n_nodes {
                nodes.push(match r.u8()? {
                    1 => Node::Split {
                        feature: r.u32()?,
                        threshold: r.f64()?,
                        left: r.u32()?,
                        right: r.u32()?,
                    },
                    0 => Node::Leaf {
                        negatives: r.u32()?,
                        positives: r.u32()?,
                    },
                    tag => return Err(ModelError::Corrupt(format!("node tag {tag}"))),
                });
            }
            trees.push(Tree { nodes });
        }
        r.finish()?;
        let forest = Self {
            trees,
            dim,
            version,
            seed,
            trained_at_micros,
        };
        forest.validate()?;
        Ok(forest)
    }
}

/// Grows `params.n_trees` trees, each on a bootstrap sample of size `n`,
/// picking at every node the Gini-optimal split among a random subset of
/// features.
pub fn train_forest(dataset: &Dataset, params: &ForestParams) -> Result<Forest> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if !dataset.has_both_classes() {
        return Err(ModelError::SingleClass);
    }
    train_forest_unchecked(dataset, params)
}

/// [`train_forest`] without the two-class guard.
pub fn train_forest_unchecked(dataset: &Dataset, params: &ForestParams) -> Result<Forest> {
    params.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let n = dataset.len();
    let dim = dataset.dim();
    if dim == 0 {
        return Err(ModelError::InvalidParams("dataset has zero features".into()));
    }
    if n > u32::MAX as usize {
        return Err(ModelError::InvalidParams("too many rows".into()));
    }

    let columns = to_columns(dataset);
    let canonical = canonical_order(dataset);
    let ctx = GrowContext {
        columns: &columns,
        labels: dataset.labels(),
        n,
        dim,
        max_depth: params.max_depth,
        min_split: params.min_split,
        mtry: params.features_for(dim),
    };

    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(params.seed, t as u64));
            let mut rows: Vec<u32> = (0..n)
                .map(|_| canonical[rng.random_range(0..n)])
                .collect();
            let mut grower = Grower {
                ctx: &ctx,
                rng,
                features: (0..dim as u32).collect(),
                scratch: Vec::with_capacity(n),
                nodes: Vec::new(),
            };
            grower.grow(&mut rows, 0);
            Tree {
                nodes: grower.nodes,
            }
        })
        .collect();

    Ok(Forest {
        trees,
        dim,
        version: 0,
        seed: params.seed,
        trained_at_micros: 0,
    })
}

fn to_columns(dataset: &Dataset) -> Vec<f64> {
    let (n, dim) = (dataset.len(), dataset.dim());
    let mut cols = vec![0.0; n * dim];
    for (r, row) in dataset.rows().enumerate() {
        for (f, &v) in row.iter().enumerate() {
            cols[f * n + r] = v;
        }
    }
    cols
}

/// Row indices sorted by content, so bootstrap draws do not depend on the
/// order rows were supplied in.
fn canonical_order(dataset: &Dataset) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..dataset.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        let (a, b) = (a as usize, b as usize);
        dataset.labels()[a].cmp(&dataset.labels()[b]).then_with(|| {
            dataset
                .row(a)
                .iter()
                .zip(dataset.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    idx
}

fn tree_seed(seed: u64, tree: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(tree.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct GrowContext<'a> {
    columns: &'a [f64],
    labels: &'a [bool],
    n: usize,
    dim: usize,
    max_depth: usize,
    min_split: usize,
    mtry: usize,
}

impl GrowContext<'_> {
    fn column(&self, f: usize) -> &[f64] {
        &self.columns[f * self.n..(f + 1) * self.n]
    }
}

struct Candidate {
    impurity: f64,
    feature: u32,
    threshold: f64,
}

impl Candidate {
    /// Lower impurity wins; ties go to the lower feature index, then the
    /// lower threshold.
    fn beats(&self, other: &Candidate) -> bool {
        self.impurity < other.impurity
            || (self.impurity == other.impurity
                && (self.feature, self.threshold) < (other.feature, other.threshold))
    }
}

struct Grower<'a> {
    ctx: &'a GrowContext<'a>,
    rng: ChaCha8Rng,
    /// Reused permutation buffer for drawing feature subsets.
    features: Vec<u32>,
    scratch: Vec<(f64, bool)>,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: &mut [u32], depth: usize) -> u32 {
        let positives = rows
            .iter()
            .filter(|&&r| self.ctx.labels[r as usize])
            .count() as u32;
        let negatives = rows.len() as u32 - positives;
        let index = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf {
            negatives,
            positives,
        });
        if depth >= self.ctx.max_depth
            || rows.len() < self.ctx.min_split
            || positives == 0
            || negatives == 0
        {
            return index;
        }
        let Some(best) = self.best_split(rows, positives) else {
            return index;
        };
        let column = self.ctx.column(best.feature as usize);
        let mid = partition(rows, |r| column[r as usize] <= best.threshold);
        let (left_rows, right_rows) = rows.split_at_mut(mid);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[index as usize] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        index
    }

    /// Draws features without replacement until `mtry` non-constant ones
    /// have been evaluated or all features are exhausted.
    fn best_split(&mut self, rows: &[u32], positives: u32) -> Option<Candidate> {
        let dim = self.ctx.dim;
        let m = rows.len() as f64;
        let total_pos = positives as f64;
        let total_neg = m - total_pos;
        let mut best: Option<Candidate> = None;
        let mut evaluated = 0;
        let mut drawn = 0;
        while evaluated < self.ctx.mtry && drawn < dim {
            let j = self.rng.random_range(drawn..dim);
            self.features.swap(drawn, j);
            let feature = self.features[drawn];
            drawn += 1;

            let column = self.ctx.column(feature as usize);
            let first = column[rows[0] as usize];
            if rows.iter().all(|&r| column[r as usize] == first) {
                continue;
            }
            evaluated += 1;

            self.scratch.clear();
            self.scratch.extend(
                rows.iter()
                    .map(|&r| (column[r as usize], self.ctx.labels[r as usize])),
            );
            self.scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

            let (mut left_pos, mut left_neg) = (0.0f64, 0.0f64);
            for i in 0..self.scratch.len() - 1 {
                if self.scratch[i].1 {
                    left_pos += 1.0;
                } else {
                    left_neg += 1.0;
                }
                let (lo, hi) = (self.scratch[i].0, self.scratch[i + 1].0);
                if lo == hi {
                    continue;
                }
                let left_n = left_pos + left_neg;
                let right_n = m - left_n;
                let (right_pos, right_neg) = (total_pos - left_pos, total_neg - left_neg);
                let impurity = (left_n - (left_pos * left_pos + left_neg * left_neg) / left_n
                    + right_n
                    - (right_pos * right_pos + right_neg * right_neg) / right_n)
                    / m;
                let candidate = Candidate {
                    impurity,
                    feature,
                    threshold: midpoint(lo, hi),
                };
                if best.as_ref().is_none_or(|b| candidate.beats(b)) {
                    best = Some(candidate);
                }
            }
        }
        best
    }
}

/// A threshold strictly between `lo` and `hi` when one exists, else `lo`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo / 2.0 + hi / 2.0;
    if mid >= lo && mid < hi {
        mid
    } else {
        lo
    }
}

/// Moves rows satisfying `pred` to the front; returns how many there are.
fn partition(rows: &mut [u32], pred: impl Fn(u32) -> bool) -> usize {
    let mut mid = 0;
    for i in 0..rows.len() {
        if pred(rows[i]) {
            rows.swap(i, mid);
            mid += 1;
        }
    }
    mid
}
