//! Group-level feature aggregation and revenue-per-click prediction.
//!
//! Two model families: a closed-form clicks-weighted ridge regression
//! baseline and a gradient-boosted tree ensemble trained on the
//! clicks-weighted squared error. Trees carry a learned default direction per
//! split so missing features route deterministically.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::AdGroup;
use crate::error::{Error, Result};
use crate::ingest::Catalog;

/// Feedback columns aggregated by summation; all other columns are rates and
/// aggregate as a clicks-weighted mean.
pub const ADDITIVE_COLUMNS: [&str; 4] = ["clicks", "conversions", "spend", "revenue"];

/// Names of the per-ad feedback columns, as declared by the catalog header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackSchema {
    columns: Vec<String>,
}

impl FeedbackSchema {
    pub fn new(columns: Vec<String>) -> FeedbackSchema {
        FeedbackSchema { columns }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn is_additive(&self, idx: usize) -> bool {
        ADDITIVE_COLUMNS.contains(&self.columns[idx].as_str())
    }
}

/// Per-ad feedback values aligned with a [`FeedbackSchema`]. Missing values
/// stay `None`; they are never encoded as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    values: Vec<Option<f64>>,
}

impl Feedback {
    pub fn new(values: Vec<Option<f64>>) -> Feedback {
        Feedback { values }
    }

    pub fn empty(width: usize) -> Feedback {
        Feedback { values: vec![None; width] }
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }
}

/// One training/scoring row: aggregated features, optional response, and the
/// clicks weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub group_id: String,
    pub features: Vec<Option<f64>>,
    /// Revenue per click; missing when the group has no clicks.
    pub rpc: Option<f64>,
    pub clicks_weight: f64,
}

/// Aggregates member-ad feedback into one group sample.
///
/// Additive stats are summed over non-missing values; rate stats take a
/// clicks-weighted mean over non-missing values (falling back to a plain mean
/// when no weights are available). The group response is total revenue over
/// total clicks, missing when clicks are zero. Contextual features are the
/// group centroid.
pub fn aggregate_features(group: &AdGroup, catalog: &Catalog) -> Result<GroupSample> {
    aggregate_features_over(group, catalog, None)
}

/// Same as [`aggregate_features`], restricted to members in `member_filter`
/// when one is given. Used when the training protocol must exclude held-out
/// ads from group aggregates.
pub fn aggregate_features_over(
    group: &AdGroup,
    catalog: &Catalog,
    member_filter: Option<&std::collections::HashSet<String>>,
) -> Result<GroupSample> {
    let schema = &catalog.feedback_schema;
    let index = catalog.ad_index();
    let clicks_col = schema.index_of("clicks");

    let mut sums: Vec<Option<f64>> = vec![None; schema.columns().len()];
    let mut rate_acc: Vec<(f64, f64, f64, usize)> = vec![(0.0, 0.0, 0.0, 0); schema.columns().len()];

    for ad_id in &group.member_ad_ids {
        let ad = index
            .get(ad_id.as_str())
            .ok_or_else(|| Error::UnknownAdId { ad_id: ad_id.clone() })?;
        if let Some(filter) = member_filter {
            if !filter.contains(ad_id) {
                continue;
            }
        }
        let weight = clicks_col
            .and_then(|c| ad.feedback.values()[c])
            .unwrap_or(0.0);
        for (k, value) in ad.feedback.values().iter().enumerate() {
            let Some(v) = value else { continue };
            if schema.is_additive(k) {
                *sums[k].get_or_insert(0.0) += v;
            } else {
                let acc = &mut rate_acc[k];
                acc.0 += weight * v;
                acc.1 += weight;
                acc.2 += v;
                acc.3 += 1;
            }
        }
    }

    let mut features: Vec<Option<f64>> = Vec::with_capacity(schema.columns().len());
    for (k, _) in schema.columns().iter().enumerate() {
        if schema.is_additive(k) {
            features.push(sums[k]);
        } else {
            let (wsum, wtot, plain, count) = rate_acc[k];
            features.push(if count == 0 {
                None
            } else if wtot > 0.0 {
                Some(wsum / wtot)
            } else {
                Some(plain / count as f64)
            });
        }
    }

    let clicks_total = clicks_col.and_then(|c| features[c]).unwrap_or(0.0);
    let revenue_total = schema.index_of("revenue").and_then(|c| features[c]);
    let rpc = match revenue_total {
        Some(rev) if clicks_total > 0.0 => Some(rev / clicks_total),
        _ => None,
    };

    features.extend(group.centroid.iter().map(|&c| Some(c)));
    Ok(GroupSample {
        group_id: group.group_id.clone(),
        features,
        rpc,
        clicks_weight: clicks_total,
    })
}

/// Seeded shuffle followed by a contiguous (train, validation, test) split.
/// Validation and test sizes are floored; the remainder goes to train.
pub fn split_dataset<T: Clone>(
    samples: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if samples.len() < 10 {
        return Err(Error::TooFewSamples { min: 10, got: samples.len() });
    }
    let (_, r_val, r_test) = ratios;
    let n = samples.len();
    let n_val = (r_val * n as f64).floor() as usize;
    let n_test = (r_test * n as f64).floor() as usize;
    if n_val + n_test >= n {
        return Err(Error::InvalidArgument("split ratios leave no training data".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = n - n_val - n_test;
    let pick = |idxs: &[usize]| idxs.iter().map(|&i| samples[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

// ---------------------------------------------------------------------------
// Weighted ridge regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    /// Training-set means used to impute missing features at predict time.
    pub feature_means: Vec<f64>,
}

/// Fits a clicks-weighted ridge regression by solving the normal equations.
///
/// Missing features are mean-imputed from the training set. The fit runs in
/// weighted-standardized feature space (so the penalty is comparable across
/// feature scales and the system is well conditioned) and the intercept is
/// not penalized; coefficients are mapped back to the raw scale. Columns with
/// zero variance carry no information and get a zero coefficient.
pub fn fit_linear(samples: &[GroupSample], l2: f64) -> Result<LinearModel> {
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 must be non-negative, got {l2}")));
    }
    let rows: Vec<&GroupSample> =
        samples.iter().filter(|s| s.rpc.is_some() && s.clicks_weight > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::EmptyTrainingSet { context: "no samples with a response".into() });
    }
    let d = rows[0].features.len();

    // Imputation means: plain means of the observed training values.
    let mut means = vec![0.0; d];
    for (k, m) in means.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in &rows {
            if let Some(v) = s.features[k] {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            *m = sum / count as f64;
        }
    }

    let wsum: f64 = rows.iter().map(|s| s.clicks_weight).sum();
    let imputed = |s: &GroupSample, k: usize| s.features[k].unwrap_or(means[k]);

    // Weighted column centers and scales over the imputed design.
    let mut centers = vec![0.0; d];
    let mut scales = vec![0.0; d];
    for k in 0..d {
        let mut m = 0.0;
        for s in &rows {
            m += s.clicks_weight * imputed(s, k);
        }
        m /= wsum;
        let mut v = 0.0;
        for s in &rows {
            let z = imputed(s, k) - m;
            v += s.clicks_weight * z * z;
        }
        centers[k] = m;
        scales[k] = (v / wsum).sqrt();
    }
    let kept: Vec<usize> = (0..d).filter(|&k| scales[k] > 1e-12).collect();
    let y_bar: f64 =
        rows.iter().map(|s| s.clicks_weight * s.rpc.expect("filtered")).sum::<f64>() / wsum;

    // Standardized columns are weighted-centered, so the intercept decouples
    // and the slope system is (Z' Wn Z + l2 I) gamma = Z' Wn (y - y_bar).
    let p = kept.len();
    let mut ata = vec![0.0; p * p];
    let mut aty = vec![0.0; p];
    let mut z = vec![0.0; p];
    for s in &rows {
        let wn = s.clicks_weight / wsum;
        for (j, &k) in kept.iter().enumerate() {
            z[j] = (imputed(s, k) - centers[k]) / scales[k];
        }
        let yc = s.rpc.expect("filtered") - y_bar;
        for i in 0..p {
            aty[i] += wn * z[i] * yc;
            for j in 0..p {
                ata[i * p + j] += wn * z[i] * z[j];
            }
        }
    }
    for i in 0..p {
        ata[i * p + i] += l2;
    }

    let gamma = if p > 0 { solve_linear_system(&mut ata, &mut aty, p)? } else { Vec::new() };

    let mut coef = vec![0.0; d];
    let mut intercept = y_bar;
    for (j, &k) in kept.iter().enumerate() {
        coef[k] = gamma[j] / scales[k];
        intercept -= coef[k] * centers[k];
    }
    Ok(LinearModel { intercept, coef, feature_means: means })
}

/// Gaussian elimination with partial pivoting. Callers pass standardized
/// systems, so entries are O(1) and the relative pivot test is meaningful.
fn solve_linear_system(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    let scale = a
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1.0);
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 * scale {
            return Err(Error::SingularSystem);
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in (col + 1)..n {
            s -= a[col * n + k] * x[k];
        }
        x[col] = s / a[col * n + col];
    }
    Ok(x)
}

impl LinearModel {
    pub fn predict(&self, features: &[Option<f64>]) -> f64 {
        let mut y = self.intercept;
        for (k, c) in self.coef.iter().enumerate() {
            let v = features
                .get(k)
                .copied()
                .flatten()
                .unwrap_or_else(|| self.feature_means.get(k).copied().unwrap_or(0.0));
            y += c * v;
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Gradient-boosted regression trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GbrtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf_weight: f64,
    /// Reserved for stochastic variants; the exact greedy fit ignores it.
    pub seed: u64,
}

impl Default for GbrtConfig {
    fn default() -> Self {
        GbrtConfig { n_trees: 200, max_depth: 6, learning_rate: 0.1, min_leaf_weight: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        /// Where rows with a missing feature value go.
        missing_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, features: &[Option<f64>]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, missing_left, left, right } => {
                    let go_left = match features.get(*feature).copied().flatten() {
                        Some(v) => v < *threshold,
                        None => *missing_left,
                    };
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }
}

/// Additive ensemble: `prediction = base_score + learning_rate * Σ tree(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
}

impl TreeEnsemble {
    pub fn predict(&self, features: &[Option<f64>]) -> f64 {
        let mut y = self.base_score;
        for t in &self.trees {
            y += self.learning_rate * t.predict(features);
        }
        y
    }
}

struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

/// Fits a gradient-boosted ensemble on the clicks-weighted squared error.
///
/// Each tree fits the current residuals; split gain is weighted variance
/// reduction, leaf values are weighted mean residuals, and each split learns
/// the missing-value direction that maximizes gain.
pub fn fit_gbrt(samples: &[GroupSample], cfg: &GbrtConfig) -> Result<TreeEnsemble> {
    let rows: Vec<&GroupSample> =
        samples.iter().filter(|s| s.rpc.is_some() && s.clicks_weight > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::EmptyTrainingSet { context: "no samples with a response".into() });
    }
    let y: Vec<f64> = rows.iter().map(|s| s.rpc.expect("filtered")).collect();
    let w: Vec<f64> = rows.iter().map(|s| s.clicks_weight).collect();
    let features: Vec<&[Option<f64>]> = rows.iter().map(|s| s.features.as_slice()).collect();
    let wsum: f64 = w.iter().sum();
    let base_score = w.iter().zip(&y).map(|(wi, yi)| wi * yi).sum::<f64>() / wsum;

    let mut pred = vec![base_score; rows.len()];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for _ in 0..cfg.n_trees {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(yi, pi)| yi - pi).collect();
        let mut nodes = Vec::new();
        let idx: Vec<usize> = (0..rows.len()).collect();
        build_node(&mut nodes, &features, &residual, &w, idx, 0, cfg);
        let tree = RegressionTree { nodes };
        for (pi, f) in pred.iter_mut().zip(&features) {
            *pi += cfg.learning_rate * tree.predict(f);
        }
        trees.push(tree);
    }
    Ok(TreeEnsemble { base_score, learning_rate: cfg.learning_rate, trees })
}

fn weighted_sse(idx: &[usize], r: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let mut sw = 0.0;
    let mut swy = 0.0;
    let mut swyy = 0.0;
    for &i in idx {
        sw += w[i];
        swy += w[i] * r[i];
        swyy += w[i] * r[i] * r[i];
    }
    let sse = if sw > 0.0 { swyy - swy * swy / sw } else { 0.0 };
    (sse, sw, swy)
}

fn build_node(
    nodes: &mut Vec<TreeNode>,
    features: &[&[Option<f64>]],
    residual: &[f64],
    weights: &[f64],
    idx: Vec<usize>,
    depth: usize,
    cfg: &GbrtConfig,
) -> usize {
    let (parent_sse, sw, swy) = weighted_sse(&idx, residual, weights);
    let leaf_value = if sw > 0.0 { swy / sw } else { 0.0 };
    if depth >= cfg.max_depth || idx.len() < 2 || parent_sse <= 0.0 {
        nodes.push(TreeNode::Leaf { value: leaf_value });
        return nodes.len() - 1;
    }

    let n_features = features[idx[0]].len();
    let mut best: Option<SplitCandidate> = None;
    for feature in 0..n_features {
        let mut present: Vec<(f64, usize)> = Vec::new();
        let mut missing_w = 0.0;
        let mut missing_wy = 0.0;
        for &i in &idx {
            match features[i][feature] {
                Some(v) => present.push((v, i)),
                None => {
                    missing_w += weights[i];
                    missing_wy += weights[i] * residual[i];
                }
            }
        }
        if present.len() < 2 {
            continue;
        }
        present.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));

        // Prefix scans over the present rows.
        let mut acc_w = 0.0;
        let mut acc_wy = 0.0;
        let mut acc_wyy = 0.0;
        let total: (f64, f64, f64) = present.iter().fold((0.0, 0.0, 0.0), |t, &(_, i)| {
            (t.0 + weights[i], t.1 + weights[i] * residual[i], t.2 + weights[i] * residual[i] * residual[i])
        });
        let missing_wyy: f64 = idx
            .iter()
            .filter(|&&i| features[i][feature].is_none())
            .map(|&i| weights[i] * residual[i] * residual[i])
            .sum();

        for cut in 0..present.len() - 1 {
            let (v, i) = present[cut];
            acc_w += weights[i];
            acc_wy += weights[i] * residual[i];
            acc_wyy += weights[i] * residual[i] * residual[i];
            let v_next = present[cut + 1].0;
            if v_next <= v {
                continue;
            }
            let threshold = v + (v_next - v) / 2.0;
            for &missing_left in &[true, false] {
                let (lw, lwy, lwyy, rw, rwy, rwyy) = if missing_left {
                    (
                        acc_w + missing_w,
                        acc_wy + missing_wy,
                        acc_wyy + missing_wyy,
                        total.0 - acc_w,
                        total.1 - acc_wy,
                        total.2 - acc_wyy,
                    )
                } else {
                    (
                        acc_w,
                        acc_wy,
                        acc_wyy,
                        total.0 - acc_w + missing_w,
                        total.1 - acc_wy + missing_wy,
                        total.2 - acc_wyy + missing_wyy,
                    )
                };
                if lw < cfg.min_leaf_weight || rw < cfg.min_leaf_weight {
                    continue;
                }
                let sse_l = lwyy - lwy * lwy / lw;
                let sse_r = rwyy - rwy * rwy / rw;
                let gain = parent_sse - sse_l - sse_r;
                let better = match &best {
                    None => true,
                    Some(b) => gain > b.gain,
                };
                if better {
                    best = Some(SplitCandidate { gain, feature, threshold, missing_left });
                }
            }
        }
    }

    // Relative gain floor keeps the fit invariant to a uniform weight scale.
    let min_gain = 1e-12 * parent_sse;
    let Some(split) = best.filter(|b| b.gain > min_gain) else {
        nodes.push(TreeNode::Leaf { value: leaf_value });
        return nodes.len() - 1;
    };

    let (mut left_idx, mut right_idx) = (Vec::new(), Vec::new());
    for &i in &idx {
        let go_left = match features[i][split.feature] {
            Some(v) => v < split.threshold,
            None => split.missing_left,
        };
        if go_left {
            left_idx.push(i);
        } else {
            right_idx.push(i);
        }
    }
    let at = nodes.len();
    nodes.push(TreeNode::Leaf { value: 0.0 }); // placeholder
    let left = build_node(nodes, features, residual, weights, left_idx, depth + 1, cfg);
    let right = build_node(nodes, features, residual, weights, right_idx, depth + 1, cfg);
    nodes[at] = TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        missing_left: split.missing_left,
        left,
        right,
    };
    at
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub wmse: f64,
    pub wmae: f64,
}

/// Clicks-weighted mean squared and absolute error over samples with a
/// response.
pub fn score(preds: &[f64], samples: &[GroupSample]) -> Result<Scores> {
    if preds.len() != samples.len() {
        return Err(Error::LengthMismatch { preds: preds.len(), samples: samples.len() });
    }
    let mut sw = 0.0;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        let (Some(y), w) = (s.rpc, s.clicks_weight) else { continue };
        if w <= 0.0 {
            continue;
        }
        let d = p - y;
        sw += w;
        se += w * d * d;
        ae += w * d.abs();
    }
    if sw == 0.0 {
        return Err(Error::EmptyTrainingSet { context: "no scorable samples".into() });
    }
    Ok(Scores { wmse: se / sw, wmae: ae / sw })
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

const GBRT_MAGIC: &str = "sembid.gbrt.v1";
const LINEAR_MAGIC: &str = "sembid.linear.v1";

impl TreeEnsemble {
    /// Versioned text format listing trees, splits, and leaves. Floats use
    /// shortest round-trip formatting so save/load is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{GBRT_MAGIC}");
        let _ = writeln!(out, "base_score {}", self.base_score);
        let _ = writeln!(out, "learning_rate {}", self.learning_rate);
        let _ = writeln!(out, "n_trees {}", self.trees.len());
        for (ti, tree) in self.trees.iter().enumerate() {
            let _ = writeln!(out, "tree {ti} nodes {}", tree.nodes.len());
            for (ni, node) in tree.nodes.iter().enumerate() {
                match node {
                    TreeNode::Leaf { value } => {
                        let _ = writeln!(out, "leaf {ni} value {value}");
                    }
                    TreeNode::Split { feature, threshold, missing_left, left, right } => {
                        let dir = if *missing_left { "L" } else { "R" };
                        let _ = writeln!(
                            out,
                            "split {ni} feature {feature} threshold {threshold} missing {dir} left {left} right {right}"
                        );
                    }
                }
            }
        }
        let _ = writeln!(out, "end");
        out
    }

    pub fn load(path: &Path) -> Result<TreeEnsemble> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<TreeEnsemble> {
        let bad = |line: u64, msg: String| Error::BadFormat { path: origin.to_string(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l.trim()));
        let (line, magic) = lines.next().ok_or_else(|| bad(0, "empty model file".into()))?;
        if magic != GBRT_MAGIC {
            return Err(bad(line, format!("expected header `{GBRT_MAGIC}`")));
        }
        let mut take_kv = |key: &str| -> Result<String> {
            let (line, l) = lines.next().ok_or_else(|| bad(0, format!("missing `{key}`")))?;
            l.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(line, format!("expected `{key} ...`")))
        };
        let base_score: f64 = take_kv("base_score")?
            .parse()
            .map_err(|_| bad(2, "bad base_score".into()))?;
        let learning_rate: f64 = take_kv("learning_rate")?
            .parse()
            .map_err(|_| bad(3, "bad learning_rate".into()))?;
        let n_trees: usize = take_kv("n_trees")?
            .parse()
            .map_err(|_| bad(4, "bad n_trees".into()))?;
        if n_trees > 1_000_000 {
            return Err(bad(4, "unreasonable tree count".into()));
        }

        let mut trees = Vec::with_capacity(n_trees);
        for ti in 0..n_trees {
            let (line, l) = lines.next().ok_or_else(|| bad(0, "truncated model".into()))?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some("tree") {
                return Err(bad(line, "expected `tree ...`".into()));
            }
            let declared: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(line, "bad tree index".into()))?;
            if declared != ti {
                return Err(bad(line, format!("tree index {declared}, expected {ti}")));
            }
            if parts.next() != Some("nodes") {
                return Err(bad(line, "expected `nodes <count>`".into()));
            }
            let n_nodes: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(line, "bad node count".into()))?;
            if n_nodes == 0 || n_nodes > 100_000_000 {
                return Err(bad(line, "unreasonable node count".into()));
            }
            let mut nodes = Vec::with_capacity(n_nodes);
            for ni in 0..n_nodes {
                let (line, l) = lines.next().ok_or_else(|| bad(0, "truncated tree".into()))?;
                let toks: Vec<&str> = l.split_whitespace().collect();
                let node = match toks.as_slice() {
                    ["leaf", i, "value", v] => {
                        check_index(i, ni, line, origin)?;
                        TreeNode::Leaf {
                            value: v.parse().map_err(|_| bad(line, "bad leaf value".into()))?,
                        }
                    }
                    ["split", i, "feature", f, "threshold", t, "missing", dir, "left", lft, "right", rgt] => {
                        check_index(i, ni, line, origin)?;
                        let left: usize =
                            lft.parse().map_err(|_| bad(line, "bad left index".into()))?;
                        let right: usize =
                            rgt.parse().map_err(|_| bad(line, "bad right index".into()))?;
                        if left >= n_nodes || right >= n_nodes || left == ni || right == ni {
                            return Err(bad(line, "child index out of range".into()));
                        }
                        // Children of a reachable split must be forward
                        // references, which rules out traversal cycles.
                        if left <= ni || right <= ni {
                            return Err(bad(line, "child index must follow its parent".into()));
                        }
                        TreeNode::Split {
                            feature: f.parse().map_err(|_| bad(line, "bad feature".into()))?,
                            threshold: t.parse().map_err(|_| bad(line, "bad threshold".into()))?,
                            missing_left: match *dir {
                                "L" => true,
                                "R" => false,
                                _ => return Err(bad(line, "missing direction must be L or R".into())),
                            },
                            left,
                            right,
                        }
                    }
                    _ => return Err(bad(line, format!("unrecognized node line `{l}`"))),
                };
                nodes.push(node);
            }
            trees.push(RegressionTree { nodes });
        }
        match lines.next() {
            Some((_, "end")) => {}
            Some((line, other)) => return Err(bad(line, format!("expected `end`, got `{other}`"))),
            None => return Err(bad(0, "missing `end` terminator".into())),
        }
        Ok(TreeEnsemble { base_score, learning_rate, trees })
    }
}

fn check_index(tok: &str, expected: usize, line: u64, origin: &str) -> Result<()> {
    let got: usize = tok.parse().map_err(|_| Error::BadFormat {
        path: origin.to_string(),
        line,
        msg: "bad node index".into(),
    })?;
    if got != expected {
        return Err(Error::BadFormat {
            path: origin.to_string(),
            line,
            msg: format!("node index {got}, expected {expected}"),
        });
    }
    Ok(())
}

impl LinearModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "{LINEAR_MAGIC}");
        let _ = writeln!(out, "n_features {}", self.coef.len());
        let _ = writeln!(out, "intercept {}", self.intercept);
        for (i, c) in self.coef.iter().enumerate() {
            let _ = writeln!(out, "coef {i} {c}");
        }
        for (i, m) in self.feature_means.iter().enumerate() {
            let _ = writeln!(out, "mean {i} {m}");
        }
        let _ = writeln!(out, "end");
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LinearModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<LinearModel> {
        let bad = |line: u64, msg: String| Error::BadFormat { path: origin.to_string(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l.trim()));
        let (line, magic) = lines.next().ok_or_else(|| bad(0, "empty model file".into()))?;
        if magic != LINEAR_MAGIC {
            return Err(bad(line, format!("expected header `{LINEAR_MAGIC}`")));
        }
        let (line, nf_line) = lines.next().ok_or_else(|| bad(0, "missing n_features".into()))?;
        let n_features: usize = nf_line
            .strip_prefix("n_features")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(line, "bad n_features".into()))?;
        if n_features > 10_000_000 {
            return Err(bad(line, "unreasonable feature count".into()));
        }
        let (line, int_line) = lines.next().ok_or_else(|| bad(0, "missing intercept".into()))?;
        let intercept: f64 = int_line
            .strip_prefix("intercept")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(line, "bad intercept".into()))?;
        let mut coef = vec![0.0; n_features];
        for k in 0..n_features {
            let (line, l) = lines.next().ok_or_else(|| bad(0, "truncated coefficients".into()))?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            match toks.as_slice() {
                ["coef", i, v] if i.parse() == Ok(k) => {
                    coef[k] = v.parse().map_err(|_| bad(line, "bad coefficient".into()))?;
                }
                _ => return Err(bad(line, format!("expected `coef {k} <value>`"))),
            }
        }
        let mut feature_means = vec![0.0; n_features];
        for k in 0..n_features {
            let (line, l) = lines.next().ok_or_else(|| bad(0, "truncated means".into()))?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            match toks.as_slice() {
                ["mean", i, v] if i.parse() == Ok(k) => {
                    feature_means[k] = v.parse().map_err(|_| bad(line, "bad mean".into()))?;
                }
                _ => return Err(bad(line, format!("expected `mean {k} <value>`"))),
            }
        }
        match lines.next() {
            Some((_, "end")) => {}
            _ => return Err(bad(0, "missing `end` terminator".into())),
        }
        Ok(LinearModel { intercept, coef, feature_means })
    }
}

/// Writes predictions as `group_id,rpc_pred`.
pub fn write_predictions(path: &Path, preds: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("group_id,rpc_pred\n");
    for (gid, p) in preds {
        let _ = writeln!(out, "{gid},{p}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Convenience wrapper: either model family behind one call.
#[derive(Debug, Clone)]
pub enum RpcModel {
    Linear(LinearModel),
    Gbrt(TreeEnsemble),
}

impl RpcModel {
    pub fn predict(&self, features: &[Option<f64>]) -> f64 {
        match self {
            RpcModel::Linear(m) => m.predict(features),
            RpcModel::Gbrt(m) => m.predict(features),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::AdGroup;
    use crate::ingest::parse_catalog_str;

    fn sample(id: &str, features: Vec<Option<f64>>, rpc: Option<f64>, w: f64) -> GroupSample {
        GroupSample { group_id: id.into(), features, rpc, clicks_weight: w }
    }

    const HEADER: &str = "ad_id,product_type,total_clicks,item_title_1,item_title_2,item_title_3,item_desc_1,item_desc_2,item_desc_3,clicks,conversions,spend,revenue,bounce_rate\n";

    #[test]
    fn aggregation_sums_additive_and_weights_rates() {
        let text = format!(
            "{HEADER}a1,t,2,x,,,,,,2,0,1,4,0.2\na2,t,3,y,,,,,,3,1,2,6,0.6\na3,t,0,z,,,,,,,,,,\n"
        );
        let catalog = parse_catalog_str(&text, "test").unwrap();
        let group = AdGroup {
            group_id: "t_0".into(),
            product_type: "t".into(),
            member_ad_ids: vec!["a1".into(), "a2".into(), "a3".into()],
            centroid: vec![0.5, -0.5],
        };
        let s = aggregate_features(&group, &catalog).unwrap();
        assert_eq!(s.rpc, Some(2.0));
        assert_eq!(s.clicks_weight, 5.0);
        assert_eq!(s.features[0], Some(5.0)); // clicks
        assert_eq!(s.features[3], Some(10.0)); // revenue
        // bounce_rate: clicks-weighted mean (2*0.2 + 3*0.6)/5
        assert!((s.features[4].unwrap() - 0.44).abs() < 1e-12);
        // centroid appended
        assert_eq!(s.features[5], Some(0.5));
        assert_eq!(s.features[6], Some(-0.5));
    }

    #[test]
    fn singleton_group_equals_the_ad_itself() {
        let text = format!("{HEADER}a1,t,2,x,,,,,,2,1,3,4,0.7\n");
        let catalog = parse_catalog_str(&text, "test").unwrap();
        let group = AdGroup {
            group_id: "t_0".into(),
            product_type: "t".into(),
            member_ad_ids: vec!["a1".into()],
            centroid: vec![],
        };
        let s = aggregate_features(&group, &catalog).unwrap();
        assert_eq!(s.features[..5], [Some(2.0), Some(1.0), Some(3.0), Some(4.0), Some(0.7)]);
        assert_eq!(s.rpc, Some(2.0));
    }

    #[test]
    fn missing_rate_stays_missing() {
        let text = format!("{HEADER}a1,t,2,x,,,,,,2,,1,4,\na2,t,3,y,,,,,,3,,2,6,\n");
        let catalog = parse_catalog_str(&text, "test").unwrap();
        let group = AdGroup {
            group_id: "t_0".into(),
            product_type: "t".into(),
            member_ad_ids: vec!["a1".into(), "a2".into()],
            centroid: vec![],
        };
        let s = aggregate_features(&group, &catalog).unwrap();
        assert_eq!(s.features[4], None); // bounce_rate
        assert_eq!(s.features[1], None); // conversions all missing
    }

    #[test]
    fn linear_recovers_exact_line() {
        let samples: Vec<GroupSample> = (0..6)
            .map(|i| {
                let x = i as f64;
                sample(&format!("g{i}"), vec![Some(x)], Some(3.0 + 2.0 * x), 1.0 + (i % 3) as f64)
            })
            .collect();
        let m = fit_linear(&samples, 0.0).unwrap();
        assert!((m.intercept - 3.0).abs() < 1e-8);
        assert!((m.coef[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn weighted_two_point_fit_matches_hand_solved_normal_equations() {
        // Two samples, binary feature, weights (1, 3), responses (1, 5).
        // Interpolating line: intercept 1, slope 4 regardless of weights.
        let samples = vec![
            sample("g0", vec![Some(0.0)], Some(1.0), 1.0),
            sample("g1", vec![Some(1.0)], Some(5.0), 3.0),
        ];
        let m = fit_linear(&samples, 0.0).unwrap();
        assert!((m.intercept - 1.0).abs() < 1e-9, "{}", m.intercept);
        assert!((m.coef[0] - 4.0).abs() < 1e-9, "{}", m.coef[0]);
    }

    #[test]
    fn huge_ridge_flattens_slope_to_weighted_mean() {
        let samples = vec![
            sample("g0", vec![Some(0.0)], Some(1.0), 1.0),
            sample("g1", vec![Some(1.0)], Some(5.0), 3.0),
        ];
        let m = fit_linear(&samples, 1e12).unwrap();
        assert!(m.coef[0].abs() < 1e-6);
        let wmean = (1.0 + 3.0 * 5.0) / 4.0;
        assert!((m.intercept - wmean).abs() < 1e-6);
    }

    #[test]
    fn singular_system_advises_ridge() {
        // Two identical informative columns cannot be separated with l2 = 0.
        let samples = vec![
            sample("g0", vec![Some(0.0), Some(0.0)], Some(1.0), 1.0),
            sample("g1", vec![Some(1.0), Some(1.0)], Some(2.0), 1.0),
            sample("g2", vec![Some(2.0), Some(2.0)], Some(2.5), 1.0),
        ];
        assert!(matches!(fit_linear(&samples, 0.0), Err(Error::SingularSystem)));
        assert!(fit_linear(&samples, 1e-6).is_ok());
    }

    #[test]
    fn constant_columns_are_dropped_not_fatal() {
        let samples = vec![
            sample("g0", vec![Some(1.0), Some(0.0)], Some(1.0), 1.0),
            sample("g1", vec![Some(1.0), Some(1.0)], Some(2.0), 1.0),
        ];
        let m = fit_linear(&samples, 0.0).unwrap();
        assert_eq!(m.coef[0], 0.0);
        assert!((m.predict(&samples[1].features) - 2.0).abs() < 1e-09);
    }

    #[test]
    fn stump_reproduces_two_point_example_exactly() {
        let samples = vec![
            sample("g0", vec![Some(0.0)], Some(0.0), 1.0),
            sample("g1", vec![Some(1.0)], Some(2.0), 1.0),
        ];
        let cfg = GbrtConfig { n_trees: 1, max_depth: 1, learning_rate: 1.0, min_leaf_weight: 0.5, seed: 0 };
        let model = fit_gbrt(&samples, &cfg).unwrap();
        assert_eq!(model.predict(&[Some(0.0)]), 0.0);
        assert_eq!(model.predict(&[Some(1.0)]), 2.0);
    }

    #[test]
    fn constant_response_is_fit_by_the_base_score() {
        let samples: Vec<GroupSample> =
            (0..5).map(|i| sample(&format!("g{i}"), vec![Some(i as f64)], Some(7.5), 2.0)).collect();
        let model = fit_gbrt(&samples, &GbrtConfig::default()).unwrap();
        for i in 0..5 {
            assert!((model.predict(&[Some(i as f64)]) - 7.5).abs() < 1e-12);
        }
        let preds: Vec<f64> = samples.iter().map(|s| model.predict(&s.features)).collect();
        let sc = score(&preds, &samples).unwrap();
        assert_eq!(sc.wmse, 0.0);
    }

    #[test]
    fn training_wmse_non_increasing_in_tree_count() {
        use rand::Rng;
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(13);
        let samples: Vec<GroupSample> = (0..40)
            .map(|i| {
                let x: f64 = rng.gen_range(-2.0..2.0);
                let y = x.sin() * 2.0 + rng.gen_range(-0.3..0.3);
                sample(&format!("g{i}"), vec![Some(x)], Some(y), rng.gen_range(0.5..4.0))
            })
            .collect();
        let mut prev = f64::INFINITY;
        for n_trees in [1, 2, 5, 10, 25, 50] {
            let cfg = GbrtConfig { n_trees, max_depth: 3, learning_rate: 0.5, min_leaf_weight: 0.5, seed: 0 };
            let model = fit_gbrt(&samples, &cfg).unwrap();
            let preds: Vec<f64> = samples.iter().map(|s| model.predict(&s.features)).collect();
            let wmse = score(&preds, &samples).unwrap().wmse;
            assert!(wmse <= prev + 1e-12, "wmse grew: {prev} -> {wmse} at {n_trees} trees");
            prev = wmse;
        }
    }

    #[test]
    fn uniform_weights_match_unweighted_fit() {
        use rand::Rng;
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(29);
        let base: Vec<(f64, f64)> =
            (0..30).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let make = |w: f64| -> Vec<GroupSample> {
            base.iter()
                .enumerate()
                .map(|(i, &(x, y))| sample(&format!("g{i}"), vec![Some(x)], Some(y), w))
                .collect()
        };
        let cfg = GbrtConfig { n_trees: 20, max_depth: 3, learning_rate: 0.3, min_leaf_weight: 0.25, seed: 0 };
        let m1 = fit_gbrt(&make(1.0), &cfg).unwrap();
        let m2 = fit_gbrt(&make(3.7), &cfg).unwrap();
        let lm1 = fit_linear(&make(1.0), 1e-9).unwrap();
        let lm2 = fit_linear(&make(3.7), 1e-9).unwrap();
        for &(x, _) in &base {
            let f = vec![Some(x)];
            assert!((m1.predict(&f) - m2.predict(&f)).abs() < 1e-10);
            assert!((lm1.predict(&f) - lm2.predict(&f)).abs() < 1e-8);
        }
    }

    #[test]
    fn missing_values_route_deterministically_and_totally() {
        let samples = vec![
            sample("g0", vec![Some(0.0), None], Some(0.0), 1.0),
            sample("g1", vec![Some(1.0), Some(1.0)], Some(2.0), 1.0),
            sample("g2", vec![None, Some(0.5)], Some(1.9), 1.0),
        ];
        let cfg = GbrtConfig { n_trees: 10, max_depth: 3, learning_rate: 0.5, min_leaf_weight: 0.5, seed: 0 };
        let model = fit_gbrt(&samples, &cfg).unwrap();
        let p = model.predict(&[None, None]);
        assert!(p.is_finite());
        let again = fit_gbrt(&samples, &cfg).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn score_matches_hand_computation() {
        let samples = vec![
            sample("a", vec![], Some(1.0), 1.0),
            sample("b", vec![], Some(4.0), 3.0),
        ];
        let sc = score(&[1.0, 2.0], &samples).unwrap();
        assert_eq!(sc.wmse, 3.0);
        assert_eq!(sc.wmae, 1.5);
        let perfect = score(&[1.0, 4.0], &samples).unwrap();
        assert_eq!((perfect.wmse, perfect.wmae), (0.0, 0.0));
        let single = score(&[2.0], &samples[..1]).unwrap();
        assert_eq!(single.wmse, 1.0);
        assert!(matches!(score(&[1.0], &samples), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn split_sizes_follow_floor_then_remainder_rule() {
        let samples: Vec<u32> = (0..100).collect();
        let (tr, va, te) = split_dataset(&samples, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        let samples: Vec<u32> = (0..10).collect();
        let (tr, va, te) = split_dataset(&samples, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let again = split_dataset(&samples, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((tr, va, te), again);
        assert!(split_dataset(&samples[..9], (0.8, 0.1, 0.1), 5).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let samples: Vec<u32> = (0..57).collect();
        let (tr, va, te) = split_dataset(&samples, (0.8, 0.1, 0.1), 3).unwrap();
        let mut all: Vec<u32> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, samples);
    }

    #[test]
    fn gbrt_model_file_round_trips_bit_exactly() {
        use rand::Rng;
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(31);
        let samples: Vec<GroupSample> = (0..25)
            .map(|i| {
                let x: f64 = rng.gen_range(-1.0..1.0);
                let z: Option<f64> =
                    if rng.gen_bool(0.3) { None } else { Some(rng.gen_range(-1.0..1.0)) };
                sample(&format!("g{i}"), vec![Some(x), z], Some(x * x + 0.1), 1.0 + i as f64)
            })
            .collect();
        let cfg = GbrtConfig { n_trees: 8, max_depth: 4, learning_rate: 0.3, min_leaf_weight: 0.5, seed: 0 };
        let model = fit_gbrt(&samples, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        model.save(&path).unwrap();
        let back = TreeEnsemble::load(&path).unwrap();
        assert_eq!(model, back);
        let text_a = model.to_text();
        back.save(&path).unwrap();
        assert_eq!(text_a, std::fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn linear_model_round_trips() {
        let m = LinearModel {
            intercept: 0.125,
            coef: vec![1.5, -2.25, 0.0],
            feature_means: vec![0.1, 0.2, 0.3],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("linear.txt");
        m.save(&path).unwrap();
        assert_eq!(LinearModel::load(&path).unwrap(), m);
    }
}
