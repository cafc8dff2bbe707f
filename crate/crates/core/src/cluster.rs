//! Two-stage ad grouping: product-type classification followed by
//! agglomerative clustering of intention embeddings within each type.
//!
//! Average linkage under cosine distance; merging stops once the closest
//! pair of clusters is farther apart than the threshold. Per-type runs are
//! independent and the whole procedure is deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::Ad;
use crate::nn::{gelu, gelu_prime, softmax, Adam, Linear, Mat};
use crate::seed;

/// Default cosine-distance merge threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.35;

/// A mutually exclusive cluster of ads sharing one product type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdGroup {
    pub group_id: String,
    pub product_type: String,
    /// Sorted, non-empty.
    pub member_ad_ids: Vec<String>,
    /// Normalized mean of member embeddings.
    pub centroid: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Product-type classifier
// ---------------------------------------------------------------------------

/// Feed-forward softmax classifier over embedding vectors.
#[derive(Debug, Clone)]
pub struct ProductTypeClassifier {
    /// Sorted label set; argmax ties resolve to the smallest index.
    pub labels: Vec<String>,
    l1: Linear,
    l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 32,
            learning_rate: 5e-3,
            epochs: 200,
            batch_size: 16,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ProductTypeClassifier {
    /// Class probabilities for one embedding.
    pub fn predict_probs(&self, embedding: &[f64]) -> Vec<f64> {
        let x = Mat::from_vec(1, embedding.len(), embedding.to_vec());
        let mut h = self.l1.forward(&x);
        h.data.iter_mut().for_each(|v| *v = gelu(*v));
        let logits = self.l2.forward(&h);
        softmax(logits.row(0))
    }

    /// Argmax label with smallest-index tie-break.
    pub fn predict(&self, embedding: &[f64]) -> &str {
        let probs = self.predict_probs(embedding);
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        &self.labels[best]
    }
}

/// Trains the taxonomy classifier on labeled single-item ads.
///
/// Cross-entropy with ADAM over shuffled mini-batches; a held-out fraction is
/// split off first and its accuracy is returned alongside the model.
pub fn train_classifier(
    samples: &[(Vec<f64>, String)],
    cfg: &ClassifierConfig,
) -> Result<(ProductTypeClassifier, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet { context: "no labeled ads for the classifier".into() });
    }
    let mut labels: Vec<String> = samples.iter().map(|(_, l)| l.clone()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::SingleLabel { labels: labels.len() });
    }
    let label_idx: BTreeMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let d_in = samples[0].0.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "classifier-init"));
    let mut clf = ProductTypeClassifier {
        labels: labels.clone(),
        l1: Linear::new(d_in, cfg.hidden, &mut rng),
        l2: Linear::new(cfg.hidden, labels.len(), &mut rng),
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "classifier-split"));
    order.shuffle(&mut split_rng);
    let n_hold = ((samples.len() as f64 * cfg.holdout_fraction).floor() as usize)
        .min(samples.len().saturating_sub(1));
    let (holdout, train): (&[usize], &[usize]) = order.split_at(n_hold);
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet { context: "holdout fraction leaves no training rows".into() });
    }

    let mut adam = Adam::new(cfg.learning_rate, 0.9, 0.999, 1e-8);
    let mut train_order: Vec<usize> = train.to_vec();
    for epoch in 0..cfg.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
            cfg.seed,
            "classifier-epoch",
            epoch as u64,
        ));
        train_order.shuffle(&mut erng);
        for batch in train_order.chunks(cfg.batch_size.max(1)) {
            clf.l1.w.zero_grad();
            clf.l1.b.zero_grad();
            clf.l2.w.zero_grad();
            clf.l2.b.zero_grad();
            for &si in batch {
                let (emb, label) = &samples[si];
                let target = label_idx[label.as_str()];
                let x = Mat::from_vec(1, d_in, emb.clone());
                let pre = clf.l1.forward(&x);
                let mut act = pre.clone();
                act.data.iter_mut().for_each(|v| *v = gelu(*v));
                let logits = clf.l2.forward(&act);
                let probs = softmax(logits.row(0));
                // d cross-entropy / d logits = probs - onehot
                let mut dlogits = Mat::from_vec(1, labels.len(), probs);
                *dlogits.at_mut(0, target) -= 1.0;
                let mut dact = clf.l2.backward(&act, &dlogits);
                for (d, &p) in dact.data.iter_mut().zip(&pre.data) {
                    *d *= gelu_prime(p);
                }
                let _ = clf.l1.backward(&x, &dact);
            }
            let inv = 1.0 / batch.len() as f64;
            let mut params = clf.l1.params_mut();
            params.extend(clf.l2.params_mut());
            for p in params.iter_mut() {
                p.g.scale(inv);
            }
            adam.step(&mut params);
        }
    }

    let eval_set = if holdout.is_empty() { train } else { holdout };
    let mut correct = 0usize;
    for &si in eval_set {
        let (emb, label) = &samples[si];
        if clf.predict(emb) == label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / eval_set.len() as f64;
    Ok((clf, accuracy))
}

/// Product type of one ad.
///
/// Single-item ads with a catalog label keep it; everything else goes through
/// the classifier.
pub fn assign_product_type(
    ad: &Ad,
    embedding: &[f64],
    clf: Option<&ProductTypeClassifier>,
) -> Result<String> {
    if ad.items.len() == 1 {
        if let Some(pt) = &ad.product_type {
            return Ok(pt.clone());
        }
    }
    match clf {
        Some(c) => Ok(c.predict(embedding).to_string()),
        None => Err(Error::ClassifierRequired { ad_id: ad.ad_id.clone() }),
    }
}

// ---------------------------------------------------------------------------
// Agglomerative clustering
// ---------------------------------------------------------------------------

/// Cosine distance between two vectors, `1 - cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Average-linkage agglomerative clustering under cosine distance.
///
/// Merging continues while the smallest pairwise linkage is at most
/// `threshold`; distance ties resolve to the pair of clusters whose smallest
/// original member indices compare lowest. Returns clusters of input indices,
/// each sorted, ordered by smallest member.
pub fn agglomerate(embeddings: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = embeddings.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![vec![0]];
    }

    // Pairwise linkage matrix, updated in place via Lance-Williams for
    // average linkage: d(A∪B, C) = (|A| d(A,C) + |B| d(B,C)) / (|A| + |B|).
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut alive = vec![true; n];
    let mut size = vec![1usize; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // Slot label = smallest original member; merges land in the lower slot,
    // which keeps slot index equal to that label.

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            for b in (a + 1)..n {
                if !alive[b] {
                    continue;
                }
                let d = dist[a * n + b];
                let better = match best {
                    None => true,
                    Some((bd, _, _)) => d < bd,
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let (d, a, b) = match best {
            Some(x) => x,
            None => break,
        };
        if d > threshold {
            break;
        }
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for c in 0..n {
            if !alive[c] || c == a || c == b {
                continue;
            }
            let merged = (sa * dist[a * n + c] + sb * dist[b * n + c]) / (sa + sb);
            dist[a * n + c] = merged;
            dist[c * n + a] = merged;
        }
        size[a] += size[b];
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        alive[b] = false;
    }

    let mut clusters: Vec<Vec<usize>> = members
        .into_iter()
        .zip(alive)
        .filter(|(_, keep)| *keep)
        .map(|(mut m, _)| {
            m.sort_unstable();
            m
        })
        .collect();
    clusters.sort_by_key(|c| c[0]);
    clusters
}

/// Builds the final ad groups: classify each ad, cluster within each product
/// type, and attach centroids.
///
/// Group ids are `<product_type>_<ordinal>` with clusters ordered by their
/// first member's catalog position.
pub fn build_groups(
    ads: &[Ad],
    embeddings: &BTreeMap<String, Vec<f64>>,
    clf: Option<&ProductTypeClassifier>,
    threshold: f64,
) -> Result<Vec<AdGroup>> {
    let mut by_type: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (idx, ad) in ads.iter().enumerate() {
        let emb = embeddings
            .get(&ad.ad_id)
            .ok_or_else(|| Error::MissingEmbedding { ad_id: ad.ad_id.clone() })?;
        let pt = assign_product_type(ad, emb, clf)?;
        by_type.entry(pt).or_default().push(idx);
    }

    let typed: Vec<(String, Vec<usize>)> = by_type.into_iter().collect();
    let grouped: Vec<Vec<AdGroup>> = typed
        .par_iter()
        .map(|(pt, idxs)| {
            let vectors: Vec<Vec<f64>> =
                idxs.iter().map(|&i| embeddings[&ads[i].ad_id].clone()).collect();
            let clusters = agglomerate(&vectors, threshold);
            clusters
                .into_iter()
                .enumerate()
                .map(|(ordinal, local)| {
                    let mut member_ad_ids: Vec<String> =
                        local.iter().map(|&li| ads[idxs[li]].ad_id.clone()).collect();
                    let centroid = normalized_mean(local.iter().map(|&li| &vectors[li]));
                    member_ad_ids.sort();
                    AdGroup {
                        group_id: format!("{pt}_{ordinal}"),
                        product_type: pt.clone(),
                        member_ad_ids,
                        centroid,
                    }
                })
                .collect()
        })
        .collect();
    Ok(grouped.into_iter().flatten().collect())
}

fn normalized_mean<'a, I: Iterator<Item = &'a Vec<f64>>>(vectors: I) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    let mut first: Option<Vec<f64>> = None;
    for v in vectors {
        if sum.is_empty() {
            sum = vec![0.0; v.len()];
            first = Some(v.clone());
        }
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        count += 1;
    }
    if count == 0 {
        return sum;
    }
    if count == 1 {
        // Members are already unit vectors; keep the bits unchanged.
        return first.expect("one member seen");
    }
    let norm: f64 = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        sum.iter_mut().for_each(|x| *x /= norm);
        sum
    } else {
        // Antipodal members cancel; fall back to the first member.
        first.unwrap_or(sum)
    }
}

/// One group per ad: the degenerate grouping used by the singular-ad
/// baseline. The centroid is the ad's own embedding.
pub fn singleton_groups(
    ads: &[Ad],
    embeddings: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<AdGroup>> {
    ads.iter()
        .map(|ad| {
            let emb = embeddings
                .get(&ad.ad_id)
                .ok_or_else(|| Error::MissingEmbedding { ad_id: ad.ad_id.clone() })?;
            Ok(AdGroup {
                group_id: format!("solo_{}", ad.ad_id),
                product_type: ad.product_type.clone().unwrap_or_else(|| "unlabeled".into()),
                member_ad_ids: vec![ad.ad_id.clone()],
                centroid: emb.clone(),
            })
        })
        .collect()
}

/// Writes groups as `group_id,product_type,ad_id`, one row per member.
pub fn write_groups(path: &Path, groups: &[AdGroup]) -> Result<()> {
    let mut out = String::from("group_id,product_type,ad_id\n");
    for g in groups {
        for m in &g.member_ad_ids {
            let _ = writeln!(out, "{},{},{}", g.group_id, g.product_type, m);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the `group_id,product_type,ad_id` format back into membership lists.
/// Centroids are not stored in this file and come back empty.
pub fn read_groups(path: &Path) -> Result<Vec<AdGroup>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_groups_str(&text, &path.display().to_string())
}

pub fn parse_groups_str(text: &str, origin: &str) -> Result<Vec<AdGroup>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::BadFormat { path: origin.into(), line: 1, msg: e.to_string() })?
        .clone();
    for (i, expected) in ["group_id", "product_type", "ad_id"].iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == *expected => {}
            other => {
                return Err(Error::BadHeader {
                    path: origin.to_string(),
                    column: other.unwrap_or("<missing>").to_string(),
                    expected: (*expected).to_string(),
                })
            }
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (String, Vec<String>)> = BTreeMap::new();
    for row in reader.records() {
        let record = row.map_err(|e| Error::BadFormat {
            path: origin.into(),
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let gid = record.get(0).unwrap_or("").to_string();
        let pt = record.get(1).unwrap_or("").to_string();
        let ad = record.get(2).unwrap_or("").to_string();
        if gid.is_empty() || ad.is_empty() {
            return Err(Error::MalformedField {
                path: origin.into(),
                line,
                field: "group_id/ad_id".into(),
                msg: "must be non-empty".into(),
            });
        }
        let entry = acc.entry(gid.clone()).or_insert_with(|| {
            order.push(gid.clone());
            (pt.clone(), Vec::new())
        });
        if entry.0 != pt {
            return Err(Error::MalformedField {
                path: origin.into(),
                line,
                field: "product_type".into(),
                msg: format!("group `{gid}` spans two product types"),
            });
        }
        if entry.1.contains(&ad) {
            return Err(Error::DuplicateKey { path: origin.into(), line, key: format!("({gid}, {ad})") });
        }
        entry.1.push(ad);
    }
    Ok(order
        .into_iter()
        .map(|gid| {
            let (pt, mut members) = acc.remove(&gid).expect("group recorded");
            members.sort();
            AdGroup { group_id: gid, product_type: pt, member_ad_ids: members, centroid: Vec::new() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Item;
    use crate::rpc_model::Feedback;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn identical_vectors_merge_at_any_positive_threshold() {
        let e = vec![unit(vec![1.0, 0.0]), unit(vec![1.0, 0.0])];
        let clusters = agglomerate(&e, 0.1);
        assert_eq!(clusters, vec![vec![0, 1]]);
    }

    #[test]
    fn orthogonal_vectors_stay_apart_below_their_distance() {
        let e = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let clusters = agglomerate(&e, 0.5);
        assert_eq!(clusters.len(), 2);
        let clusters = agglomerate(&e, 1.0);
        assert_eq!(clusters.len(), 1);
    }

    #[test]
    fn threshold_monotonicity() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let e: Vec<Vec<f64>> = (0..24)
            .map(|_| unit((0..4).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()))
            .collect();
        let mut prev = usize::MAX;
        for t in [0.05, 0.2, 0.5, 0.9, 1.5] {
            let k = agglomerate(&e, t).len();
            assert!(k <= prev, "clusters grew from {prev} to {k} at threshold {t}");
            prev = k;
        }
    }

    fn ad(id: &str, n_items: usize, pt: Option<&str>) -> Ad {
        Ad {
            ad_id: id.into(),
            items: (0..n_items)
                .map(|k| Item {
                    title: format!("item {k}"),
                    description: String::new(),
                    revenue_rank: k as u32 + 1,
                })
                .collect(),
            product_type: pt.map(str::to_string),
            total_clicks: 0,
            feedback: Feedback::empty(0),
        }
    }

    #[test]
    fn single_item_ads_keep_their_catalog_type() {
        let a = ad("a", 1, Some("chairs"));
        assert_eq!(assign_product_type(&a, &[1.0], None).unwrap(), "chairs");
    }

    #[test]
    fn multi_item_ads_need_a_classifier() {
        let a = ad("a", 2, Some("chairs"));
        assert!(matches!(
            assign_product_type(&a, &[1.0], None),
            Err(Error::ClassifierRequired { .. })
        ));
    }

    fn separable_samples() -> Vec<(Vec<f64>, String)> {
        let mut out = Vec::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        for i in 0..60 {
            let jitter: Vec<f64> =
                (0..4).map(|_| rand::Rng::gen_range(&mut rng, -0.05..0.05)).collect();
            let (base, label): (Vec<f64>, &str) = if i % 2 == 0 {
                (vec![1.0, 0.0, 0.3, -0.2], "left")
            } else {
                (vec![-1.0, 0.2, -0.3, 0.4], "right")
            };
            let v: Vec<f64> = base.iter().zip(&jitter).map(|(b, j)| b + j).collect();
            out.push((unit(v), label.to_string()));
        }
        out
    }

    #[test]
    fn classifier_separates_linearly_separable_labels() {
        let samples = separable_samples();
        let (clf, acc) = train_classifier(&samples, &ClassifierConfig::default()).unwrap();
        assert!(acc >= 0.95, "held-out accuracy {acc}");
        // Argmax tie-break goes to the smallest label index.
        assert_eq!(clf.labels, vec!["left".to_string(), "right".to_string()]);
    }

    #[test]
    fn zero_learning_rate_keeps_the_initialized_net() {
        let samples = separable_samples();
        let cfg = ClassifierConfig { learning_rate: 0.0, epochs: 3, ..Default::default() };
        let init_cfg = ClassifierConfig { learning_rate: 0.0, epochs: 0, ..Default::default() };
        let (_, acc) = train_classifier(&samples, &cfg).unwrap();
        let (_, acc_init) = train_classifier(&samples, &init_cfg).unwrap();
        assert_eq!(acc, acc_init);
    }

    #[test]
    fn single_label_training_set_is_rejected() {
        let samples = vec![(vec![1.0, 0.0], "only".to_string()); 10];
        assert!(matches!(
            train_classifier(&samples, &ClassifierConfig::default()),
            Err(Error::SingleLabel { .. })
        ));
    }

    #[test]
    fn conflicting_duplicate_labels_cap_accuracy_below_one() {
        let mut samples = separable_samples();
        // Same point with two different labels: cannot all be classified.
        samples.push((samples[0].0.clone(), "right".to_string()));
        samples.push((samples[0].0.clone(), "left".to_string()));
        let cfg = ClassifierConfig { holdout_fraction: 0.0, ..Default::default() };
        let (clf, _) = train_classifier(&samples, &cfg).unwrap();
        let correct = samples.iter().filter(|(e, l)| clf.predict(e) == l).count();
        assert!(correct < samples.len());
    }

    #[test]
    fn groups_partition_ads_and_respect_types() {
        let ads = vec![
            ad("a1", 1, Some("chairs")),
            ad("a2", 1, Some("chairs")),
            ad("a3", 1, Some("tables")),
            ad("a4", 1, Some("tables")),
        ];
        let mut embeddings = BTreeMap::new();
        embeddings.insert("a1".into(), unit(vec![1.0, 0.0]));
        embeddings.insert("a2".into(), unit(vec![0.0, 1.0]));
        embeddings.insert("a3".into(), unit(vec![1.0, 0.1]));
        embeddings.insert("a4".into(), unit(vec![1.0, 0.12]));
        let groups = build_groups(&ads, &embeddings, None, 0.2).unwrap();
        // chairs splits (orthogonal), tables merges (nearly parallel).
        assert_eq!(groups.len(), 3);
        let mut seen: Vec<&str> = Vec::new();
        for g in &groups {
            assert!(!g.member_ad_ids.is_empty());
            for m in &g.member_ad_ids {
                assert!(!seen.contains(&m.as_str()), "ad {m} in two groups");
                seen.push(m);
            }
        }
        assert_eq!(seen.len(), 4);
        let tables: Vec<&AdGroup> =
            groups.iter().filter(|g| g.product_type == "tables").collect();
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].group_id, "tables_0");
        let c = &tables[0].centroid;
        assert!((c.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn groups_round_trip_through_csv() {
        let groups = vec![
            AdGroup {
                group_id: "t_0".into(),
                product_type: "t".into(),
                member_ad_ids: vec!["a".into(), "b".into()],
                centroid: Vec::new(),
            },
            AdGroup {
                group_id: "t_1".into(),
                product_type: "t".into(),
                member_ad_ids: vec!["c".into()],
                centroid: Vec::new(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groups.csv");
        write_groups(&path, &groups).unwrap();
        let back = read_groups(&path).unwrap();
        assert_eq!(groups, back);
    }
}
