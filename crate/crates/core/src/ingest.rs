//! Catalog and search-term report ingestion, plus construction of the
//! interactive-metric training pairs.
//!
//! File formats (UTF-8 CSV):
//! - catalog: `ad_id,product_type,total_clicks,item_title_1..3,item_desc_1..3,`
//!   followed by any number of feedback columns. Empty cells mean missing.
//!   Feedback columns named `clicks`, `conversions`, `spend`, `revenue` are
//!   treated as additive when aggregating; anything else is treated as a rate.
//! - search-term report: `ad_id,query,clicks`.
//! - pairs: `ad_i,ad_j,im`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rpc_model::{Feedback, FeedbackSchema};

/// One product entry on an ad's landing page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub title: String,
    pub description: String,
    /// 1 = best seller. Ranks are distinct within an ad.
    pub revenue_rank: u32,
}

/// A biddable catalog entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Ad {
    pub ad_id: String,
    pub items: Vec<Item>,
    pub product_type: Option<String>,
    /// Total historical clicks across all queries; the denominator of the
    /// interactive metric.
    pub total_clicks: u64,
    pub feedback: Feedback,
}

impl Ad {
    /// Checks the per-ad invariants: non-empty item list, distinct ranks.
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "ad `{}` has no items",
                self.ad_id
            )));
        }
        let mut ranks: Vec<u32> = self.items.iter().map(|i| i.revenue_rank).collect();
        ranks.sort_unstable();
        ranks.dedup();
        if ranks.len() != self.items.len() {
            return Err(Error::InvalidArgument(format!(
                "ad `{}` has duplicate revenue ranks",
                self.ad_id
            )));
        }
        Ok(())
    }
}

/// A validated catalog: the ad list plus the feedback column schema shared by
/// every ad.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub ads: Vec<Ad>,
    pub feedback_schema: FeedbackSchema,
}

impl Catalog {
    pub fn ad_index(&self) -> HashMap<&str, &Ad> {
        self.ads.iter().map(|a| (a.ad_id.as_str(), a)).collect()
    }
}

/// One `(ad, query, clicks)` row from the search-term report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchTermRecord {
    pub ad_id: String,
    pub query: String,
    pub clicks: u64,
}

/// An unordered ad pair with its interactive metric. Co-click pairs carry
/// `im` in [0, 1]; sampled negatives carry exactly -1.
#[derive(Debug, Clone, PartialEq)]
pub struct AdPair {
    pub ad_i: String,
    pub ad_j: String,
    pub im: f64,
}

impl AdPair {
    /// Canonicalizes the pair so that `ad_i < ad_j` lexicographically.
    pub fn new(a: &str, b: &str, im: f64) -> AdPair {
        if a <= b {
            AdPair { ad_i: a.to_string(), ad_j: b.to_string(), im }
        } else {
            AdPair { ad_i: b.to_string(), ad_j: a.to_string(), im }
        }
    }
}

const FIXED_COLUMNS: [&str; 9] = [
    "ad_id",
    "product_type",
    "total_clicks",
    "item_title_1",
    "item_title_2",
    "item_title_3",
    "item_desc_1",
    "item_desc_2",
    "item_desc_3",
];

/// Parses and validates a catalog file.
pub fn parse_catalog(path: &Path) -> Result<Catalog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_catalog_str(&text, &path.display().to_string())
}

/// Parses catalog CSV content. `origin` names the source in errors.
pub fn parse_catalog_str(text: &str, origin: &str) -> Result<Catalog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| csv_error(origin, &e))?
        .clone();
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
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
    let feedback_columns: Vec<String> = headers
        .iter()
        .skip(FIXED_COLUMNS.len())
        .map(str::to_string)
        .collect();
    let schema = FeedbackSchema::new(feedback_columns);

    let mut ads = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for row in reader.records() {
        let record = row.map_err(|e| csv_error(origin, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");

        let ad_id = field(0).trim().to_string();
        if ad_id.is_empty() {
            return Err(malformed(origin, line, "ad_id", "must be non-empty"));
        }
        if let Some(first) = seen.insert(ad_id.clone(), line) {
            return Err(Error::DuplicateKey {
                path: origin.to_string(),
                line: first.max(line),
                key: ad_id,
            });
        }
        let product_type = match field(1).trim() {
            "" => None,
            s => Some(s.to_string()),
        };
        let total_clicks: u64 = field(2).trim().parse().map_err(|_| {
            malformed(origin, line, "total_clicks", "must be a non-negative integer")
        })?;

        let mut items = Vec::new();
        for slot in 0..3 {
            let title = field(3 + slot).trim();
            let desc = field(6 + slot).trim();
            if title.is_empty() {
                if !desc.is_empty() {
                    return Err(malformed(
                        origin,
                        line,
                        &format!("item_desc_{}", slot + 1),
                        "description present without a title",
                    ));
                }
                continue;
            }
            items.push(Item {
                title: title.to_string(),
                description: desc.to_string(),
                revenue_rank: slot as u32 + 1,
            });
        }
        if items.is_empty() {
            return Err(malformed(origin, line, "item_title_1", "ad needs at least one item"));
        }

        let mut values = Vec::with_capacity(schema.columns().len());
        for (k, name) in schema.columns().iter().enumerate() {
            let raw = field(FIXED_COLUMNS.len() + k).trim();
            if raw.is_empty() {
                values.push(None);
                continue;
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| malformed(origin, line, name, "must be a real number"))?;
            if !v.is_finite() || v < 0.0 {
                return Err(malformed(origin, line, name, "must be finite and non-negative"));
            }
            if name == "bounce_rate" && v > 1.0 {
                return Err(malformed(origin, line, name, "must lie in [0, 1]"));
            }
            values.push(Some(v));
        }

        let ad = Ad {
            ad_id,
            items,
            product_type,
            total_clicks,
            feedback: Feedback::new(values),
        };
        ad.validate()
            .map_err(|e| malformed(origin, line, "items", &e.to_string()))?;
        ads.push(ad);
    }

    Ok(Catalog { ads, feedback_schema: schema })
}

/// Parses a search-term report (`ad_id,query,clicks`).
pub fn parse_search_terms(path: &Path) -> Result<Vec<SearchTermRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_search_terms_str(&text, &path.display().to_string())
}

pub fn parse_search_terms_str(text: &str, origin: &str) -> Result<Vec<SearchTermRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| csv_error(origin, &e))?
        .clone();
    for (i, expected) in ["ad_id", "query", "clicks"].iter().enumerate() {
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

    let mut records = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for row in reader.records() {
        let record = row.map_err(|e| csv_error(origin, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let ad_id = record.get(0).unwrap_or("").trim().to_string();
        let query = record.get(1).unwrap_or("").trim().to_string();
        if ad_id.is_empty() {
            return Err(malformed(origin, line, "ad_id", "must be non-empty"));
        }
        if query.is_empty() {
            return Err(malformed(origin, line, "query", "must be non-empty"));
        }
        let clicks: u64 = record
            .get(2)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| malformed(origin, line, "clicks", "must be a non-negative integer"))?;
        if !seen.insert((ad_id.clone(), query.clone())) {
            return Err(Error::DuplicateKey {
                path: origin.to_string(),
                line,
                key: format!("({ad_id}, {query})"),
            });
        }
        records.push(SearchTermRecord { ad_id, query, clicks });
    }
    Ok(records)
}

/// Cross-file invariants: every record references a known ad, and per-ad
/// report clicks never exceed the ad's total clicks.
pub fn validate_report(catalog: &Catalog, records: &[SearchTermRecord]) -> Result<()> {
    let totals: HashMap<&str, u64> = catalog
        .ads
        .iter()
        .map(|a| (a.ad_id.as_str(), a.total_clicks))
        .collect();
    let mut sums: HashMap<&str, u64> = HashMap::new();
    for r in records {
        let total = totals
            .get(r.ad_id.as_str())
            .ok_or_else(|| Error::UnknownAdId { ad_id: r.ad_id.clone() })?;
        let sum = sums.entry(r.ad_id.as_str()).or_insert(0);
        *sum += r.clicks;
        if *sum > *total {
            return Err(Error::InvalidArgument(format!(
                "ad `{}`: report clicks {} exceed total_clicks {}",
                r.ad_id, sum, total
            )));
        }
    }
    Ok(())
}

/// Geometric-mean co-click ratio between two ads.
///
/// Given the clicks each ad received on their co-clicked queries and the two
/// total click counts, returns `sqrt((clk_1co2 * clk_2co1) / (clk_1 * clk_2))`.
pub fn interactive_metric(clk_1co2: u64, clk_2co1: u64, clk_1: u64, clk_2: u64) -> Result<f64> {
    if clk_1 == 0 {
        return Err(Error::UndefinedMetric { ad_id: "first".into() });
    }
    if clk_2 == 0 {
        return Err(Error::UndefinedMetric { ad_id: "second".into() });
    }
    if clk_1co2 > clk_1 {
        return Err(Error::CoClickExceedsTotal { ad_id: "first".into(), co: clk_1co2, total: clk_1 });
    }
    if clk_2co1 > clk_2 {
        return Err(Error::CoClickExceedsTotal { ad_id: "second".into(), co: clk_2co1, total: clk_2 });
    }
    Ok(((clk_1co2 as f64 * clk_2co1 as f64) / (clk_1 as f64 * clk_2 as f64)).sqrt())
}

/// Builds the embedding training set: one positive pair per unordered ad pair
/// sharing at least one clicked query, plus uniformly sampled negative pairs
/// labeled -1.
///
/// Co-click counts are summed over all shared queries before the metric is
/// evaluated. Ads with zero total clicks are excluded. The negative count is
/// `round(#positives / mean positive im)`, capped by the number of available
/// non-co-clicked pairs; sampling is uniform without replacement and
/// deterministic given `neg_seed`.
pub fn build_pairs(
    catalog: &Catalog,
    records: &[SearchTermRecord],
    neg_seed: u64,
) -> Result<Vec<AdPair>> {
    validate_report(catalog, records)?;

    // Eligible ads, in catalog order.
    let eligible: Vec<&Ad> = catalog.ads.iter().filter(|a| a.total_clicks > 0).collect();
    let index_of: HashMap<&str, usize> = eligible
        .iter()
        .enumerate()
        .map(|(i, a)| (a.ad_id.as_str(), i))
        .collect();

    // Clicked ads per query. Records with zero clicks carry no co-click
    // evidence.
    let mut by_query: HashMap<&str, Vec<(usize, u64)>> = HashMap::new();
    for r in records {
        if r.clicks == 0 {
            continue;
        }
        if let Some(&idx) = index_of.get(r.ad_id.as_str()) {
            by_query.entry(r.query.as_str()).or_default().push((idx, r.clicks));
        }
    }

    // Accumulate co-click totals per unordered index pair.
    let mut co: HashMap<(usize, usize), (u64, u64)> = HashMap::new();
    for ads_on_query in by_query.values() {
        for a in 0..ads_on_query.len() {
            for b in (a + 1)..ads_on_query.len() {
                let (ia, ca) = ads_on_query[a];
                let (ib, cb) = ads_on_query[b];
                let (key, add) = if ia < ib { ((ia, ib), (ca, cb)) } else { ((ib, ia), (cb, ca)) };
                let e = co.entry(key).or_insert((0, 0));
                e.0 += add.0;
                e.1 += add.1;
            }
        }
    }

    let mut positives = Vec::with_capacity(co.len());
    for (&(i, j), &(ci, cj)) in &co {
        let im = interactive_metric(ci, cj, eligible[i].total_clicks, eligible[j].total_clicks)?;
        positives.push(AdPair::new(&eligible[i].ad_id, &eligible[j].ad_id, im));
    }
    positives.sort_by(|a, b| (&a.ad_i, &a.ad_j).cmp(&(&b.ad_i, &b.ad_j)));

    if positives.is_empty() {
        return Ok(positives);
    }

    let mean_im = positives.iter().map(|p| p.im).sum::<f64>() / positives.len() as f64;
    let wanted = (positives.len() as f64 / mean_im).round() as usize;

    let n = eligible.len();
    let total_pairs = n * (n - 1) / 2;
    let available = total_pairs - co.len();
    let n_neg = wanted.min(available);

    let positive_keys: HashSet<(usize, usize)> = co.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(neg_seed);
    let mut negatives: Vec<(usize, usize)> = if n_neg * 2 >= available {
        // Dense request: enumerate candidates and take a seeded partial shuffle.
        let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(available);
        for i in 0..n {
            for j in (i + 1)..n {
                if !positive_keys.contains(&(i, j)) {
                    candidates.push((i, j));
                }
            }
        }
        for k in 0..n_neg {
            let pick = rng.gen_range(k..candidates.len());
            candidates.swap(k, pick);
        }
        candidates.truncate(n_neg);
        candidates
    } else {
        // Sparse request: rejection-sample distinct non-co-clicked pairs.
        let mut chosen: HashSet<(usize, usize)> = HashSet::with_capacity(n_neg);
        let mut out = Vec::with_capacity(n_neg);
        while out.len() < n_neg {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if positive_keys.contains(&key) || !chosen.insert(key) {
                continue;
            }
            out.push(key);
        }
        out
    };
    negatives.sort_unstable();

    let mut pairs = positives;
    for (i, j) in negatives {
        pairs.push(AdPair::new(&eligible[i].ad_id, &eligible[j].ad_id, -1.0));
    }
    Ok(pairs)
}

/// Writes pairs as `ad_i,ad_j,im`.
pub fn write_pairs(path: &Path, pairs: &[AdPair]) -> Result<()> {
    let mut out = String::from("ad_i,ad_j,im\n");
    for p in pairs {
        out.push_str(&format!("{},{},{}\n", p.ad_i, p.ad_j, p.im));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<AdPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs_str(&text, &path.display().to_string())
}

pub fn parse_pairs_str(text: &str, origin: &str) -> Result<Vec<AdPair>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| csv_error(origin, &e))?.clone();
    for (i, expected) in ["ad_i", "ad_j", "im"].iter().enumerate() {
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
    let mut pairs = Vec::new();
    for row in reader.records() {
        let record = row.map_err(|e| csv_error(origin, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let ad_i = record.get(0).unwrap_or("").to_string();
        let ad_j = record.get(1).unwrap_or("").to_string();
        let im: f64 = record
            .get(2)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| malformed(origin, line, "im", "must be a real number"))?;
        if ad_i.is_empty() || ad_j.is_empty() || ad_i == ad_j {
            return Err(malformed(origin, line, "ad_i/ad_j", "pair must name two distinct ads"));
        }
        if !im.is_finite() || im < -1.0 || im > 1.0 {
            return Err(malformed(origin, line, "im", "must lie in [-1, 1]"));
        }
        pairs.push(AdPair { ad_i, ad_j, im });
    }
    Ok(pairs)
}

fn malformed(origin: &str, line: u64, field: &str, msg: &str) -> Error {
    Error::MalformedField {
        path: origin.to_string(),
        line,
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

fn csv_error(origin: &str, e: &csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    Error::BadFormat {
        path: origin.to_string(),
        line,
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CATALOG_HEADER: &str = "ad_id,product_type,total_clicks,item_title_1,item_title_2,item_title_3,item_desc_1,item_desc_2,item_desc_3,clicks,conversions,spend,revenue,bounce_rate\n";

    fn catalog_of(rows: &[&str]) -> String {
        let mut s = CATALOG_HEADER.to_string();
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn parses_well_formed_catalog() {
        let text = catalog_of(&[
            "ad1,chairs,10,Oak chair,,,solid oak,,,5,1,2.5,10,0.4",
            "ad2,,0,Desk lamp,Bulb,,warm light,,,,,,,",
            "ad3,tables,3,Standing desk,,,,,,3,0,1,6,",
        ]);
        let catalog = parse_catalog_str(&text, "test").unwrap();
        assert_eq!(catalog.ads.len(), 3);
        assert_eq!(catalog.ads[0].product_type.as_deref(), Some("chairs"));
        assert_eq!(catalog.ads[1].items.len(), 2);
        assert_eq!(catalog.ads[1].total_clicks, 0);
        assert!(catalog.ads[1].feedback.values().iter().all(Option::is_none));
        assert_eq!(catalog.feedback_schema.columns().len(), 5);
    }

    #[test]
    fn duplicate_ad_id_is_rejected() {
        let text = catalog_of(&[
            "ad1,,1,A,,,,,,,,,,",
            "ad1,,2,B,,,,,,,,,,",
        ]);
        let err = parse_catalog_str(&text, "test").unwrap_err();
        assert!(matches!(err, Error::DuplicateKey { .. }), "{err}");
    }

    #[test]
    fn header_only_catalog_is_empty() {
        let catalog = parse_catalog_str(CATALOG_HEADER, "test").unwrap();
        assert!(catalog.ads.is_empty());
    }

    #[test]
    fn malformed_row_names_line_and_field() {
        let text = catalog_of(&["ad1,,not_a_number,A,,,,,,,,,,"]);
        match parse_catalog_str(&text, "test").unwrap_err() {
            Error::MalformedField { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "total_clicks");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_items_rejected() {
        let text = catalog_of(&["ad1,,1,,,,,,,,,,,"]);
        assert!(parse_catalog_str(&text, "test").is_err());
    }

    #[test]
    fn interactive_metric_matches_hand_values() {
        // Shared-query clicks 192 and 158 against totals 192 and 172.
        let im = interactive_metric(192, 158, 192, 172).unwrap();
        assert!((im - 0.9584).abs() < 1e-4, "{im}");
        assert_eq!(interactive_metric(0, 0, 100, 100).unwrap(), 0.0);
        for c in [1, 7, 1000] {
            assert!((interactive_metric(c, c, c, c).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interactive_metric_rejects_zero_totals_and_bad_counts() {
        assert!(matches!(
            interactive_metric(0, 0, 0, 10),
            Err(Error::UndefinedMetric { .. })
        ));
        assert!(matches!(
            interactive_metric(11, 0, 10, 10),
            Err(Error::CoClickExceedsTotal { .. })
        ));
    }

    #[test]
    fn interactive_metric_is_symmetric_and_monotone() {
        let a = interactive_metric(30, 40, 100, 200).unwrap();
        let b = interactive_metric(40, 30, 200, 100).unwrap();
        assert_eq!(a, b);
        let lo = interactive_metric(30, 40, 100, 200).unwrap();
        let hi = interactive_metric(31, 40, 100, 200).unwrap();
        assert!(hi >= lo);
    }

    fn tiny_world() -> (Catalog, Vec<SearchTermRecord>) {
        let text = catalog_of(&[
            "a1,,192,walmart chairs,,,,,,,,,,",
            "a2,,172,chairs walmart,,,,,,,,,,",
            "a3,,50,desk lamp,,,,,,,,,,",
            "a4,,40,lamp shade,,,,,,,,,,",
        ]);
        let catalog = parse_catalog_str(&text, "test").unwrap();
        let records = vec![
            SearchTermRecord { ad_id: "a1".into(), query: "walmart chairs".into(), clicks: 100 },
            SearchTermRecord { ad_id: "a2".into(), query: "walmart chairs".into(), clicks: 90 },
            SearchTermRecord { ad_id: "a1".into(), query: "chairs walmart".into(), clicks: 92 },
            SearchTermRecord { ad_id: "a2".into(), query: "chairs walmart".into(), clicks: 68 },
            SearchTermRecord { ad_id: "a3".into(), query: "desk lamp".into(), clicks: 50 },
        ];
        (catalog, records)
    }

    #[test]
    fn co_clicks_sum_over_shared_queries() {
        let (catalog, records) = tiny_world();
        let pairs = build_pairs(&catalog, &records, 7).unwrap();
        let pos: Vec<&AdPair> = pairs.iter().filter(|p| p.im >= 0.0).collect();
        assert_eq!(pos.len(), 1);
        assert_eq!(pos[0].ad_i, "a1");
        assert_eq!(pos[0].ad_j, "a2");
        // 192 and 158 co-clicks out of totals 192 and 172.
        assert!((pos[0].im - 0.9584).abs() < 1e-4);
    }

    #[test]
    fn two_ads_sharing_one_query_yield_one_positive() {
        let text = catalog_of(&["x,,5,left,,,,,,,,,,", "y,,5,right,,,,,,,,,,"]);
        let catalog = parse_catalog_str(&text, "test").unwrap();
        let records = vec![
            SearchTermRecord { ad_id: "x".into(), query: "q".into(), clicks: 3 },
            SearchTermRecord { ad_id: "y".into(), query: "q".into(), clicks: 4 },
        ];
        let pairs = build_pairs(&catalog, &records, 0).unwrap();
        let pos: Vec<_> = pairs.iter().filter(|p| p.im >= 0.0).collect();
        assert_eq!(pos.len(), 1);
    }

    #[test]
    fn negative_count_follows_ratio_rule() {
        // 30 ads in two co-click blocks engineered so that the mean positive
        // im is 0.5 over 20 positive pairs; the rule then asks for 40
        // negatives, and 30 ads leave plenty of non-co-clicked pairs.
        let mut rows = Vec::new();
        for i in 0..30 {
            rows.push(format!("ad{i:02},,100,title {i},,,,,,,,,,"));
        }
        let row_refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let catalog = parse_catalog_str(&catalog_of(&row_refs), "test").unwrap();
        let mut records = Vec::new();
        // Block one: ads 0..5 all click query "red" 25 times, giving
        // C(5,2)=10 pairs with im = 25/100 = 0.25.
        for i in 0..5 {
            records.push(SearchTermRecord { ad_id: format!("ad{i:02}"), query: "red".into(), clicks: 25 });
        }
        // Block two: ads 10..15 all click query "blue" 75 times, giving
        // 10 pairs with im = 0.75. Mean im = 0.5 over 20 pairs.
        for i in 10..15 {
            records.push(SearchTermRecord { ad_id: format!("ad{i:02}"), query: "blue".into(), clicks: 75 });
        }
        let pairs = build_pairs(&catalog, &records, 11).unwrap();
        let n_pos = pairs.iter().filter(|p| p.im >= 0.0).count();
        let n_neg = pairs.iter().filter(|p| p.im < 0.0).count();
        assert_eq!(n_pos, 20);
        let mean_im: f64 =
            pairs.iter().filter(|p| p.im >= 0.0).map(|p| p.im).sum::<f64>() / n_pos as f64;
        assert!((mean_im - 0.5).abs() < 1e-12);
        assert!((n_neg as i64 - 40).unsigned_abs() <= 4, "{n_neg}");
    }

    #[test]
    fn negatives_never_coincide_with_positives_and_runs_are_deterministic() {
        let (catalog, records) = tiny_world();
        let a = build_pairs(&catalog, &records, 3).unwrap();
        let b = build_pairs(&catalog, &records, 3).unwrap();
        assert_eq!(a, b);
        let pos: HashSet<(String, String)> = a
            .iter()
            .filter(|p| p.im >= 0.0)
            .map(|p| (p.ad_i.clone(), p.ad_j.clone()))
            .collect();
        for p in a.iter().filter(|p| p.im < 0.0) {
            assert_eq!(p.im, -1.0);
            assert!(!pos.contains(&(p.ad_i.clone(), p.ad_j.clone())));
        }
        let c = build_pairs(&catalog, &records, 4).unwrap();
        assert_eq!(
            a.iter().filter(|p| p.im >= 0.0).count(),
            c.iter().filter(|p| p.im >= 0.0).count()
        );
    }

    #[test]
    fn pairs_round_trip_through_csv() {
        let (catalog, records) = tiny_world();
        let pairs = build_pairs(&catalog, &records, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        write_pairs(&path, &pairs).unwrap();
        let back = read_pairs(&path).unwrap();
        assert_eq!(pairs, back);
    }

    #[test]
    fn report_validation_catches_overflow_and_unknown_ads() {
        let (catalog, mut records) = tiny_world();
        records.push(SearchTermRecord { ad_id: "ghost".into(), query: "q".into(), clicks: 1 });
        assert!(matches!(
            validate_report(&catalog, &records),
            Err(Error::UnknownAdId { .. })
        ));
        records.pop();
        records.push(SearchTermRecord { ad_id: "a1".into(), query: "extra".into(), clicks: 1 });
        assert!(validate_report(&catalog, &records).is_err());
    }
}
