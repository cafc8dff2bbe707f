//! Synthetic SEM world and the two experiment protocols: the offline RPC
//! accuracy comparison and the online-style AA/AB bidding experiment.
//!
//! The world groups ads into (product type, intention theme) combinations.
//! Ads in one combination share a small query pool, so co-clicks appear
//! within a theme and never across themes. Each ad carries a latent true
//! revenue per click (theme level plus ad-level jitter) and a click slope; a
//! configurable fraction of ads has its feedback history hidden entirely.
//!
//! Period simulation follows the linear click model: expected clicks are
//! `slope * bid * duration`, spend is `clicks * bid` (first price), revenue is
//! `clicks * true_rpc * noise`. Every ad draws from its own seeded stream, so
//! counterfactual runs that change one arm's bids leave the other outcomes
//! bit-identical.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::bid_opt::{bid_target_rps, GroupEconomics};
use crate::cluster::{
    build_groups, singleton_groups, train_classifier, AdGroup, ClassifierConfig,
    ProductTypeClassifier,
};
use crate::error::{Error, Result};
use crate::ingest::{build_pairs, Ad, Catalog, Item, SearchTermRecord};
use crate::intent_embed::{embed_catalog, train, EmbeddingNet, TrainConfig};
use crate::rpc_model::{
    aggregate_features, fit_gbrt, fit_linear, score, split_dataset, Feedback, FeedbackSchema,
    GbrtConfig, GroupSample, RpcModel, Scores,
};
use crate::seed;
use crate::tokenize::{build_vocab, tokenize_ad, Vocabulary};

// ---------------------------------------------------------------------------
// World generation
// ---------------------------------------------------------------------------

/// Parameters of the synthetic SEM world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_ads: usize,
    pub n_product_types: usize,
    /// Intention themes nested inside each product type.
    pub n_themes_per_type: usize,
    /// Theme-level revenue per click: `rpc_base * lognormal(rpc_theme_sigma)`.
    pub rpc_base: f64,
    pub rpc_theme_sigma: f64,
    /// Ad-level multiplicative jitter around the theme rpc.
    pub rpc_ad_sigma: f64,
    /// Click slope: `slope_base * lognormal(slope_sigma)`.
    pub slope_base: f64,
    pub slope_sigma: f64,
    /// Probability that an ad's feedback history is hidden.
    pub feedback_sparsity: f64,
    /// Lognormal sigma of the multiplicative revenue noise.
    pub noise_scale: f64,
    /// Bid and duration that produced the historical feedback.
    pub history_bid: f64,
    pub history_duration: f64,
    /// Distinct queries drawn per ad from its theme's query pool.
    pub queries_per_ad: usize,
    /// Canonical queries per theme; smaller pools mean denser co-clicks.
    pub queries_per_theme: usize,
    pub words_per_theme: usize,
    /// Fraction of ads with 2-3 items and no catalog product type; these
    /// exercise the taxonomy classifier.
    pub multi_item_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_ads: 240,
            n_product_types: 2,
            n_themes_per_type: 4,
            rpc_base: 2.0,
            rpc_theme_sigma: 0.7,
            rpc_ad_sigma: 0.08,
            slope_base: 1.0,
            slope_sigma: 0.3,
            feedback_sparsity: 0.0,
            noise_scale: 0.3,
            history_bid: 2.0,
            history_duration: 7.0,
            queries_per_ad: 3,
            queries_per_theme: 8,
            words_per_theme: 12,
            multi_item_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Latent ground truth for one ad.
#[derive(Debug, Clone, PartialEq)]
pub struct AdTruth {
    pub true_rpc: f64,
    pub click_slope: f64,
    pub product_type: String,
    pub theme: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub catalog: Catalog,
    pub report: Vec<SearchTermRecord>,
    pub truth: BTreeMap<String, AdTruth>,
}

fn lognormal<R: Rng>(sigma: f64, rng: &mut R) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    (sigma * z - sigma * sigma / 2.0).exp()
}

/// Generates the synthetic catalog, search-term report, and ground truth.
/// Byte-identical for identical configs.
pub fn generate_world(cfg: &WorldConfig) -> SyntheticWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "world"));
    let combos = cfg.n_product_types * cfg.n_themes_per_type;
    assert!(combos > 0 && cfg.n_ads > 0, "world must have ads and themes");

    let theme_rpc: Vec<f64> =
        (0..combos).map(|_| cfg.rpc_base * lognormal(cfg.rpc_theme_sigma, &mut rng)).collect();
    let words: Vec<Vec<String>> = (0..combos)
        .map(|c| (0..cfg.words_per_theme).map(|k| format!("c{c}w{k}")).collect())
        .collect();
    let queries: Vec<Vec<String>> = (0..combos)
        .map(|c| {
            (0..cfg.queries_per_theme)
                .map(|q| {
                    let a = &words[c][q % cfg.words_per_theme];
                    let b = &words[c][(q * 7 + 3) % cfg.words_per_theme];
                    format!("{a} {b}")
                })
                .collect()
        })
        .collect();

    let schema = FeedbackSchema::new(
        ["clicks", "conversions", "spend", "revenue", "bounce_rate"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    );

    let mut ads = Vec::with_capacity(cfg.n_ads);
    let mut report = Vec::new();
    let mut truth = BTreeMap::new();
    for i in 0..cfg.n_ads {
        let combo = i % combos;
        let ptype = combo / cfg.n_themes_per_type;
        let ad_id = format!("ad{i:05}");
        let product_type = format!("type{ptype}");
        let true_rpc = theme_rpc[combo] * lognormal(cfg.rpc_ad_sigma, &mut rng);
        let click_slope = cfg.slope_base * lognormal(cfg.slope_sigma, &mut rng);

        let multi = cfg.multi_item_fraction > 0.0 && rng.gen::<f64>() < cfg.multi_item_fraction;
        let n_items = if multi { rng.gen_range(2..=3) } else { 1 };
        let pool = &words[combo];
        let mut items = Vec::with_capacity(n_items);
        for rank in 0..n_items {
            let title: Vec<&str> = (0..rng.gen_range(4..=6))
                .map(|_| pool[rng.gen_range(0..pool.len())].as_str())
                .collect();
            let desc: Vec<&str> = (0..rng.gen_range(5..=8))
                .map(|_| pool[rng.gen_range(0..pool.len())].as_str())
                .collect();
            items.push(Item {
                title: title.join(" "),
                description: desc.join(" "),
                revenue_rank: rank as u32 + 1,
            });
        }

        let rich = rng.gen::<f64>() >= cfg.feedback_sparsity;
        let mut total_clicks = 0u64;
        let mut feedback = Feedback::empty(schema.columns().len());
        if rich {
            let expected = click_slope * cfg.history_bid * cfg.history_duration;
            let clicks = sample_poisson(expected, &mut rng);
            total_clicks = clicks;
            let clicks_f = clicks as f64;
            let revenue = clicks_f * true_rpc * lognormal(cfg.noise_scale, &mut rng);
            let spend = clicks_f * cfg.history_bid;
            let conversions = sample_poisson(0.1 * clicks_f, &mut rng) as f64;
            let bounce: f64 = rng.gen_range(0.2..0.8);
            feedback = Feedback::new(vec![
                Some(clicks_f),
                Some(conversions),
                Some(spend),
                Some(revenue),
                Some(bounce),
            ]);

            if clicks > 0 {
                // Spread the clicks over a few canonical theme queries.
                let qpool = &queries[combo];
                let mut picks: Vec<usize> = (0..qpool.len()).collect();
                for k in 0..cfg.queries_per_ad.min(picks.len()) {
                    let j = rng.gen_range(k..picks.len());
                    picks.swap(k, j);
                }
                picks.truncate(cfg.queries_per_ad.min(qpool.len()));
                let mut counts = vec![0u64; picks.len()];
                for _ in 0..clicks {
                    let slot = rng.gen_range(0..picks.len());
                    counts[slot] += 1;
                }
                for (slot, &q) in picks.iter().enumerate() {
                    if counts[slot] > 0 {
                        report.push(SearchTermRecord {
                            ad_id: ad_id.clone(),
                            query: qpool[q].clone(),
                            clicks: counts[slot],
                        });
                    }
                }
            }
        }

        truth.insert(
            ad_id.clone(),
            AdTruth { true_rpc, click_slope, product_type: product_type.clone(), theme: combo },
        );
        ads.push(Ad {
            ad_id,
            items,
            product_type: if multi { None } else { Some(product_type) },
            total_clicks,
            feedback,
        });
    }

    SyntheticWorld { catalog: Catalog { ads, feedback_schema: schema }, report, truth }
}

fn sample_poisson<R: Rng>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let p = Poisson::new(lambda).expect("positive lambda");
    p.sample(rng) as u64
}

/// Writes the world as CSV files (`catalog.csv`, `search_terms.csv`,
/// `truth.csv`) for replay and inspection.
pub fn write_world_files(world: &SyntheticWorld, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let catalog_path = dir.join("catalog.csv");
    std::fs::write(&catalog_path, catalog_to_csv(&world.catalog))
        .map_err(|e| Error::io(&catalog_path, e))?;
    let report_path = dir.join("search_terms.csv");
    std::fs::write(&report_path, report_to_csv(&world.report))
        .map_err(|e| Error::io(&report_path, e))?;
    let truth_path = dir.join("truth.csv");
    let mut out = String::from("ad_id,true_rpc,click_slope,product_type,theme\n");
    for (id, t) in &world.truth {
        let _ = writeln!(out, "{id},{},{},{},{}", t.true_rpc, t.click_slope, t.product_type, t.theme);
    }
    std::fs::write(&truth_path, out).map_err(|e| Error::io(&truth_path, e))?;
    Ok(())
}

/// Serializes a catalog in the documented ingest format.
pub fn catalog_to_csv(catalog: &Catalog) -> String {
    let mut out = String::from(
        "ad_id,product_type,total_clicks,item_title_1,item_title_2,item_title_3,item_desc_1,item_desc_2,item_desc_3",
    );
    for c in catalog.feedback_schema.columns() {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for ad in &catalog.ads {
        let mut titles = [const { String::new() }; 3];
        let mut descs = [const { String::new() }; 3];
        for item in &ad.items {
            let slot = (item.revenue_rank as usize).saturating_sub(1);
            if slot < 3 {
                titles[slot] = item.title.clone();
                descs[slot] = item.description.clone();
            }
        }
        let _ = write!(
            out,
            "{},{},{}",
            ad.ad_id,
            ad.product_type.as_deref().unwrap_or(""),
            ad.total_clicks
        );
        for t in &titles {
            let _ = write!(out, ",{t}");
        }
        for d in &descs {
            let _ = write!(out, ",{d}");
        }
        for v in ad.feedback.values() {
            match v {
                Some(x) => {
                    let _ = write!(out, ",{x}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn report_to_csv(report: &[SearchTermRecord]) -> String {
    let mut out = String::from("ad_id,query,clicks\n");
    for r in report {
        let _ = writeln!(out, "{},{},{}", r.ad_id, r.query, r.clicks);
    }
    out
}

// ---------------------------------------------------------------------------
// Period simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClickModel {
    /// Clicks equal their expectation exactly (real-valued).
    Deterministic,
    Poisson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodConfig {
    pub duration: f64,
    pub click_model: ClickModel,
    pub noise_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdOutcome {
    pub clicks: f64,
    pub spend: f64,
    pub revenue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodOutcome {
    pub per_ad: BTreeMap<String, AdOutcome>,
}

impl PeriodOutcome {
    pub fn totals_over<'a, I: Iterator<Item = &'a String>>(&self, ids: I) -> ArmMetrics {
        let mut m = ArmMetrics::default();
        for id in ids {
            if let Some(o) = self.per_ad.get(id) {
                m.clicks += o.clicks;
                m.spend += o.spend;
                m.revenue += o.revenue;
            }
        }
        m
    }

    pub fn totals(&self) -> ArmMetrics {
        self.totals_over(self.per_ad.keys())
    }
}

/// Realizes one bidding period. Ads missing from `bids` (or with bid 0) see
/// no traffic. Every ad draws from its own stream derived from `cfg.seed` and
/// the ad id, so outcomes are invariant to the other ads' bids.
pub fn simulate_period(
    bids: &BTreeMap<String, f64>,
    world: &SyntheticWorld,
    cfg: &PeriodConfig,
) -> PeriodOutcome {
    let mut per_ad = BTreeMap::new();
    for (ad_id, t) in &world.truth {
        let bid = bids.get(ad_id).copied().unwrap_or(0.0).max(0.0);
        let mut outcome = AdOutcome::default();
        if bid > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &format!("ad:{ad_id}")));
            let expected = t.click_slope * bid * cfg.duration;
            let clicks = match cfg.click_model {
                ClickModel::Deterministic => expected,
                ClickModel::Poisson => sample_poisson(expected, &mut rng) as f64,
            };
            let noise = lognormal(cfg.noise_scale, &mut rng);
            outcome.clicks = clicks;
            outcome.spend = clicks * bid;
            outcome.revenue = clicks * t.true_rpc * noise;
        }
        per_ad.insert(ad_id.clone(), outcome);
    }
    PeriodOutcome { per_ad }
}

// ---------------------------------------------------------------------------
// Bidding policies (arm pipelines)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BidPolicy {
    /// One group per ad (the classical baseline).
    Singular,
    /// Intention clustering at the given cosine-distance threshold.
    Cluster { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Gbrt,
}

/// Stage settings shared by the simulation pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPipeline {
    pub embed: TrainConfig,
    pub vocab_size: usize,
    pub cluster_threshold: f64,
    pub model: ModelKind,
    pub gbrt: GbrtConfig,
    pub ridge_l2: f64,
}

impl Default for SimPipeline {
    fn default() -> Self {
        SimPipeline {
            embed: TrainConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                d_out: 16,
                seq_len: 12,
                epochs: 18,
                batch_size: 32,
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
            vocab_size: 4096,
            cluster_threshold: 0.25,
            model: ModelKind::Gbrt,
            gbrt: GbrtConfig { n_trees: 120, max_depth: 4, ..GbrtConfig::default() },
            ridge_l2: 1e-3,
        }
    }
}

/// Trained text models shared by every arm of one experiment.
pub struct WorldModels {
    pub vocab: Vocabulary,
    pub net: EmbeddingNet,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

/// Tokenizes, builds pairs, trains the embedding net, and embeds the catalog.
pub fn fit_world_models(
    world: &SyntheticWorld,
    pipe: &SimPipeline,
    run_seed: u64,
) -> Result<WorldModels> {
    let corpus: Vec<String> = world.catalog.ads.iter().map(crate::tokenize::ad_text).collect();
    let vocab = build_vocab(&corpus, pipe.vocab_size);
    let pairs = build_pairs(&world.catalog, &world.report, seed::derive(run_seed, "negatives"))?;
    let tokens: BTreeMap<String, crate::tokenize::TokenSequence> = world
        .catalog
        .ads
        .iter()
        .map(|ad| (ad.ad_id.clone(), tokenize_ad(ad, &vocab, pipe.embed.seq_len)))
        .collect();
    let mut ecfg = pipe.embed.clone();
    ecfg.seed = seed::derive(run_seed, "embed");
    let (net, _) = train(&pairs, &tokens, &vocab, &ecfg)?;
    let embeddings = embed_catalog(&net, &world.catalog.ads, &vocab)?;
    Ok(WorldModels { vocab, net, embeddings })
}

fn maybe_train_classifier(
    ads: &[Ad],
    embeddings: &BTreeMap<String, Vec<f64>>,
    run_seed: u64,
) -> Result<Option<ProductTypeClassifier>> {
    let needs = ads.iter().any(|a| a.items.len() > 1 || a.product_type.is_none());
    if !needs {
        return Ok(None);
    }
    let labeled: Vec<(Vec<f64>, String)> = ads
        .iter()
        .filter(|a| a.items.len() == 1 && a.product_type.is_some())
        .map(|a| (embeddings[&a.ad_id].clone(), a.product_type.clone().expect("filtered")))
        .collect();
    let cfg = ClassifierConfig { seed: seed::derive(run_seed, "classifier"), ..Default::default() };
    let (clf, _) = train_classifier(&labeled, &cfg)?;
    Ok(Some(clf))
}

fn groups_for_policy(
    ads: &[Ad],
    embeddings: &BTreeMap<String, Vec<f64>>,
    policy: BidPolicy,
    run_seed: u64,
) -> Result<Vec<AdGroup>> {
    match policy {
        BidPolicy::Singular => singleton_groups(ads, embeddings),
        BidPolicy::Cluster { threshold } => {
            let clf = maybe_train_classifier(ads, embeddings, run_seed)?;
            build_groups(ads, embeddings, clf.as_ref(), threshold)
        }
    }
}

/// Sorted by first member so identical sample sets fit identically regardless
/// of the grouping that produced them.
fn sort_groups_with<T>(keyed: &mut Vec<(String, T)>) {
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
}

fn fit_rpc_model(samples: &[GroupSample], pipe: &SimPipeline) -> Result<RpcModel> {
    Ok(match pipe.model {
        ModelKind::Linear => RpcModel::Linear(fit_linear(samples, pipe.ridge_l2)?),
        ModelKind::Gbrt => RpcModel::Gbrt(fit_gbrt(samples, &pipe.gbrt)?),
    })
}

/// Fits one arm's policy on its historical feedback and returns per-ad bids
/// at the common revenue-per-spend goal.
pub fn fit_policy_bids(
    arm_ads: &[Ad],
    catalog: &Catalog,
    embeddings: &BTreeMap<String, Vec<f64>>,
    policy: BidPolicy,
    pipe: &SimPipeline,
    rps_goal: f64,
    run_seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let groups = groups_for_policy(arm_ads, embeddings, policy, run_seed)?;
    let mut keyed: Vec<(String, (AdGroup, GroupSample))> = groups
        .into_iter()
        .map(|g| {
            let s = aggregate_features(&g, catalog)?;
            Ok((g.member_ad_ids[0].clone(), (g, s)))
        })
        .collect::<Result<_>>()?;
    sort_groups_with(&mut keyed);
    let samples: Vec<GroupSample> = keyed.iter().map(|(_, (_, s))| s.clone()).collect();
    let model = fit_rpc_model(&samples, pipe)?;

    let econ: Vec<GroupEconomics> = keyed
        .iter()
        .map(|(_, (g, s))| GroupEconomics {
            group_id: g.group_id.clone(),
            rpc: model.predict(&s.features).max(0.0),
            click_slope: None,
        })
        .collect();
    let plan = bid_target_rps(&econ, rps_goal)?;

    let mut bids = BTreeMap::new();
    for (_, (g, _)) in &keyed {
        let bid = plan.bids[&g.group_id];
        for m in &g.member_ad_ids {
            bids.insert(m.clone(), bid);
        }
    }
    Ok(bids)
}

// ---------------------------------------------------------------------------
// AA/AB experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmMetrics {
    pub clicks: f64,
    pub spend: f64,
    pub revenue: f64,
}

impl ArmMetrics {
    pub fn rps(&self) -> f64 {
        if self.spend > 0.0 {
            self.revenue / self.spend
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodComparison {
    pub control: ArmMetrics,
    pub test: ArmMetrics,
}

impl PeriodComparison {
    /// Test-arm spend relative to control (control = 100).
    pub fn relative_spend(&self) -> f64 {
        100.0 * self.test.spend / self.control.spend
    }

    pub fn relative_rps(&self) -> f64 {
        100.0 * self.test.rps() / self.control.rps()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub seed: u64,
    pub aa: PeriodComparison,
    pub ab: PeriodComparison,
}

impl ExperimentReport {
    /// Aligned text table in the online-experiment layout.
    pub fn table_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Test        Metric(Relative to control)  Control     Test");
        for (name, cmp) in [("AA period", &self.aa), ("AB period", &self.ab)] {
            let _ = writeln!(
                out,
                "{name:<12}{:<29}{:<12}{:.1}%",
                "Spend",
                "100%",
                cmp.relative_spend()
            );
            let _ = writeln!(out, "{:<12}{:<29}{:<12}{:.1}%", "", "RPS", "100%", cmp.relative_rps());
        }
        out
    }

    pub fn csv_header() -> &'static str {
        "seed,aa_spend_rel,aa_rps_rel,ab_spend_rel,ab_rps_rel\n"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}\n",
            self.seed,
            self.aa.relative_spend(),
            self.aa.relative_rps(),
            self.ab.relative_spend(),
            self.ab.relative_rps()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbConfig {
    pub world: WorldConfig,
    pub pipeline: SimPipeline,
    pub rps_goal: f64,
    pub duration: f64,
    pub click_model: ClickModel,
    pub revenue_noise: f64,
    pub test_policy: BidPolicy,
    /// Scale test-arm bids so expected AB spends match.
    pub match_spend: bool,
}

impl Default for AbConfig {
    fn default() -> Self {
        AbConfig {
            world: WorldConfig::default(),
            pipeline: SimPipeline::default(),
            rps_goal: 1.0,
            duration: 7.0,
            click_model: ClickModel::Poisson,
            revenue_noise: 0.25,
            test_policy: BidPolicy::Cluster { threshold: crate::cluster::DEFAULT_THRESHOLD },
            match_spend: true,
        }
    }
}

impl AbConfig {
    /// The online-experiment preset: heavy feedback sparsity, cluster-based
    /// bidding on the test arm.
    pub fn preset_table3() -> AbConfig {
        AbConfig {
            world: WorldConfig {
                n_ads: 360,
                feedback_sparsity: 0.9,
                ..WorldConfig::default()
            },
            ..AbConfig::default()
        }
    }
}

/// Stratified control/test split over product types. Within each type, ads
/// are shuffled and dealt alternately, so arm proportions per type differ by
/// at most one ad.
pub fn stratified_split(world: &SyntheticWorld, split_seed: u64) -> (Vec<String>, Vec<String>) {
    let mut by_type: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for ad in &world.catalog.ads {
        let pt = world
            .truth
            .get(&ad.ad_id)
            .map(|t| t.product_type.as_str())
            .unwrap_or("unlabeled");
        by_type.entry(pt).or_default().push(&ad.ad_id);
    }
    let mut control = Vec::new();
    let mut test = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    for (_, mut ids) in by_type {
        for k in 0..ids.len() {
            let j = rng.gen_range(k..ids.len());
            ids.swap(k, j);
        }
        for (k, id) in ids.into_iter().enumerate() {
            if k % 2 == 0 {
                control.push(id.to_string());
            } else {
                test.push(id.to_string());
            }
        }
    }
    control.sort();
    test.sort();
    (control, test)
}

fn expected_spend(ids: &[String], bids: &BTreeMap<String, f64>, world: &SyntheticWorld, duration: f64) -> f64 {
    ids.iter()
        .map(|id| {
            let b = bids.get(id).copied().unwrap_or(0.0).max(0.0);
            let c = world.truth[id].click_slope;
            c * b * b * duration
        })
        .sum()
}

/// Runs one AA-then-AB session: identical singular bidding on both arms in
/// the AA period, then the configured test policy against the singular
/// control in the AB period, under a common revenue-per-spend goal.
pub fn run_ab(cfg: &AbConfig, run_seed: u64) -> Result<ExperimentReport> {
    let mut wcfg = cfg.world.clone();
    wcfg.seed = seed::derive(run_seed, "ab-world");
    let world = generate_world(&wcfg);
    let models = fit_world_models(&world, &cfg.pipeline, seed::derive(run_seed, "ab-text"))?;

    let (control_ids, test_ids) = stratified_split(&world, seed::derive(run_seed, "ab-split"));
    let id_set: HashSet<&String> = control_ids.iter().collect();
    let control_ads: Vec<Ad> =
        world.catalog.ads.iter().filter(|a| id_set.contains(&a.ad_id)).cloned().collect();
    let test_set: HashSet<&String> = test_ids.iter().collect();
    let test_ads: Vec<Ad> =
        world.catalog.ads.iter().filter(|a| test_set.contains(&a.ad_id)).cloned().collect();

    let control_bids = fit_policy_bids(
        &control_ads,
        &world.catalog,
        &models.embeddings,
        BidPolicy::Singular,
        &cfg.pipeline,
        cfg.rps_goal,
        seed::derive(run_seed, "fit-control"),
    )?;
    let test_bids_aa = fit_policy_bids(
        &test_ads,
        &world.catalog,
        &models.embeddings,
        BidPolicy::Singular,
        &cfg.pipeline,
        cfg.rps_goal,
        seed::derive(run_seed, "fit-test-aa"),
    )?;

    let mut merged_aa = control_bids.clone();
    merged_aa.extend(test_bids_aa.clone());
    let aa_outcome = simulate_period(
        &merged_aa,
        &world,
        &PeriodConfig {
            duration: cfg.duration,
            click_model: cfg.click_model,
            noise_scale: cfg.revenue_noise,
            seed: seed::derive(run_seed, "aa-period"),
        },
    );
    let aa = PeriodComparison {
        control: aa_outcome.totals_over(control_ids.iter()),
        test: aa_outcome.totals_over(test_ids.iter()),
    };

    let mut test_bids_ab = fit_policy_bids(
        &test_ads,
        &world.catalog,
        &models.embeddings,
        cfg.test_policy,
        &cfg.pipeline,
        cfg.rps_goal,
        seed::derive(run_seed, "fit-test-ab"),
    )?;
    if cfg.match_spend {
        let control_spend = expected_spend(&control_ids, &control_bids, &world, cfg.duration);
        let test_spend = expected_spend(&test_ids, &test_bids_ab, &world, cfg.duration);
        if test_spend > 0.0 && control_spend > 0.0 {
            let m = (control_spend / test_spend).sqrt();
            for b in test_bids_ab.values_mut() {
                *b *= m;
            }
        }
    }
    let mut merged_ab = control_bids.clone();
    merged_ab.extend(test_bids_ab);
    let ab_outcome = simulate_period(
        &merged_ab,
        &world,
        &PeriodConfig {
            duration: cfg.duration,
            click_model: cfg.click_model,
            noise_scale: cfg.revenue_noise,
            seed: seed::derive(run_seed, "ab-period"),
        },
    );
    let ab = PeriodComparison {
        control: ab_outcome.totals_over(control_ids.iter()),
        test: ab_outcome.totals_over(test_ids.iter()),
    };

    Ok(ExperimentReport { seed: run_seed, aa, ab })
}

/// Runs the experiment across seeds in parallel.
pub fn run_ab_sweep(cfg: &AbConfig, seeds: &[u64]) -> Result<Vec<ExperimentReport>> {
    seeds.par_iter().map(|&s| run_ab(cfg, s)).collect()
}

/// Null check: the full catalog is bid twice by two independent fits of the
/// identical singular policy and simulated under the same period seed. The
/// two outcome sets must match exactly.
pub fn run_null_check(cfg: &AbConfig, run_seed: u64) -> Result<(ArmMetrics, ArmMetrics)> {
    let mut wcfg = cfg.world.clone();
    wcfg.seed = seed::derive(run_seed, "ab-world");
    let world = generate_world(&wcfg);
    let models = fit_world_models(&world, &cfg.pipeline, seed::derive(run_seed, "ab-text"))?;
    let period = PeriodConfig {
        duration: cfg.duration,
        click_model: cfg.click_model,
        noise_scale: cfg.revenue_noise,
        seed: seed::derive(run_seed, "null-period"),
    };
    let mut arms = Vec::new();
    for _ in 0..2 {
        let bids = fit_policy_bids(
            &world.catalog.ads,
            &world.catalog,
            &models.embeddings,
            BidPolicy::Singular,
            &cfg.pipeline,
            cfg.rps_goal,
            seed::derive(run_seed, "fit-null"),
        )?;
        arms.push(simulate_period(&bids, &world, &period).totals());
    }
    let control = arms[0];
    let test = arms[1];
    Ok((control, test))
}

// ---------------------------------------------------------------------------
// Offline accuracy comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflineCell {
    pub wmse: f64,
    pub wmae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineReport {
    pub seed: u64,
    pub lr_singular: OfflineCell,
    pub lr_cluster: OfflineCell,
    pub gbrt_singular: OfflineCell,
    pub gbrt_cluster: OfflineCell,
}

impl OfflineReport {
    /// Percentages relative to the LR/singular reference cell.
    pub fn relative(&self, cell: OfflineCell) -> (f64, f64) {
        (
            100.0 * cell.wmse / self.lr_singular.wmse,
            100.0 * cell.wmae / self.lr_singular.wmae,
        )
    }

    pub fn table_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Predictive model     WMSE(Relative to LR Singular)   WMAE(Relative to LR Singular)"
        );
        let _ = writeln!(
            out,
            "{:<21}{:<16}{:<16}{:<16}{}",
            "", "Singular based", "Cluster based", "Singular based", "Cluster based"
        );
        let (ls_mse, ls_mae) = self.relative(self.lr_singular);
        let (lc_mse, lc_mae) = self.relative(self.lr_cluster);
        let _ = writeln!(
            out,
            "{:<21}{:<16}{:<16}{:<16}{}",
            "LR(reference point)",
            format!("{ls_mse:.0}%"),
            format!("{lc_mse:.0}%"),
            format!("{ls_mae:.0}%"),
            format!("{lc_mae:.0}%")
        );
        let (gs_mse, gs_mae) = self.relative(self.gbrt_singular);
        let (gc_mse, gc_mae) = self.relative(self.gbrt_cluster);
        let _ = writeln!(
            out,
            "{:<21}{:<16}{:<16}{:<16}{}",
            "Gradient boosting",
            format!("{gs_mse:.0}%"),
            format!("{gc_mse:.0}%"),
            format!("{gs_mae:.0}%"),
            format!("{gc_mae:.0}%")
        );
        out
    }

    pub fn csv_header() -> &'static str {
        "seed,lr_singular_wmse,lr_cluster_wmse,gbrt_singular_wmse,gbrt_cluster_wmse,lr_singular_wmae,lr_cluster_wmae,gbrt_singular_wmae,gbrt_cluster_wmae\n"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}\n",
            self.seed,
            self.lr_singular.wmse,
            self.lr_cluster.wmse,
            self.gbrt_singular.wmse,
            self.gbrt_cluster.wmse,
            self.lr_singular.wmae,
            self.lr_cluster.wmae,
            self.gbrt_singular.wmae,
            self.gbrt_cluster.wmae
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineConfig {
    pub world: WorldConfig,
    pub pipeline: SimPipeline,
    /// Uniform probe bid that realizes the response period.
    pub probe_bid: f64,
    pub duration: f64,
    pub click_model: ClickModel,
    pub revenue_noise: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            world: WorldConfig { n_ads: 600, ..WorldConfig::default() },
            pipeline: SimPipeline::default(),
            probe_bid: 2.0,
            duration: 7.0,
            click_model: ClickModel::Poisson,
            revenue_noise: 0.25,
        }
    }
}

impl OfflineConfig {
    /// The offline-comparison preset: heavy sparsity, per-ad evaluation.
    pub fn preset_table2() -> OfflineConfig {
        OfflineConfig {
            world: WorldConfig {
                n_ads: 600,
                feedback_sparsity: 0.9,
                ..WorldConfig::default()
            },
            ..OfflineConfig::default()
        }
    }
}

struct ModeArtifacts {
    /// Per group: (group, features-over-all-members sample).
    groups: Vec<(AdGroup, GroupSample)>,
    ad_to_group: HashMap<String, usize>,
}

fn prepare_mode(
    world: &SyntheticWorld,
    embeddings: &BTreeMap<String, Vec<f64>>,
    policy: BidPolicy,
    run_seed: u64,
) -> Result<ModeArtifacts> {
    let groups = groups_for_policy(&world.catalog.ads, embeddings, policy, run_seed)?;
    let mut keyed: Vec<(String, (AdGroup, GroupSample))> = groups
        .into_iter()
        .map(|g| {
            let s = aggregate_features(&g, &world.catalog)?;
            Ok((g.member_ad_ids[0].clone(), (g, s)))
        })
        .collect::<Result<_>>()?;
    sort_groups_with(&mut keyed);
    let groups: Vec<(AdGroup, GroupSample)> = keyed.into_iter().map(|(_, gs)| gs).collect();
    let mut ad_to_group = HashMap::new();
    for (gi, (g, _)) in groups.iter().enumerate() {
        for m in &g.member_ad_ids {
            ad_to_group.insert(m.clone(), gi);
        }
    }
    Ok(ModeArtifacts { groups, ad_to_group })
}

/// Training rows: group features over all members (past data), response
/// pooled from the response period over *training* members only.
fn mode_training_samples(
    arts: &ModeArtifacts,
    response: &PeriodOutcome,
    train_ids: &HashSet<String>,
) -> Vec<GroupSample> {
    let mut out = Vec::new();
    for (g, base) in &arts.groups {
        let mut revenue = 0.0;
        let mut clicks = 0.0;
        for m in &g.member_ad_ids {
            if !train_ids.contains(m) {
                continue;
            }
            if let Some(o) = response.per_ad.get(m) {
                revenue += o.revenue;
                clicks += o.clicks;
            }
        }
        if clicks > 0.0 {
            out.push(GroupSample {
                group_id: g.group_id.clone(),
                features: base.features.clone(),
                rpc: Some(revenue / clicks),
                clicks_weight: clicks,
            });
        }
    }
    out
}

/// Scores one fitted model per ad over the test split: the prediction of an
/// ad is the prediction of its group, the response is the ad's realized rpc
/// in the response period, the weight its realized clicks.
fn score_mode(
    arts: &ModeArtifacts,
    model: &RpcModel,
    response: &PeriodOutcome,
    test_ids: &[String],
) -> Result<Scores> {
    let group_preds: Vec<f64> =
        arts.groups.iter().map(|(_, s)| model.predict(&s.features)).collect();
    let mut preds = Vec::new();
    let mut rows = Vec::new();
    for id in test_ids {
        let Some(o) = response.per_ad.get(id) else { continue };
        if o.clicks <= 0.0 {
            continue;
        }
        let gi = arts.ad_to_group[id];
        preds.push(group_preds[gi]);
        rows.push(GroupSample {
            group_id: id.clone(),
            features: Vec::new(),
            rpc: Some(o.revenue / o.clicks),
            clicks_weight: o.clicks,
        });
    }
    score(&preds, &rows)
}

/// Runs the offline comparison for one seed: LR and GBRT, singular and
/// cluster groupings, scored per ad on the held-out split.
pub fn run_offline(cfg: &OfflineConfig, run_seed: u64) -> Result<OfflineReport> {
    let mut wcfg = cfg.world.clone();
    wcfg.seed = seed::derive(run_seed, "offline-world");
    let world = generate_world(&wcfg);
    let models = fit_world_models(&world, &cfg.pipeline, seed::derive(run_seed, "offline-text"))?;

    let probe: BTreeMap<String, f64> =
        world.truth.keys().map(|id| (id.clone(), cfg.probe_bid)).collect();
    let response = simulate_period(
        &probe,
        &world,
        &PeriodConfig {
            duration: cfg.duration,
            click_model: cfg.click_model,
            noise_scale: cfg.revenue_noise,
            seed: seed::derive(run_seed, "offline-response"),
        },
    );

    let ids: Vec<String> = world.catalog.ads.iter().map(|a| a.ad_id.clone()).collect();
    let (train_v, _val_v, test_v) =
        split_dataset(&ids, (0.8, 0.1, 0.1), seed::derive(run_seed, "offline-split"))?;
    let train_ids: HashSet<String> = train_v.into_iter().collect();

    let singular = prepare_mode(
        &world,
        &models.embeddings,
        BidPolicy::Singular,
        seed::derive(run_seed, "offline-singular"),
    )?;
    let cluster = prepare_mode(
        &world,
        &models.embeddings,
        BidPolicy::Cluster { threshold: cfg.pipeline.cluster_threshold },
        seed::derive(run_seed, "offline-cluster"),
    )?;

    let mut cells = Vec::new();
    for arts in [&singular, &cluster] {
        let samples = mode_training_samples(arts, &response, &train_ids);
        let lr = RpcModel::Linear(fit_linear(&samples, cfg.pipeline.ridge_l2)?);
        let gb = RpcModel::Gbrt(fit_gbrt(&samples, &cfg.pipeline.gbrt)?);
        let lr_scores = score_mode(arts, &lr, &response, &test_v)?;
        let gb_scores = score_mode(arts, &gb, &response, &test_v)?;
        cells.push((
            OfflineCell { wmse: lr_scores.wmse, wmae: lr_scores.wmae },
            OfflineCell { wmse: gb_scores.wmse, wmae: gb_scores.wmae },
        ));
    }
    Ok(OfflineReport {
        seed: run_seed,
        lr_singular: cells[0].0,
        gbrt_singular: cells[0].1,
        lr_cluster: cells[1].0,
        gbrt_cluster: cells[1].1,
    })
}

pub fn run_offline_sweep(cfg: &OfflineConfig, seeds: &[u64]) -> Result<Vec<OfflineReport>> {
    seeds.par_iter().map(|&s| run_offline(cfg, s)).collect()
}

/// One-sided sign-test p-value: probability of at least `wins` successes in
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    assert!(wins <= n && n < 64, "sign test sized for small sweeps");
    let mut tail = 0u128;
    for k in wins..=n {
        tail += binomial(n as u128, k as u128);
    }
    tail as f64 / (1u128 << n) as f64
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut num = 1u128;
    for i in 0..k {
        num = num * (n - i) / (i + 1);
    }
    num
}
