// Temporary probe: reproduce the singular fit inside run_offline.
use std::collections::{BTreeMap, HashSet};

use sembid::cluster::{build_groups, singleton_groups, AdGroup};
use sembid::rpc_model::{aggregate_features, fit_linear, split_dataset, GroupSample};
use sembid::simulate::*;

fn main() {
    let cfg = OfflineConfig::preset_table2();
    for s in 0..10u64 {
        match run_offline(&cfg, s) {
            Ok(r) => println!("seed {s} ok: lr_singular wmse {:.4}", r.lr_singular.wmse),
            Err(e) => {
                println!("seed {s} FAILED: {e}");
                inspect(&cfg, s);
                break;
            }
        }
    }
}

fn inspect(cfg: &OfflineConfig, s: u64) {
    let mut wcfg = cfg.world.clone();
    wcfg.seed = sembid::seed::derive(s, "offline-world");
    let world = generate_world(&wcfg);
    let models =
        fit_world_models(&world, &cfg.pipeline, sembid::seed::derive(s, "offline-text")).unwrap();
    let probe: BTreeMap<String, f64> =
        world.truth.keys().map(|id| (id.clone(), cfg.probe_bid)).collect();
    let response = simulate_period(
        &probe,
        &world,
        &PeriodConfig {
            duration: cfg.duration,
            click_model: cfg.click_model,
            noise_scale: cfg.revenue_noise,
            seed: sembid::seed::derive(s, "offline-response"),
        },
    );
    let ids: Vec<String> = world.catalog.ads.iter().map(|a| a.ad_id.clone()).collect();
    let (train_v, _, _) =
        split_dataset(&ids, (0.8, 0.1, 0.1), sembid::seed::derive(s, "offline-split")).unwrap();
    let train_ids: HashSet<String> = train_v.into_iter().collect();

    let singles = singleton_groups(&world.catalog.ads, &models.embeddings).unwrap();
    let clusters = build_groups(
        &world.catalog.ads,
        &models.embeddings,
        None,
        cfg.pipeline.cluster_threshold,
    )
    .unwrap();
    for (tag, groups) in [("singular", singles), ("cluster", clusters)] {
        let samples = training_rows(&groups, &world, &response, &train_ids);
        let nf = samples.first().map(|x| x.features.len()).unwrap_or(0);
        println!("  {tag}: {} groups, {} training rows, {} features", tag.len(), samples.len(), nf);
        match fit_linear(&samples, cfg.pipeline.ridge_l2) {
            Ok(_) => println!("  {tag}: linear fit ok"),
            Err(e) => {
                println!("  {tag}: linear fit failed: {e}");
                // Dump feature ranges to spot degenerate columns.
                for k in 0..nf {
                    let vals: Vec<f64> =
                        samples.iter().filter_map(|r| r.features[k]).collect();
                    let present = vals.len();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    println!("    feat {k}: present {present}/{} range [{lo:.4}, {hi:.4}]", samples.len());
                }
            }
        }
    }
}

fn training_rows(
    groups: &[AdGroup],
    world: &SyntheticWorld,
    response: &PeriodOutcome,
    train_ids: &HashSet<String>,
) -> Vec<GroupSample> {
    let mut out = Vec::new();
    for g in groups {
        let base = aggregate_features(g, &world.catalog).unwrap();
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
    out.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    out
}
