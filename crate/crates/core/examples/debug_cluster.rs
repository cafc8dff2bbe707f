// Temporary probe: embedding separation and cluster purity per seed.
use sembid::cluster::build_groups;
use sembid::simulate::*;

fn main() {
    let cfg = OfflineConfig::preset_table2();
    for s in 0..10u64 {
        let mut wcfg = cfg.world.clone();
        wcfg.seed = sembid::seed::derive(s, "offline-world");
        let world = generate_world(&wcfg);
        let models =
            fit_world_models(&world, &cfg.pipeline, sembid::seed::derive(s, "offline-text"))
                .unwrap();

        // Within/cross theme cosine over all ads.
        let ids: Vec<&String> = world.truth.keys().collect();
        let mut within = (0.0, 0usize);
        let mut cross = (0.0, 0usize);
        for i in (0..ids.len()).step_by(7) {
            for j in ((i + 1)..ids.len()).step_by(11) {
                let a = &models.embeddings[ids[i]];
                let b = &models.embeddings[ids[j]];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                if world.truth[ids[i]].theme == world.truth[ids[j]].theme {
                    within.0 += dot;
                    within.1 += 1;
                } else {
                    cross.0 += dot;
                    cross.1 += 1;
                }
            }
        }
        let groups = build_groups(
            &world.catalog.ads,
            &models.embeddings,
            None,
            cfg.pipeline.cluster_threshold,
        )
        .unwrap();
        // Purity: fraction of ads whose group's dominant theme matches theirs.
        let mut pure = 0usize;
        for g in &groups {
            let mut counts = std::collections::HashMap::new();
            for m in &g.member_ad_ids {
                *counts.entry(world.truth[m].theme).or_insert(0usize) += 1;
            }
            pure += counts.values().max().copied().unwrap_or(0);
        }
        println!(
            "seed {s}: groups {:3}  purity {:.3}  within-cos {:.3}  cross-cos {:.3}  pairs within/cross {}/{}",
            groups.len(),
            pure as f64 / world.catalog.ads.len() as f64,
            within.0 / within.1.max(1) as f64,
            cross.0 / cross.1.max(1) as f64,
            within.1,
            cross.1
        );
    }
}
