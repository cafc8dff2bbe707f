// Temporary probe: theme-level embedding geometry.
use sembid::cluster::build_groups;
use sembid::simulate::*;

fn main() {
    let cfg = OfflineConfig::preset_table2();
    for s in [0u64, 2] {
        let mut wcfg = cfg.world.clone();
        wcfg.seed = sembid::seed::derive(s, "offline-world");
        let world = generate_world(&wcfg);
        let models =
            fit_world_models(&world, &cfg.pipeline, sembid::seed::derive(s, "offline-text"))
                .unwrap();
        let combos = wcfg.n_product_types * wcfg.n_themes_per_type;
        let d = 16;
        let mut centroids = vec![vec![0.0f64; d]; combos];
        let mut counts = vec![0usize; combos];
        for (id, t) in &world.truth {
            for (c, v) in centroids[t.theme].iter_mut().zip(&models.embeddings[id]) {
                *c += v;
            }
            counts[t.theme] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                c.iter_mut().for_each(|x| *x /= norm);
            }
            let _ = n;
        }
        println!("seed {s}: theme-centroid cosine matrix");
        for i in 0..combos {
            let row: Vec<String> = (0..combos)
                .map(|j| {
                    let dot: f64 = centroids[i].iter().zip(&centroids[j]).map(|(a, b)| a * b).sum();
                    format!("{dot:6.2}")
                })
                .collect();
            println!("  t{i}: {}", row.join(" "));
        }
        // How many rich ads (pair-trained) per theme?
        let rich: Vec<usize> = (0..combos)
            .map(|t| {
                world
                    .catalog
                    .ads
                    .iter()
                    .filter(|a| a.total_clicks > 0 && world.truth[&a.ad_id].theme == t)
                    .count()
            })
            .collect();
        println!("  rich per theme: {rich:?}");
        let groups = build_groups(
            &world.catalog.ads,
            &models.embeddings,
            None,
            cfg.pipeline.cluster_threshold,
        )
        .unwrap();
        for g in &groups {
            let mut themes: Vec<usize> =
                g.member_ad_ids.iter().map(|m| world.truth[m].theme).collect();
            themes.sort_unstable();
            themes.dedup();
            println!("  group {} ({} ads): themes {:?}", g.group_id, g.member_ad_ids.len(), themes);
        }
    }
}
