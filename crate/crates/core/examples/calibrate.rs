// Scratch driver for sizing the synthetic-world presets.
use sembid::simulate::*;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "offline".into());
    let t0 = std::time::Instant::now();
    match which.as_str() {
        "offline" => {
            let cfg = OfflineConfig::preset_table2();
            let seeds: Vec<u64> = (0..10).collect();
            let reports = run_offline_sweep(&cfg, &seeds).unwrap();
            let mut wins_cluster_gbrt = 0;
            let mut wins_gbrt_lr_sing = 0;
            let mut wins_gbrt_lr_clus = 0;
            for r in &reports {
                println!(
                    "seed {}: lr_s {:.4} lr_c {:.4} gb_s {:.4} gb_c {:.4} | mae {:.4} {:.4} {:.4} {:.4}",
                    r.seed,
                    r.lr_singular.wmse,
                    r.lr_cluster.wmse,
                    r.gbrt_singular.wmse,
                    r.gbrt_cluster.wmse,
                    r.lr_singular.wmae,
                    r.lr_cluster.wmae,
                    r.gbrt_singular.wmae,
                    r.gbrt_cluster.wmae
                );
                if r.gbrt_cluster.wmse < r.gbrt_singular.wmse {
                    wins_cluster_gbrt += 1;
                }
                if r.gbrt_singular.wmse < r.lr_singular.wmse {
                    wins_gbrt_lr_sing += 1;
                }
                if r.gbrt_cluster.wmse < r.lr_cluster.wmse {
                    wins_gbrt_lr_clus += 1;
                }
            }
            println!(
                "wins: cluster-gbrt<singular-gbrt {}/10 (p={:.4}), gbrt<lr singular {}/10 (p={:.4}), gbrt<lr cluster {}/10 (p={:.4})",
                wins_cluster_gbrt,
                sign_test_p(wins_cluster_gbrt, 10),
                wins_gbrt_lr_sing,
                sign_test_p(wins_gbrt_lr_sing, 10),
                wins_gbrt_lr_clus,
                sign_test_p(wins_gbrt_lr_clus, 10)
            );
        }
        "ab" => {
            let cfg = AbConfig::preset_table3();
            let seeds: Vec<u64> = (0..20).collect();
            let reports = run_ab_sweep(&cfg, &seeds).unwrap();
            let mut aa_sum = 0.0;
            let mut ab_sum = 0.0;
            for r in &reports {
                println!(
                    "seed {}: aa spend {:.1} rps {:.1} | ab spend {:.1} rps {:.1}",
                    r.seed,
                    r.aa.relative_spend(),
                    r.aa.relative_rps(),
                    r.ab.relative_spend(),
                    r.ab.relative_rps()
                );
                aa_sum += r.aa.relative_rps();
                ab_sum += r.ab.relative_rps();
            }
            println!("mean aa rps {:.2} | mean ab rps {:.2}", aa_sum / 20.0, ab_sum / 20.0);
        }
        other => eprintln!("unknown probe {other}"),
    }
    println!("elapsed {:.1?}", t0.elapsed());
}
