//! CE baseline vs. CoDiM on noisy blobs, several seeds.
//!
//! `cargo run --release -p codim-core --example blobs_bench -- [seeds] [mode]`

use std::time::Instant;

use codim_core::data::{gen_blobs, BlobSpec};
use codim_core::noise::{NoiseKind, NoiseSpec};
use codim_core::trainers::{train_ce_baseline, train_codim, Mode, NoObserver, TrainConfig};

fn env_usize(key: &str) -> Option<usize> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn main() -> codim_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mode: Mode = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(Mode::SupCon);
    for seed in 0..seeds {
        let data = gen_blobs(&BlobSpec { seed, ..BlobSpec::default() })?
            .with_noise(&NoiseSpec {
                kind: NoiseKind::Symmetric { strict: false },
                ratio: 0.4,
                seed: seed + 1000,
            })?
            .train_data();
        let mut cfg = TrainConfig {
            seed,
            mode,
            ..TrainConfig::default()
        };
        if let Some(w) = env_usize("WARMUP") {
            cfg.warmup_epochs = w;
        }
        if let Some(p) = env_usize("PRETRAIN") {
            cfg.pretrain_steps = p;
        }
        let t = Instant::now();
        let (_, ce) = train_ce_baseline(&data, &cfg)?;
        let t_ce = t.elapsed();
        let t = Instant::now();
        let out = train_codim(&data, &cfg, &mut NoObserver)?;
        let t_cd = t.elapsed();
        let r = &out.record;
        let auc10 = r.row(10).map_or(f64::NAN, |row| row.partition_auc);
        let last = r.rows.last().unwrap();
        println!(
            "seed {seed}: CE best {:.4} last {:.4} ({:.1?}) | {} best {:.4} last {:.4} auc@10 {:.4} cons warm {:.4} end {:.4} ({:.1?})",
            ce.best_acc,
            ce.last_acc,
            t_ce,
            mode.name(),
            r.best_acc,
            r.last_acc,
            auc10,
            r.warmup_consistency,
            last.consistency,
            t_cd
        );
    }
    Ok(())
}
