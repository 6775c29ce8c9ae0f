//! Contrastive SSL vs. plain SSL on blobs with a fraction of labels kept.
//!
//! `cargo run --release -p codim-core --example cssl_bench -- [seeds] [ratio]`

use std::time::Instant;

use codim_core::data::{gen_blobs, BlobSpec};
use codim_core::trainers::{train_cssl, SslSplit, TrainConfig};

fn main() -> codim_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let ratio: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    for seed in 0..seeds {
        let data = gen_blobs(&BlobSpec { seed, ..BlobSpec::default() })?.train_data();
        let split = SslSplit::stratified(&data, ratio, seed + 77)?;
        let base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let variants = [
            ("ssl", TrainConfig { pretrain_steps: 0, lambda_sup: 0.0, lambda_self: 0.0, ..base.clone() }),
            ("ssl+pre", TrainConfig { lambda_sup: 0.0, lambda_self: 0.0, ..base.clone() }),
            ("cssl-nopre", TrainConfig { pretrain_steps: 0, ..base.clone() }),
            ("cssl", base.clone()),
        ];
        let mut line = format!("seed {seed}:");
        for (name, cfg) in variants {
            let t = Instant::now();
            let (_, r) = train_cssl(&split, &cfg)?;
            line += &format!(" {name} {:.4}/{:.4} ({:.1?})", r.best_acc, r.last_acc, t.elapsed());
        }
        println!("{line}");
    }
    Ok(())
}
