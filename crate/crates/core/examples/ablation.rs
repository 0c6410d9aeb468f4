//! Trains the ablation variants on synthetic data and prints test accuracy.
//!
//! `cargo run --release --example ablation -- [seeds] [epochs] [per_class]`
//!
//! `VARIANTS=full,backbone_only` restricts the rows and `LR` overrides the
//! learning rate.

use std::time::Instant;

use wagf::data::{generate_synthetic, split_dataset, SynthSpec};
use wagf::exec::Execution;
use wagf::model::{Model, ModelConfig, Variant};
use wagf::train::{evaluate, TrainConfig, Trainer};

fn main() -> wagf::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let seeds = args.first().copied().unwrap_or(3);
    let epochs = args.get(1).copied().unwrap_or(25);
    let per_class = args.get(2).copied().unwrap_or(50);

    let pool = generate_synthetic(&SynthSpec::desk(per_class, 64, 11))?;
    let (train, val) = split_dataset(&pool, 0.8, 11)?;
    let test = generate_synthetic(&SynthSpec::desk(per_class / 5, 64, 12))?;
    println!("train {} / val {} / test {}", train.len(), val.len(), test.len());

    let only = std::env::var("VARIANTS").unwrap_or_default();
    for variant in Variant::ALL
        .into_iter()
        .filter(|v| only.is_empty() || only.split(',').any(|o| o == v.name()))
    {
        let mut accs = Vec::new();
        for seed in 0..seeds as u64 {
            let start = Instant::now();
            let cfg = ModelConfig {
                seed,
                ..ModelConfig::default()
            }
            .with_variant(variant);
            let tc = TrainConfig {
                epochs,
                learning_rate: std::env::var("LR").ok().map_or(0.01, |v| v.parse().unwrap()),
                seed,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(Model::<f32>::new(cfg)?, tc, Execution::default())?;
            let fit = trainer.fit(&train, Some(&val), |_, r, _| {
                eprintln!(
                    "  {} seed {seed} epoch {:2} loss {:.3} train {:.3} val {:.3}",
                    variant.name(),
                    r.epoch,
                    r.train_loss,
                    r.train_accuracy,
                    r.val_accuracy.unwrap_or(0.0)
                );
                Ok(())
            })?;
            let ev = evaluate(&fit.best_model, &fit.best_fusion, &test, Execution::default())?;
            println!(
                "{:24} seed {seed}: best epoch {:2}, test accuracy {:.3} ({:.0?})",
                variant.name(),
                fit.best_epoch,
                ev.metrics.accuracy,
                start.elapsed()
            );
            accs.push(ev.metrics.accuracy);
        }
        println!(
            "{:24} mean {:.4}",
            variant.name(),
            accs.iter().sum::<f64>() / accs.len() as f64
        );
    }
    Ok(())
}
