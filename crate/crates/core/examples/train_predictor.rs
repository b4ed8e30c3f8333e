//! Trains each predictor architecture on cached golden scores and reports
//! its test matching rate.
//!
//! cargo run --release --example train_predictor -- [seed]

use std::time::Instant;

use tokenprune::bench::{predictor_matching_rate, stage_predictor, ArtifactStore, PipelineConfig};
use tokenprune::data::SplitRole;
use tokenprune::predictor::PredictorKind;

fn main() -> tokenprune::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let cfg = PipelineConfig::default();
    let store = ArtifactStore::new(std::env::temp_dir().join("tokenprune-examples"));
    let run = store.ensure_run(&cfg, seed)?;
    let k = cfg.match_k();
    println!("chance matching rate at K={k}: {:.1}", 100.0 * k as f32 / cfg.num_tokens() as f32);

    for arch in PredictorKind::ALL {
        let start = Instant::now();
        let split = run.dataset.split(SplitRole::PredictorTrain);
        let (p, log) = stage_predictor(&cfg, seed, arch, &run.model, split, &run.golden_train)?;
        let mr = predictor_matching_rate(&run.model, &p, run.test(), &run.golden_test, k)?;
        println!(
            "{:<12} loss {:.4} -> {:.4}  MR@{k} {mr:5.1}  ({:.1}s)",
            arch.to_string(),
            log.epoch_losses.first().copied().unwrap_or(f32::NAN),
            log.epoch_losses.last().copied().unwrap_or(f32::NAN),
            start.elapsed().as_secs_f32()
        );
    }
    Ok(())
}
