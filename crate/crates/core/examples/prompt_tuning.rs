//! Few-shot prompt tuning against the pruned forward: accuracy before and
//! after text-only and text+visual prompts.
//!
//! cargo run --release --example prompt_tuning -- [seed]

use std::time::Instant;

use tokenprune::bench::{evaluate_prompted, tune_run, ArtifactStore, PipelineConfig};
use tokenprune::prompt::PromptMode;

fn main() -> tokenprune::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let cfg = PipelineConfig::default();
    let store = ArtifactStore::new(std::env::temp_dir().join("tokenprune-examples"));
    let run = store.ensure_run(&cfg, seed)?;

    let base = evaluate_prompted(&cfg, &run, None, true)?;
    println!("untuned, keep {}: accuracy {:.1}%", cfg.tuning_keep, base.accuracy);
    for mode in [PromptMode::TOnly, PromptMode::TAndV] {
        let start = Instant::now();
        let (state, log) = tune_run(&cfg, &run, mode)?;
        let pruned = evaluate_prompted(&cfg, &run, Some((&state, mode)), true)?;
        let full = evaluate_prompted(&cfg, &run, Some((&state, mode)), false)?;
        println!(
            "{mode:<8} loss {:.3} -> {:.3}  pruned {:.1}%  unpruned {:.1}%  MACs {}  ({:.0}s)",
            log.epoch_losses.first().copied().unwrap_or(f32::NAN),
            log.epoch_losses.last().copied().unwrap_or(f32::NAN),
            pruned.accuracy,
            full.accuracy,
            pruned.total_macs,
            start.elapsed().as_secs_f32()
        );
    }
    Ok(())
}
