//! Prunes one test image with every strategy, prints which tokens each one
//! removes and checks the analytic MAC count against the instrumented one.
//! Writes the per-image trace as JSON lines.
//!
//! cargo run --release --example prune_inference -- [keep] [seed]

use tokenprune::bench::{ArtifactStore, PipelineConfig};
use tokenprune::data::patchify;
use tokenprune::nncore::SeededRng;
use tokenprune::pruning::{make_schedule, prune_infer, write_trace, KeepRate, PruneInputs, Strategy, TraceRecord};

fn main() -> tokenprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let keep: f32 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.5);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let cfg = PipelineConfig::default();
    let store = ArtifactStore::new(std::env::temp_dir().join("tokenprune-examples"));
    let run = store.ensure_run(&cfg, seed)?;

    let test = run.test();
    let ex = &test.examples[0];
    let grid = patchify(ex, test.patch_size)?;
    let mut records = Vec::new();
    for strategy in Strategy::ALL {
        let sched = make_schedule(KeepRate::new(keep)?, &cfg.locations, cfg.num_tokens(), strategy)?;
        let mut rng = SeededRng::new(seed);
        let mut inputs = PruneInputs::new(&run.embs);
        inputs.predictor = Some(&run.predictor);
        inputs.golden = Some(run.golden_test.get(0)?);
        inputs.rng = Some(&mut rng);
        let out = prune_infer(&run.model, &grid, &sched, &mut inputs)?;
        let dropped: Vec<usize> = out.trace.iter().flat_map(|s| s.dropped.iter().copied()).collect();
        let glyph = dropped.iter().filter(|&&t| ex.foreground_mask[t]).count();
        println!(
            "{:<14} p(true) {:.4}  dropped {} ({glyph} glyph)  MACs {} analytic / {} counted, {:.1}% of unpruned",
            strategy.to_string(),
            out.probs.data()[ex.label],
            dropped.len(),
            out.flops.total_macs,
            out.instrumented_macs,
            100.0 * out.flops.relative_to_unpruned
        );
        records.push(TraceRecord::new(0, &sched, &out));
    }
    let path = std::env::temp_dir().join("tokenprune-trace.jsonl");
    write_trace(&path, &records)?;
    println!("trace written to {}", path.display());
    Ok(())
}
