//! Keep-rate sweep over all strategies for one seed, written as CSV rows,
//! a JSON summary and plot data.
//!
//! cargo run --release --example keep_rate_sweep -- [out_dir]

use tokenprune::bench::{emit_report, run_keep_rate_sweep, summarize, ArtifactStore, PipelineConfig};

fn main() -> tokenprune::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("tokenprune-sweep"));
    let cfg = PipelineConfig {
        seeds: vec![0],
        ..Default::default()
    };
    let store = ArtifactStore::new(std::env::temp_dir().join("tokenprune-examples"));
    let runs = vec![store.ensure_run(&cfg, 0)?];
    let rows = run_keep_rate_sweep(&cfg, &runs)?;
    for s in summarize(&rows) {
        println!(
            "{:<28} accuracy {:6.2}  p(true) {:.5}  relative MACs {:.3}",
            s.grid_id, s.accuracy_mean, s.mean_true_prob, s.relative_macs
        );
    }
    let files = emit_report(&rows, &out, "sweep")?;
    println!("rows: {}\nsummary: {}\nplot: {}", files.rows.display(), files.summary.display(), files.plot.display());
    Ok(())
}
