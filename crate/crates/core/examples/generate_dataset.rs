//! Generates the synthetic glyph dataset, prints one image's foreground mask
//! and round-trips a split through disk.
//!
//! cargo run --release --example generate_dataset -- [seed]

use tokenprune::data::{load_split, patchify, save_split, SplitRole};
use tokenprune::bench::{stage_data, PipelineConfig};

fn main() -> tokenprune::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    // the same images the pipeline's gen-data stage writes for this seed
    let ds = stage_data(&PipelineConfig::default(), seed)?;
    let cfg = &ds.config;
    for role in SplitRole::ALL {
        let s = ds.split(role);
        println!("{:<16} {:>4} images, per class {:?}", role.as_str(), s.len(), s.class_counts());
    }

    let test = ds.split(SplitRole::Test);
    let ex = &test.examples[0];
    println!("\nclass '{}', glyph patches marked #:", test.class_names[ex.label]);
    for row in ex.foreground_mask.chunks(cfg.grid_side) {
        let line: String = row.iter().map(|&m| if m { '#' } else { '.' }).collect();
        println!("  {line}");
    }
    let grid = patchify(ex, cfg.patch_size)?;
    println!("token grid {:?}", grid.tokens.shape());

    let dir = std::env::temp_dir().join(format!("tokenprune-dataset-{seed}"));
    save_split(&dir, test)?;
    let back = load_split(&dir)?;
    println!("saved to {} and reloaded: identical = {}", dir.display(), &back == test);
    Ok(())
}
