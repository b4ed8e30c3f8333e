//! Golden scores for one test image. Prints the removal effect
//! `1e4 * (1 - s)` of the raw Preservation score per patch, glyph patches
//! bracketed: small values mark tokens whose removal leaves the CLS
//! embedding unchanged.
//!
//! cargo run --release --example golden_scores -- [seed] [image]

use tokenprune::bench::{ArtifactStore, PipelineConfig};
use tokenprune::data::patchify;
use tokenprune::golden::{golden_scores_multi, ranking_from_scores, ScoreKind};

fn main() -> tokenprune::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let seed = args.next().flatten().unwrap_or(0) as u64;
    let image = args.next().flatten().unwrap_or(0);
    let cfg = PipelineConfig::default();
    let store = ArtifactStore::new(std::env::temp_dir().join("tokenprune-examples"));
    let run = store.ensure_run(&cfg, seed)?;

    let test = run.test();
    let ex = &test.examples[image];
    let grid = patchify(ex, test.patch_size)?;
    let all = golden_scores_multi(&run.model, &run.embs, &grid, Some(ex.label), &cfg.golden, &ScoreKind::ALL, true)?;
    let pres = all.iter().find(|s| s.kind == ScoreKind::Preservation).expect("preservation requested");

    println!("image {image}, class '{}', r = {}", test.class_names[ex.label], cfg.golden.r);
    let side = grid.grid_side;
    for r in 0..side {
        let line: String = (0..side)
            .map(|c| {
                let t = r * side + c;
                let v = 1e4 * (1.0 - pres.raw.data()[t]);
                if ex.foreground_mask[t] {
                    format!("[{v:5.1}]")
                } else {
                    format!(" {v:5.1} ")
                }
            })
            .collect();
        println!("{line}");
    }
    let mean = |fg: bool| {
        let v: Vec<f32> = pres
            .raw
            .data()
            .iter()
            .zip(&ex.foreground_mask)
            .filter(|(_, &m)| m == fg)
            .map(|(&s, _)| s)
            .collect();
        v.iter().sum::<f32>() / v.len() as f32
    };
    println!("mean score: background {:.6}, glyph {:.6}", mean(false), mean(true));
    for s in &all {
        let top = ranking_from_scores(&s.normalized)?;
        let glyph_in_top = top.top(16).iter().filter(|&&t| ex.foreground_mask[t]).count();
        println!("{:<13} glyph tokens among the 16 most redundant: {glyph_in_top}", s.kind.to_string());
    }
    Ok(())
}
