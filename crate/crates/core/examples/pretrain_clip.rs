//! Pretrains the toy dual encoder and reports zero-shot accuracy.
//!
//! cargo run --release --example pretrain_clip -- [epochs] [seed]

use std::time::Instant;

use tokenprune::clipcore::{pretrain_contrastive, zero_shot_accuracy, ClipModel, PretrainConfig, TextConfig, VisionConfig};
use tokenprune::data::{generate_synthetic, SplitRole, SyntheticConfig};
use tokenprune::nncore::SeededRng;

fn main() -> tokenprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let data_cfg = SyntheticConfig::default();
    let mut rng = SeededRng::new(seed);
    let ds = generate_synthetic(&data_cfg, &mut rng.fork(1))?;
    let mut model = ClipModel::new(
        VisionConfig::default(),
        TextConfig::default(),
        data_cfg.class_names(),
        &mut rng.fork(2),
    )?;
    let start = Instant::now();
    let log = pretrain_contrastive(
        &mut model,
        ds.split(SplitRole::Pretrain),
        &PretrainConfig { epochs, ..Default::default() },
        &mut rng.fork(3),
    )?;
    println!("initial loss {:?}", log.initial_loss);
    for (e, l) in log.epoch_losses.iter().enumerate() {
        println!("epoch {e}: loss {l:.4}");
    }
    println!("pretraining took {:.1}s", start.elapsed().as_secs_f32());
    let acc = zero_shot_accuracy(&model, ds.split(SplitRole::Test))?;
    println!("zero-shot test accuracy {acc:.1}% (logit scale {:.2})", model.logit_scale());
    Ok(())
}
