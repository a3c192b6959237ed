//! Trains the baseline pooled-risk model on a synthetic dataset and prints
//! the selected checkpoint's scores for every age group.
//!
//! Run with `cargo run --example train_erm`.

use agedg::data::{synthesize_dataset, AgeGroup, SynthSpec};
use agedg::harness::{train_and_select, ModelConfig, TrainConfig};

fn main() -> agedg::Result<()> {
    let data = synthesize_dataset(
        &SynthSpec {
            counts: [150; 5],
            input_dim: 12,
            ..Default::default()
        },
        3,
    )?;

    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        hidden: vec![16],
        feature_dim: 8,
    };
    cfg.steps = 400;
    cfg.eval_every = 50;
    cfg.batch_size = 16;
    cfg.seed = 4;

    let record = train_and_select(&cfg, &data)?;
    println!(
        "selected step {} of {} (validation score {:.4}), trained on {} rows in {:.1}s",
        record.selected_step,
        record.config.steps,
        record.selection_score,
        record.train_sizes.iter().sum::<usize>(),
        record.wall_clock_secs
    );

    println!("\n{:>8} {:>8} {:>8} {:>8} {:>8}", "group", "arousal", "valence", "acc", "loss");
    for &g in &AgeGroup::ALL {
        let s = record.report.scores(g);
        println!(
            "{:>8} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            g.to_string(),
            s.arousal_ccc,
            s.valence_ccc,
            s.accuracy,
            s.loss
        );
    }
    let m = record.report.mean();
    println!(
        "{:>8} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
        "mean", m.arousal_ccc, m.valence_ccc, m.accuracy, m.loss
    );
    Ok(())
}
