//! Trains on shrinking subsets of the age groups at one shared budget
//! and reports how the per-domain metrics move, alongside the training
//! rows each configuration actually drew from every group.
//!
//! Run with `cargo run --example domain_subset_study`.

use agedg::data::AgeGroup::{A18_30, A30_40, A40_50, A50_60, A60_85};
use agedg::data::{synthesize_dataset, AgeGroup, SynthSpec};
use agedg::harness::{subset_ablation, ModelConfig, TrainConfig};
use agedg::report::{emit_table, TableFormat, TableLayout};

fn main() -> agedg::Result<()> {
    let data = synthesize_dataset(
        &SynthSpec {
            counts: [120; 5],
            input_dim: 10,
            ..Default::default()
        },
        41,
    )?;

    let subsets: Vec<Vec<AgeGroup>> = vec![
        AgeGroup::ALL.to_vec(),
        vec![A18_30, A30_40, A40_50, A60_85],
        vec![A18_30, A30_40, A50_60, A60_85],
        vec![A18_30, A30_40, A60_85],
    ];

    let mut base = TrainConfig::default();
    base.model = ModelConfig {
        hidden: vec![16],
        feature_dim: 8,
    };
    base.steps = 250;
    base.eval_every = 50;
    base.batch_size = 16;
    base.seed = 42;

    let records = subset_ablation(&base, &data, &subsets, 1)?;
    println!(
        "{} runs, shared training budget {} rows\n",
        records.len(),
        records[0].config.total_train_budget
    );

    println!("test metrics per training subset\n");
    print!("{}", emit_table(&records, TableLayout::Subset, TableFormat::Markdown)?);
    println!("\ntraining rows drawn per group, in thousands\n");
    print!("{}", emit_table(&records, TableLayout::Sizes, TableFormat::Markdown)?);
    Ok(())
}
