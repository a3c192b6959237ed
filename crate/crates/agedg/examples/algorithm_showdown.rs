//! Puts all five update rules through the leave-one-domain-out protocol
//! on one shared synthetic dataset, then renders the held-out scores in
//! the side-by-side comparison layout.
//!
//! Run with `cargo run --example algorithm_showdown`. Expect 25 short
//! training runs (5 rules x 5 held-out groups).

use agedg::algorithms::AlgorithmId;
use agedg::data::{synthesize_dataset, SynthSpec};
use agedg::harness::{leave_one_domain_out, ModelConfig, TrainConfig};
use agedg::report::{emit_table, TableFormat, TableLayout};

fn main() -> agedg::Result<()> {
    let data = synthesize_dataset(
        &SynthSpec {
            counts: [100; 5],
            input_dim: 10,
            ..Default::default()
        },
        21,
    )?;

    let mut base = TrainConfig::default();
    base.model = ModelConfig {
        hidden: vec![16],
        feature_dim: 8,
    };
    base.steps = 150;
    base.eval_every = 50;
    base.batch_size = 16;
    base.seed = 22;

    let mut records = Vec::new();
    for alg in AlgorithmId::ALL {
        let mut cfg = base.clone();
        cfg.algorithm.algorithm = alg;
        let runs = leave_one_domain_out(&cfg, &data, 1)?;
        let secs: f64 = runs.iter().map(|r| r.wall_clock_secs).sum();
        println!("{}: 5 runs in {secs:.1}s", alg.name());
        records.extend(runs);
    }

    println!("\nheld-out scores (rows: Ar/Val CCC and accuracy on the group each run never trained on)\n");
    print!("{}", emit_table(&records, TableLayout::LooComparison, TableFormat::Markdown)?);
    Ok(())
}
