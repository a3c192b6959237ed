//! Walks through the loss pieces: the agreement metrics, the composite
//! training loss with its randomly reweighted terms, and the analytic
//! gradient against a finite-difference probe.
//!
//! Run with `cargo run --example metrics_tour`.

use agedg::data::EmotionClass;
use agedg::metrics::{
    accuracy, ccc, ccc_or_zero, composite_loss, composite_loss_breakdown, composite_loss_grad,
    cross_entropy, mse, pcc, sample_shake_weights, EmotionTargets, LabelBatch, PredictionBatch,
    ShakeWeights,
};
use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> agedg::Result<()> {
    // Agreement metrics on a vector pair: pcc rewards any linear
    // relationship, ccc additionally demands matching scale and location.
    let y = [0.1, 0.4, -0.2, 0.7, -0.5];
    let doubled: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    println!("pcc(y, 2y) = {:.3}", pcc(&y, &doubled)?);
    println!("ccc(y, 2y) = {:.3}", ccc(&y, &doubled)?);
    println!("ccc(y, y)  = {:.3}", ccc(&y, &y)?);
    println!("mse(y, 2y) = {:.3}", mse(&y, &doubled)?);

    // A constant prediction has no variance; the guarded wrapper treats the
    // undefined correlation as zero agreement instead of failing the step.
    let flat = [0.3; 5];
    println!("ccc_or_zero(y, const) = {:.3}", ccc_or_zero(&y, &flat)?);

    // A small batch: three samples, eight emotion classes.
    let pred = PredictionBatch {
        logits: Array2::from_shape_fn((3, 8), |(i, j)| if i == j { 2.0 } else { -0.3 }),
        valence: array![0.5, -0.2, 0.1],
        arousal: array![0.1, 0.3, -0.4],
    };
    let labels = LabelBatch {
        emotion: EmotionTargets::Hard(vec![
            EmotionClass::from_index(0).unwrap(),
            EmotionClass::from_index(1).unwrap(),
            EmotionClass::from_index(5).unwrap(),
        ]),
        valence: array![0.4, -0.1, 0.2],
        arousal: array![0.2, 0.2, -0.5],
    };
    println!("\ncross entropy = {:.4}", cross_entropy(&pred.logits, &labels.emotion)?);
    println!("accuracy      = {:.4}", accuracy(&pred, &labels)?);

    // The composite loss blends classification with the continuous terms;
    // the blend weights are redrawn every training step.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let w = sample_shake_weights(&mut rng);
        let bd = composite_loss_breakdown(&pred, &labels, &w)?;
        println!(
            "weights ({:.2} {:.2} {:.2}) -> total {:.4} (ce {:.4}, mse {:.4}, pcc {:.4}, ccc {:.4})",
            w.alpha, w.beta, w.gamma, bd.total, bd.ce, bd.l_mse, bd.l_pcc, bd.l_ccc
        );
    }

    // Evaluation uses the deterministic equal blend.
    let uniform = ShakeWeights::uniform();
    println!("uniform blend total = {:.4}", composite_loss(&pred, &labels, &uniform)?);

    // The analytic gradient matches a centred finite difference.
    let (_, grad) = composite_loss_grad(&pred, &labels, &uniform)?;
    let h = 1e-5;
    let mut up = pred.clone();
    up.valence[1] += h;
    let mut dn = pred.clone();
    dn.valence[1] -= h;
    let fd = (composite_loss(&up, &labels, &uniform)? - composite_loss(&dn, &labels, &uniform)?)
        / (2.0 * h);
    println!(
        "d total / d valence[1]: analytic {:.6}, finite difference {:.6}",
        grad.valence[1], fd
    );
    Ok(())
}
