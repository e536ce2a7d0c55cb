//! End-to-end: generate data, train a small detector for a few epochs,
//! then score it on held-out images.
//!
//! Run with: cargo run --example train_and_eval
//! (a few minutes of CPU time; watch the loss fall per epoch)

use dfpn::cli::detect_dataset;
use dfpn::data::{generate_synthetic, SyntheticConfig};
use dfpn::eval::{evaluate, standard_iou_thresholds, write_report_table};
use dfpn::model::{BackboneKind, DetectorModel, ModelConfig};
use dfpn::train::{train, TrainConfig};

fn main() -> dfpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let train_set = generate_synthetic(
        &SyntheticConfig { num_classes: 2, seed: 100, ..Default::default() },
        80,
    )?;
    let val_set = generate_synthetic(
        &SyntheticConfig { num_classes: 2, seed: 200, ..Default::default() },
        20,
    )?;

    let model = DetectorModel::new(ModelConfig::tiny(BackboneKind::TinyPlain, 2), 1)?;
    println!("model parameters: {}", model.parameter_count());

    let out_dir = std::env::temp_dir().join("dfpn_example_train");
    let cfg = TrainConfig { epochs: 6, learning_rate: 0.01, seed: 1, ..Default::default() };
    let outcome = train(&model, &train_set, &cfg, &out_dir, 0)?;
    println!("checkpoints and loss log in {}", out_dir.display());
    println!("final training loss: {:.4}", outcome.last_total_loss);

    let records = detect_dataset(&model, &val_set, &Default::default())?;
    let annotations: Vec<_> = val_set.iter().flat_map(|s| s.annotations.clone()).collect();
    let report = evaluate(&records, &annotations, &standard_iou_thresholds())?;
    let mut stdout = std::io::stdout();
    write_report_table(&mut stdout, &report).expect("write table");
    Ok(())
}
