//! Train briefly, run the detector on fresh images, and write both a
//! detections JSONL file and annotated PNGs with the boxes drawn in.
//!
//! Run with: cargo run --example detect_and_draw

use dfpn::data::images::annotate_and_save;
use dfpn::data::{generate_synthetic, SyntheticConfig};
use dfpn::inference::{detect, write_detections_jsonl, InferenceConfig};
use dfpn::model::{BackboneConfig, BackboneKind, DetectorModel, ModelConfig};
use dfpn::train::{train, TrainConfig};

fn main() -> dfpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let train_set = generate_synthetic(
        &SyntheticConfig { num_classes: 2, seed: 100, ..Default::default() },
        60,
    )?;
    let fresh = generate_synthetic(
        &SyntheticConfig { num_classes: 2, seed: 999, ..Default::default() },
        4,
    )?;

    // Small pyramid so the demo trains in well under a minute.
    let config = ModelConfig {
        backbone: BackboneConfig {
            stage_channels: vec![16, 32, 64],
            ..BackboneConfig::tiny(BackboneKind::TinyPlain)
        },
        c_pyr: 32,
        head_depth: 2,
        ..ModelConfig::tiny(BackboneKind::TinyPlain, 2)
    };
    let model = DetectorModel::new(config, 1)?;

    let out_dir = std::env::temp_dir().join("dfpn_example_detect");
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| dfpn::Error::Io { path: out_dir.clone(), source: e })?;
    let cfg = TrainConfig { epochs: 10, learning_rate: 0.01, seed: 1, ..Default::default() };
    let outcome = train(&model, &train_set, &cfg, &out_dir, 0)?;
    println!("trained {} epochs, final loss {:.4}", outcome.epochs_run, outcome.last_total_loss);

    let jsonl = out_dir.join("detections.jsonl");
    let mut file = std::fs::File::create(&jsonl)
        .map_err(|e| dfpn::Error::Io { path: jsonl.clone(), source: e })?;

    // lightly trained scores cluster, so suppress harder than the default
    let infer_cfg =
        InferenceConfig { score_threshold: 0.5, nms_iou: 0.2, ..Default::default() };
    let mut total = 0;
    for sample in &fresh {
        let detections = detect(&model, &sample.image, &infer_cfg)?;
        total += detections.len();
        println!("{}: {} detections", sample.image_id, detections.len());
        for d in &detections {
            println!(
                "  class {} score {:.3} at ({:.1}, {:.1})–({:.1}, {:.1})",
                d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
            );
        }

        let boxes: Vec<_> = detections.iter().map(|d| (d.bbox.clone(), d.class_id)).collect();
        let png = out_dir.join(format!("{}_annotated.png", sample.image_id));
        annotate_and_save(&png, &sample.image, &boxes)?;
        println!("  wrote {}", png.display());

        write_detections_jsonl(&mut file, &sample.image_id, &detections)?;
    }

    println!("wrote {} records to {}", total, jsonl.display());
    Ok(())
}
