//! Sanity-check the full learning loop by memorizing one image: after a
//! few hundred gradient steps the detector should localize the object
//! almost perfectly.
//!
//! Run with: cargo run --example overfit_single_image

use dfpn::anchors::assign_targets;
use dfpn::data::{generate_synthetic, SyntheticConfig};
use dfpn::geometry::iou;
use dfpn::inference::{detect, InferenceConfig};
use dfpn::loss::{detection_loss, FocalParams};
use dfpn::model::{BackboneConfig, BackboneKind, DetectorModel, ModelConfig};
use dfpn::tensor::{sgd_step, SgdConfig};

fn main() -> dfpn::Result<()> {
    env_logger::init();

    let sample = &generate_synthetic(
        &SyntheticConfig {
            num_classes: 2,
            min_objects: 1,
            max_objects: 1,
            seed: 42,
            ..Default::default()
        },
        1,
    )?[0];
    let target = &sample.annotations[0];
    println!(
        "target: class {} at ({:.0}, {:.0})..({:.0}, {:.0})",
        target.class_id, target.bbox.x1, target.bbox.y1, target.bbox.x2, target.bbox.y2
    );

    let mut config = ModelConfig::tiny(BackboneKind::TinyPlain, 2);
    config.backbone = BackboneConfig {
        kind: BackboneKind::TinyPlain,
        stage_channels: vec![8, 16, 32],
        stage_strides: vec![2, 2, 2],
    };
    config.c_pyr = 32;
    config.head_depth = 2;
    let model = DetectorModel::new(config, 3)?;
    let params = model.parameters();
    let sgd = SgdConfig { learning_rate: 0.005, seed: 0 };
    let focal = FocalParams::default();

    let gts = sample.training_boxes();
    for step in 1..=500 {
        let output = model.forward(&sample.image)?;
        let anchors: Vec<_> = model.anchors_for(&output).into_iter().flatten().collect();
        let assignment = assign_targets(&anchors, &gts, 2)?;
        let loss = detection_loss(&output, &assignment, 9, 2, &focal, 1.0)?;
        loss.total.backward();
        sgd_step(&params, &sgd);

        if step % 100 == 0 || step == 1 {
            let dets = detect(&model, &sample.image, &InferenceConfig::default())?;
            let best = dets
                .iter()
                .filter(|d| d.class_id == target.class_id)
                .map(|d| (iou(&d.bbox, &target.bbox), d.score))
                .fold((0.0f64, 0.0f64), |acc, v| if v.0 > acc.0 { v } else { acc });
            println!(
                "step {step:>3}: loss {:.5}, best IoU {:.3} at score {:.3}",
                loss.total.item(),
                best.0,
                best.1
            );
        }
    }

    let dets = detect(&model, &sample.image, &InferenceConfig::default())?;
    let best = dets
        .iter()
        .filter(|d| d.class_id == target.class_id)
        .max_by(|a, b| {
            iou(&a.bbox, &target.bbox).partial_cmp(&iou(&b.bbox, &target.bbox)).unwrap()
        })
        .expect("no detection of the target class");
    println!(
        "final: IoU {:.3}, score {:.3}, box ({:.1}, {:.1})..({:.1}, {:.1})",
        iou(&best.bbox, &target.bbox),
        best.score,
        best.bbox.x1,
        best.bbox.y1,
        best.bbox.x2,
        best.bbox.y2
    );
    Ok(())
}
