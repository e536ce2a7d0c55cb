//! Verify the analytic gradients of the whole detector loss against
//! central differences on a handful of randomly chosen parameters.
//!
//! Run with: cargo run --example gradcheck_detector

use dfpn::anchors::assign_targets;
use dfpn::data::{generate_synthetic, SyntheticConfig};
use dfpn::loss::{detection_loss, FocalParams};
use dfpn::model::{BackboneConfig, BackboneKind, DetectorModel, ModelConfig};
use dfpn::tensor::gradcheck_coords;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dfpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let sample = &generate_synthetic(
        &SyntheticConfig {
            image_size: 32,
            num_classes: 2,
            max_objects: 1,
            min_object_size: 22,
            max_object_size: 28,
            seed: 11,
            ..Default::default()
        },
        1,
    )?[0];

    let config = ModelConfig {
        backbone: BackboneConfig {
            stage_channels: vec![4, 8, 8],
            ..BackboneConfig::tiny(BackboneKind::TinyPlain)
        },
        c_pyr: 8,
        head_depth: 1,
        ..ModelConfig::tiny(BackboneKind::TinyPlain, 2)
    };
    let model = DetectorModel::new(config, 3)?;

    let focal = FocalParams::default();
    let gts = sample.training_boxes();
    let loss = || {
        let output = model.forward(&sample.image)?;
        let anchors: Vec<_> =
            model.anchors_for(&output).into_iter().flatten().collect();
        let assignment = assign_targets(&anchors, &gts, 2)?;
        let a = model.config.anchors.anchors_per_location();
        detection_loss(&output, &assignment, a, 2, &focal, 1.0).map(|b| b.total)
    };

    // Two random coordinates from every parameter tensor.
    let named = model.named_parameters();
    let leaves: Vec<_> = named.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut coords = Vec::new();
    for (li, leaf) in leaves.iter().enumerate() {
        for _ in 0..2 {
            coords.push((li, rng.gen_range(0..leaf.len())));
        }
    }
    println!("checking {} coordinates across {} tensors...", coords.len(), leaves.len());

    // eps must stay well below typical pre-activation magnitudes: a larger
    // step can straddle a relu kink and corrupt the central difference.
    let report = gradcheck_coords(loss, &leaves, &coords, 1e-6)?;
    println!("max relative error = {:.3e}", report.max_rel_err);
    println!(
        "worst: {}[{}]  analytic {:.6e}  numeric {:.6e}",
        named[report.worst_leaf].0, report.worst_coord, report.worst_analytic, report.worst_numeric
    );
    println!("passes 1e-4: {}", report.passes(1e-4));
    Ok(())
}
