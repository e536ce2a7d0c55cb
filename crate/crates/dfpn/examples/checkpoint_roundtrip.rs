//! Save a model, reload it into a fresh instance, and confirm the two
//! produce bit-identical detections. Also shows the manifest guard that
//! refuses checkpoints from a different architecture.
//!
//! Run with: cargo run --example checkpoint_roundtrip

use dfpn::cli::load_model;
use dfpn::data::{generate_synthetic, SyntheticConfig};
use dfpn::inference::{detect, InferenceConfig};
use dfpn::model::{BackboneKind, DetectorModel, ModelConfig};
use dfpn::train::save_training_checkpoint;

fn main() -> dfpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let dir = std::env::temp_dir().join("dfpn_example_ckpt");
    std::fs::create_dir_all(&dir).map_err(|e| dfpn::Error::Io { path: dir.clone(), source: e })?;

    let mut config = ModelConfig::tiny(BackboneKind::TinyPlain, 2);
    config.c_pyr = 16;
    let model = DetectorModel::new(config.clone(), 42)?;

    let sample = &generate_synthetic(&SyntheticConfig { seed: 5, ..Default::default() }, 1)?[0];
    let cfg = InferenceConfig { score_threshold: 0.01, ..Default::default() };
    let before = detect(&model, &sample.image, &cfg)?;

    let ckpt = dir.join("model.ckpt");
    let manifest = dir.join("model.manifest");
    save_training_checkpoint(&ckpt, &model, 0, 42)?;
    std::fs::write(&manifest, config.manifest())
        .map_err(|e| dfpn::Error::Io { path: manifest.clone(), source: e })?;
    println!("saved {} ({} tensors)", ckpt.display(), model.named_parameters().len());
    println!("manifest hash = {:016x}", config.manifest_hash());

    let reloaded = load_model(&ckpt, Some(&manifest))?;
    let after = detect(&reloaded, &sample.image, &cfg)?;
    assert_eq!(before.len(), after.len());
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.score.to_bits(), a.score.to_bits());
        assert_eq!(b.bbox.x1.to_bits(), a.bbox.x1.to_bits());
    }
    println!("reloaded model reproduces all {} detections bit-for-bit", before.len());

    // A manifest describing a different architecture must be refused.
    let mut other = config.clone();
    other.c_pyr = 32;
    let wrong = dir.join("other.manifest");
    std::fs::write(&wrong, other.manifest())
        .map_err(|e| dfpn::Error::Io { path: wrong.clone(), source: e })?;
    match load_model(&ckpt, Some(&wrong)) {
        Err(e) => println!("mismatched manifest refused as expected: {e}"),
        Ok(_) => panic!("a checkpoint must not load under a foreign manifest"),
    }
    Ok(())
}
