//! Measure single-image inference throughput with the warmup-aware
//! benchmark harness.
//!
//! Run with: cargo run --example benchmark_inference

use dfpn::data::{generate_synthetic, SyntheticConfig};
use dfpn::eval::benchmark_fps;
use dfpn::inference::{detect, InferenceConfig};
use dfpn::model::{BackboneKind, DetectorModel, ModelConfig};

fn main() -> dfpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let warmup = 5;
    let measured = 30;
    let frames = generate_synthetic(
        &SyntheticConfig { num_classes: 2, seed: 7, ..Default::default() },
        warmup + measured,
    )?;

    let mut config = ModelConfig::tiny(BackboneKind::TinyPlain, 2);
    config.c_pyr = 16;
    config.head_depth = 2;
    let model = DetectorModel::new(config, 0)?;
    println!(
        "benchmarking {} parameters on {} warmup + {} measured frames",
        model.parameter_count(),
        warmup,
        measured
    );

    let infer_cfg = InferenceConfig::default();
    let report = benchmark_fps(
        |i| detect(&model, &frames[i].image, &infer_cfg).map(|_| ()),
        warmup,
        measured,
    )?;

    println!("fps           = {:.2}", report.fps);
    println!("measured time = {:.3} s", report.total_seconds);
    println!("p50 latency   = {:.2} ms", report.p50_latency_ms);
    println!("p95 latency   = {:.2} ms", report.p95_latency_ms);
    Ok(())
}
