//! Load a VisDrone-format directory pair (images/ + annotations/ with one
//! "left,top,width,height,score,category,truncation,occlusion" line per
//! object) and render the ground truth onto a PNG.
//!
//! Run with: cargo run --example ingest_visdrone

use std::path::Path;

use dfpn::data::images::annotate_and_save;
use dfpn::data::visdrone::load_dir;

fn main() -> dfpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/visdrone");
    let samples = load_dir(&fixtures.join("images"), &fixtures.join("annotations"))?;
    println!("loaded {} samples from {}", samples.len(), fixtures.display());

    for sample in &samples {
        let ignored = sample.annotations.iter().filter(|a| a.ignore).count();
        println!(
            "{}: {}×{}, {} boxes ({} ignore regions)",
            sample.image_id,
            sample.width(),
            sample.height(),
            sample.annotations.len(),
            ignored
        );
        for ann in &sample.annotations {
            let tag = if ann.ignore { " [ignore]" } else { "" };
            println!(
                "  class {:>2} at ({:.0}, {:.0})–({:.0}, {:.0}){}",
                ann.class_id, ann.bbox.x1, ann.bbox.y1, ann.bbox.x2, ann.bbox.y2, tag
            );
        }
    }

    let first = &samples[0];
    let boxes: Vec<_> =
        first.annotations.iter().map(|a| (a.bbox.clone(), a.class_id)).collect();
    let out = std::env::temp_dir().join(format!("{}_truth.png", first.image_id));
    annotate_and_save(&out, &first.image, &boxes)?;
    println!("wrote {}", out.display());
    Ok(())
}
