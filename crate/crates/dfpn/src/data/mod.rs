//! Datasets: an in-memory [`Sample`] type, a procedural shape generator,
//! a drone-benchmark reader, image/tensor conversion, flip augmentation,
//! and a simple on-disk layout (PNGs plus an `annotations.jsonl`).

pub mod images;
pub mod synthetic;
pub mod visdrone;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::Annotation;
use crate::geometry::BBox;
use crate::tensor::Tensor;

pub use synthetic::{generate_synthetic, ShapeKind, SyntheticConfig};

/// One image with its ground truth. The image is a 3×H×W tensor with
/// values in [0, 1].
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
    pub image_id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// `(box, class)` pairs for the target assigner. Ignore-flagged
    /// annotations carry no class label and are left out of training.
    pub fn training_boxes(&self) -> Vec<(BBox, usize)> {
        self.annotations
            .iter()
            .filter(|a| !a.ignore)
            .map(|a| (a.bbox, a.class_id))
            .collect()
    }
}

/// Clip boxes to the image rectangle, warning about any that overhang and
/// dropping any that land entirely outside.
pub(crate) fn clip_annotations(annotations: &mut Vec<Annotation>, w: f64, h: f64) {
    annotations.retain_mut(|ann| {
        let clipped = ann.bbox.clip(w, h);
        if clipped.is_degenerate() {
            log::warn!(
                "{}: dropping annotation entirely outside the {w}x{h} image: {:?}",
                ann.image_id,
                ann.bbox
            );
            return false;
        }
        if clipped != ann.bbox {
            log::warn!(
                "{}: clipping out-of-bounds annotation {:?} to the {w}x{h} image",
                ann.image_id,
                ann.bbox
            );
            ann.bbox = clipped;
        }
        true
    });
}

/// Mirror a sample left-to-right: pixel columns are reversed and each box
/// `(x1, y1, x2, y2)` becomes `(W − x2, y1, W − x1, y2)`. Applying the
/// flip twice restores the original sample bit for bit.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let s = sample.image.shape();
    let (c_n, h, w) = (s[0], s[1], s[2]);
    let values = sample.image.values();
    let mut flipped = vec![0.0; values.len()];
    for c in 0..c_n {
        for y in 0..h {
            let row = (c * h + y) * w;
            for x in 0..w {
                flipped[row + x] = values[row + (w - 1 - x)];
            }
        }
    }
    let wf = w as f64;
    let annotations = sample
        .annotations
        .iter()
        .map(|a| Annotation {
            bbox: BBox::new(wf - a.bbox.x2, a.bbox.y1, wf - a.bbox.x1, a.bbox.y2),
            ..a.clone()
        })
        .collect();
    Sample {
        image: Tensor::from_vec(&[c_n, h, w], flipped),
        annotations,
        image_id: sample.image_id.clone(),
    }
}

const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Write samples as `<image_id>.png` files plus one `annotations.jsonl`
/// holding every box.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut ann_file =
        std::io::BufWriter::new(std::fs::File::create(&ann_path).map_err(Error::io(&ann_path))?);
    for sample in samples {
        let img = images::tensor_to_image(&sample.image)?;
        images::save_png(&dir.join(format!("{}.png", sample.image_id)), &img)?;
        for ann in &sample.annotations {
            serde_json::to_writer(&mut ann_file, ann)?;
            ann_file.write_all(b"\n").map_err(Error::io(&ann_path))?;
        }
    }
    ann_file.flush().map_err(Error::io(&ann_path))?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`]: every PNG in the directory
/// (in name order) paired with its annotations. Boxes are clipped to the
/// image on the way in.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = std::fs::File::open(&ann_path).map_err(Error::io(&ann_path))?;
    let mut by_image: std::collections::HashMap<String, Vec<Annotation>> =
        std::collections::HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(Error::io(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(&line)?;
        by_image.entry(ann.image_id.clone()).or_default().push(ann);
    }

    let mut png_paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(Error::io(dir))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    png_paths.sort();
    if png_paths.is_empty() {
        return Err(Error::Dataset(format!("no images found in {}", dir.display())));
    }

    let mut samples = Vec::with_capacity(png_paths.len());
    for path in &png_paths {
        let image_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let img = images::load_image(path)?;
        let mut annotations = by_image.remove(&image_id).unwrap_or_default();
        clip_annotations(&mut annotations, img.width() as f64, img.height() as f64);
        samples.push(Sample { image: images::image_to_tensor(&img), annotations, image_id });
    }
    for (orphan, anns) in &by_image {
        log::warn!("{}: {} annotations reference a missing image; dropped", orphan, anns.len());
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with_boxes() -> Sample {
        let cfg = SyntheticConfig { seed: 5, ..Default::default() };
        generate_synthetic(&cfg, 1).unwrap().remove(0)
    }

    #[test]
    fn flip_is_a_bit_exact_involution() {
        let sample = sample_with_boxes();
        let twice = flip_horizontal(&flip_horizontal(&sample));
        assert_eq!(sample.image.to_vec(), twice.image.to_vec());
        assert_eq!(sample.annotations, twice.annotations);
    }

    #[test]
    fn flip_maps_boxes_across_the_vertical_midline() {
        let mut sample = sample_with_boxes();
        sample.annotations =
            vec![Annotation::new(&sample.image_id, BBox::new(0.0, 0.0, 10.0, 10.0), 0)];
        let flipped = flip_horizontal(&sample);
        assert_eq!(flipped.annotations[0].bbox, BBox::new(54.0, 0.0, 64.0, 10.0));
    }

    #[test]
    fn flip_mirrors_pixels() {
        let sample = sample_with_boxes();
        let flipped = flip_horizontal(&sample);
        let (h, w) = (sample.height(), sample.width());
        let a = sample.image.to_vec();
        let b = flipped.image.to_vec();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(a[(c * h + y) * w + x], b[(c * h + y) * w + (w - 1 - x)]);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = SyntheticConfig { seed: 11, ..Default::default() };
        let samples = generate_synthetic(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.image_id, back.image_id);
            assert_eq!(orig.annotations, back.annotations);
            assert_eq!(orig.image.shape(), back.image.shape());
        }
        // PNG quantizes to 8 bits; a second round trip must be lossless.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &loaded).unwrap();
        let again = load_dataset(dir2.path()).unwrap();
        for (a, b) in loaded.iter().zip(&again) {
            assert_eq!(a.image.to_vec(), b.image.to_vec());
        }
    }

    #[test]
    fn loading_without_annotations_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn training_boxes_drop_ignore_regions() {
        let mut sample = sample_with_boxes();
        let mut ignored = Annotation::new(&sample.image_id, BBox::new(1.0, 1.0, 5.0, 5.0), 0);
        ignored.ignore = true;
        let real_count = sample.annotations.len();
        sample.annotations.push(ignored);
        assert_eq!(sample.training_boxes().len(), real_count);
    }
}
