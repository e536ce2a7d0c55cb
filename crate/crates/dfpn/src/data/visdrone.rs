//! Reader for drone-benchmark style datasets: JPEG frames next to
//! per-image annotation text files, one object per line as
//! `left,top,width,height,score,category,truncation,occlusion`.
//! Category 0 marks ignored regions.

use std::path::Path;

use crate::data::{clip_annotations, images, Sample};
use crate::error::{Error, Result};
use crate::eval::Annotation;
use crate::geometry::BBox;

/// Parse one annotation line. Returns `(bbox, class_id, ignore)`, or
/// `None` (with a warning) for lines that are malformed or describe an
/// empty box.
pub fn parse_line(line: &str) -> Option<(BBox, usize, bool)> {
    let trimmed = line.trim().trim_end_matches(',');
    if trimmed.is_empty() {
        return None;
    }
    let fields: Vec<i64> = match trimmed.split(',').map(|f| f.trim().parse()).collect() {
        Ok(f) => f,
        Err(_) => {
            log::warn!("skipping unparsable annotation line: {line:?}");
            return None;
        }
    };
    if fields.len() < 8 {
        log::warn!("skipping annotation line with {} fields (need 8): {line:?}", fields.len());
        return None;
    }
    let [left, top, width, height] = [fields[0], fields[1], fields[2], fields[3]];
    let category = fields[5];
    if width <= 0 || height <= 0 {
        log::warn!("skipping annotation with non-positive size {width}x{height}: {line:?}");
        return None;
    }
    if category < 0 {
        log::warn!("skipping annotation with negative category {category}: {line:?}");
        return None;
    }
    let bbox = BBox::new(
        left as f64,
        top as f64,
        (left + width) as f64,
        (top + height) as f64,
    );
    Some((bbox, category as usize, category == 0))
}

/// Parse a whole annotation file's text. Bad lines are skipped with a
/// warning; boxes are not yet clipped (the caller knows the image size).
pub fn parse_annotations(text: &str, image_id: &str) -> Vec<Annotation> {
    text.lines()
        .filter_map(parse_line)
        .map(|(bbox, class_id, ignore)| Annotation {
            image_id: image_id.to_string(),
            bbox,
            class_id,
            ignore,
        })
        .collect()
}

/// Load one frame and its annotations. A missing annotation file yields
/// an empty list with a warning rather than an error.
pub fn load_sample(image_path: &Path, annotation_path: &Path) -> Result<Sample> {
    let image_id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Dataset(format!("bad image file name: {}", image_path.display())))?
        .to_string();
    let img = images::load_image(image_path)?;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut annotations = if annotation_path.is_file() {
        let text = std::fs::read_to_string(annotation_path)
            .map_err(Error::io(annotation_path))?;
        parse_annotations(&text, &image_id)
    } else {
        log::warn!("no annotation file at {}; using none", annotation_path.display());
        Vec::new()
    };
    clip_annotations(&mut annotations, w, h);
    Ok(Sample { image: images::image_to_tensor(&img), annotations, image_id })
}

/// Load every image (`.jpg`, `.jpeg`, or `.png`) under `images_dir`,
/// in file-name order, pairing each with `<stem>.txt` in
/// `annotations_dir`.
pub fn load_dir(images_dir: &Path, annotations_dir: &Path) -> Result<Vec<Sample>> {
    let mut image_paths: Vec<_> = std::fs::read_dir(images_dir)
        .map_err(Error::io(images_dir))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(Error::io(images_dir))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map_or(false, |e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        })
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        return Err(Error::Dataset(format!("no images found in {}", images_dir.display())));
    }
    image_paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            load_sample(p, &annotations_dir.join(format!("{stem}.txt")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn parses_the_standard_line_layout() {
        let (bbox, class_id, ignore) = parse_line("100,200,50,40,1,4,0,0").unwrap();
        assert_eq!(bbox, BBox::new(100.0, 200.0, 150.0, 240.0));
        assert_eq!(class_id, 4);
        assert!(!ignore);
    }

    #[test]
    fn category_zero_is_an_ignore_region() {
        let (_, class_id, ignore) = parse_line("10,10,30,30,0,0,0,0").unwrap();
        assert_eq!(class_id, 0);
        assert!(ignore);
    }

    #[test]
    fn bad_lines_are_skipped() {
        assert!(parse_line("100,200,0,40,1,4,0,0").is_none()); // zero width
        assert!(parse_line("100,200,50,-3,1,4,0,0").is_none()); // negative height
        assert!(parse_line("not,an,annotation").is_none());
        assert!(parse_line("1,2,3").is_none()); // too few fields
        assert!(parse_line("").is_none());
    }

    #[test]
    fn trailing_commas_are_tolerated() {
        let (bbox, class_id, _) = parse_line("5,6,7,8,1,2,0,0,").unwrap();
        assert_eq!(bbox, BBox::new(5.0, 6.0, 12.0, 14.0));
        assert_eq!(class_id, 2);
    }

    #[test]
    fn file_text_parses_line_by_line() {
        let text = "10,10,5,5,1,1,0,0\ngarbage\n20,20,4,4,1,0,0,0\n";
        let anns = parse_annotations(text, "frame_1");
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].class_id, 1);
        assert!(!anns[0].ignore);
        assert!(anns[1].ignore);
        assert!(anns.iter().all(|a| a.image_id == "frame_1"));
    }

    fn write_jpeg(path: &Path, w: u32, h: u32) {
        let mut img = RgbImage::new(w, h);
        for (x, y, px) in img.enumerate_pixels_mut() {
            *px = Rgb([(x * 8) as u8, (y * 8) as u8, 128]);
        }
        img.save_with_format(path, image::ImageFormat::Jpeg).unwrap();
    }

    #[test]
    fn loads_jpeg_with_annotations_clipped_to_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("frame_0001.jpg");
        write_jpeg(&img_path, 20, 20);
        let ann_path = dir.path().join("frame_0001.txt");
        std::fs::write(&ann_path, "2,2,5,5,1,3,0,0\n15,15,10,10,1,2,0,0\n30,30,5,5,1,2,0,0\n")
            .unwrap();
        let sample = load_sample(&img_path, &ann_path).unwrap();
        assert_eq!(sample.image_id, "frame_0001");
        assert_eq!(sample.image.shape(), &[3, 20, 20]);
        // in-bounds kept, overhanging clipped, fully outside dropped
        assert_eq!(sample.annotations.len(), 2);
        assert_eq!(sample.annotations[0].bbox, BBox::new(2.0, 2.0, 7.0, 7.0));
        assert_eq!(sample.annotations[1].bbox, BBox::new(15.0, 15.0, 20.0, 20.0));
    }

    #[test]
    fn missing_annotation_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("frame_0002.jpg");
        write_jpeg(&img_path, 16, 16);
        let sample = load_sample(&img_path, &dir.path().join("frame_0002.txt")).unwrap();
        assert!(sample.annotations.is_empty());
    }

    #[test]
    fn directory_loading_pairs_images_with_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let anns = dir.path().join("annotations");
        std::fs::create_dir_all(&images).unwrap();
        std::fs::create_dir_all(&anns).unwrap();
        for name in ["b", "a"] {
            write_jpeg(&images.join(format!("{name}.jpg")), 16, 16);
        }
        std::fs::write(anns.join("a.txt"), "1,1,4,4,1,1,0,0\n").unwrap();
        let samples = load_dir(&images, &anns).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].image_id, "a"); // sorted order
        assert_eq!(samples[0].annotations.len(), 1);
        assert!(samples[1].annotations.is_empty());
    }
}
