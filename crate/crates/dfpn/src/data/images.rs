//! Conversions between the f64 CHW tensors the model consumes and 8-bit
//! RGB images on disk, plus a small box-outline renderer.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Fixed per-class outline colors, cycled for class ids past the end.
pub const CLASS_PALETTE: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 255, 64],
    [80, 120, 255],
    [255, 220, 40],
    [255, 64, 255],
    [64, 255, 255],
];

pub fn class_color(class_id: usize) -> Rgb<u8> {
    Rgb(CLASS_PALETTE[class_id % CLASS_PALETTE.len()])
}

/// 8-bit RGB → 3×H×W tensor with values in [0, 1].
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut values = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            values[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], values)
}

/// 3×H×W tensor → 8-bit RGB, clamping to [0, 1] and rounding.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected a 3xHxW image tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let values = t.values();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (values[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Draw a 2-pixel box outline, clipped to the image.
pub fn draw_box(img: &mut RgbImage, bbox: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x1 = bbox.x1.round() as i64;
    let y1 = bbox.y1.round() as i64;
    let x2 = (bbox.x2.round() as i64).max(x1 + 1);
    let y2 = (bbox.y2.round() as i64).max(y1 + 1);
    let mut paint = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for t in 0..2i64 {
        for x in x1..x2 {
            paint(x, y1 + t);
            paint(x, y2 - 1 - t);
        }
        for y in y1..y2 {
            paint(x1 + t, y);
            paint(x2 - 1 - t, y);
        }
    }
}

/// Render an image tensor with class-colored box outlines and write it as
/// a PNG (lossless, so repeated runs produce identical bytes).
pub fn annotate_and_save(
    path: &Path,
    image: &Tensor,
    boxes: &[(BBox, usize)],
) -> Result<()> {
    let mut img = tensor_to_image(image)?;
    for (bbox, class_id) in boxes {
        draw_box(&mut img, bbox, class_color(*class_id));
    }
    save_png(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_tensor_round_trip_is_exact() {
        let mut img = RgbImage::new(4, 3);
        for (i, px) in img.pixels_mut().enumerate() {
            *px = Rgb([(i * 7 % 256) as u8, (i * 13 % 256) as u8, (255 - i * 3 % 256) as u8]);
        }
        let t = image_to_tensor(&img);
        assert_eq!(t.shape(), &[3, 3, 4]);
        let back = tensor_to_image(&t).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn tensor_values_are_normalized() {
        let mut img = RgbImage::new(1, 1);
        img.put_pixel(0, 0, Rgb([255, 0, 51]));
        let t = image_to_tensor(&img);
        let v = t.to_vec();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn draw_box_stays_in_bounds_and_marks_corners() {
        let mut img = RgbImage::new(20, 20);
        draw_box(&mut img, &BBox::new(-5.0, 2.0, 10.0, 30.0), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(0, 2), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(9, 2), Rgb([255, 0, 0]));
        // interior untouched
        assert_eq!(*img.get_pixel(5, 10), Rgb([0, 0, 0]));
    }

    #[test]
    fn annotated_png_round_trips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotated.png");
        let image = Tensor::full(&[3, 16, 16], 0.5);
        annotate_and_save(&path, &image, &[(BBox::new(2.0, 2.0, 10.0, 10.0), 1)]).unwrap();
        let a = load_image(&path).unwrap();
        annotate_and_save(&path, &image, &[(BBox::new(2.0, 2.0, 10.0, 10.0), 1)]).unwrap();
        let b = load_image(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(*a.get_pixel(2, 2), class_color(1));
    }
}
