use super::Class;
use crate::features::{ImageBuffer, Modality};
use crate::geometry::Point2;

pub const PATCH_SIZE: usize = 32;
/// Values per patch: `32 x 32 x 3`.
pub const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE * 3;

/// A labelled training patch, row-major with interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub pixels: Vec<f32>,
    pub class: Class,
    pub modality: Modality,
    pub image_id: String,
    pub center: Point2,
}

impl PatchSample {
    pub fn extract(
        img: &ImageBuffer,
        center: Point2,
        class: Class,
        modality: Modality,
        image_id: &str,
    ) -> Self {
        Self {
            pixels: extract_patch(img, center),
            class,
            modality,
            image_id: image_id.to_string(),
            center,
        }
    }

    pub fn pixels_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| f64::from(v)).collect()
    }
}

/// The 32x32 RGB window whose rows/columns `c-16 ..= c+15` surround the
/// rounded centre `c`, replicating edge pixels outside the image. Gray
/// images are replicated to three channels.
pub fn extract_patch(img: &ImageBuffer, center: Point2) -> Vec<f32> {
    let half = (PATCH_SIZE / 2) as i64;
    let (cx, cy) = (center.x.round() as i64, center.y.round() as i64);
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut out = Vec::with_capacity(PATCH_LEN);
    for dy in -half..half {
        let y = (cy + dy).clamp(0, h - 1) as usize;
        for dx in -half..half {
            let x = (cx + dx).clamp(0, w - 1) as usize;
            for c in 0..3 {
                let ch = if img.channels() == 3 { c } else { 0 };
                out.push(img.pixel(x, y, ch));
            }
        }
    }
    out
}
