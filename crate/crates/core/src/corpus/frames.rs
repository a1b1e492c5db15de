//! Fallback frame-feature provider: a frame becomes its 32x32 grayscale
//! thumbnail, flattened row-major and scaled to [0, 1].

use std::path::Path;

use image::imageops::FilterType;
use image::DynamicImage;

pub const PATCH_SIDE: u32 = 32;
pub const RAW_PATCH_DIM: usize = (PATCH_SIDE * PATCH_SIDE) as usize;

pub fn raw_patch_features(frame: &DynamicImage) -> Vec<f32> {
    frame
        .resize_exact(PATCH_SIDE, PATCH_SIDE, FilterType::Triangle)
        .to_luma8()
        .pixels()
        .map(|p| p.0[0] as f32 / 255.0)
        .collect()
}

pub fn raw_patch_from_file(path: &Path) -> image::ImageResult<Vec<f32>> {
    Ok(raw_patch_features(&image::open(path)?))
}
