//! Tiled slide packages: a directory holding `manifest.json` and lossless
//! PNG tiles named `L{level}_r{row}_c{col}.png`, plus mask and overlay
//! persistence and patch sampling.

mod mask;
mod overlay;
mod package;
mod sampling;

use std::path::Path;

pub use mask::{read_mask, write_mask, TissueMask, TUMOR_LABEL};
pub use overlay::{
    contour, render_overlay, write_overlay, OverlayRegion, CONTOUR_WIDTH, CRIBRIFORM_COLOR, GRADE3_COLOR,
    GRADE4_COLOR, NUCLEOLI_COLOR, TUMOR_COLOR,
};
pub use package::{
    build_pyramid, downsample_2x, open_slide, tile_name, write_slide, LevelInfo, Manifest, SlidePackage,
    DEFAULT_TILE_SIZE, FORMAT_VERSION, MANIFEST_FILE,
};
pub use sampling::{sample_patch_origins, sample_patches, to_mask_pixel, Patch, PatchPixels};

use crate::colorspace::{GrayImage, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("invalid package: {0}")]
    InvalidPackage(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("invalid package: missing tiles: {}", .0.join(", "))]
    MissingTiles(Vec<String>),
    #[error("region {w}x{h} at ({x},{y}) outside level {level} ({width}x{height})")]
    OutOfBounds { level: u32, x: u32, y: u32, w: u32, h: u32, width: u32, height: u32 },
    #[error("no tumor region")]
    NoTumorRegion,
    #[error("label {0} does not fit in 8 bits")]
    LabelOutOfRange(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> SlideError {
    SlideError::Image { path: path.display().to_string(), message: e.to_string() }
}

pub fn save_png_rgb(img: &RgbImage, path: &Path) -> Result<(), SlideError> {
    let raw: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    image::save_buffer_with_format(path, &raw, img.width, img.height, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

pub fn load_png_rgb(path: &Path) -> Result<RgbImage, SlideError> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.into_rgb8();
    let (width, height) = img.dimensions();
    let pixels = img.into_raw().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(RgbImage { width, height, pixels })
}

pub fn save_png_gray(width: u32, height: u32, data: &[u8], path: &Path) -> Result<(), SlideError> {
    image::save_buffer_with_format(path, data, width, height, image::ExtendedColorType::L8, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

pub fn load_png_gray(path: &Path) -> Result<(u32, u32, Vec<u8>), SlideError> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    if img.color() != image::ColorType::L8 {
        return Err(image_error(path, format!("expected 8-bit greyscale, found {:?}", img.color())));
    }
    let img = img.into_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw()))
}

pub fn save_gray_image(img: &GrayImage, path: &Path) -> Result<(), SlideError> {
    save_png_gray(img.width, img.height, &img.data, path)
}
