use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{SlideError, SlidePackage, TissueMask, TUMOR_LABEL};
use crate::colorspace::{GrayImage, RgbImage};

#[derive(Debug, Clone, PartialEq)]
pub enum PatchPixels {
    Rgb(RgbImage),
    Gray(GrayImage),
}

/// Square window cut from one level of a slide.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub slide_id: String,
    pub level: u32,
    /// Top-left corner in level pixels.
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub pixels: PatchPixels,
}

impl Patch {
    /// Centre in level pixels, `(x + size/2, y + size/2)`.
    pub fn center(&self) -> (u32, u32) {
        (self.x + self.size / 2, self.y + self.size / 2)
    }
}

/// Maps a level-pixel coordinate to the mask pixel containing it.
pub fn to_mask_pixel(slide: &SlidePackage, mask: &TissueMask, level: u32, x: u32, y: u32) -> Result<(u32, u32), SlideError> {
    let ds_p = slide.level(level)?.downsample as u64;
    let ds_m = slide.level(mask.level)?.downsample as u64;
    Ok(((x as u64 * ds_p / ds_m) as u32, (y as u64 * ds_p / ds_m) as u32))
}

/// Top-left corners of `n` patches whose centres fall on tumor-labeled mask
/// pixels. Mask pixels are drawn uniformly among those that can host a
/// centre, then the centre uniformly within that pixel's footprint;
/// draws are with replacement.
pub fn sample_patch_origins(
    slide: &SlidePackage,
    mask: &TissueMask,
    n: usize,
    size: u32,
    level: u32,
    seed: u64,
) -> Result<Vec<(u32, u32)>, SlideError> {
    let info = slide.level(level)?;
    let minfo = slide.level(mask.level)?;
    if mask.width != minfo.width || mask.height != minfo.height {
        return Err(SlideError::ManifestMismatch(format!(
            "mask is {}x{}, level {} is {}x{}",
            mask.width, mask.height, mask.level, minfo.width, minfo.height
        )));
    }
    if minfo.downsample < info.downsample {
        return Err(SlideError::InvalidArgument(format!(
            "mask level {} is finer than patch level {level}",
            mask.level
        )));
    }
    if size == 0 || size > info.width || size > info.height {
        return Err(SlideError::InvalidArgument(format!(
            "patch size {size} does not fit level {level} ({}x{})",
            info.width, info.height
        )));
    }
    let r = minfo.downsample / info.downsample;
    let half = size / 2;
    let range = |m: u32, extent: u32| -> Option<(u32, u32)> {
        let lo = (m * r).max(half);
        let hi = (m * r + r - 1).min(extent - size + half);
        (lo <= hi).then_some((lo, hi))
    };
    let mut candidates = Vec::new();
    for my in 0..mask.height {
        let Some(ry) = range(my, info.height) else { continue };
        for mx in 0..mask.width {
            if mask.get(mx, my) != TUMOR_LABEL {
                continue;
            }
            if let Some(rx) = range(mx, info.width) {
                candidates.push((rx, ry));
            }
        }
    }
    if candidates.is_empty() {
        return Err(SlideError::NoTumorRegion);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (rx, ry) = candidates[rng.gen_range(0..candidates.len())];
            let cx = rng.gen_range(rx.0..=rx.1);
            let cy = rng.gen_range(ry.0..=ry.1);
            (cx - half, cy - half)
        })
        .collect())
}

/// RGB patches at the origins drawn by [`sample_patch_origins`].
pub fn sample_patches(
    slide: &SlidePackage,
    mask: &TissueMask,
    n: usize,
    size: u32,
    level: u32,
    seed: u64,
) -> Result<Vec<Patch>, SlideError> {
    let origins = sample_patch_origins(slide, mask, n, size, level, seed)?;
    let id = slide.id();
    origins
        .par_iter()
        .map(|&(x, y)| {
            Ok(Patch {
                slide_id: id.clone(),
                level,
                x,
                y,
                size,
                pixels: PatchPixels::Rgb(slide.read_region(level, x, y, size, size)?),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_io::{build_pyramid, write_slide};

    fn slide(dir: &std::path::Path) -> SlidePackage {
        let img = RgbImage {
            width: 64,
            height: 64,
            pixels: (0..64 * 64).map(|i| [(i % 251) as u8, (i / 64) as u8, 7]).collect(),
        };
        write_slide(dir.join("s"), &build_pyramid(img, 3), 0.5, 32, None).unwrap()
    }

    fn mask_with(f: impl Fn(u32, u32) -> bool) -> TissueMask {
        let labels = (0..16 * 16).map(|i| if f(i % 16, i / 16) { 1 } else { 2 }).collect();
        TissueMask::new(2, 16, 16, labels).unwrap()
    }

    #[test]
    fn centres_land_on_tumor() {
        let dir = tempfile::tempdir().unwrap();
        let s = slide(dir.path());
        let m = mask_with(|x, _| x < 8);
        let patches = sample_patches(&s, &m, 1000, 8, 0, 3).unwrap();
        assert_eq!(patches.len(), 1000);
        for p in &patches {
            let (cx, cy) = p.center();
            let (mx, my) = to_mask_pixel(&s, &m, 0, cx, cy).unwrap();
            assert_eq!(m.get(mx, my), TUMOR_LABEL);
            assert!(p.x + 8 <= 64 && p.y + 8 <= 64);
            let PatchPixels::Rgb(img) = &p.pixels else { panic!() };
            assert_eq!(img, &s.read_region(0, p.x, p.y, 8, 8).unwrap());
        }
    }

    #[test]
    fn single_pixel_mask_forces_location() {
        let dir = tempfile::tempdir().unwrap();
        let s = slide(dir.path());
        let m = mask_with(|x, y| x == 5 && y == 9);
        for (x, y) in sample_patch_origins(&s, &m, 50, 8, 1, 4).unwrap() {
            let (mx, my) = to_mask_pixel(&s, &m, 1, x + 4, y + 4).unwrap();
            assert_eq!((mx, my), (5, 9));
        }
    }

    #[test]
    fn empty_mask_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let s = slide(dir.path());
        assert!(matches!(
            sample_patch_origins(&s, &mask_with(|_, _| false), 5, 8, 0, 1),
            Err(SlideError::NoTumorRegion)
        ));
        let m = mask_with(|x, y| (x + y) % 3 == 0);
        assert_eq!(
            sample_patch_origins(&s, &m, 100, 16, 0, 9).unwrap(),
            sample_patch_origins(&s, &m, 100, 16, 0, 9).unwrap()
        );
    }
}
