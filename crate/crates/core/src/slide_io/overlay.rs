use std::path::Path;

use super::{save_png_rgb, SlideError, SlidePackage};
use crate::colorspace::RgbImage;
use crate::regions::BitMask;

/// Contour colour for grade-3 regions.
pub const GRADE3_COLOR: [u8; 3] = [0, 200, 0];
/// Contour colour for grade-4-and-above regions.
pub const GRADE4_COLOR: [u8; 3] = [0, 0, 255];
/// Contour colour for cribriform detections.
pub const CRIBRIFORM_COLOR: [u8; 3] = [255, 200, 0];

/// Contour colour for the tumor mask.
pub const TUMOR_COLOR: [u8; 3] = [220, 0, 220];
/// Fill colour for nuclei with prominent nucleoli.
pub const NUCLEOLI_COLOR: [u8; 3] = [255, 0, 0];

pub const CONTOUR_WIDTH: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayRegion {
    pub mask: BitMask,
    pub color: [u8; 3],
}

/// Erosion by a `(2r+1)²` square; pixels outside the image count as unset.
fn erode_square(mask: &BitMask, r: u32) -> BitMask {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let r = r as i64;
    let mut horiz = BitMask::new(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            let all = (x - r..=x + r).all(|xx| mask.get_signed(xx, y));
            horiz.set(x as u32, y as u32, all);
        }
    }
    let mut out = BitMask::new(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            let all = (y - r..=y + r).all(|yy| horiz.get_signed(x, yy));
            out.set(x as u32, y as u32, all);
        }
    }
    out
}

/// Inner band of a region: its pixels lying within `CONTOUR_WIDTH`
/// (Chebyshev) of a pixel outside it.
pub fn contour(mask: &BitMask) -> BitMask {
    let inner = erode_square(mask, CONTOUR_WIDTH);
    BitMask {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().zip(&inner.data).map(|(&m, &i)| m && !i).collect(),
    }
}

/// Draws region contours over `base`, later regions on top.
pub fn render_overlay(base: &RgbImage, regions: &[OverlayRegion]) -> Result<RgbImage, SlideError> {
    let mut out = base.clone();
    for region in regions {
        if region.mask.width != base.width || region.mask.height != base.height {
            return Err(SlideError::InvalidArgument(format!(
                "overlay region is {}x{}, image is {}x{}",
                region.mask.width, region.mask.height, base.width, base.height
            )));
        }
        for (px, &c) in out.pixels.iter_mut().zip(&contour(&region.mask).data) {
            if c {
                *px = region.color;
            }
        }
    }
    Ok(out)
}

/// Renders a level with region contours and saves it as PNG.
pub fn write_overlay(
    slide: &SlidePackage,
    level: u32,
    regions: &[OverlayRegion],
    path: impl AsRef<Path>,
) -> Result<RgbImage, SlideError> {
    let img = render_overlay(&slide.read_level(level)?, regions)?;
    save_png_rgb(&img, path.as_ref())?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_io::{load_png_rgb, write_slide};

    #[test]
    fn rectangle_boundary_is_recoloured() {
        let base = RgbImage::filled(30, 20, [200, 200, 200]);
        let rect = BitMask::from_fn(30, 20, |x, y| (5..=15).contains(&x) && (4..=12).contains(&y));
        let out = render_overlay(&base, &[OverlayRegion { mask: rect, color: GRADE4_COLOR }]).unwrap();
        for y in 0..20 {
            for x in 0..30 {
                let inside = (5..=15).contains(&x) && (4..=12).contains(&y);
                let band = inside && (x < 7 || x > 13 || y < 6 || y > 10);
                let expect = if band { GRADE4_COLOR } else { [200, 200, 200] };
                assert_eq!(out.get(x, y), expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn no_regions_is_plain_render() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::filled(40, 40, [9, 80, 200]);
        let slide = write_slide(dir.path().join("s"), &[img.clone()], 0.5, 16, None).unwrap();
        let p = dir.path().join("o.png");
        write_overlay(&slide, 0, &[], &p).unwrap();
        assert_eq!(load_png_rgb(&p).unwrap(), img);
    }
}
