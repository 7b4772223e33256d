//! Raster types and pixel-space conversions: RGB ↔ optical density and
//! RGB → CIE L*a*b*.

use serde::{Deserialize, Serialize};

/// Largest optical density an 8-bit channel can produce: `ln 256`.
pub const OD_MAX: f64 = 5.545_177_444_479_562;

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        Self { width, height, pixels: vec![color; width as usize * height as usize] }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = c;
    }
}

/// 8-bit single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; width as usize * height as usize] }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    /// Intensity negative, `255 − v` per pixel.
    pub fn inverted(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 255 - v).collect(),
        }
    }
}

/// Per-pixel optical density 3-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<[f64; 3]>,
}

impl OdImage {
    pub fn from_values(width: u32, height: u32, values: Vec<[f64; 3]>) -> Self {
        assert_eq!(values.len(), width as usize * height as usize, "OD buffer size");
        Self { width, height, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// CIE L*a*b* raster.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<[f64; 3]>,
}

/// `O = −ln((I + 1) / 256)` for one channel value.
#[inline]
pub fn channel_to_od(i: u8) -> f64 {
    -((i as f64 + 1.0) / 256.0).ln()
}

/// Inverse of [`channel_to_od`], rounded and clamped to `[0, 255]`.
#[inline]
pub fn od_to_channel(o: f64) -> u8 {
    (256.0 * (-o).exp() - 1.0).round().clamp(0.0, 255.0) as u8
}

/// Lookup table of [`channel_to_od`] over all 256 channel values.
pub fn od_table() -> [f64; 256] {
    let mut t = [0.0; 256];
    for (i, v) in t.iter_mut().enumerate() {
        *v = channel_to_od(i as u8);
    }
    t
}

pub fn rgb_to_od(image: &RgbImage) -> OdImage {
    let table = od_table();
    OdImage {
        width: image.width,
        height: image.height,
        values: image
            .pixels
            .iter()
            .map(|p| [table[p[0] as usize], table[p[1] as usize], table[p[2] as usize]])
            .collect(),
    }
}

pub fn od_to_rgb(od: &OdImage) -> RgbImage {
    RgbImage {
        width: od.width,
        height: od.height,
        pixels: od
            .values
            .iter()
            .map(|o| [od_to_channel(o[0]), od_to_channel(o[1]), od_to_channel(o[2])])
            .collect(),
    }
}

// D65 reference white, 2° observer
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

#[inline]
fn srgb_to_linear(c: u8) -> f64 {
    let v = c as f64 / 255.0;
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (D65) pixel to L*a*b*.
pub fn rgb_pixel_to_lab(p: [u8; 3]) -> [f64; 3] {
    let r = srgb_to_linear(p[0]);
    let g = srgb_to_linear(p[1]);
    let b = srgb_to_linear(p[2]);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / WHITE[0]);
    let fy = lab_f(y / WHITE[1]);
    let fz = lab_f(z / WHITE[2]);
    let l = (116.0 * fy - 16.0).clamp(0.0, 100.0);
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn rgb_to_lab(image: &RgbImage) -> LabImage {
    LabImage {
        width: image.width,
        height: image.height,
        values: image.pixels.iter().map(|&p| rgb_pixel_to_lab(p)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn od_endpoints() {
        assert_eq!(channel_to_od(255), 0.0);
        assert!((channel_to_od(0) - 5.545_177_444_479_562).abs() < 1e-12);
        assert!((channel_to_od(0) - OD_MAX).abs() < 1e-15);
        assert!((channel_to_od(127) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn od_inverse_cases() {
        assert_eq!(od_to_channel(0.0), 255);
        assert_eq!(od_to_channel(std::f64::consts::LN_2), 127);
    }

    #[test]
    fn od_round_trip_is_exhaustive_identity() {
        for i in 0..=255u8 {
            assert_eq!(od_to_channel(channel_to_od(i)), i);
        }
        let img = RgbImage {
            width: 256,
            height: 1,
            pixels: (0..=255u8).map(|i| [i, 255 - i, i / 2]).collect(),
        };
        assert_eq!(od_to_rgb(&rgb_to_od(&img)), img);
    }

    #[test]
    fn od_strictly_decreasing() {
        let t = od_table();
        assert!(t.windows(2).all(|w| w[1] < w[0]));
        assert!(t.iter().all(|&v| (0.0..=OD_MAX).contains(&v)));
    }

    #[test]
    fn lab_reference_points() {
        let white = rgb_pixel_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-3);
        assert!(white[1].abs() < 0.5 && white[2].abs() < 0.5);
        assert_eq!(rgb_pixel_to_lab([0, 0, 0])[0], 0.0);
        let red = rgb_pixel_to_lab([255, 0, 0]);
        let green = rgb_pixel_to_lab([0, 255, 0]);
        assert!(red[1] > 0.0 && green[1] < 0.0);
    }

    #[test]
    fn grey_ramp_is_neutral_and_monotone() {
        let mut prev = -1.0;
        for v in 0..=255u8 {
            let lab = rgb_pixel_to_lab([v, v, v]);
            assert!(lab[0] > prev);
            prev = lab[0];
            assert!(lab[1].abs() < 0.5 && lab[2].abs() < 0.5, "{v}: {lab:?}");
        }
    }

    #[test]
    fn conversions_are_pixel_local() {
        let img = RgbImage {
            width: 3,
            height: 1,
            pixels: vec![[10, 200, 30], [255, 0, 128], [90, 90, 90]],
        };
        let mut swapped = img.clone();
        swapped.pixels.swap(0, 2);
        let a = rgb_to_lab(&img);
        let b = rgb_to_lab(&swapped);
        assert_eq!(a.values[0], b.values[2]);
        assert_eq!(a.values[2], b.values[0]);
        let oa = rgb_to_od(&img);
        let ob = rgb_to_od(&swapped);
        assert_eq!(oa.values[1], ob.values[1]);
        assert_eq!(oa.values[0], ob.values[2]);
    }
}
