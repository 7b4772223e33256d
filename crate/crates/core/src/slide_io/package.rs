use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::{load_png_rgb, save_png_rgb, SlideError};
use crate::colorspace::RgbImage;
use crate::stain::StainRecord;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub level: u32,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub downsample: u32,
}

impl LevelInfo {
    pub fn tiles_x(&self) -> u32 {
        self.width.div_ceil(self.tile_size)
    }

    pub fn tiles_y(&self) -> u32 {
        self.height.div_ceil(self.tile_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub width: u32,
    pub height: u32,
    pub mpp: f64,
    pub tile_size: u32,
    pub levels: Vec<LevelInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stain_matrix: Option<StainRecord>,
}

impl Manifest {
    fn validate(&self) -> Result<(), SlideError> {
        let mismatch = |m: String| Err(SlideError::ManifestMismatch(m));
        if self.format_version != FORMAT_VERSION {
            return Err(SlideError::InvalidPackage(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.width == 0 || self.height == 0 || self.tile_size == 0 {
            return mismatch("width, height and tile_size must be positive".into());
        }
        if !(self.mpp > 0.0) || !self.mpp.is_finite() {
            return mismatch(format!("mpp must be positive, got {}", self.mpp));
        }
        if self.levels.is_empty() {
            return mismatch("no levels".into());
        }
        let mut prev = 0;
        for (i, l) in self.levels.iter().enumerate() {
            if l.level as usize != i {
                return mismatch(format!("level {} listed at position {i}", l.level));
            }
            if !l.downsample.is_power_of_two() || l.downsample <= prev {
                return mismatch(format!("level {i}: downsample {} not an increasing power of 2", l.downsample));
            }
            if i == 0 && l.downsample != 1 {
                return mismatch("level 0 must have downsample 1".into());
            }
            prev = l.downsample;
            let (w, h) = (self.width.div_ceil(l.downsample), self.height.div_ceil(l.downsample));
            if l.width != w || l.height != h {
                return mismatch(format!(
                    "level {i}: {}x{} but downsample {} implies {w}x{h}",
                    l.width, l.height, l.downsample
                ));
            }
            if l.tile_size == 0 {
                return mismatch(format!("level {i}: tile_size 0"));
            }
        }
        Ok(())
    }
}

/// Tiled multi-level slide on disk. Tiles are decoded on first use and
/// cached; reads are safe to share across threads.
#[derive(Debug, Clone)]
pub struct SlidePackage {
    root: PathBuf,
    manifest: Manifest,
    tiles: Vec<Vec<Arc<OnceLock<RgbImage>>>>,
}

pub fn tile_name(level: u32, row: u32, col: u32) -> String {
    format!("L{level}_r{row}_c{col}.png")
}

fn empty_cache(manifest: &Manifest) -> Vec<Vec<Arc<OnceLock<RgbImage>>>> {
    manifest
        .levels
        .iter()
        .map(|l| (0..l.tiles_x() * l.tiles_y()).map(|_| Arc::new(OnceLock::new())).collect())
        .collect()
}

/// Opens and validates a package; every missing tile is reported.
pub fn open_slide(path: impl AsRef<Path>) -> Result<SlidePackage, SlideError> {
    let root = path.as_ref().to_path_buf();
    let text = fs::read_to_string(root.join(MANIFEST_FILE)).map_err(|e| {
        SlideError::InvalidPackage(format!("{}: {e}", root.join(MANIFEST_FILE).display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| SlideError::InvalidPackage(format!("{}: {e}", root.display())))?;
    manifest.validate()?;
    let mut missing = Vec::new();
    for l in &manifest.levels {
        for row in 0..l.tiles_y() {
            for col in 0..l.tiles_x() {
                let name = tile_name(l.level, row, col);
                if !root.join(&name).is_file() {
                    missing.push(name);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(SlideError::MissingTiles(missing));
    }
    let tiles = empty_cache(&manifest);
    Ok(SlidePackage { root, manifest, tiles })
}

/// Halves an image with 2×2 box averaging, rounding to nearest; odd edges
/// average the pixels that exist.
pub fn downsample_2x(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width.div_ceil(2), img.height.div_ceil(2));
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (sx, sy) = (2 * x + dx, 2 * y + dy);
                if sx < img.width && sy < img.height {
                    let p = img.get(sx, sy);
                    for k in 0..3 {
                        sum[k] += p[k] as u32;
                    }
                    n += 1;
                }
            }
            out.set(x, y, sum.map(|s| ((s + n / 2) / n) as u8));
        }
    }
    out
}

/// Level 0 followed by `n_levels − 1` successive 2× reductions.
pub fn build_pyramid(level0: RgbImage, n_levels: usize) -> Vec<RgbImage> {
    let mut levels = vec![level0];
    while levels.len() < n_levels.max(1) {
        let next = downsample_2x(levels.last().expect("non-empty"));
        levels.push(next);
    }
    levels
}

/// Writes a package from pre-rendered levels (level 0 first).
pub fn write_slide(
    root: impl AsRef<Path>,
    levels: &[RgbImage],
    mpp: f64,
    tile_size: u32,
    label: Option<String>,
) -> Result<SlidePackage, SlideError> {
    let root = root.as_ref().to_path_buf();
    let first = levels.first().ok_or_else(|| SlideError::InvalidArgument("no levels".into()))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        width: first.width,
        height: first.height,
        mpp,
        tile_size,
        levels: levels
            .iter()
            .enumerate()
            .map(|(i, img)| LevelInfo {
                level: i as u32,
                width: img.width,
                height: img.height,
                tile_size,
                downsample: 1 << i,
            })
            .collect(),
        label,
        stain_matrix: None,
    };
    manifest.validate()?;
    fs::create_dir_all(&root)?;
    for (info, img) in manifest.levels.iter().zip(levels) {
        for row in 0..info.tiles_y() {
            for col in 0..info.tiles_x() {
                let tile = crop(img, col * tile_size, row * tile_size, tile_size, tile_size);
                save_png_rgb(&tile, &root.join(tile_name(info.level, row, col)))?;
            }
        }
    }
    let tiles = empty_cache(&manifest);
    let slide = SlidePackage { root, manifest, tiles };
    slide.write_manifest()?;
    Ok(slide)
}

/// Copies the part of a `w × h` window at `(x, y)` that lies inside `img`.
fn crop(img: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
    let w = w.min(img.width - x);
    let h = h.min(img.height - y);
    let mut out = RgbImage::new(w, h);
    for row in 0..h {
        let src = (y + row) as usize * img.width as usize + x as usize;
        let dst = row as usize * w as usize;
        out.pixels[dst..dst + w as usize].copy_from_slice(&img.pixels[src..src + w as usize]);
    }
    out
}

impl SlidePackage {
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Directory name of the package.
    pub fn id(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.root.display().to_string())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn width(&self) -> u32 {
        self.manifest.width
    }

    pub fn height(&self) -> u32 {
        self.manifest.height
    }

    pub fn mpp(&self) -> f64 {
        self.manifest.mpp
    }

    pub fn label(&self) -> Option<&str> {
        self.manifest.label.as_deref()
    }

    pub fn stain_record(&self) -> Option<&StainRecord> {
        self.manifest.stain_matrix.as_ref()
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.manifest.levels
    }

    pub fn lowest_level(&self) -> u32 {
        (self.manifest.levels.len() - 1) as u32
    }

    pub fn level(&self, level: u32) -> Result<&LevelInfo, SlideError> {
        self.manifest
            .levels
            .get(level as usize)
            .ok_or_else(|| SlideError::InvalidArgument(format!("no level {level}")))
    }

    /// Microns per pixel at `level`.
    pub fn level_mpp(&self, level: u32) -> Result<f64, SlideError> {
        Ok(self.manifest.mpp * self.level(level)?.downsample as f64)
    }

    /// Converts a physical length to pixels at `level`.
    pub fn microns_to_pixels(&self, microns: f64, level: u32) -> Result<f64, SlideError> {
        Ok(microns / self.level_mpp(level)?)
    }

    /// Stores a stain record in the manifest and rewrites it.
    pub fn set_stain_record(&mut self, record: StainRecord) -> Result<(), SlideError> {
        self.manifest.stain_matrix = Some(record);
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<(), SlideError> {
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| SlideError::InvalidPackage(e.to_string()))?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    fn tile(&self, level: u32, row: u32, col: u32) -> Result<&RgbImage, SlideError> {
        let info = self.level(level)?;
        let cell = &self.tiles[level as usize][(row * info.tiles_x() + col) as usize];
        if let Some(t) = cell.get() {
            return Ok(t);
        }
        let name = tile_name(level, row, col);
        let img = load_png_rgb(&self.root.join(&name))?;
        let ew = info.tile_size.min(info.width - col * info.tile_size);
        let eh = info.tile_size.min(info.height - row * info.tile_size);
        if img.width != ew || img.height != eh {
            return Err(SlideError::ManifestMismatch(format!(
                "tile {name} is {}x{}, expected {ew}x{eh}",
                img.width, img.height
            )));
        }
        Ok(cell.get_or_init(|| img))
    }

    /// Pixel-exact mosaic of the tiles covering a region at `level`.
    pub fn read_region(&self, level: u32, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage, SlideError> {
        let info = self.level(level)?.clone();
        if w == 0
            || h == 0
            || x as u64 + w as u64 > info.width as u64
            || y as u64 + h as u64 > info.height as u64
        {
            return Err(SlideError::OutOfBounds { level, x, y, w, h, width: info.width, height: info.height });
        }
        let ts = info.tile_size;
        let mut out = RgbImage::new(w, h);
        for row in y / ts..=(y + h - 1) / ts {
            for col in x / ts..=(x + w - 1) / ts {
                let tile = self.tile(level, row, col)?;
                let (tx0, ty0) = (col * ts, row * ts);
                let sx0 = x.max(tx0);
                let sx1 = (x + w).min(tx0 + tile.width);
                let sy0 = y.max(ty0);
                let sy1 = (y + h).min(ty0 + tile.height);
                let span = (sx1 - sx0) as usize;
                for sy in sy0..sy1 {
                    let src = (sy - ty0) as usize * tile.width as usize + (sx0 - tx0) as usize;
                    let dst = (sy - y) as usize * w as usize + (sx0 - x) as usize;
                    out.pixels[dst..dst + span].copy_from_slice(&tile.pixels[src..src + span]);
                }
            }
        }
        Ok(out)
    }

    /// Entire level as one image.
    pub fn read_level(&self, level: u32) -> Result<RgbImage, SlideError> {
        let info = self.level(level)?;
        self.read_region(level, 0, 0, info.width, info.height)
    }
}
