//! Synthetic H&E-like slides with exact ground truth.
//!
//! Geometry is parametric (ring glands, fused sheets, cribriform glands,
//! elliptical nuclei). Colours come from the forward stain model: each
//! tissue class has hematoxylin/eosin densities, `O = h·u + e·v`, and the
//! optical density is quantized back to 8 bits.

mod layout;
mod render;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use layout::{Circle, CribriformGland, Ellipse, Layout, MarkerStroke, NucleusShape, RingGland, Sheet};
pub use render::{densities, rasterize, shade, PlaneQuantizer, Tissue, TissueMap, DENSITY_NOISE, MARKER_RGB};

use crate::colorspace::RgbImage;
use crate::grading::{split_for_label, DatasetEntry, DatasetManifest};
use crate::regions::BitMask;
use crate::slide_io::{self, build_pyramid, write_slide, SlideError, SlidePackage};
use crate::stain::{default_stain_model, StainModel};

pub const TRUTH_FILE: &str = "truth.json";
pub const TRUTH_TUMOR_FILE: &str = "truth_tumor.png";
pub const TRUTH_PATTERN_FILE: &str = "truth_pattern.png";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthClass {
    Benign,
    Grade3,
    Grade4,
    /// Grade-3 dominant mixture labeled "3+4".
    Mix34,
    /// Grade-4 dominant mixture labeled "4+3".
    Mix43,
}

impl SynthClass {
    pub fn label(self) -> &'static str {
        match self {
            SynthClass::Benign => "benign",
            SynthClass::Grade3 => "3+3",
            SynthClass::Grade4 => "4+4",
            SynthClass::Mix34 => "3+4",
            SynthClass::Mix43 => "4+3",
        }
    }
}

/// Gland pattern painted into the ground-truth pattern map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Pattern {
    Grade3 = 3,
    Grade4 = 4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class: SynthClass,
    /// Level-0 side length in pixels.
    pub size: u32,
    pub mpp: f64,
    /// Target epithelial fraction of the tissue area.
    pub gland_density: f64,
    pub cribriform: bool,
    pub marker: bool,
    /// Probability that a tumor nucleus carries a dark nucleolus.
    pub nucleoli_fraction: f64,
    pub seed: u64,
    pub tile_size: u32,
    pub levels: usize,
}

impl SynthSpec {
    pub fn new(class: SynthClass, seed: u64) -> Self {
        Self {
            class,
            size: 1024,
            mpp: 0.5,
            gland_density: 0.3,
            cribriform: false,
            marker: false,
            nucleoli_fraction: 0.2,
            seed,
            tile_size: 256,
            levels: 3,
        }
    }

    pub fn with_cribriform(mut self) -> Self {
        self.cribriform = true;
        self
    }

    pub fn with_marker(mut self) -> Self {
        self.marker = true;
        self
    }

    fn validate(&self) -> Result<(), SlideError> {
        let bad = |m: &str| Err(SlideError::InvalidArgument(m.into()));
        if self.size < 64 {
            return bad("slide size must be at least 64 pixels");
        }
        if !(self.mpp > 0.0) {
            return bad("mpp must be positive");
        }
        if !(0.0..=1.0).contains(&self.gland_density) {
            return bad("gland density must lie in [0, 1]");
        }
        if self.levels == 0 || self.tile_size == 0 {
            return bad("levels and tile size must be positive");
        }
        if self.cribriform && self.class != SynthClass::Grade4 {
            return bad("cribriform glands are generated on grade-4 slides");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusTruth {
    pub x: f64,
    pub y: f64,
    pub tumor: bool,
    pub nucleolus: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CribriformTruth {
    pub disc: Circle,
    pub lumens: Vec<Circle>,
}

/// Ground truth in level-0 pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: String,
    pub class: SynthClass,
    pub width: u32,
    pub height: u32,
    pub mpp: f64,
    pub lumens: Vec<Ellipse>,
    pub nuclei: Vec<NucleusTruth>,
    pub cribriform: Vec<CribriformTruth>,
    pub marker: Option<MarkerStroke>,
    /// Epithelial tumor pixels, lumens excluded.
    #[serde(skip)]
    pub tumor: BitMask,
    /// 0 outside glands, otherwise the gland pattern (3 or 4).
    #[serde(skip)]
    pub pattern: Vec<u8>,
}

impl GroundTruth {
    /// Tumor mask reduced to a coarser level: a pixel is tumor when at least
    /// half of its level-0 footprint is.
    pub fn tumor_at(&self, downsample: u32) -> BitMask {
        let (w, h) = (self.width.div_ceil(downsample), self.height.div_ceil(downsample));
        BitMask::from_fn(w, h, |x, y| {
            let (mut hit, mut total) = (0u32, 0u32);
            for yy in y * downsample..((y + 1) * downsample).min(self.height) {
                for xx in x * downsample..((x + 1) * downsample).min(self.width) {
                    total += 1;
                    hit += self.tumor.get(xx, yy) as u32;
                }
            }
            2 * hit >= total
        })
    }

    pub fn pattern_at(&self, x: u32, y: u32) -> u8 {
        self.pattern[y as usize * self.width as usize + x as usize]
    }

    /// Tumor pixel counts of the grade-3 and grade-4 patterns.
    pub fn pattern_areas(&self) -> (usize, usize) {
        let mut a = (0, 0);
        for (i, &t) in self.tumor.data.iter().enumerate() {
            if t {
                match self.pattern[i] {
                    3 => a.0 += 1,
                    4 => a.1 += 1,
                    _ => {}
                }
            }
        }
        a
    }

    pub fn cribriform_mask(&self, index: usize) -> BitMask {
        let d = self.cribriform[index].disc;
        BitMask::from_fn(self.width, self.height, |x, y| d.contains(x as f64, y as f64))
    }

    pub fn lumen_mask(&self) -> BitMask {
        let mut m = BitMask::new(self.width, self.height);
        for e in &self.lumens {
            let r = e.extent().ceil() as i64;
            for y in (e.cy as i64 - r).max(0)..=(e.cy as i64 + r).min(self.height as i64 - 1) {
                for x in (e.cx as i64 - r).max(0)..=(e.cx as i64 + r).min(self.width as i64 - 1) {
                    if e.contains(x as f64, y as f64) {
                        m.set(x as u32, y as u32, true);
                    }
                }
            }
        }
        m
    }

    pub fn save(&self, dir: &Path) -> Result<(), SlideError> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| SlideError::InvalidArgument(e.to_string()))?;
        text.push('\n');
        fs::write(dir.join(TRUTH_FILE), text)?;
        let tumor: Vec<u8> = self.tumor.data.iter().map(|&b| b as u8).collect();
        slide_io::save_png_gray(self.width, self.height, &tumor, &dir.join(TRUTH_TUMOR_FILE))?;
        slide_io::save_png_gray(self.width, self.height, &self.pattern, &dir.join(TRUTH_PATTERN_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self, SlideError> {
        let text = fs::read_to_string(dir.join(TRUTH_FILE))?;
        let mut gt: GroundTruth =
            serde_json::from_str(&text).map_err(|e| SlideError::InvalidPackage(format!("{TRUTH_FILE}: {e}")))?;
        let (w, h, tumor) = slide_io::load_png_gray(&dir.join(TRUTH_TUMOR_FILE))?;
        let (pw, ph, pattern) = slide_io::load_png_gray(&dir.join(TRUTH_PATTERN_FILE))?;
        if (w, h) != (gt.width, gt.height) || (pw, ph) != (gt.width, gt.height) {
            return Err(SlideError::ManifestMismatch("ground-truth rasters do not match".into()));
        }
        gt.tumor = BitMask { width: w, height: h, data: tumor.into_iter().map(|v| v != 0).collect() };
        gt.pattern = pattern;
        Ok(gt)
    }
}

/// Rendered slide held in memory.
#[derive(Debug, Clone)]
pub struct SynthSlide {
    pub spec: SynthSpec,
    pub level0: RgbImage,
    pub truth: GroundTruth,
    pub layout: Layout,
}

fn balance_mixture(spec: &SynthSpec, layout: &mut Layout) {
    let primary_three = match spec.class {
        SynthClass::Mix34 => true,
        SynthClass::Mix43 => false,
        _ => return,
    };
    for _ in 0..200 {
        let map = rasterize(layout, false);
        let (mut a3, mut a4) = (0usize, 0usize);
        for (t, p) in map.tissue.iter().zip(&map.pattern) {
            if *t == Tissue::Epithelium {
                match p {
                    3 => a3 += 1,
                    4 => a4 += 1,
                    _ => {}
                }
            }
        }
        let total = (a3 + a4).max(1) as f64;
        let share = if primary_three { a3 as f64 / total } else { a4 as f64 / total };
        let too_low = share < 0.68;
        let too_high = share > 0.80;
        // drop the most recently placed element of the larger side
        let drop_three = (too_low && !primary_three) || (too_high && primary_three);
        let drop_four = (too_low && primary_three) || (too_high && !primary_three);
        if drop_three && layout.rings.len() > 1 {
            layout.rings.pop();
        } else if drop_four && layout.sheets.len() > 1 {
            layout.sheets.pop();
        } else {
            break;
        }
    }
}

/// Renders a slide and its ground truth without touching the filesystem.
pub fn render_slide(spec: &SynthSpec) -> Result<SynthSlide, SlideError> {
    spec.validate()?;
    let model = default_stain_model();
    render_slide_with(spec, &model)
}

pub fn render_slide_with(spec: &SynthSpec, model: &StainModel) -> Result<SynthSlide, SlideError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layout = layout::place_structures(spec, &mut rng);
    balance_mixture(spec, &mut layout);
    layout::place_nuclei(spec, &mut layout, &mut rng);
    let map = rasterize(&layout, true);
    let level0 = shade(&map, model, rng.gen());

    let tumor = BitMask {
        width: map.width,
        height: map.height,
        data: map
            .tissue
            .iter()
            .zip(&map.pattern)
            .map(|(t, &p)| p != 0 && matches!(t, Tissue::Epithelium | Tissue::Nucleus | Tissue::Nucleolus))
            .collect(),
    };
    let mut lumens: Vec<Ellipse> = layout
        .rings
        .iter()
        .map(|g| Ellipse { cx: g.lumen.cx, cy: g.lumen.cy, a: g.lumen.r, b: g.lumen.r, angle: 0.0 })
        .collect();
    lumens.extend(layout.sheets.iter().flat_map(|s| s.slits.iter().copied()));
    let cribriform: Vec<CribriformTruth> = layout
        .cribriform
        .iter()
        .map(|c| CribriformTruth { disc: c.disc, lumens: c.lumens.clone() })
        .collect();
    lumens.extend(cribriform.iter().flat_map(|c| {
        c.lumens.iter().map(|l| Ellipse { cx: l.cx, cy: l.cy, a: l.r, b: l.r, angle: 0.0 })
    }));
    let nuclei = layout
        .nuclei
        .iter()
        .map(|n| NucleusTruth { x: n.shape.cx, y: n.shape.cy, tumor: n.tumor, nucleolus: n.nucleolus.is_some() })
        .collect();
    let truth = GroundTruth {
        label: spec.class.label().to_string(),
        class: spec.class,
        width: map.width,
        height: map.height,
        mpp: spec.mpp,
        lumens,
        nuclei,
        cribriform,
        marker: layout.marker,
        tumor,
        pattern: map.pattern.clone(),
    };
    Ok(SynthSlide { spec: spec.clone(), level0, truth, layout })
}

/// Renders a slide and writes it as a package (with ground truth) at `root`.
pub fn synth_slide(spec: &SynthSpec, root: impl AsRef<Path>) -> Result<(SlidePackage, GroundTruth), SlideError> {
    let slide = render_slide(spec)?;
    let levels = build_pyramid(slide.level0, spec.levels);
    let label = (spec.class != SynthClass::Benign).then(|| spec.class.label().to_string());
    let package = write_slide(root.as_ref(), &levels, spec.mpp, spec.tile_size, label)?;
    slide.truth.save(package.root())?;
    Ok((package, slide.truth))
}

/// Settings shared by every slide of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub size: u32,
    pub mpp: f64,
    pub gland_density: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        let s = SynthSpec::new(SynthClass::Grade3, 0);
        Self { size: s.size, mpp: s.mpp, gland_density: s.gland_density }
    }
}

/// Writes `n_per_class` slides of each training class ("3+3", "4+4") and
/// of each evaluation mixture ("3+4", "4+3") under `out_dir`, plus the
/// dataset manifest. Per-slide seeds are drawn from the master seed in a
/// fixed order, so the corpus does not depend on scheduling.
pub fn synth_corpus(n_per_class: usize, out_dir: impl AsRef<Path>, seed: u64) -> Result<DatasetManifest, SlideError> {
    synth_corpus_with(n_per_class, out_dir, seed, &CorpusOptions::default())
}

pub fn synth_corpus_with(
    n_per_class: usize,
    out_dir: impl AsRef<Path>,
    seed: u64,
    options: &CorpusOptions,
) -> Result<DatasetManifest, SlideError> {
    if n_per_class == 0 {
        return Err(SlideError::InvalidArgument("n_per_class must be at least 1".into()));
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs: Vec<(PathBuf, SynthSpec)> = Vec::new();
    for (dir, prefix, class) in [
        ("train", "g3", SynthClass::Grade3),
        ("train", "g4", SynthClass::Grade4),
        ("eval", "m34", SynthClass::Mix34),
        ("eval", "m43", SynthClass::Mix43),
    ] {
        for i in 0..n_per_class {
            let mut spec = SynthSpec::new(class, rng.gen());
            spec.size = options.size;
            spec.mpp = options.mpp;
            spec.gland_density = options.gland_density;
            jobs.push((PathBuf::from(dir).join(format!("{prefix}_{i:03}")), spec));
        }
    }
    jobs.par_iter()
        .map(|(rel, spec)| synth_slide(spec, out.join(rel)).map(|_| ()))
        .collect::<Result<Vec<()>, SlideError>>()?;
    let entries = jobs
        .iter()
        .map(|(rel, spec)| {
            let label = spec.class.label().to_string();
            DatasetEntry {
                slide_path: rel.to_string_lossy().replace('\\', "/"),
                split: split_for_label(&label).expect("corpus labels are valid"),
                label,
            }
        })
        .collect();
    let manifest = DatasetManifest { entries };
    manifest.save(&out.join(DATASET_FILE)).map_err(|e| SlideError::InvalidArgument(e.to_string()))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benign_has_no_tumor() {
        let s = render_slide(&SynthSpec::new(SynthClass::Benign, 1)).unwrap();
        assert!((s.truth.tumor.count() as f64) < 0.05 * (1024.0 * 1024.0));
    }

    #[test]
    fn same_seed_same_pixels() {
        let mut spec = SynthSpec::new(SynthClass::Grade4, 5);
        spec.size = 256;
        let a = render_slide(&spec).unwrap();
        let b = render_slide(&spec).unwrap();
        assert_eq!(a.level0, b.level0);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn mixtures_favour_the_primary_pattern() {
        for (class, seed) in [(SynthClass::Mix34, 3), (SynthClass::Mix43, 4)] {
            let s = render_slide(&SynthSpec::new(class, seed)).unwrap();
            let (a3, a4) = s.truth.pattern_areas();
            assert!(a3 > 0 && a4 > 0);
            if class == SynthClass::Mix34 {
                assert!(a3 > a4);
            } else {
                assert!(a4 > a3);
            }
        }
    }
}
