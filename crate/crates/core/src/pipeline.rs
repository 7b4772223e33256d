//! Per-slide pipeline steps shared by the command line and the end-to-end
//! tests: stain fitting, tumor masking, patch extraction and the nuclei
//! detectors.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{rgb_to_od, GrayImage, OdImage};
use crate::grading::{hematoxylin_image, DatasetEntry, GradingError, LoadedSlide, PatchSettings, PatchSource};
use crate::mat3::Mat3;
use crate::nuclei::{build_nuclei_graph, extract_nuclei, NucleiGraph, NucleusParams, NucleusRecord, DEFAULT_GRAPH_RADIUS_UM};
use crate::slide_io::{open_slide, read_mask, write_mask, Patch, SlideError, SlidePackage, TissueMask};
use crate::stain::{default_stain_model, optimize_stain_matrix, StainError, StainFit, DEFAULT_FIT_SAMPLES};
use crate::tumor_mask::{extract_tumor_mask, TumorMaskError, DEFAULT_K, MAX_MASK_PIXELS};

/// Tumor mask file kept inside a slide package.
pub const MASK_FILE: &str = "tumor_mask.png";
pub const STAIN_GRAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainOptions {
    pub lambda: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for StainOptions {
    fn default() -> Self {
        Self { lambda: crate::stain::DEFAULT_LAMBDA, samples: DEFAULT_FIT_SAMPLES, seed: 0 }
    }
}

/// Finest level small enough to fit on.
pub fn fit_level(slide: &SlidePackage) -> u32 {
    slide
        .levels()
        .iter()
        .find(|l| l.width as u64 * l.height as u64 <= MAX_MASK_PIXELS)
        .map_or(slide.lowest_level(), |l| l.level)
}

/// Up to `samples` optical-density pixels of `level`, drawn without
/// replacement and kept in raster order.
pub fn sample_od(slide: &SlidePackage, level: u32, samples: usize, seed: u64) -> Result<OdImage, SlideError> {
    let od = rgb_to_od(&slide.read_level(level)?);
    if od.values.len() <= samples {
        return Ok(od);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, od.values.len(), samples).into_vec();
    idx.sort_unstable();
    Ok(OdImage::from_values(samples as u32, 1, idx.iter().map(|&i| od.values[i]).collect()))
}

/// Optimized stain matrix of a slide, starting from the default prior.
pub fn fit_stain(slide: &SlidePackage, options: &StainOptions) -> Result<StainFit, StainError> {
    let od = sample_od(slide, fit_level(slide), options.samples, options.seed)
        .map_err(|e| StainError::InvalidArgument(e.to_string()))?;
    let model = default_stain_model().with_lambda(options.lambda);
    optimize_stain_matrix(&od, &model, STAIN_GRAD_TOL)
}

/// Fits the stain matrix and stores it in the slide manifest.
pub fn decompose_slide(slide: &mut SlidePackage, options: &StainOptions) -> Result<StainFit, GradingError> {
    let fit = fit_stain(slide, options)?;
    slide.set_stain_record(fit.model.record())?;
    Ok(fit)
}

/// Stain matrix recorded in the manifest, or a fresh fit.
pub fn stain_matrix(slide: &SlidePackage, options: &StainOptions) -> Result<Mat3, GradingError> {
    match slide.stain_record() {
        Some(r) => Ok(r.d()?),
        None => Ok(fit_stain(slide, options)?.model.d),
    }
}

pub fn mask_path(slide: &SlidePackage) -> PathBuf {
    slide.root().join(MASK_FILE)
}

/// Computes the tumor mask and writes it into the package.
pub fn mask_slide(slide: &SlidePackage, k: usize, seed: u64) -> Result<TissueMask, TumorMaskError> {
    let mask = extract_tumor_mask(slide, k, seed)?;
    write_mask(&mask, mask_path(slide))?;
    Ok(mask)
}

/// Stored tumor mask, or a fresh one with `k` clusters.
pub fn tumor_mask(slide: &SlidePackage, k: usize, seed: u64) -> Result<TissueMask, GradingError> {
    let path = mask_path(slide);
    if path.exists() {
        Ok(read_mask(&path, slide.lowest_level())?)
    } else {
        Ok(extract_tumor_mask(slide, k, seed)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub k: usize,
    pub mask_seed: u64,
    pub stain: StainOptions,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { k: DEFAULT_K, mask_seed: 0, stain: StainOptions::default() }
    }
}

pub fn load_slide(path: &Path, options: &LoadOptions) -> Result<LoadedSlide, GradingError> {
    let slide = open_slide(path)?;
    let mask = tumor_mask(&slide, options.k, options.mask_seed)?;
    let stain_d = stain_matrix(&slide, &options.stain)?;
    Ok(LoadedSlide { slide, mask, stain_d })
}

/// Patches of slides stored under a corpus root.
pub struct CorpusSource {
    pub root: PathBuf,
    pub settings: PatchSettings,
    pub options: LoadOptions,
}

impl PatchSource for CorpusSource {
    fn patches(&self, entry: &DatasetEntry, n: usize, seed: u64) -> Result<Vec<Patch>, GradingError> {
        load_slide(&self.root.join(&entry.slide_path), &self.options)?.hematoxylin_patches(&self.settings, n, seed)
    }
}

/// Level-0 hematoxylin image, nuclei and their proximity graph.
pub struct NucleiScan {
    pub hematoxylin: GrayImage,
    pub nuclei: Vec<NucleusRecord>,
    pub graph: NucleiGraph,
}

pub fn scan_nuclei(slide: &SlidePackage, d: &Mat3, params: &NucleusParams) -> Result<NucleiScan, SlideError> {
    let hematoxylin = hematoxylin_image(&slide.read_level(0)?, d);
    let nuclei = extract_nuclei(&hematoxylin, slide.mpp(), params);
    let graph = build_nuclei_graph(&nuclei, slide.mpp(), DEFAULT_GRAPH_RADIUS_UM);
    Ok(NucleiScan { hematoxylin, nuclei, graph })
}
