use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{GradeClass, GradingError};
use crate::colorspace::{rgb_to_od, GrayImage, RgbImage};
use crate::mat3::Mat3;
use crate::micro_cnn::{Mode, Network};
use crate::regions::BitMask;
use crate::slide_io::{
    sample_patch_origins, OverlayRegion, Patch, PatchPixels, SlidePackage, TissueMask, GRADE3_COLOR, GRADE4_COLOR,
};
use crate::stain::{apply_decomposition, hematoxylin_plane_to_image};
use crate::synth::GroundTruth;

pub const DEFAULT_EVAL_PATCHES: usize = 500;

/// Where patches are cut and how large they are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSettings {
    pub size: u32,
    pub level: u32,
}

impl Default for PatchSettings {
    fn default() -> Self {
        Self { size: 64, level: 1 }
    }
}

/// Hematoxylin image of an RGB region under the decomposition `d`.
pub fn hematoxylin_image(rgb: &RgbImage, d: &Mat3) -> GrayImage {
    hematoxylin_plane_to_image(&apply_decomposition(&rgb_to_od(rgb), d))
}

/// Network input of a grey patch: values scaled to [0, 1].
pub fn patch_input(patch: &Patch) -> Result<Vec<f64>, GradingError> {
    match &patch.pixels {
        PatchPixels::Gray(g) => Ok(g.data.iter().map(|&v| v as f64 / 255.0).collect()),
        PatchPixels::Rgb(_) => Err(GradingError::Format("expected a hematoxylin patch, got RGB".into())),
    }
}

/// A slide ready for patch extraction: pyramid, tumor mask and stain
/// decomposition.
#[derive(Debug, Clone)]
pub struct LoadedSlide {
    pub slide: SlidePackage,
    pub mask: TissueMask,
    pub stain_d: Mat3,
}

impl LoadedSlide {
    /// `n` hematoxylin patches centred on the tumor mask.
    pub fn hematoxylin_patches(&self, settings: &PatchSettings, n: usize, seed: u64) -> Result<Vec<Patch>, GradingError> {
        use rayon::prelude::*;
        let origins = sample_patch_origins(&self.slide, &self.mask, n, settings.size, settings.level, seed)?;
        let id = self.slide.id();
        origins
            .par_iter()
            .map(|&(x, y)| {
                let rgb = self.slide.read_region(settings.level, x, y, settings.size, settings.size)?;
                Ok(Patch {
                    slide_id: id.clone(),
                    level: settings.level,
                    x,
                    y,
                    size: settings.size,
                    pixels: PatchPixels::Gray(hematoxylin_image(&rgb, &self.stain_d)),
                })
            })
            .collect()
    }
}

pub trait PatchClassifier: Sync {
    fn classify(&self, patches: &[Patch]) -> Result<Vec<GradeClass>, GradingError>;
}

pub struct CnnClassifier<'a> {
    pub network: &'a Network,
}

impl PatchClassifier for CnnClassifier<'_> {
    fn classify(&self, patches: &[Patch]) -> Result<Vec<GradeClass>, GradingError> {
        let inputs = patches.iter().map(patch_input).collect::<Result<Vec<_>, _>>()?;
        let probs = self.network.forward(&inputs, Mode::Infer)?;
        Ok(probs.iter().map(|p| GradeClass::from_index(usize::from(p[1] > p[0]))).collect())
    }
}

/// Labels each patch with the synthetic ground-truth pattern covering most
/// of its footprint; patches without any tumor pattern count as grade 4.
pub struct TruthClassifier {
    pub truths: HashMap<String, GroundTruth>,
    /// Level-0 pixels per patch-level pixel, per slide.
    pub downsamples: HashMap<String, u32>,
}

impl PatchClassifier for TruthClassifier {
    fn classify(&self, patches: &[Patch]) -> Result<Vec<GradeClass>, GradingError> {
        patches
            .iter()
            .map(|p| {
                let truth = self
                    .truths
                    .get(&p.slide_id)
                    .ok_or_else(|| GradingError::Format(format!("no ground truth for slide {}", p.slide_id)))?;
                let ds = *self.downsamples.get(&p.slide_id).unwrap_or(&1);
                let (mut g3, mut g4) = (0usize, 0usize);
                for y in p.y..p.y + p.size {
                    for x in p.x..p.x + p.size {
                        match truth.pattern_at((x * ds + ds / 2).min(truth.width - 1), (y * ds + ds / 2).min(truth.height - 1)) {
                            3 => g3 += 1,
                            4 => g4 += 1,
                            _ => {}
                        }
                    }
                }
                Ok(if g3 > g4 { GradeClass::Grade3 } else { GradeClass::Grade4 })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "3+4*")]
    ThreeFour,
    #[serde(rename = "4*+3")]
    FourThree,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::ThreeFour => "3+4*",
            Verdict::FourThree => "4*+3",
        }
    }

    /// Verdict matching a "3+4"/"4+3" label.
    pub fn for_label(label: &str) -> Option<Self> {
        match label {
            "3+4" => Some(Verdict::ThreeFour),
            "4+3" => Some(Verdict::FourThree),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// "3+4*" only on a strict grade-3 majority; ties go to "4*+3".
pub fn verdict_from_votes(votes_grade3: usize, votes_grade4: usize) -> Verdict {
    if votes_grade3 > votes_grade4 {
        Verdict::ThreeFour
    } else {
        Verdict::FourThree
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchVote {
    pub x: u32,
    pub y: u32,
    pub class: GradeClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideGrade {
    pub slide_id: String,
    pub votes_grade3: usize,
    pub votes_grade4: usize,
    pub verdict: Verdict,
    pub level: u32,
    pub patch_size: u32,
    pub patches: Vec<PatchVote>,
}

impl SlideGrade {
    pub fn from_votes(slide_id: String, settings: &PatchSettings, patches: Vec<PatchVote>) -> Self {
        let g3 = patches.iter().filter(|p| p.class == GradeClass::Grade3).count();
        let g4 = patches.len() - g3;
        Self {
            slide_id,
            votes_grade3: g3,
            votes_grade4: g4,
            verdict: verdict_from_votes(g3, g4),
            level: settings.level,
            patch_size: settings.size,
            patches,
        }
    }

    /// Patch footprints per class, mapped onto `level` of `slide`.
    pub fn overlay_regions(&self, slide: &SlidePackage, level: u32) -> Result<Vec<OverlayRegion>, GradingError> {
        let target = slide.level(level)?;
        let src = slide.level(self.level)?;
        let (w, h) = (target.width, target.height);
        let scale = src.downsample as f64 / target.downsample as f64;
        let mut regions = Vec::new();
        for (class, color) in [(GradeClass::Grade3, GRADE3_COLOR), (GradeClass::Grade4, GRADE4_COLOR)] {
            let mut mask = BitMask::new(w, h);
            for p in self.patches.iter().filter(|p| p.class == class) {
                let x0 = (p.x as f64 * scale).floor() as u32;
                let y0 = (p.y as f64 * scale).floor() as u32;
                let x1 = (((p.x + self.patch_size) as f64 * scale).ceil() as u32).min(w);
                let y1 = (((p.y + self.patch_size) as f64 * scale).ceil() as u32).min(h);
                for y in y0..y1 {
                    for x in x0..x1 {
                        mask.set(x, y, true);
                    }
                }
            }
            regions.push(OverlayRegion { mask, color });
        }
        Ok(regions)
    }
}

/// Samples `n_patches` from the tumor mask, classifies each and takes the
/// majority vote.
pub fn grade_slide(
    slide: &LoadedSlide,
    classifier: &dyn PatchClassifier,
    settings: &PatchSettings,
    n_patches: usize,
    seed: u64,
) -> Result<SlideGrade, GradingError> {
    let patches = slide.hematoxylin_patches(settings, n_patches, seed)?;
    let classes = classifier.classify(&patches)?;
    let votes = patches.iter().zip(classes).map(|(p, class)| PatchVote { x: p.x, y: p.y, class }).collect();
    Ok(SlideGrade::from_votes(slide.slide.id(), settings, votes))
}
