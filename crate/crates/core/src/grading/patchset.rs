use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_class, DatasetEntry, DatasetManifest, GradeClass, GradingError, Split, SplitCensus};
use crate::slide_io::{Patch, PatchPixels, SlideError};

pub const PATCHSET_FORMAT_VERSION: u32 = 1;

/// Supplies hematoxylin patches for a manifest entry.
pub trait PatchSource: Sync {
    fn patches(&self, entry: &DatasetEntry, n: usize, seed: u64) -> Result<Vec<Patch>, GradingError>;
}

/// Seed of the `index`-th slide derived from a run seed (SplitMix64).
pub fn slide_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideContribution {
    pub slide_path: String,
    pub label: String,
    pub class: GradeClass,
    pub patches: usize,
}

/// Weakly labeled patches: every patch carries its slide's class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDataset {
    pub patch_size: u32,
    pub census: SplitCensus,
    pub slides: Vec<SlideContribution>,
    pub warnings: Vec<String>,
    pub labels: Vec<GradeClass>,
    #[serde(skip)]
    pub pixels: Vec<Vec<u8>>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        self.labels.iter().for_each(|l| c[l.index()] += 1);
        c
    }

    /// Network inputs scaled to [0, 1] and class indices.
    pub fn inputs(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            self.pixels.iter().map(|p| p.iter().map(|&v| v as f64 / 255.0).collect()).collect(),
            self.labels.iter().map(|l| l.index()).collect(),
        )
    }

    /// JSON header line, then every patch as raw bytes in order.
    pub fn save(&self, path: &Path) -> Result<(), GradingError> {
        #[derive(Serialize)]
        struct Header<'a> {
            format_version: u32,
            #[serde(flatten)]
            data: &'a PatchDataset,
        }
        let mut out = serde_json::to_vec(&Header { format_version: PATCHSET_FORMAT_VERSION, data: self })
            .map_err(|e| GradingError::Format(e.to_string()))?;
        out.push(b'\n');
        self.pixels.iter().for_each(|p| out.extend_from_slice(p));
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GradingError> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            #[serde(flatten)]
            data: PatchDataset,
        }
        let bytes = fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GradingError::Format(format!("{}: missing header", path.display())))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| GradingError::Format(format!("{}: {e}", path.display())))?;
        if header.format_version != PATCHSET_FORMAT_VERSION {
            return Err(GradingError::Format(format!("unsupported patch set version {}", header.format_version)));
        }
        let mut data = header.data;
        let per = (data.patch_size * data.patch_size) as usize;
        let body = &bytes[nl + 1..];
        if body.len() != per * data.labels.len() {
            return Err(GradingError::Format(format!(
                "{}: {} patch bytes for {} patches of {} pixels",
                path.display(),
                body.len(),
                data.labels.len(),
                per
            )));
        }
        data.pixels = body.chunks_exact(per.max(1)).map(|c| c.to_vec()).collect();
        Ok(data)
    }
}

/// Weak-label patch set: `patches_per_slide` patches from every training
/// slide, labeled grade 3 for "3+3" and grade 4 for the higher scores.
/// Training slides without a usable tumor region are skipped with a warning.
pub fn build_patch_dataset(
    manifest: &DatasetManifest,
    source: &dyn PatchSource,
    patches_per_slide: usize,
    patch_size: u32,
    seed: u64,
) -> Result<PatchDataset, GradingError> {
    if manifest.entries.is_empty() {
        return Err(GradingError::InvalidManifest("manifest is empty".into()));
    }
    manifest.validate()?;
    let census = manifest.census()?;
    let train: Vec<(usize, &DatasetEntry, GradeClass)> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Train)
        .map(|(i, e)| Ok((i, e, train_class(&e.label)?.expect("training label"))))
        .collect::<Result<_, GradingError>>()?;
    if train.is_empty() {
        return Err(GradingError::EmptyTrainSet);
    }
    let results: Vec<Result<Vec<Patch>, GradingError>> = train
        .par_iter()
        .map(|&(i, e, _)| source.patches(e, patches_per_slide, slide_seed(seed, i)))
        .collect();
    let mut data = PatchDataset {
        patch_size,
        census,
        slides: Vec::new(),
        warnings: Vec::new(),
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for ((_, entry, class), result) in train.into_iter().zip(results) {
        let patches = match result {
            Ok(p) => p,
            Err(GradingError::Slide(SlideError::NoTumorRegion)) => {
                data.warnings.push(format!("{}: no tumor region, slide skipped", entry.slide_path));
                continue;
            }
            Err(e) => return Err(e),
        };
        for p in &patches {
            let PatchPixels::Gray(g) = &p.pixels else {
                return Err(GradingError::Format(format!("{}: expected hematoxylin patches", entry.slide_path)));
            };
            if g.width != patch_size || g.height != patch_size {
                return Err(GradingError::Format(format!(
                    "{}: patch is {}x{}, expected {patch_size}",
                    entry.slide_path, g.width, g.height
                )));
            }
            data.pixels.push(g.data.clone());
            data.labels.push(class);
        }
        data.slides.push(SlideContribution {
            slide_path: entry.slide_path.clone(),
            label: entry.label.clone(),
            class,
            patches: patches.len(),
        });
    }
    if data.is_empty() {
        return Err(GradingError::EmptyTrainSet);
    }
    Ok(data)
}
