use std::path::Path;

use super::SlideError;
use crate::regions::BitMask;

/// Label used for the tumor class in every mask.
pub const TUMOR_LABEL: u8 = 1;

/// Per-pixel class labels defined at one pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub level: u32,
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

impl TissueMask {
    pub fn new(level: u32, width: u32, height: u32, labels: Vec<u8>) -> Result<Self, SlideError> {
        if labels.len() != width as usize * height as usize {
            return Err(SlideError::InvalidArgument(format!(
                "mask buffer holds {} labels for {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self { level, width, height, labels })
    }

    /// Builds a mask from wide label values, rejecting any above 255.
    pub fn from_wide_labels(level: u32, width: u32, height: u32, labels: &[usize]) -> Result<Self, SlideError> {
        let narrow = labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| SlideError::LabelOutOfRange(l)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(level, width, height, narrow)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn tumor(&self) -> BitMask {
        BitMask {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| l == TUMOR_LABEL).collect(),
        }
    }

    pub fn tumor_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == TUMOR_LABEL).count()
    }

    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

pub fn write_mask(mask: &TissueMask, path: impl AsRef<Path>) -> Result<(), SlideError> {
    super::save_png_gray(mask.width, mask.height, &mask.labels, path.as_ref())
}

/// Reads a mask written by [`write_mask`]; the caller supplies its level.
pub fn read_mask(path: impl AsRef<Path>, level: u32) -> Result<TissueMask, SlideError> {
    let (width, height, labels) = super::load_png_gray(path.as_ref())?;
    TissueMask::new(level, width, height, labels)
}
