//! K-means tumor-region extraction in L*a*b* (a, b) space at the lowest
//! pyramid level.

use crate::colorspace::{rgb_to_lab, RgbImage};
use crate::numerics::{kmeans, NumericsError};
use crate::slide_io::{SlideError, SlidePackage, TissueMask};

/// Largest level the clustering runs on directly.
pub const MAX_MASK_PIXELS: u64 = 4_000_000;
pub const DEFAULT_K: usize = 3;
const MAX_ITER: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TumorMaskError {
    #[error("k must be 3 or 4, got {0}")]
    InvalidK(usize),
    #[error("lowest level has {0} pixels; downsample the slide below 4 megapixels first")]
    LevelTooLarge(u64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Slide(#[from] SlideError),
}

/// Per-cluster statistics of one clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub population: usize,
    /// Mean RGB blue value of the member pixels.
    pub blue_mean: f64,
    /// Label assigned in the output mask.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TumorClustering {
    pub mask: TissueMask,
    /// Indexed by K-means cluster.
    pub clusters: Vec<ClusterStats>,
}

/// Orders clusters by descending blue mean, ties by larger population,
/// and returns the label of each cluster: the bluest is background (0), the
/// second is tumor (1), the rest follow from 2.
pub fn rank_labels(blue_means: &[f64], populations: &[usize]) -> Vec<u8> {
    let mut order: Vec<usize> = (0..blue_means.len()).collect();
    order.sort_by(|&a, &b| {
        blue_means[b].total_cmp(&blue_means[a]).then(populations[b].cmp(&populations[a])).then(a.cmp(&b))
    });
    let mut labels = vec![0u8; blue_means.len()];
    for (rank, &c) in order.iter().enumerate() {
        labels[c] = rank as u8;
    }
    labels
}

/// Clusters the (a, b) chroma of `image` into `k` groups and labels the
/// cluster with the second-highest mean blue channel as tumor.
pub fn cluster_tumor_mask(image: &RgbImage, level: u32, k: usize, seed: u64) -> Result<TumorClustering, TumorMaskError> {
    if !(3..=4).contains(&k) {
        return Err(TumorMaskError::InvalidK(k));
    }
    let lab = rgb_to_lab(image);
    let points: Vec<[f64; 2]> = lab.values.iter().map(|v| [v[1], v[2]]).collect();
    let result = kmeans(&points, k, seed, MAX_ITER)?;

    let mut blue_sum = vec![0.0; k];
    let mut populations = vec![0usize; k];
    for (p, &c) in image.pixels.iter().zip(&result.assignments) {
        blue_sum[c] += p[2] as f64;
        populations[c] += 1;
    }
    let blue_means: Vec<f64> =
        blue_sum.iter().zip(&populations).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    let labels = rank_labels(&blue_means, &populations);
    let mask = TissueMask::new(
        level,
        image.width,
        image.height,
        result.assignments.iter().map(|&c| labels[c]).collect(),
    )?;
    let clusters = (0..k)
        .map(|c| ClusterStats { population: populations[c], blue_mean: blue_means[c], label: labels[c] })
        .collect();
    Ok(TumorClustering { mask, clusters })
}

/// Tumor mask of a slide, computed on its lowest level.
pub fn extract_tumor_mask(slide: &SlidePackage, k: usize, seed: u64) -> Result<TissueMask, TumorMaskError> {
    Ok(extract_tumor_clustering(slide, k, seed)?.mask)
}

pub fn extract_tumor_clustering(slide: &SlidePackage, k: usize, seed: u64) -> Result<TumorClustering, TumorMaskError> {
    let level = slide.lowest_level();
    let info = slide.level(level)?;
    let pixels = info.width as u64 * info.height as u64;
    if pixels > MAX_MASK_PIXELS {
        return Err(TumorMaskError::LevelTooLarge(pixels));
    }
    cluster_tumor_mask(&slide.read_level(level)?, level, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_uses_blue_then_population() {
        assert_eq!(rank_labels(&[100.0, 250.0, 180.0], &[5, 5, 5]), vec![2, 0, 1]);
        assert_eq!(rank_labels(&[180.0, 250.0, 180.0], &[3, 5, 9]), vec![2, 0, 1]);
    }

    #[test]
    fn ranking_is_permutation_invariant() {
        let blue = [120.0, 240.0, 200.0, 60.0];
        let pop = [10, 20, 30, 40];
        let base = rank_labels(&blue, &pop);
        let perm = [2, 0, 3, 1];
        let pb: Vec<f64> = perm.iter().map(|&i| blue[i]).collect();
        let pp: Vec<usize> = perm.iter().map(|&i| pop[i]).collect();
        let permuted = rank_labels(&pb, &pp);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(permuted[j], base[i]);
        }
    }

    #[test]
    fn uniform_image_is_rejected() {
        let img = RgbImage::filled(16, 16, [200, 100, 150]);
        assert!(matches!(
            cluster_tumor_mask(&img, 0, 3, 1),
            Err(TumorMaskError::Numerics(NumericsError::InsufficientDistinctPoints { .. }))
        ));
    }

    #[test]
    fn three_colour_image_separates() {
        let img = RgbImage {
            width: 30,
            height: 1,
            pixels: (0..30)
                .map(|i| match i % 3 {
                    0 => [250, 250, 252],
                    1 => [188, 159, 221],
                    _ => [158, 20, 170],
                })
                .collect(),
        };
        let c = cluster_tumor_mask(&img, 0, 3, 1).unwrap();
        for (i, &l) in c.mask.labels.iter().enumerate() {
            assert_eq!(l, [0, 1, 2][i % 3]);
        }
    }
}
