//! Prognosis-pattern detectors: prominent nucleoli from a two-mode mixture
//! of in-nucleus intensities, and cribriform glands from the high-clustering
//! nuclei subgraph combined with round lumens.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{GrayImage, RgbImage};
use crate::nuclei::{NucleiGraph, NucleusRecord};
use crate::numerics::{gmm_assign, gmm_em_1d, NumericsError};
use crate::regions::{boundary_perimeter, connected_components, dilated_hull_mask, BitMask};
use crate::slide_io::{SlideError, SlidePackage};

pub const MIN_NUCLEUS_PIXELS: usize = 16;
pub const MIN_ELIGIBLE_VERTICES: usize = 10;
const EM_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("insufficient graph: {eligible} vertices with degree >= 2, need {MIN_ELIGIBLE_VERTICES}")]
    InsufficientGraph { eligible: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Slide(#[from] SlideError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleoliParams {
    /// Minimum gap between the light and dark mode means, in intensity levels.
    pub separation: f64,
    /// Minimum mixture weight of the dark mode.
    pub min_dark_weight: f64,
}

impl Default for NucleoliParams {
    fn default() -> Self {
        Self { separation: 50.0, min_dark_weight: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NucleoliStatus {
    Evaluated,
    /// Too few pixels to fit the mixture.
    Insufficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleoliFlag {
    pub nucleus_id: usize,
    pub status: NucleoliStatus,
    pub prominent: bool,
    pub dark_mean: f64,
    pub light_mean: f64,
    pub dark_weight: f64,
    pub separation: f64,
}

/// Intensity of a hematoxylin image value: stain-dense pixels are dark.
#[inline]
pub fn hematoxylin_intensity(v: u8) -> f64 {
    (255 - v) as f64
}

/// Two-mode fit of one intensity sample set.
pub fn classify_intensities(nucleus_id: usize, samples: &[f64], params: &NucleoliParams) -> NucleoliFlag {
    let mut flag = NucleoliFlag {
        nucleus_id,
        status: NucleoliStatus::Insufficient,
        prominent: false,
        dark_mean: f64::NAN,
        light_mean: f64::NAN,
        dark_weight: 0.0,
        separation: 0.0,
    };
    if samples.len() < MIN_NUCLEUS_PIXELS {
        return flag;
    }
    flag.status = NucleoliStatus::Evaluated;
    let model = match gmm_em_1d(samples, 2, 0, EM_TOL) {
        Ok(m) => m,
        Err(_) => return flag,
    };
    if model.degenerate || model.n_modes < 2 {
        flag.dark_mean = model.means[0];
        flag.light_mean = model.means[0];
        flag.dark_weight = 1.0;
        return flag;
    }
    flag.dark_mean = model.means[0];
    flag.light_mean = model.means[1];
    flag.dark_weight = model.weights[0];
    flag.separation = model.means[1] - model.means[0];
    flag.prominent = flag.separation >= params.separation && flag.dark_weight >= params.min_dark_weight;
    flag
}

/// Flags nuclei whose intensity histogram holds a distinct dark mode.
/// Intensities are `255 − hema` so nucleoli, the densest hematoxylin
/// spots, form the lower mode.
pub fn detect_prominent_nucleoli(
    nuclei: &[NucleusRecord],
    hema: &GrayImage,
    params: &NucleoliParams,
) -> Vec<NucleoliFlag> {
    nuclei
        .par_iter()
        .map(|n| {
            let samples: Vec<f64> = n.pixels.iter().map(|&(x, y)| hematoxylin_intensity(hema.get(x, y))).collect();
            classify_intensities(n.id, &samples, params)
        })
        .collect()
}

/// Vertices in the highest-mean mode of a three-mode fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphSelection {
    /// Sorted vertex indices.
    pub vertices: Vec<usize>,
    pub mode_means: Vec<f64>,
    /// No spread in the coefficients: every vertex was selected.
    pub degenerate: bool,
}

pub fn select_high_mode(coefficients: &[f64]) -> Result<SubgraphSelection, PatternError> {
    let model = gmm_em_1d(coefficients, 3, 0, EM_TOL)?;
    if model.degenerate {
        return Ok(SubgraphSelection {
            vertices: (0..coefficients.len()).collect(),
            mode_means: model.means,
            degenerate: true,
        });
    }
    let top = model.n_modes - 1;
    let vertices = gmm_assign(coefficients, &model)
        .into_iter()
        .enumerate()
        .filter(|&(_, m)| m == top)
        .map(|(i, _)| i)
        .collect();
    Ok(SubgraphSelection { vertices, mode_means: model.means, degenerate: false })
}

/// High-clustering subgraph, taken as the tumor gland nuclei.
pub fn tumor_subgraph(graph: &NucleiGraph) -> Result<SubgraphSelection, PatternError> {
    let eligible = graph.adjacency.iter().filter(|a| a.len() >= 2).count();
    if eligible < MIN_ELIGIBLE_VERTICES {
        return Err(PatternError::InsufficientGraph { eligible });
    }
    select_high_mode(&graph.coefficients)
}

/// Connected components of the subgraph induced by `vertices`, each sorted.
pub fn subgraph_components(graph: &NucleiGraph, vertices: &[usize]) -> Vec<Vec<usize>> {
    let mut member = vec![false; graph.len()];
    vertices.iter().for_each(|&v| member[v] = true);
    let mut seen = vec![false; graph.len()];
    let mut out = Vec::new();
    for &start in vertices {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            for &n in &graph.adjacency[comp[i]] {
                if member[n] && !seen[n] {
                    seen[n] = true;
                    comp.push(n);
                }
            }
            i += 1;
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort_unstable_by_key(|c| c[0]);
    out
}

/// `4πa/P²`: the area over that of the disc with the same circumference.
pub fn roundness(area: f64, perimeter: f64) -> f64 {
    4.0 * PI * area / (perimeter * perimeter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LumenCandidate {
    pub pixels: Vec<(u32, u32)>,
    pub area: usize,
    pub perimeter: f64,
    pub roundness: f64,
}

impl LumenCandidate {
    pub fn centroid(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self.pixels.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        (sx / n, sy / n)
    }

    fn offset(mut self, dx: u32, dy: u32) -> Self {
        self.pixels.iter_mut().for_each(|p| *p = (p.0 + dx, p.1 + dy));
        self
    }
}

/// White components (every channel above `threshold`) not touching the
/// image border, of at least `min_area` pixels.
pub fn extract_lumen_candidates(region: &RgbImage, threshold: u8, min_area: usize) -> Vec<LumenCandidate> {
    let mask = BitMask {
        width: region.width,
        height: region.height,
        data: region.pixels.iter().map(|p| p.iter().all(|&c| c > threshold)).collect(),
    };
    connected_components(&mask)
        .into_iter()
        .filter(|c| !c.touches_border && c.area() >= min_area.max(1))
        .map(|c| {
            let perimeter = boundary_perimeter(&c.pixels);
            let area = c.area();
            let r = if perimeter > 0.0 { roundness(area as f64, perimeter) } else { 0.0 };
            LumenCandidate { pixels: c.pixels, area, perimeter, roundness: r }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CribriformParams {
    pub hull_dilation_um: f64,
    pub min_roundness: f64,
    pub min_lumens: usize,
    pub channel_threshold: u8,
    pub min_lumen_area_px: usize,
}

impl Default for CribriformParams {
    fn default() -> Self {
        Self { hull_dilation_um: 15.0, min_roundness: 0.7, min_lumens: 3, channel_threshold: 200, min_lumen_area_px: 64 }
    }
}

/// Pixel region placed at `origin` in level-0 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedMask {
    pub origin: (u32, u32),
    pub mask: BitMask,
}

impl PlacedMask {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.origin.0 && y >= self.origin.1 && self.mask.get_signed((x - self.origin.0) as i64, (y - self.origin.1) as i64)
    }

    pub fn area(&self) -> usize {
        self.mask.count()
    }

    /// Copy into a full `width × height` frame.
    pub fn to_frame(&self, width: u32, height: u32) -> BitMask {
        let mut out = BitMask::new(width, height);
        for y in 0..self.mask.height {
            for x in 0..self.mask.width {
                let (fx, fy) = (x + self.origin.0, y + self.origin.1);
                if self.mask.get(x, y) && fx < width && fy < height {
                    out.set(fx, fy, true);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CribriformRegion {
    pub gland: PlacedMask,
    pub lumens: Vec<LumenCandidate>,
    /// Nucleus ids of the subgraph component.
    pub nuclei: Vec<usize>,
}

impl CribriformRegion {
    pub fn is_valid(&self, params: &CribriformParams) -> bool {
        self.lumens.len() >= params.min_lumens
            && self.lumens.iter().all(|l| l.roundness >= params.min_roundness && l.pixels.iter().any(|&(x, y)| self.gland.contains(x, y)))
    }

    pub fn export(&self) -> CribriformExport {
        let (x0, y0) = self.gland.origin;
        CribriformExport {
            x: x0,
            y: y0,
            width: self.gland.mask.width,
            height: self.gland.mask.height,
            area: self.gland.area(),
            lumens: self.lumens.iter().map(|l| {
                let c = l.centroid();
                LumenExport { x: c.0, y: c.1, area: l.area, roundness: l.roundness }
            }).collect(),
            nuclei: self.nuclei.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LumenExport {
    pub x: f64,
    pub y: f64,
    pub area: usize,
    pub roundness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CribriformExport {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub area: usize,
    pub lumens: Vec<LumenExport>,
    pub nuclei: usize,
}

/// Cribriform glands of a slide: every connected component of the tumor
/// subgraph becomes a dilated hull at level 0, and components whose hull
/// meets at least `min_lumens` round lumens are reported.
pub fn detect_cribriform(
    slide: &SlidePackage,
    graph: &NucleiGraph,
    params: &CribriformParams,
) -> Result<Vec<CribriformRegion>, PatternError> {
    let selection = match tumor_subgraph(graph) {
        Ok(s) => s,
        Err(PatternError::InsufficientGraph { .. }) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let radius = slide.microns_to_pixels(params.hull_dilation_um, 0)?;
    let (w, h) = (slide.width(), slide.height());
    let components: Vec<Vec<usize>> =
        subgraph_components(graph, &selection.vertices).into_iter().filter(|c| c.len() >= 3).collect();
    let found: Vec<Option<CribriformRegion>> = components
        .par_iter()
        .map(|comp| -> Result<Option<CribriformRegion>, PatternError> {
            let pts: Vec<(f64, f64)> = comp.iter().map(|&v| graph.positions[v]).collect();
            let x0 = (pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - radius - 1.0).floor().max(0.0) as u32;
            let y0 = (pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - radius - 1.0).floor().max(0.0) as u32;
            let x1 = ((pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + radius + 2.0).ceil() as u32).min(w);
            let y1 = ((pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + radius + 2.0).ceil() as u32).min(h);
            if x1 <= x0 || y1 <= y0 {
                return Ok(None);
            }
            let local: Vec<(f64, f64)> = pts.iter().map(|p| (p.0 - x0 as f64, p.1 - y0 as f64)).collect();
            let gland = PlacedMask { origin: (x0, y0), mask: dilated_hull_mask(&local, radius, x1 - x0, y1 - y0) };
            let crop = slide.read_region(0, x0, y0, x1 - x0, y1 - y0)?;
            let lumens: Vec<LumenCandidate> =
                extract_lumen_candidates(&crop, params.channel_threshold, params.min_lumen_area_px)
                    .into_iter()
                    .filter(|l| l.roundness >= params.min_roundness && l.pixels.iter().any(|&(x, y)| gland.mask.get(x, y)))
                    .map(|l| l.offset(x0, y0))
                    .collect();
            if lumens.len() < params.min_lumens {
                return Ok(None);
            }
            let nuclei = comp.iter().map(|&v| graph.ids[v]).collect();
            Ok(Some(CribriformRegion { gland, lumens, nuclei }))
        })
        .collect::<Result<_, _>>()?;
    Ok(found.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuclei::graph_from_edges;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nucleus_with(values: &[(u8, usize)]) -> (NucleusRecord, GrayImage) {
        let total: usize = values.iter().map(|v| v.1).sum();
        let mut img = GrayImage::new(total as u32, 1);
        let mut x = 0;
        for &(v, n) in values {
            for _ in 0..n {
                img.set(x, 0, v);
                x += 1;
            }
        }
        let rec = NucleusRecord {
            id: 7,
            centroid: (0.0, 0.0),
            pixels: (0..total as u32).map(|x| (x, 0)).collect(),
            area: total,
            mean_hematoxylin: 0.0,
        };
        (rec, img)
    }

    #[test]
    fn bimodal_nucleus_is_prominent() {
        // intensities 180 (80%) and 60 (20%)
        let (n, img) = nucleus_with(&[(75, 80), (195, 20)]);
        let f = &detect_prominent_nucleoli(&[n.clone()], &img, &NucleoliParams { separation: 40.0, min_dark_weight: 0.05 })[0];
        assert!(f.prominent);
        assert!((f.dark_mean - 60.0).abs() < 1e-6 && (f.light_mean - 180.0).abs() < 1e-6);
        let f = &detect_prominent_nucleoli(&[n], &img, &NucleoliParams { separation: 150.0, min_dark_weight: 0.05 })[0];
        assert!(!f.prominent);
    }

    #[test]
    fn uniform_and_small_nuclei_are_not_prominent() {
        let (n, img) = nucleus_with(&[(150, 60)]);
        let f = &detect_prominent_nucleoli(&[n], &img, &NucleoliParams::default())[0];
        assert_eq!(f.status, NucleoliStatus::Evaluated);
        assert!(!f.prominent && f.separation == 0.0);
        let (n, img) = nucleus_with(&[(150, 10), (240, 5)]);
        let f = &detect_prominent_nucleoli(&[n], &img, &NucleoliParams::default())[0];
        assert_eq!(f.status, NucleoliStatus::Insufficient);
        assert!(!f.prominent);
    }

    #[test]
    fn high_mode_is_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = Vec::new();
        for &centre in &[0.05, 0.4, 0.9] {
            for _ in 0..40 {
                c.push(centre + rng.gen_range(-0.02..0.02));
            }
        }
        let s = select_high_mode(&c).unwrap();
        assert_eq!(s.vertices, (80..120).collect::<Vec<_>>());
        let s = select_high_mode(&[0.5; 30]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.vertices.len(), 30);
    }

    #[test]
    fn sparse_graph_is_insufficient() {
        let g = graph_from_edges(vec![0, 1, 2], vec![(0.0, 0.0); 3], vec![(0, 1), (1, 2), (0, 2)], 30.0);
        assert!(matches!(tumor_subgraph(&g), Err(PatternError::InsufficientGraph { eligible: 3 })));
    }

    #[test]
    fn roundness_closed_forms() {
        let r = 7.0;
        assert!((roundness(PI * r * r, 2.0 * PI * r) - 1.0).abs() < 1e-15);
        assert_eq!(roundness(1.0, 4.0), PI / 4.0);
        assert!((roundness(20.0, 42.0) - 0.1425).abs() < 1e-3);
    }

    fn disc_image(size: u32, discs: &[(f64, f64, f64)]) -> RgbImage {
        let mut img = RgbImage::filled(size, size, [120, 60, 140]);
        for y in 0..size {
            for x in 0..size {
                if discs.iter().any(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r) {
                    img.set(x, y, [240, 235, 245]);
                }
            }
        }
        img
    }

    #[test]
    fn rasterized_discs_are_round() {
        for r in [10.0, 20.0, 40.0] {
            let c = extract_lumen_candidates(&disc_image(120, &[(60.0, 60.0, r)]), 200, 1);
            assert_eq!(c.len(), 1);
            assert!(c[0].roundness >= 0.9, "r {r}: {}", c[0].roundness);
        }
    }

    #[test]
    fn dark_region_and_border_blobs_give_nothing() {
        assert!(extract_lumen_candidates(&RgbImage::filled(50, 50, [90, 40, 120]), 200, 1).is_empty());
        assert!(extract_lumen_candidates(&disc_image(60, &[(0.0, 30.0, 10.0)]), 200, 1).is_empty());
    }

    #[test]
    fn bar_is_not_round() {
        let mut img = RgbImage::filled(60, 20, [90, 40, 120]);
        for y in 5..7 {
            for x in 10..50 {
                img.set(x, y, [250, 250, 250]);
            }
        }
        let c = extract_lumen_candidates(&img, 200, 1);
        assert_eq!(c.len(), 1);
        assert!(c[0].roundness < 0.4);
    }
}
