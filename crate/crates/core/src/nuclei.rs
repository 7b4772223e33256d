//! Threshold-based nucleus extraction from the hematoxylin image, the
//! nuclei proximity graph and per-vertex clustering coefficients.

use serde::{Deserialize, Serialize};

use crate::colorspace::GrayImage;
use crate::regions::{connected_components, BitMask};

pub const DEFAULT_GRAPH_RADIUS_UM: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleusParams {
    /// Hematoxylin image values at or above this are nuclear.
    pub threshold: u8,
    pub min_area_um2: f64,
    pub max_area_um2: f64,
}

impl Default for NucleusParams {
    fn default() -> Self {
        Self { threshold: 128, min_area_um2: 10.0, max_area_um2: 120.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NucleusRecord {
    pub id: usize,
    /// Centroid in plane pixels.
    pub centroid: (f64, f64),
    pub pixels: Vec<(u32, u32)>,
    pub area: usize,
    /// Mean hematoxylin image value over the pixels.
    pub mean_hematoxylin: f64,
}

/// Compact export form of a nucleus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusExport {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub area: usize,
}

impl NucleusRecord {
    pub fn export(&self) -> NucleusExport {
        NucleusExport { id: self.id, x: self.centroid.0, y: self.centroid.1, area: self.area }
    }
}

/// Sets background pixels whose four edge neighbours are all foreground.
fn fill_pinholes(mask: &mut BitMask) {
    let orig = mask.clone();
    for y in 1..mask.height.saturating_sub(1) {
        for x in 1..mask.width.saturating_sub(1) {
            if !orig.get(x, y) && orig.get(x - 1, y) && orig.get(x + 1, y) && orig.get(x, y - 1) && orig.get(x, y + 1) {
                mask.set(x, y, true);
            }
        }
    }
}

/// Thresholds the hematoxylin image, fills single-pixel holes, and keeps
/// 8-connected components whose area lies within the configured bounds.
/// Ids follow raster order of each component's first pixel.
pub fn extract_nuclei(hema: &GrayImage, mpp: f64, params: &NucleusParams) -> Vec<NucleusRecord> {
    let mut mask = BitMask {
        width: hema.width,
        height: hema.height,
        data: hema.data.iter().map(|&v| v >= params.threshold).collect(),
    };
    fill_pinholes(&mut mask);
    let px_area = mpp * mpp;
    let min_px = params.min_area_um2 / px_area;
    let max_px = params.max_area_um2 / px_area;
    connected_components(&mask)
        .into_iter()
        .filter(|c| (min_px..=max_px).contains(&(c.area() as f64)))
        .enumerate()
        .map(|(id, c)| {
            let sum: f64 = c.pixels.iter().map(|&(x, y)| hema.get(x, y) as f64).sum();
            NucleusRecord {
                id,
                centroid: c.centroid(),
                area: c.area(),
                mean_hematoxylin: sum / c.area() as f64,
                pixels: c.pixels,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NucleiGraph {
    /// Nucleus id of each vertex.
    pub ids: Vec<usize>,
    pub positions: Vec<(f64, f64)>,
    /// Vertex-index pairs `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Sorted neighbour lists.
    pub adjacency: Vec<Vec<usize>>,
    pub radius_microns: f64,
    pub coefficients: Vec<f64>,
}

impl NucleiGraph {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    /// Edges as sorted pairs of nucleus ids.
    pub fn id_edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (self.ids[i], self.ids[j]);
                (a.min(b), a.max(b))
            })
            .collect();
        e.sort_unstable();
        e
    }
}

/// Proximity graph over points: an edge joins two points at most
/// `radius_px` apart. A uniform grid keeps the search local.
pub fn proximity_edges(points: &[(f64, f64)], radius_px: f64) -> Vec<(usize, usize)> {
    if points.is_empty() || !(radius_px > 0.0) {
        return Vec::new();
    }
    let min_x = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let min_y = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let cell = radius_px;
    let key = |p: &(f64, f64)| (((p.0 - min_x) / cell).floor() as i64, ((p.1 - min_y) / cell).floor() as i64);
    let mut grid: std::collections::HashMap<(i64, i64), Vec<usize>> = std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let r2 = radius_px * radius_px;
    let mut edges = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let (gx, gy) = key(p);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(cell) = grid.get(&(gx + dx, gy + dy)) {
                    for &j in cell {
                        if j > i {
                            let q = points[j];
                            if (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) <= r2 {
                                edges.push((i, j));
                            }
                        }
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Graph over nucleus centroids with edges for distances up to
/// `radius_microns`.
pub fn build_nuclei_graph(nuclei: &[NucleusRecord], mpp: f64, radius_microns: f64) -> NucleiGraph {
    let positions: Vec<(f64, f64)> = nuclei.iter().map(|n| n.centroid).collect();
    let ids = nuclei.iter().map(|n| n.id).collect();
    graph_from_points(ids, positions, radius_microns / mpp, radius_microns)
}

pub fn graph_from_points(ids: Vec<usize>, positions: Vec<(f64, f64)>, radius_px: f64, radius_microns: f64) -> NucleiGraph {
    let edges = proximity_edges(&positions, radius_px);
    graph_from_edges(ids, positions, edges, radius_microns)
}

pub fn graph_from_edges(
    ids: Vec<usize>,
    positions: Vec<(f64, f64)>,
    mut edges: Vec<(usize, usize)>,
    radius_microns: f64,
) -> NucleiGraph {
    for e in edges.iter_mut() {
        *e = (e.0.min(e.1), e.0.max(e.1));
    }
    edges.retain(|e| e.0 != e.1);
    edges.sort_unstable();
    edges.dedup();
    let mut adjacency = vec![Vec::new(); ids.len()];
    for &(i, j) in &edges {
        adjacency[i].push(j);
        adjacency[j].push(i);
    }
    adjacency.iter_mut().for_each(|a| a.sort_unstable());
    let mut g = NucleiGraph { ids, positions, edges, adjacency, radius_microns, coefficients: Vec::new() };
    g.coefficients = clustering_coefficients(&g);
    g
}

/// `C_i = 2 e_i / (k_i (k_i − 1))` with `e_i` the edges among the
/// neighbours of `i`; vertices of degree below 2 get 0.
pub fn clustering_coefficients(graph: &NucleiGraph) -> Vec<f64> {
    graph
        .adjacency
        .iter()
        .map(|nbrs| {
            let k = nbrs.len();
            if k < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (a, &j) in nbrs.iter().enumerate() {
                for &l in &nbrs[a + 1..] {
                    if graph.adjacency[j].binary_search(&l).is_ok() {
                        links += 1;
                    }
                }
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        })
        .collect()
}
