//! Pixel rendering through the forward stain model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layout::{Circle, Ellipse, Layout};
use super::Pattern;
use crate::colorspace::{od_table, RgbImage};
use crate::mat3::{self, Vec3};
use crate::stain::StainModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tissue {
    Glass = 0,
    Stroma,
    Epithelium,
    Lumen,
    Nucleus,
    Nucleolus,
    Marker,
}

/// Stain densities `(hematoxylin, eosin)` of each tissue class.
pub fn densities(t: Tissue) -> (f64, f64) {
    match t {
        Tissue::Glass => (0.01, 0.005),
        Tissue::Lumen => (0.02, 0.01),
        Tissue::Stroma => (0.40, 2.50),
        Tissue::Epithelium => (0.45, 0.15),
        Tissue::Nucleus => (3.30, 0.30),
        Tissue::Nucleolus => (5.00, 0.30),
        Tissue::Marker => (0.0, 0.0),
    }
}

pub const MARKER_RGB: [u8; 3] = [30, 120, 70];
/// Half-width of the uniform noise added to each stain density.
pub const DENSITY_NOISE: f64 = 0.01;

/// Per-pixel tissue class and pattern, level 0.
pub struct TissueMap {
    pub width: u32,
    pub height: u32,
    pub tissue: Vec<Tissue>,
    pub pattern: Vec<u8>,
}

impl TissueMap {
    fn paint(&mut self, bbox: (f64, f64, f64, f64), inside: impl Fn(f64, f64) -> bool, mut f: impl FnMut(&mut Tissue, &mut u8)) {
        let (w, h) = (self.width as i64, self.height as i64);
        let x0 = (bbox.0.floor() as i64).clamp(0, w);
        let y0 = (bbox.1.floor() as i64).clamp(0, h);
        let x1 = (bbox.2.ceil() as i64 + 1).clamp(0, w);
        let y1 = (bbox.3.ceil() as i64 + 1).clamp(0, h);
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64, y as f64) {
                    let i = (y * w + x) as usize;
                    f(&mut self.tissue[i], &mut self.pattern[i]);
                }
            }
        }
    }

    fn paint_circle(&mut self, c: &Circle, f: impl FnMut(&mut Tissue, &mut u8)) {
        self.paint((c.cx - c.r, c.cy - c.r, c.cx + c.r, c.cy + c.r), |x, y| c.contains(x, y), f);
    }

    fn paint_ellipse(&mut self, e: &Ellipse, f: impl FnMut(&mut Tissue, &mut u8)) {
        let r = e.extent();
        self.paint((e.cx - r, e.cy - r, e.cx + r, e.cy + r), |x, y| e.contains(x, y), f);
    }
}

/// Rasterizes the layout. With `with_nuclei == false` only glands and
/// lumens are drawn (used to balance mixtures).
pub fn rasterize(layout: &Layout, with_nuclei: bool) -> TissueMap {
    let (w, h) = (layout.size, layout.size);
    let n = w as usize * h as usize;
    let mut map = TissueMap { width: w, height: h, tissue: vec![Tissue::Glass; n], pattern: vec![0; n] };
    map.paint_ellipse(&layout.tissue, |t, _| *t = Tissue::Stroma);
    let g3 = Pattern::Grade3 as u8;
    let g4 = Pattern::Grade4 as u8;
    for g in &layout.rings {
        map.paint_circle(&g.outer(), |t, p| {
            *t = Tissue::Epithelium;
            *p = g3;
        });
        map.paint_circle(&g.lumen, |t, _| *t = Tissue::Lumen);
    }
    for s in &layout.sheets {
        for d in &s.discs {
            map.paint_circle(d, |t, p| {
                *t = Tissue::Epithelium;
                *p = g4;
            });
        }
    }
    for s in &layout.sheets {
        for e in &s.slits {
            map.paint_ellipse(e, |t, _| *t = Tissue::Lumen);
        }
    }
    if let Some(c) = &layout.cribriform {
        map.paint_circle(&c.disc, |t, p| {
            *t = Tissue::Epithelium;
            *p = g4;
        });
        for l in &c.lumens {
            map.paint_circle(l, |t, _| *t = Tissue::Lumen);
        }
    }
    if with_nuclei {
        for nuc in &layout.nuclei {
            map.paint_ellipse(&nuc.shape, |t, _| *t = Tissue::Nucleus);
            if let Some(c) = &nuc.nucleolus {
                map.paint_circle(c, |t, _| *t = Tissue::Nucleolus);
            }
        }
    }
    if let Some(m) = layout.marker {
        let s = layout.size as f64;
        map.paint((0.0, 0.0, s, s), |x, y| m.contains(x, y), |t, _| *t = Tissue::Marker);
    }
    map
}

/// Quantizes an H&E optical density to 8-bit RGB whose own optical density
/// lies as close as possible to the plane spanned by the H and E vectors.
/// Red and green are searched within ±2 levels of their rounded values and
/// blue is solved from the plane equation.
pub struct PlaneQuantizer {
    normal: Vec3,
    table: [f64; 256],
}

impl PlaneQuantizer {
    pub fn new(model: &StainModel) -> Self {
        Self { normal: mat3::normalize(mat3::cross(&model.u, &model.v)), table: od_table() }
    }

    fn continuous(o: f64) -> f64 {
        256.0 * (-o).exp() - 1.0
    }

    pub fn quantize(&self, od: Vec3) -> [u8; 3] {
        let n = self.normal;
        let target = od.map(Self::continuous);
        let base = target.map(|c| c.round().clamp(0.0, 255.0) as i32);
        let mut best: Option<(f64, f64, [u8; 3])> = None;
        for dr in -2..=2 {
            let r = base[0] + dr;
            if !(0..=255).contains(&r) {
                continue;
            }
            for dg in -2..=2 {
                let g = base[1] + dg;
                if !(0..=255).contains(&g) {
                    continue;
                }
                let (or, og) = (self.table[r as usize], self.table[g as usize]);
                let ob = -(n[0] * or + n[1] * og) / n[2];
                let bc = Self::continuous(ob).clamp(0.0, 255.0);
                for b in [bc.floor() as i32, bc.ceil() as i32] {
                    if !(0..=255).contains(&b) || (b - base[2]).abs() > 3 {
                        continue;
                    }
                    let res = (n[0] * or + n[1] * og + n[2] * self.table[b as usize]).abs();
                    let dist = (r as f64 - target[0]).powi(2) + (g as f64 - target[1]).powi(2) + (b as f64 - target[2]).powi(2);
                    let better = match best {
                        None => true,
                        Some((br, bd, _)) => res < br || (res == br && dist < bd),
                    };
                    if better {
                        best = Some((res, dist, [r as u8, g as u8, b as u8]));
                    }
                }
            }
        }
        best.map(|b| b.2).unwrap_or_else(|| base.map(|c| c as u8))
    }
}

/// Colours every pixel from its tissue class plus seeded density noise.
/// Rows use independent random streams so the result does not depend on
/// scheduling.
pub fn shade(map: &TissueMap, model: &StainModel, seed: u64) -> RgbImage {
    let q = PlaneQuantizer::new(model);
    let w = map.width as usize;
    let rows: Vec<Vec<[u8; 3]>> = (0..map.height as usize)
        .into_par_iter()
        .map(|y| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(y as u64 + 1);
            (0..w)
                .map(|x| {
                    let t = map.tissue[y * w + x];
                    if t == Tissue::Marker {
                        return MARKER_RGB.map(|c| (c as i32 + rng.gen_range(-2..=2)) as u8);
                    }
                    let (h, e) = densities(t);
                    let h = (h + rng.gen_range(-DENSITY_NOISE..=DENSITY_NOISE)).max(0.0);
                    let e = (e + rng.gen_range(-DENSITY_NOISE..=DENSITY_NOISE)).max(0.0);
                    q.quantize([0, 1, 2].map(|k| h * model.u[k] + e * model.v[k]))
                })
                .collect()
        })
        .collect();
    RgbImage { width: map.width, height: map.height, pixels: rows.into_iter().flatten().collect() }
}
