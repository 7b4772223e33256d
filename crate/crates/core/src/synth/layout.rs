//! Geometric layout of a synthetic slide: glands, sheets, lumens and nuclei,
//! all in level-0 pixel coordinates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Pattern, SynthClass, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }

    pub fn grown(&self, by: f64) -> Circle {
        Circle { r: self.r + by, ..*self }
    }

    fn distance_to_center(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along `angle`.
    pub a: f64,
    pub b: f64,
    /// Radians, measured from the x axis.
    pub angle: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn grown(&self, by: f64) -> Ellipse {
        Ellipse { a: self.a + by, b: self.b + by, ..*self }
    }

    pub fn extent(&self) -> f64 {
        self.a.max(self.b)
    }
}

/// Ring-shaped gland: an epithelial annulus around one round lumen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingGland {
    pub lumen: Circle,
    pub outer_r: f64,
}

impl RingGland {
    pub fn outer(&self) -> Circle {
        Circle { r: self.outer_r, ..self.lumen }
    }
}

/// Fused epithelial sheet: a union of discs with slit-like lumens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sheet {
    pub discs: Vec<Circle>,
    pub slits: Vec<Ellipse>,
}

impl Sheet {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.discs.iter().any(|d| d.contains(x, y))
    }

    /// True when the disc of radius `margin` around the point lies in the
    /// sheet (approximated by containment in a single shrunken disc).
    fn contains_with_margin(&self, x: f64, y: f64, margin: f64) -> bool {
        self.discs.iter().any(|d| d.distance_to_center(x, y) <= d.r - margin)
    }
}

/// Large gland holding several round lumens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CribriformGland {
    pub disc: Circle,
    pub lumens: Vec<Circle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleusShape {
    pub shape: Ellipse,
    /// Inside tumor epithelium (as opposed to stroma).
    pub tumor: bool,
    pub nucleolus: Option<Circle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub size: u32,
    pub tissue: Ellipse,
    pub rings: Vec<RingGland>,
    pub sheets: Vec<Sheet>,
    pub cribriform: Option<CribriformGland>,
    pub nuclei: Vec<NucleusShape>,
    pub marker: Option<MarkerStroke>,
}

/// Sinusoidal pen stroke across the slide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerStroke {
    pub y0: f64,
    pub amplitude: f64,
    pub wavelength: f64,
    pub phase: f64,
    pub half_width: f64,
}

impl MarkerStroke {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let c = self.y0 + self.amplitude * (std::f64::consts::TAU * x / self.wavelength + self.phase).sin();
        (y - c).abs() <= self.half_width
    }
}

/// Physical dimensions, converted to pixels at the slide's µm per pixel.
struct Scale {
    px_per_um: f64,
}

impl Scale {
    fn px(&self, um: f64) -> f64 {
        um * self.px_per_um
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Rejection sampling of points at least `min_dist` apart, accepted by
/// `accept`. A uniform grid keeps the distance test local.
pub fn poisson_disk(
    rng: &mut ChaCha8Rng,
    bbox: (f64, f64, f64, f64),
    min_dist: f64,
    attempts: usize,
    existing: &[(f64, f64)],
    mut accept: impl FnMut(f64, f64) -> bool,
) -> Vec<(f64, f64)> {
    let (x0, y0, x1, y1) = bbox;
    if x1 <= x0 || y1 <= y0 {
        return Vec::new();
    }
    let cell = min_dist;
    let gw = ((x1 - x0) / cell).ceil() as usize + 1;
    let gh = ((y1 - y0) / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<(f64, f64)>> = vec![Vec::new(); gw * gh];
    let index = |x: f64, y: f64| -> Option<(usize, usize)> {
        let gx = ((x - x0) / cell).floor();
        let gy = ((y - y0) / cell).floor();
        (gx >= 0.0 && gy >= 0.0 && (gx as usize) < gw && (gy as usize) < gh).then(|| (gx as usize, gy as usize))
    };
    for &(x, y) in existing {
        if let Some((gx, gy)) = index(x, y) {
            grid[gy * gw + gx].push((x, y));
        }
    }
    let mut out = Vec::new();
    let d2 = min_dist * min_dist;
    for _ in 0..attempts {
        let x = uniform(rng, x0, x1);
        let y = uniform(rng, y0, y1);
        let Some((gx, gy)) = index(x, y) else { continue };
        let mut clear = true;
        'scan: for ny in gy.saturating_sub(1)..=(gy + 1).min(gh - 1) {
            for nx in gx.saturating_sub(1)..=(gx + 1).min(gw - 1) {
                if grid[ny * gw + nx].iter().any(|&(px, py)| (px - x).powi(2) + (py - y).powi(2) < d2) {
                    clear = false;
                    break 'scan;
                }
            }
        }
        if clear && accept(x, y) {
            grid[gy * gw + gx].push((x, y));
            out.push((x, y));
        }
    }
    out
}

fn tissue_ellipse(size: f64) -> Ellipse {
    Ellipse { cx: size / 2.0, cy: size / 2.0, a: 0.48 * size, b: 0.46 * size, angle: 0.0 }
}

/// Columns reserved for each pattern in a slide.
#[derive(Debug, Clone, Copy)]
struct Band {
    x0: f64,
    x1: f64,
}

impl Band {
    fn contains_circle(&self, c: &Circle) -> bool {
        c.cx - c.r >= self.x0 && c.cx + c.r <= self.x1
    }
}

fn place_rings(rng: &mut ChaCha8Rng, spec: &SynthSpec, s: &Scale, tissue: &Ellipse, band: Band, fill: f64) -> Vec<RingGland> {
    let size = spec.size as f64;
    let gap = s.px(25.0);
    let inner = tissue.grown(-s.px(12.0));
    let band_area = tissue_area_in_band(tissue, band, size);
    let mut rings: Vec<RingGland> = Vec::new();
    let mut area = 0.0;
    for _ in 0..6000 {
        if area >= fill * band_area {
            break;
        }
        let lumen_r = uniform(rng, s.px(12.0), s.px(18.0));
        let outer_r = lumen_r + uniform(rng, s.px(14.0), s.px(17.0));
        let cx = uniform(rng, band.x0, band.x1);
        let cy = uniform(rng, 0.0, size);
        let outer = Circle { cx, cy, r: outer_r };
        if !band.contains_circle(&outer) || !circle_in_ellipse(&outer, &inner) {
            continue;
        }
        if rings.iter().any(|g| g.outer().distance_to_center(cx, cy) < g.outer_r + outer_r + gap) {
            continue;
        }
        area += std::f64::consts::PI * (outer_r * outer_r - lumen_r * lumen_r);
        rings.push(RingGland { lumen: Circle { cx, cy, r: lumen_r }, outer_r });
    }
    rings
}

fn circle_in_ellipse(c: &Circle, e: &Ellipse) -> bool {
    (0..16).all(|i| {
        let t = i as f64 * std::f64::consts::TAU / 16.0;
        e.contains(c.cx + c.r * t.cos(), c.cy + c.r * t.sin())
    })
}

fn tissue_area_in_band(tissue: &Ellipse, band: Band, size: f64) -> f64 {
    // coarse grid estimate
    let step = size / 128.0;
    let mut n = 0usize;
    for j in 0..128 {
        for i in 0..128 {
            let (x, y) = ((i as f64 + 0.5) * step, (j as f64 + 0.5) * step);
            if x >= band.x0 && x <= band.x1 && tissue.contains(x, y) {
                n += 1;
            }
        }
    }
    n as f64 * step * step
}

fn place_sheets(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    s: &Scale,
    tissue: &Ellipse,
    band: Band,
    fill: f64,
    keep_out: &[Circle],
) -> Vec<Sheet> {
    let size = spec.size as f64;
    let inner = tissue.grown(-s.px(12.0));
    let band_area = tissue_area_in_band(tissue, band, size);
    let mut sheets: Vec<Sheet> = Vec::new();
    let mut area = 0.0;
    for _ in 0..400 {
        if area >= fill * band_area {
            break;
        }
        let bx = uniform(rng, band.x0, band.x1);
        let by = uniform(rng, 0.0, size);
        let n_discs = rng.gen_range(3..=5);
        let mut discs = Vec::new();
        for _ in 0..n_discs {
            let r = uniform(rng, s.px(30.0), s.px(50.0));
            let jitter = s.px(40.0);
            let d = Circle { cx: bx + uniform(rng, -jitter, jitter), cy: by + uniform(rng, -jitter, jitter), r };
            if band.contains_circle(&d)
                && circle_in_ellipse(&d, &inner)
                && keep_out.iter().all(|k| k.distance_to_center(d.cx, d.cy) > k.r + d.r)
            {
                discs.push(d);
            }
        }
        if discs.len() < 2 {
            continue;
        }
        // rough union area: largest disc plus 60% of the rest
        let mut areas: Vec<f64> = discs.iter().map(|d| std::f64::consts::PI * d.r * d.r).collect();
        areas.sort_by(|a, b| b.total_cmp(a));
        area += areas[0] + 0.6 * areas[1..].iter().sum::<f64>();
        sheets.push(Sheet { discs, slits: Vec::new() });
    }
    for sheet in &mut sheets {
        add_slits(rng, s, sheet);
    }
    sheets
}

fn add_slits(rng: &mut ChaCha8Rng, s: &Scale, sheet: &mut Sheet) {
    let area: f64 = sheet.discs.iter().map(|d| std::f64::consts::PI * d.r * d.r).sum();
    let target = ((area / s.px(80.0).powi(2)).round() as usize).max(1);
    let (x0, y0, x1, y1) = bbox_of(&sheet.discs);
    for _ in 0..200 {
        if sheet.slits.len() >= target {
            break;
        }
        let slit = Ellipse {
            cx: uniform(rng, x0, x1),
            cy: uniform(rng, y0, y1),
            a: uniform(rng, s.px(10.0), s.px(16.0)),
            b: uniform(rng, s.px(1.5), s.px(2.5)),
            angle: uniform(rng, 0.0, std::f64::consts::PI),
        };
        if !sheet.contains_with_margin(slit.cx, slit.cy, slit.a + s.px(6.0)) {
            continue;
        }
        if sheet.slits.iter().any(|o| {
            ((o.cx - slit.cx).powi(2) + (o.cy - slit.cy).powi(2)).sqrt() < o.a + slit.a + s.px(10.0)
        }) {
            continue;
        }
        sheet.slits.push(slit);
    }
}

fn bbox_of(discs: &[Circle]) -> (f64, f64, f64, f64) {
    discs.iter().fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, d| {
        (b.0.min(d.cx - d.r), b.1.min(d.cy - d.r), b.2.max(d.cx + d.r), b.3.max(d.cy + d.r))
    })
}

fn place_cribriform(rng: &mut ChaCha8Rng, spec: &SynthSpec, s: &Scale, tissue: &Ellipse, band: Band) -> Option<CribriformGland> {
    let size = spec.size as f64;
    let inner = tissue.grown(-s.px(12.0));
    for _ in 0..500 {
        let r = uniform(rng, s.px(75.0), s.px(100.0));
        let disc = Circle { cx: uniform(rng, band.x0, band.x1), cy: uniform(rng, 0.0, size), r };
        if !band.contains_circle(&disc) || !circle_in_ellipse(&disc, &inner) {
            continue;
        }
        let n_lumens = rng.gen_range(5..=8);
        let mut lumens: Vec<Circle> = Vec::new();
        for _ in 0..2000 {
            if lumens.len() >= n_lumens {
                break;
            }
            let lr = uniform(rng, s.px(9.0), s.px(14.0));
            let reach = r - lr - s.px(15.0);
            let (cx, cy) = (uniform(rng, -reach, reach), uniform(rng, -reach, reach));
            if cx * cx + cy * cy > reach * reach {
                continue;
            }
            let c = Circle { cx: disc.cx + cx, cy: disc.cy + cy, r: lr };
            if lumens.iter().all(|o| o.distance_to_center(c.cx, c.cy) >= o.r + c.r + s.px(15.0)) {
                lumens.push(c);
            }
        }
        if lumens.len() >= 5 {
            return Some(CribriformGland { disc, lumens });
        }
    }
    None
}

fn marker_stroke(rng: &mut ChaCha8Rng, spec: &SynthSpec, s: &Scale) -> MarkerStroke {
    let size = spec.size as f64;
    MarkerStroke {
        y0: uniform(rng, 0.78, 0.86) * size,
        amplitude: uniform(rng, 0.03, 0.06) * size,
        wavelength: uniform(rng, 0.6, 0.9) * size,
        phase: uniform(rng, 0.0, std::f64::consts::TAU),
        half_width: s.px(24.0),
    }
}

/// Geometry without nuclei; mixtures are balanced afterwards.
pub fn place_structures(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Layout {
    let s = Scale { px_per_um: 1.0 / spec.mpp };
    let size = spec.size as f64;
    let tissue = tissue_ellipse(size);
    let full = Band { x0: 0.0, x1: size };
    let fill = spec.gland_density;
    let mut layout = Layout {
        size: spec.size,
        tissue,
        rings: Vec::new(),
        sheets: Vec::new(),
        cribriform: None,
        nuclei: Vec::new(),
        marker: None,
    };
    match spec.class {
        SynthClass::Benign => {}
        SynthClass::Grade3 => layout.rings = place_rings(rng, spec, &s, &tissue, full, fill),
        SynthClass::Grade4 => {
            let mut keep_out = Vec::new();
            let mut sheet_band = full;
            if spec.cribriform {
                let crib_band = Band { x0: 0.0, x1: 0.5 * size };
                layout.cribriform = place_cribriform(rng, spec, &s, &tissue, crib_band);
                if let Some(c) = &layout.cribriform {
                    keep_out.push(c.disc.grown(s.px(40.0)));
                    sheet_band = Band { x0: c.disc.cx + c.disc.r + s.px(40.0), x1: size };
                }
            }
            layout.sheets = place_sheets(rng, spec, &s, &tissue, sheet_band, fill, &keep_out);
        }
        SynthClass::Mix34 | SynthClass::Mix43 => {
            let split = 0.6 * size;
            let gap = s.px(20.0);
            let (three, four) = if spec.class == SynthClass::Mix34 {
                (Band { x0: 0.0, x1: split - gap }, Band { x0: split + gap, x1: size })
            } else {
                (Band { x0: size - split + gap, x1: size }, Band { x0: 0.0, x1: size - split - gap })
            };
            layout.rings = place_rings(rng, spec, &s, &tissue, three, fill);
            layout.sheets = place_sheets(rng, spec, &s, &tissue, four, fill, &[]);
        }
    }
    if spec.marker {
        layout.marker = Some(marker_stroke(rng, spec, &s));
    }
    layout
}

/// Fills the layout with nuclei: rings of nuclei in ring glands, dense
/// packing in sheets and cribriform glands, sparse nuclei in stroma.
pub fn place_nuclei(spec: &SynthSpec, layout: &mut Layout, rng: &mut ChaCha8Rng) {
    let s = Scale { px_per_um: 1.0 / spec.mpp };
    let size = layout.size as f64;
    let mut nuclei: Vec<NucleusShape> = Vec::new();
    let new_nucleus = |rng: &mut ChaCha8Rng, x: f64, y: f64, angle: f64, tumor: bool| {
        let a = uniform(rng, s.px(3.0), s.px(3.5));
        let b = uniform(rng, s.px(2.0), s.px(2.5));
        let nucleolus = (tumor && rng.gen_bool(spec.nucleoli_fraction.clamp(0.0, 1.0))).then(|| Circle {
            cx: x + uniform(rng, -0.3, 0.3) * b,
            cy: y + uniform(rng, -0.3, 0.3) * b,
            r: s.px(1.0),
        });
        NucleusShape { shape: Ellipse { cx: x, cy: y, a, b, angle }, tumor, nucleolus }
    };

    for g in &layout.rings {
        let mid = 0.5 * (g.lumen.r + g.outer_r);
        let count = ((std::f64::consts::TAU * mid / s.px(10.0)).floor() as usize).max(3);
        let offset = uniform(rng, 0.0, std::f64::consts::TAU);
        for i in 0..count {
            let t = offset + i as f64 * std::f64::consts::TAU / count as f64 + uniform(rng, -0.08, 0.08);
            let r = mid + uniform(rng, -s.px(1.0), s.px(1.0));
            let (x, y) = (g.lumen.cx + r * t.cos(), g.lumen.cy + r * t.sin());
            let n = new_nucleus(rng, x, y, t + std::f64::consts::FRAC_PI_2, true);
            nuclei.push(n);
        }
    }

    let spacing = s.px(9.0);
    let margin = s.px(4.0);
    for sheet in &layout.sheets {
        let (x0, y0, x1, y1) = bbox_of(&sheet.discs);
        let attempts = (40.0 * (x1 - x0) * (y1 - y0) / (spacing * spacing)) as usize;
        let existing: Vec<(f64, f64)> = nuclei.iter().map(|n| (n.shape.cx, n.shape.cy)).collect();
        let pts = poisson_disk(rng, (x0, y0, x1, y1), spacing, attempts, &existing, |x, y| {
            sheet.contains_with_margin(x, y, margin) && sheet.slits.iter().all(|sl| !sl.grown(margin).contains(x, y))
        });
        for (x, y) in pts {
            let angle = uniform(rng, 0.0, std::f64::consts::PI);
            nuclei.push(new_nucleus(rng, x, y, angle, true));
        }
    }
    if let Some(c) = &layout.cribriform {
        let d = c.disc;
        let attempts = (40.0 * 4.0 * d.r * d.r / (spacing * spacing)) as usize;
        let pts = poisson_disk(rng, (d.cx - d.r, d.cy - d.r, d.cx + d.r, d.cy + d.r), spacing, attempts, &[], |x, y| {
            d.distance_to_center(x, y) <= d.r - margin && c.lumens.iter().all(|l| !l.grown(margin).contains(x, y))
        });
        for (x, y) in pts {
            let angle = uniform(rng, 0.0, std::f64::consts::PI);
            nuclei.push(new_nucleus(rng, x, y, angle, true));
        }
    }

    // Stroma nuclei stay farther than the graph radius from any epithelium.
    let clearance = s.px(32.0);
    let tissue = layout.tissue;
    let lay = &*layout;
    let existing: Vec<(f64, f64)> = nuclei.iter().map(|n| (n.shape.cx, n.shape.cy)).collect();
    let pts = poisson_disk(rng, (0.0, 0.0, size, size), s.px(35.0), 4000, &existing, |x, y| {
        tissue.grown(-s.px(6.0)).contains(x, y)
            && lay.rings.iter().all(|g| !g.outer().grown(clearance).contains(x, y))
            && lay.sheets.iter().all(|sh| sh.discs.iter().all(|d| !d.grown(clearance).contains(x, y)))
            && lay.cribriform.as_ref().map_or(true, |c| !c.disc.grown(clearance).contains(x, y))
            && lay.marker.map_or(true, |m| !m.contains(x, y) && !m.contains(x, y - s.px(8.0)) && !m.contains(x, y + s.px(8.0)))
    });
    for (x, y) in pts {
        let angle = uniform(rng, 0.0, std::f64::consts::PI);
        let mut n = new_nucleus(rng, x, y, angle, false);
        // stroma nuclei are thin and elongated
        n.shape.a = uniform(rng, s.px(3.5), s.px(4.0));
        n.shape.b = s.px(1.5);
        nuclei.push(n);
    }
    layout.nuclei = nuclei;
}

impl Layout {
    /// Pattern of the gland structure covering a point, lumens included.
    pub fn pattern_at(&self, x: f64, y: f64) -> Option<Pattern> {
        if self.rings.iter().any(|g| g.outer().contains(x, y)) {
            return Some(Pattern::Grade3);
        }
        if self.sheets.iter().any(|s| s.contains(x, y)) || self.cribriform.as_ref().is_some_and(|c| c.disc.contains(x, y)) {
            return Some(Pattern::Grade4);
        }
        None
    }

    pub fn is_lumen(&self, x: f64, y: f64) -> bool {
        self.rings.iter().any(|g| g.lumen.contains(x, y))
            || self.sheets.iter().any(|s| s.slits.iter().any(|e| e.contains(x, y)))
            || self.cribriform.as_ref().is_some_and(|c| c.lumens.iter().any(|l| l.contains(x, y)))
    }
}
