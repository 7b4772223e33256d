//! Binary masks, 8-connected components, boundary perimeters and convex
//! hull regions.

use std::collections::VecDeque;
use std::f64::consts::SQRT_2;

/// Row-major binary raster.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl BitMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![false; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Out-of-range coordinates read as unset.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as u64) < self.width as u64
            && (y as u64) < self.height as u64
            && self.get(x as u32, y as u32)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and_count(&self, other: &BitMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    /// Intersection over union; two empty masks score 0.
    pub fn iou(&self, other: &BitMask) -> f64 {
        let inter = self.and_count(other);
        let union = self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Sørensen–Dice coefficient; two empty masks score 1.
    pub fn dice(&self, other: &BitMask) -> f64 {
        let total = self.count() + other.count();
        if total == 0 {
            1.0
        } else {
            2.0 * self.and_count(other) as f64 / total as f64
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: &[(u32, u32)]) -> Self {
        let mut m = Self::new(width, height);
        for &(x, y) in pixels {
            m.set(x, y, true);
        }
        m
    }
}

/// One 8-connected component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Pixels in raster order.
    pub pixels: Vec<(u32, u32)>,
    pub touches_border: bool,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        (sx / n, sy / n)
    }
}

const NEIGHBORS_8: [(i64, i64); 8] =
    [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// 8-connected components, ordered by their first pixel in raster order.
pub fn connected_components(mask: &BitMask) -> Vec<Component> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut seen = vec![false; mask.data.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let mut touches_border = false;
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i as i64) % w, (i as i64) / w);
            pixels.push((x as u32, y as u32));
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                touches_border = true;
            }
            for (dx, dy) in NEIGHBORS_8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(Component { pixels, touches_border });
    }
    out
}

// Freeman directions, counter-clockwise from east (y grows downwards).
const FREEMAN: [(i64, i64); 8] =
    [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];

/// Outer boundary length of an 8-connected pixel set, traced through
/// boundary-pixel centres: orthogonal steps count 1, diagonal steps √2.
/// A single pixel has perimeter 0.
pub fn boundary_perimeter(pixels: &[(u32, u32)]) -> f64 {
    let Some(&start) = pixels.iter().min_by_key(|&&(x, y)| (y, x)) else {
        return 0.0;
    };
    let set: std::collections::HashSet<(i64, i64)> =
        pixels.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    let p0 = (start.0 as i64, start.1 as i64);

    let step = |p: (i64, i64), dir: usize| -> Option<(usize, (i64, i64))> {
        let first = if dir % 2 == 0 { (dir + 7) % 8 } else { (dir + 6) % 8 };
        (0..8).map(|i| (first + i) % 8).find_map(|d| {
            let q = (p.0 + FREEMAN[d].0, p.1 + FREEMAN[d].1);
            set.contains(&q).then_some((d, q))
        })
    };

    let Some((d0, p1)) = step(p0, 7) else {
        return 0.0;
    };
    let weight = |d: usize| if d % 2 == 0 { 1.0 } else { SQRT_2 };
    let mut length = weight(d0);
    let (mut dir, mut cur) = (d0, p1);
    // Jacob's criterion: stop on re-entering the first edge.
    let limit = 4 * pixels.len() + 8;
    for _ in 0..limit {
        let (d, next) = step(cur, dir).expect("connected pixel has a neighbour");
        if cur == p0 && next == p1 {
            break;
        }
        length += weight(d);
        dir = d;
        cur = next;
    }
    length
}

/// Convex hull by the monotone chain, counter-clockwise, without collinear
/// points.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn segment_distance_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Pixels whose centre lies inside the convex hull of `points` or within
/// `radius` of it.
pub fn dilated_hull_mask(points: &[(f64, f64)], radius: f64, width: u32, height: u32) -> BitMask {
    let hull = convex_hull(points);
    let mut mask = BitMask::new(width, height);
    if hull.is_empty() {
        return mask;
    }
    let min_x = hull.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - radius;
    let max_x = hull.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + radius;
    let min_y = hull.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - radius;
    let max_y = hull.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + radius;
    let x0 = min_x.floor().max(0.0) as u32;
    let y0 = min_y.floor().max(0.0) as u32;
    let x1 = (max_x.ceil().max(0.0) as u32).min(width.saturating_sub(1));
    let y1 = (max_y.ceil().max(0.0) as u32).min(height.saturating_sub(1));
    let r2 = radius * radius;
    let n = hull.len();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = (x as f64, y as f64);
            let inside = n >= 3
                && (0..n).all(|i| {
                    let (a, b) = (hull[i], hull[(i + 1) % n]);
                    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0
                });
            let near = inside
                || (0..n).any(|i| segment_distance_sq(p, hull[i], hull[(i + 1) % n]) <= r2);
            if near {
                mask.set(x, y, true);
            }
        }
    }
    mask
}
