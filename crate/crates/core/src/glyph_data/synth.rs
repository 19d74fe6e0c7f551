//! Procedural stroke glyphs.
//!
//! A category is a handful of strokes (straight segments and circular arcs)
//! anchored on a 5x5 lattice inside the unit square. Modern renderings draw
//! the skeleton exactly with a per-style pen (width, slant, cap rounding);
//! ancient renderings jitter each stroke with a small affine map, drop some
//! strokes and vary their thickness.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::rng::{self, Rng};

/// Bumped whenever rendering output changes for a fixed seed.
pub const GENERATOR_VERSION: u32 = 1;

const LATTICE: usize = 5;
const LATTICE_LO: f64 = 0.14;
const LATTICE_HI: f64 = 0.86;
const ARC_SEGMENTS: usize = 12;
pub const DROPOUT: f64 = 0.15;
pub const JITTER: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

fn lattice(i: usize) -> f64 {
    LATTICE_LO + (LATTICE_HI - LATTICE_LO) * i as f64 / (LATTICE - 1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stroke {
    Segment { a: Point, b: Point },
    /// Angles in radians; y grows downwards.
    Arc { center: Point, radius: f64, start: f64, sweep: f64 },
}

impl Stroke {
    pub fn polyline(&self) -> Vec<Point> {
        match *self {
            Stroke::Segment { a, b } => vec![a, b],
            Stroke::Arc { center, radius, start, sweep } => (0..=ARC_SEGMENTS)
                .map(|i| {
                    let th = start + sweep * i as f64 / ARC_SEGMENTS as f64;
                    Point::new(center.x + radius * th.cos(), center.y + radius * th.sin())
                })
                .collect(),
        }
    }

    /// Integer key identifying the primitive on the lattice.
    fn key(&self) -> [i64; 5] {
        let q = |v: f64| (v * 1000.0).round() as i64;
        match *self {
            Stroke::Segment { a, b } => {
                let (p, r) = if (q(a.x), q(a.y)) <= (q(b.x), q(b.y)) { (a, b) } else { (b, a) };
                [0, q(p.x) * 10_000 + q(p.y), q(r.x) * 10_000 + q(r.y), 0, 0]
            }
            Stroke::Arc { center, radius, start, sweep } => {
                [1, q(center.x) * 10_000 + q(center.y), q(radius), q(start), q(sweep)]
            }
        }
    }
}

/// Canonical stroke composition of one category.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub strokes: Vec<Stroke>,
}

impl Skeleton {
    pub fn signature(&self) -> Vec<[i64; 5]> {
        let mut k: Vec<_> = self.strokes.iter().map(Stroke::key).collect();
        k.sort_unstable();
        k
    }
}

fn random_stroke(rng: &mut Rng) -> Stroke {
    let step = (LATTICE_HI - LATTICE_LO) / (LATTICE - 1) as f64;
    if rng.random_bool(0.75) {
        // Segment: horizontal, vertical or diagonal between lattice points.
        loop {
            let (i, j) = (rng::below(rng, LATTICE), rng::below(rng, LATTICE));
            let len = 1 + rng::below(rng, LATTICE - 1) as i64;
            let dir = [(1i64, 0i64), (0, 1), (1, 1), (1, -1)][rng::below(rng, 4)];
            let (i2, j2) = (i as i64 + dir.0 * len, j as i64 + dir.1 * len);
            if (0..LATTICE as i64).contains(&i2) && (0..LATTICE as i64).contains(&j2) {
                return Stroke::Segment {
                    a: Point::new(lattice(i), lattice(j)),
                    b: Point::new(lattice(i2 as usize), lattice(j2 as usize)),
                };
            }
        }
    }
    let radius = step * (1 + rng::below(rng, 2)) as f64;
    let lo = (radius / step).round() as usize;
    let (i, j) = (lo + rng::below(rng, LATTICE - 2 * lo), lo + rng::below(rng, LATTICE - 2 * lo));
    Stroke::Arc {
        center: Point::new(lattice(i), lattice(j)),
        radius,
        start: rng::below(rng, 4) as f64 * PI / 2.0,
        sweep: if rng.random_bool(0.5) { PI / 2.0 } else { PI },
    }
}

/// Draw `n` distinct skeletons with 3 to 7 distinct strokes each.
pub fn skeletons(n: usize, seed: u64) -> Vec<Skeleton> {
    let mut rng = rng::substream(seed, "skeletons", 0);
    let mut out: Vec<Skeleton> = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    while out.len() < n {
        let count = 3 + rng::below(&mut rng, 5);
        let mut strokes: Vec<Stroke> = Vec::with_capacity(count);
        while strokes.len() < count {
            let s = random_stroke(&mut rng);
            if strokes.iter().all(|o| o.key() != s.key()) {
                strokes.push(s);
            }
        }
        let sk = Skeleton { strokes };
        if seen.insert(sk.signature()) {
            out.push(sk);
        }
    }
    out
}

/// Pen used to draw a modern rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pen {
    /// Stroke width as a fraction of the image side.
    pub width: f64,
    /// Horizontal shear applied about the glyph centre.
    pub slant: f64,
    /// 0 gives square stroke ends, 1 fully round ends.
    pub rounding: f64,
}

pub const CANONICAL_PEN: Pen = Pen { width: 0.065, slant: 0.0, rounding: 1.0 };

/// `n` style pens; deterministic in `seed`.
pub fn style_pens(n: usize, seed: u64) -> Vec<Pen> {
    (0..n)
        .map(|i| {
            let mut r = rng::substream(seed, "style", i as u64);
            Pen {
                width: r.random_range(0.04..0.095),
                slant: r.random_range(-0.22..0.22),
                rounding: r.random_range(0.0..1.0),
            }
        })
        .collect()
}

/// A stroke placed for rendering, with its own width.
#[derive(Clone, Debug)]
pub struct PlacedStroke {
    pub points: Vec<Point>,
    pub width: f64,
}

pub fn modern_strokes(sk: &Skeleton, pen: &Pen) -> Vec<PlacedStroke> {
    let shear = |p: Point| Point::new(p.x + pen.slant * (0.5 - p.y), p.y);
    sk.strokes
        .iter()
        .map(|s| PlacedStroke { points: s.polyline().into_iter().map(shear).collect(), width: pen.width })
        .collect()
}

/// Ancient-style strokes and the indices of skeleton strokes they keep.
pub fn ancient_strokes(sk: &Skeleton, rng: &mut Rng) -> (Vec<PlacedStroke>, Vec<usize>) {
    let n = sk.strokes.len();
    let mut keep: Vec<usize> = (0..n).filter(|_| !rng.random_bool(DROPOUT)).collect();
    let mut i = 0;
    while keep.len() < 2.min(n) {
        if !keep.contains(&i) {
            keep.push(i);
        }
        i += 1;
    }
    keep.sort_unstable();
    let base_width = rng.random_range(0.045..0.075);
    let strokes = keep
        .iter()
        .map(|&k| {
            let pts = sk.strokes[k].polyline();
            let cx = pts.iter().map(|p| p.x).sum::<f64>() / pts.len() as f64;
            let cy = pts.iter().map(|p| p.y).sum::<f64>() / pts.len() as f64;
            let rot: f64 = rng.random_range(-0.2..0.2);
            let scale = 1.0 + rng.random_range(-JITTER..JITTER);
            let (tx, ty) = (rng.random_range(-JITTER..JITTER) * 0.5, rng.random_range(-JITTER..JITTER) * 0.5);
            let (c, s) = (rot.cos(), rot.sin());
            let points = pts
                .iter()
                .map(|p| {
                    let (dx, dy) = ((p.x - cx) * scale, (p.y - cy) * scale);
                    Point::new(cx + c * dx - s * dy + tx, cy + s * dx + c * dy + ty)
                })
                .collect();
            PlacedStroke { points, width: base_width * rng.random_range(0.7..1.45) }
        })
        .collect();
    (strokes, keep)
}

/// Rasterize strokes onto a `size x size` plane with 2x2 supersampling.
/// Ink is +1, background -1.
pub fn rasterize(strokes: &[PlacedStroke], rounding: f64, size: usize) -> Vec<f32> {
    const SS: usize = 2;
    let n = size * SS;
    let scale = n as f64;
    let mut ink = vec![false; n * n];
    for st in strokes {
        let half = st.width * scale / 2.0;
        for w in st.points.windows(2) {
            let (ax, ay) = (w[0].x * scale, w[0].y * scale);
            let (bx, by) = (w[1].x * scale, w[1].y * scale);
            let x0 = ((ax.min(bx) - half - 1.0).floor().max(0.0)) as usize;
            let x1 = ((ax.max(bx) + half + 1.0).ceil().min(n as f64)) as usize;
            let y0 = ((ay.min(by) - half - 1.0).floor().max(0.0)) as usize;
            let y1 = ((ay.max(by) + half + 1.0).ceil().min(n as f64)) as usize;
            let (ux, uy) = (bx - ax, by - ay);
            let len = (ux * ux + uy * uy).sqrt().max(1e-9);
            let (ux, uy) = (ux / len, uy / len);
            for y in y0..y1 {
                for x in x0..x1 {
                    if ink[y * n + x] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5 - ax, y as f64 + 0.5 - ay);
                    let along = px * ux + py * uy;
                    let across = (-px * uy + py * ux).abs();
                    let beyond = if along < 0.0 { -along } else if along > len { along - len } else { 0.0 };
                    let round = (beyond * beyond + across * across).sqrt();
                    let square = beyond.max(across);
                    if (1.0 - rounding) * square + rounding * round <= half {
                        ink[y * n + x] = true;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut c = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    c += ink[(y * SS + sy) * n + x * SS + sx] as usize;
                }
            }
            out[y * size + x] = -1.0 + 2.0 * c as f32 / (SS * SS) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeletons_are_distinct_and_sized() {
        let sks = skeletons(50, 3);
        let sigs: std::collections::HashSet<_> = sks.iter().map(Skeleton::signature).collect();
        assert_eq!(sigs.len(), 50);
        assert!(sks.iter().all(|s| (3..=7).contains(&s.strokes.len())));
        assert_eq!(skeletons(50, 3), sks);
    }

    #[test]
    fn strokes_stay_inside_the_canvas() {
        for sk in skeletons(30, 5) {
            for s in &sk.strokes {
                for p in s.polyline() {
                    assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y), "{p:?}");
                }
            }
        }
    }

    #[test]
    fn ancient_keeps_at_least_two_strokes() {
        let sks = skeletons(40, 9);
        let mut r = rng::seeded(1);
        for sk in &sks {
            for _ in 0..10 {
                let (strokes, kept) = ancient_strokes(sk, &mut r);
                assert!(kept.len() >= 2);
                assert_eq!(strokes.len(), kept.len());
            }
        }
    }

    #[test]
    fn horizontal_bar_rasterizes_where_expected() {
        let bar = PlacedStroke { points: vec![Point::new(0.25, 0.5), Point::new(0.75, 0.5)], width: 0.125 };
        let img = rasterize(&[bar], 0.0, 16);
        // Rows 7 and 8 fully inked between columns 4 and 11.
        for x in 4..12 {
            assert_eq!(img[7 * 16 + x], 1.0);
            assert_eq!(img[8 * 16 + x], 1.0);
        }
        assert_eq!(img[2 * 16 + 8], -1.0);
        assert_eq!(img[8 * 16 + 1], -1.0);
    }
}
