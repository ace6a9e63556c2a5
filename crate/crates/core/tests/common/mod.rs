#![allow(dead_code)]

use partigen::geometry::{LandmarkSet, Point, NUM_LANDMARKS};
use partigen::image::Mask;
use rand::Rng;

/// Landmarks drawn uniformly inside `[margin, size - margin)`, each missing with `p_missing`.
pub fn random_landmarks(rng: &mut impl Rng, h: usize, w: usize, p_missing: f64, margin: f64) -> LandmarkSet {
    let mut pts = [None; NUM_LANDMARKS];
    for p in pts.iter_mut() {
        if rng.gen::<f64>() >= p_missing {
            *p = Some(Point::new(
                rng.gen_range(margin..h as f64 - margin),
                rng.gen_range(margin..w as f64 - margin),
            ));
        }
    }
    LandmarkSet::new(pts, h, w).unwrap()
}

/// Union of a few random ellipses.
pub fn random_blob(rng: &mut impl Rng, h: usize, w: usize) -> Mask {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..5))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(2.0..h as f64 / 2.0),
                rng.gen_range(2.0..w as f64 / 2.0),
            )
        })
        .collect();
    Mask::from_fn(h, w, |(r, c)| {
        blobs.iter().any(|&(cr, cc, ar, ac)| {
            let (dr, dc) = ((r as f64 - cr) / ar, (c as f64 - cc) / ac);
            dr * dr + dc * dc <= 1.0
        })
    })
}

/// Independent point-in-convex-polygon test via edge cross products (either winding).
pub fn in_convex(poly: &[(f64, f64)], p: (f64, f64), eps: f64) -> bool {
    let n = poly.len();
    let mut sign = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let cross = ((b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)) / len;
        if cross.abs() <= eps {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Crossing-number test for an arbitrary simple polygon.
pub fn in_polygon(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    let mut crossings = 0;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.0 <= p.0 && b.0 > p.0) || (b.0 <= p.0 && a.0 > p.0) {
            let t = (p.0 - a.0) / (b.0 - a.0);
            if p.1 < a.1 + t * (b.1 - a.1) {
                crossings += 1;
            }
        }
    }
    crossings % 2 == 1
}

pub fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / l2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}
