//! Per-part affine transforms and their application to encoder feature maps.
//!
//! Each body part's coarse region is built twice, once from the source pose and
//! once from the target pose (both sized with the source body-shape index). The
//! affine map between the two sets of region corners is fitted by linear least
//! squares. At each skip-connection resolution, the source features of a part
//! are masked, moved by that part's transform, and the ten results are summed.

use nalgebra::{DMatrix, Matrix2, Vector2};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::{region_shape, BodyPart, LandmarkSet, Point, NUM_PARTS};
use crate::image::Mask;

/// Row-major 2x3 affine map on `(row, col)` coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(m: [[f64; 3]; 2]) -> Self {
        Self { m }
    }

    pub fn translation(dr: f64, dc: f64) -> Self {
        Self::new([[1.0, 0.0, dr], [0.0, 1.0, dc]])
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        Point::new(
            m[0][0] * p.row + m[0][1] * p.col + m[0][2],
            m[1][0] * p.row + m[1][1] * p.col + m[1][2],
        )
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let lin = Matrix2::new(self.m[0][0], self.m[0][1], self.m[1][0], self.m[1][1]);
        let inv = lin.try_inverse()?;
        if !inv.iter().all(|v| v.is_finite()) {
            return None;
        }
        let t = -(inv * Vector2::new(self.m[0][2], self.m[1][2]));
        Some(Affine2::new([
            [inv[(0, 0)], inv[(0, 1)], t[0]],
            [inv[(1, 0)], inv[(1, 1)], t[1]],
        ]))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            m[i][2] = a[i][0] * b[0][2] + a[i][1] * b[1][2] + a[i][2];
        }
        Affine2::new(m)
    }

    /// The same motion expressed on a grid downscaled by `(fr, fc)`, where feature
    /// cell `k` covers full-resolution pixels `k*f .. k*f + f - 1`.
    pub fn to_feature_grid(&self, fr: f64, fc: f64) -> Affine2 {
        let to_feat = Affine2::new([
            [1.0 / fr, 0.0, -(fr - 1.0) / (2.0 * fr)],
            [0.0, 1.0 / fc, -(fc - 1.0) / (2.0 * fc)],
        ]);
        let to_full = Affine2::new([[fr, 0.0, (fr - 1.0) / 2.0], [0.0, fc, (fc - 1.0) / 2.0]]);
        to_feat.compose(self).compose(&to_full)
    }

    pub fn params(&self) -> [f64; 6] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
    }

    pub fn from_params(p: [f64; 6]) -> Self {
        Self::new([[p[0], p[1], p[2]], [p[3], p[4], p[5]]])
    }
}

/// Sum of squared distances between `affine(src[k])` and `dst[k]`.
pub fn squared_residual(affine: &Affine2, src: &[Point], dst: &[Point]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let p = affine.apply(*s);
            (p.row - d.row).powi(2) + (p.col - d.col).powi(2)
        })
        .sum()
}

/// Least-squares affine fit `dst ≈ A src`. Returns `None` when the source points
/// do not span the plane (fewer than three non-collinear points).
pub fn fit_affine(src: &[Point], dst: &[Point]) -> Option<Affine2> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return None;
    }
    // Centering keeps the design matrix well conditioned for large coordinates.
    let mean = |ps: &[Point]| {
        let k = ps.len() as f64;
        Point::new(
            ps.iter().map(|p| p.row).sum::<f64>() / k,
            ps.iter().map(|p| p.col).sum::<f64>() / k,
        )
    };
    let (cs, cd) = (mean(src), mean(dst));
    let x = DMatrix::from_fn(n, 2, |i, j| match j {
        0 => src[i].row - cs.row,
        _ => src[i].col - cs.col,
    });
    let y = DMatrix::from_fn(n, 2, |i, j| match j {
        0 => dst[i].row - cd.row,
        _ => dst[i].col - cd.col,
    });
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return None;
    }
    // Solves x * lin^T = y.
    let lin_t = svd.solve(&y, 0.0).ok()?;
    let a = [[lin_t[(0, 0)], lin_t[(1, 0)]], [lin_t[(0, 1)], lin_t[(1, 1)]]];
    let t = [
        cd.row - a[0][0] * cs.row - a[0][1] * cs.col,
        cd.col - a[1][0] * cs.row - a[1][1] * cs.col,
    ];
    let out = Affine2::new([[a[0][0], a[0][1], t[0]], [a[1][0], a[1][1], t[1]]]);
    out.params().iter().all(|v| v.is_finite()).then_some(out)
}

/// One affine map per body part plus a flag telling whether it was fitted.
#[derive(Clone, Debug, PartialEq)]
pub struct PartAffineSet {
    pub transforms: [Affine2; NUM_PARTS],
    pub valid: [bool; NUM_PARTS],
}

impl Default for PartAffineSet {
    fn default() -> Self {
        Self::identity()
    }
}

impl PartAffineSet {
    pub fn identity() -> Self {
        Self {
            transforms: [Affine2::IDENTITY; NUM_PARTS],
            valid: [false; NUM_PARTS],
        }
    }

    pub fn get(&self, part: BodyPart) -> &Affine2 {
        &self.transforms[part.index()]
    }
}

/// Fits the source→target transform of every part. Target regions are sized with
/// the source body-shape index so the source body proportions carry over.
pub fn fit_part_affines(src: &LandmarkSet, tgt: &LandmarkSet, d_s_src: f64) -> Result<PartAffineSet> {
    if !(d_s_src > 0.0) || !d_s_src.is_finite() {
        return Err(Error::invalid(format!(
            "body-shape index must be positive, got {d_s_src}"
        )));
    }
    let mut out = PartAffineSet::identity();
    for part in BodyPart::ALL {
        let (Some(s), Some(t)) = (region_shape(src, part, d_s_src), region_shape(tgt, part, d_s_src)) else {
            continue;
        };
        let fitted = fit_affine(&s.corners(), &t.corners()).filter(|a| a.inverse().is_some());
        if let Some(a) = fitted {
            out.transforms[part.index()] = a;
            out.valid[part.index()] = true;
        }
    }
    Ok(out)
}

/// Precomputed gather table for one feature resolution: for every part and every
/// output cell, the source cell it reads from, or `None` when the read falls outside
/// the frame or outside the part's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpPlan {
    height: usize,
    width: usize,
    sources: Vec<Vec<Option<u32>>>,
}

fn scale_factors(full: (usize, usize), feat: (usize, usize)) -> Result<(usize, usize)> {
    let ok = feat.0 > 0 && feat.1 > 0 && full.0 % feat.0 == 0 && full.1 % feat.1 == 0;
    if !ok {
        return Err(Error::invalid(format!(
            "feature grid {}x{} does not evenly divide {}x{}",
            feat.0, feat.1, full.0, full.1
        )));
    }
    Ok((full.0 / feat.0, full.1 / feat.1))
}

impl WarpPlan {
    pub fn build(
        refined_masks: &[Mask],
        affines: &PartAffineSet,
        full: (usize, usize),
        feat: (usize, usize),
    ) -> Result<Self> {
        if refined_masks.len() != NUM_PARTS {
            return Err(Error::invalid(format!(
                "expected {NUM_PARTS} part masks, got {}",
                refined_masks.len()
            )));
        }
        if let Some(m) = refined_masks.iter().find(|m| m.shape() != full) {
            return Err(Error::invalid(format!(
                "part mask {:?} does not match frame {:?}",
                m.shape(),
                full
            )));
        }
        let (fr, fc) = scale_factors(full, feat)?;
        let (h, w) = feat;
        let mut sources = Vec::with_capacity(NUM_PARTS);
        for (part, mask) in refined_masks.iter().enumerate() {
            let pooled = mask.max_pool(fr, fc)?;
            if pooled.is_empty() {
                sources.push(vec![None; h * w]);
                continue;
            }
            let back = affines.transforms[part]
                .to_feature_grid(fr as f64, fc as f64)
                .inverse()
                .unwrap_or(Affine2::IDENTITY);
            let mut table = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let p = back.apply(Point::new(r as f64, c as f64));
                    let (sr, sc) = ((p.row + 0.5).floor(), (p.col + 0.5).floor());
                    let inside = sr >= 0.0 && sc >= 0.0 && sr < h as f64 && sc < w as f64;
                    table.push(
                        (inside && pooled.get(sr as usize, sc as usize))
                            .then(|| (sr as usize * w + sc as usize) as u32),
                    );
                }
            }
            sources.push(table);
        }
        Ok(Self {
            height: h,
            width: w,
            sources,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Source cell per output cell for one part.
    pub fn part_sources(&self, part: usize) -> &[Option<u32>] {
        &self.sources[part]
    }

    /// Applies the plan to `(h, w, c)` features, summing parts in index order.
    pub fn apply(&self, features: &Array3<f32>) -> Result<Array3<f32>> {
        let (h, w, ch) = features.dim();
        if (h, w) != (self.height, self.width) {
            return Err(Error::invalid(format!(
                "features {h}x{w} do not match plan {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Array3::<f32>::zeros((h, w, ch));
        for table in &self.sources {
            for (q, src) in table.iter().enumerate() {
                let Some(s) = src else { continue };
                let (sr, sc) = (*s as usize / w, *s as usize % w);
                let (qr, qc) = (q / w, q % w);
                for k in 0..ch {
                    out[[qr, qc, k]] += features[[sr, sc, k]];
                }
            }
        }
        Ok(out)
    }
}

/// Masks the features of each part, warps them by the part's transform rescaled
/// to the feature grid (nearest-neighbour, zeros outside the frame), and sums.
pub fn warp_and_merge_features(
    features: &Array3<f32>,
    refined_masks: &[Mask],
    affines: &PartAffineSet,
    full_h: usize,
    full_w: usize,
) -> Result<Array3<f32>> {
    let (h, w, _) = features.dim();
    WarpPlan::build(refined_masks, affines, (full_h, full_w), (h, w))?.apply(features)
}
