//! Landmarks, pose heat maps, the body-shape index and coarse body-part regions.
//!
//! Coordinates are `(row, col)` in pixel units; pixel `(r, c)` is the point
//! with integer coordinates `(r, c)`. A pixel belongs to a region when that
//! point lies inside the closed region polygon.

use std::fmt::Write as _;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::Mask;

pub const NUM_LANDMARKS: usize = 18;
pub const NUM_PARTS: usize = 10;

/// Default heat-map spread.
pub const DEFAULT_SIGMA: f64 = 6.0;

/// Boundary tolerance used when rasterizing closed regions.
pub const CONTAINS_EPS: f64 = 1e-9;

/// The 18 keypoints in the order produced by the pose estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Joint {
    Nose,
    Neck,
    RightShoulder,
    RightElbow,
    RightWrist,
    LeftShoulder,
    LeftElbow,
    LeftWrist,
    RightHip,
    RightKnee,
    RightAnkle,
    LeftHip,
    LeftKnee,
    LeftAnkle,
    RightEye,
    LeftEye,
    RightEar,
    LeftEar,
}

impl Joint {
    pub const ALL: [Joint; NUM_LANDMARKS] = [
        Joint::Nose,
        Joint::Neck,
        Joint::RightShoulder,
        Joint::RightElbow,
        Joint::RightWrist,
        Joint::LeftShoulder,
        Joint::LeftElbow,
        Joint::LeftWrist,
        Joint::RightHip,
        Joint::RightKnee,
        Joint::RightAnkle,
        Joint::LeftHip,
        Joint::LeftKnee,
        Joint::LeftAnkle,
        Joint::RightEye,
        Joint::LeftEye,
        Joint::RightEar,
        Joint::LeftEar,
    ];

    pub const FACE: [Joint; 5] = [
        Joint::Nose,
        Joint::RightEye,
        Joint::LeftEye,
        Joint::RightEar,
        Joint::LeftEar,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.row - o.row, self.col - o.col)
    }

    fn add_scaled(self, d: Point, k: f64) -> Point {
        Point::new(self.row + d.row * k, self.col + d.col * k)
    }
}

/// Up to 18 named keypoints of one person inside an image frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: [Option<Point>; NUM_LANDMARKS],
    height: usize,
    width: usize,
}

impl LandmarkSet {
    pub fn new(points: [Option<Point>; NUM_LANDMARKS], height: usize, width: usize) -> Result<Self> {
        for (j, p) in points.iter().enumerate() {
            if let Some(p) = p {
                let inside = p.row.is_finite()
                    && p.col.is_finite()
                    && p.row >= 0.0
                    && p.col >= 0.0
                    && p.row < height as f64
                    && p.col < width as f64;
                if !inside {
                    return Err(Error::invalid(format!(
                        "landmark {:?} at ({}, {}) outside {height}x{width} frame",
                        Joint::ALL[j],
                        p.row,
                        p.col
                    )));
                }
            }
        }
        Ok(Self { points, height, width })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            points: [None; NUM_LANDMARKS],
            height,
            width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn points(&self) -> &[Option<Point>; NUM_LANDMARKS] {
        &self.points
    }

    pub fn get(&self, joint: Joint) -> Option<Point> {
        self.points[joint.index()]
    }

    pub fn present_count(&self) -> usize {
        self.points.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.present_count() == 0
    }

    /// Returns a copy with `joint` removed.
    pub fn without(&self, joint: Joint) -> Self {
        let mut out = self.clone();
        out.points[joint.index()] = None;
        out
    }

    /// Translates every present landmark; points leaving the frame become missing.
    pub fn translated(&self, dr: f64, dc: f64) -> Self {
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            *p = p.and_then(|p| {
                let q = Point::new(p.row + dr, p.col + dc);
                let ok = q.row >= 0.0 && q.col >= 0.0 && q.row < self.height as f64 && q.col < self.width as f64;
                ok.then_some(q)
            });
        }
        out
    }
}

/// Per-landmark heat maps, shape `(18, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMapStack {
    data: Array3<f32>,
}

impl HeatMapStack {
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != NUM_LANDMARKS {
            return Err(Error::invalid(format!(
                "heat-map stack needs {NUM_LANDMARKS} channels, got {}",
                data.dim().0
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Distance term of the heat-map kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatMapKernel {
    /// `exp(-|p - p_j| / sigma^2)`.
    #[default]
    Unsquared,
    /// `exp(-|p - p_j|^2 / sigma^2)`.
    Squared,
}

/// Heat maps with the default (unsquared) kernel.
pub fn heatmaps_from_landmarks(landmarks: &LandmarkSet, sigma: f64) -> Result<HeatMapStack> {
    heatmaps_with_kernel(landmarks, sigma, HeatMapKernel::Unsquared)
}

pub fn heatmaps_with_kernel(landmarks: &LandmarkSet, sigma: f64, kernel: HeatMapKernel) -> Result<HeatMapStack> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = (landmarks.height, landmarks.width);
    let s2 = sigma * sigma;
    let mut data = Array3::<f32>::zeros((NUM_LANDMARKS, h, w));
    for (j, p) in landmarks.points.iter().enumerate() {
        let Some(p) = p else { continue };
        let mut ch = data.index_axis_mut(ndarray::Axis(0), j);
        for ((r, c), v) in ch.indexed_iter_mut() {
            let d = Point::new(r as f64, c as f64).dist(*p);
            let d = match kernel {
                HeatMapKernel::Unsquared => d,
                HeatMapKernel::Squared => d * d,
            };
            *v = (-d / s2).exp() as f32;
        }
    }
    Ok(HeatMapStack { data })
}

/// Mean of the two shoulder-to-hip distances.
pub fn body_shape_index(landmarks: &LandmarkSet) -> Result<f64> {
    let get = |j: Joint, name: &'static str| landmarks.get(j).ok_or(Error::MissingTorso(name));
    let rs = get(Joint::RightShoulder, "right shoulder")?;
    let ls = get(Joint::LeftShoulder, "left shoulder")?;
    let rh = get(Joint::RightHip, "right hip")?;
    let lh = get(Joint::LeftHip, "left hip")?;
    Ok((rh.dist(rs) + lh.dist(ls)) / 2.0)
}

/// Body-shape index, or a quarter of the frame height when the torso is incomplete.
pub fn body_shape_index_or_default(landmarks: &LandmarkSet) -> f64 {
    match body_shape_index(landmarks) {
        Ok(d) if d > 0.0 => d,
        _ => landmarks.height as f64 / 4.0,
    }
}

/// The ten body sub-parts. Index 0 is the torso.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BodyPart {
    Torso,
    Head,
    LeftUpperArm,
    RightUpperArm,
    LeftLowerArm,
    RightLowerArm,
    LeftUpperLeg,
    RightUpperLeg,
    LeftLowerLeg,
    RightLowerLeg,
}

impl BodyPart {
    pub const ALL: [BodyPart; NUM_PARTS] = [
        BodyPart::Torso,
        BodyPart::Head,
        BodyPart::LeftUpperArm,
        BodyPart::RightUpperArm,
        BodyPart::LeftLowerArm,
        BodyPart::RightLowerArm,
        BodyPart::LeftUpperLeg,
        BodyPart::RightUpperLeg,
        BodyPart::LeftLowerLeg,
        BodyPart::RightLowerLeg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Torso => "torso",
            BodyPart::Head => "head",
            BodyPart::LeftUpperArm => "left_upper_arm",
            BodyPart::RightUpperArm => "right_upper_arm",
            BodyPart::LeftLowerArm => "left_lower_arm",
            BodyPart::RightLowerArm => "right_lower_arm",
            BodyPart::LeftUpperLeg => "left_upper_leg",
            BodyPart::RightUpperLeg => "right_upper_leg",
            BodyPart::LeftLowerLeg => "left_lower_leg",
            BodyPart::RightLowerLeg => "right_lower_leg",
        }
    }

    /// Endpoints of a limb segment; `None` for head and torso.
    pub fn limb_joints(self) -> Option<(Joint, Joint)> {
        use Joint::*;
        Some(match self {
            BodyPart::LeftUpperArm => (LeftShoulder, LeftElbow),
            BodyPart::RightUpperArm => (RightShoulder, RightElbow),
            BodyPart::LeftLowerArm => (LeftElbow, LeftWrist),
            BodyPart::RightLowerArm => (RightElbow, RightWrist),
            BodyPart::LeftUpperLeg => (LeftHip, LeftKnee),
            BodyPart::RightUpperLeg => (RightHip, RightKnee),
            BodyPart::LeftLowerLeg => (LeftKnee, LeftAnkle),
            BodyPart::RightLowerLeg => (RightKnee, RightAnkle),
            BodyPart::Torso | BodyPart::Head => return None,
        })
    }
}

pub const HEAD_SIDE_FACTOR: f64 = 0.8;
pub const LIMB_WIDTH_FACTOR: f64 = 0.3;
pub const TORSO_DILATION_FACTOR: f64 = 0.15;

/// Geometric outline of one body region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegionShape {
    /// Axis-aligned square.
    Square { center: Point, half_side: f64 },
    /// Rectangle spanning segment `start..end` with the given half width.
    Rect { start: Point, end: Point, half_width: f64 },
    /// Quadrilateral grown by `radius` in every direction.
    DilatedQuad { corners: [Point; 4], radius: f64 },
}

impl RegionShape {
    /// The four corners used as affine fitting points, in a part-consistent order.
    pub fn corners(&self) -> [Point; 4] {
        match *self {
            RegionShape::Square { center, half_side: h } => [
                Point::new(center.row - h, center.col - h),
                Point::new(center.row - h, center.col + h),
                Point::new(center.row + h, center.col + h),
                Point::new(center.row + h, center.col - h),
            ],
            RegionShape::Rect { start, end, half_width } => {
                let d = end.sub(start);
                let len = d.row.hypot(d.col);
                let n = Point::new(-d.col / len, d.row / len);
                [
                    start.add_scaled(n, half_width),
                    end.add_scaled(n, half_width),
                    end.add_scaled(n, -half_width),
                    start.add_scaled(n, -half_width),
                ]
            }
            RegionShape::DilatedQuad { corners, .. } => corners,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        match *self {
            RegionShape::Square { center, half_side } => {
                (p.row - center.row).abs() <= half_side + CONTAINS_EPS
                    && (p.col - center.col).abs() <= half_side + CONTAINS_EPS
            }
            RegionShape::Rect { start, end, half_width } => {
                let d = end.sub(start);
                let len = d.row.hypot(d.col);
                let v = p.sub(start);
                let along = (v.row * d.row + v.col * d.col) / len;
                let across = (v.col * d.row - v.row * d.col) / len;
                along >= -CONTAINS_EPS && along <= len + CONTAINS_EPS && across.abs() <= half_width + CONTAINS_EPS
            }
            RegionShape::DilatedQuad { corners, radius } => {
                inside_polygon(&corners, p)
                    || (0..4).any(|k| segment_distance(p, corners[k], corners[(k + 1) % 4]) <= radius + CONTAINS_EPS)
            }
        }
    }

    /// Inclusive pixel bounding box `(r0, r1, c0, c1)` clipped to the frame, or `None`.
    fn pixel_bounds(&self, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
        let pad = match *self {
            RegionShape::DilatedQuad { radius, .. } => radius,
            _ => 0.0,
        };
        let cs = self.corners();
        let fold = |f: fn(f64, f64) -> f64, init: f64, get: fn(&Point) -> f64| cs.iter().map(get).fold(init, f);
        let rmin = fold(f64::min, f64::INFINITY, |p| p.row) - pad;
        let rmax = fold(f64::max, f64::NEG_INFINITY, |p| p.row) + pad;
        let cmin = fold(f64::min, f64::INFINITY, |p| p.col) - pad;
        let cmax = fold(f64::max, f64::NEG_INFINITY, |p| p.col) + pad;
        let r0 = (rmin - 1.0).floor().max(0.0);
        let c0 = (cmin - 1.0).floor().max(0.0);
        let r1 = (rmax + 1.0).ceil().min(height as f64 - 1.0);
        let c1 = (cmax + 1.0).ceil().min(width as f64 - 1.0);
        (r0 <= r1 && c0 <= c1).then_some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let mut m = Mask::zeros(height, width);
        if let Some((r0, r1, c0, c1)) = self.pixel_bounds(height, width) {
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if self.contains(Point::new(r as f64, c as f64)) {
                        m.set(r, c, true);
                    }
                }
            }
        }
        m
    }
}

/// Even-odd crossing test.
fn inside_polygon(poly: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + n - 1) % n];
        if (a.row > p.row) != (b.row > p.row) {
            let col = a.col + (p.row - a.row) * (b.col - a.col) / (b.row - a.row);
            if p.col < col {
                inside = !inside;
            }
        }
    }
    inside
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = b.sub(a);
    let len2 = d.row * d.row + d.col * d.col;
    let t = if len2 > 0.0 {
        (((p.row - a.row) * d.row + (p.col - a.col) * d.col) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(a.add_scaled(d, t))
}

/// The outline of `part` for a landmark set, or `None` when a defining landmark is missing
/// or the limb segment is degenerate.
pub fn region_shape(landmarks: &LandmarkSet, part: BodyPart, d_s: f64) -> Option<RegionShape> {
    match part {
        BodyPart::Head => {
            let face: Vec<Point> = Joint::FACE.iter().filter_map(|&j| landmarks.get(j)).collect();
            if face.is_empty() {
                return None;
            }
            let n = face.len() as f64;
            let center = Point::new(
                face.iter().map(|p| p.row).sum::<f64>() / n,
                face.iter().map(|p| p.col).sum::<f64>() / n,
            );
            Some(RegionShape::Square {
                center,
                half_side: HEAD_SIDE_FACTOR * d_s / 2.0,
            })
        }
        BodyPart::Torso => {
            let corners = [
                landmarks.get(Joint::RightShoulder)?,
                landmarks.get(Joint::LeftShoulder)?,
                landmarks.get(Joint::LeftHip)?,
                landmarks.get(Joint::RightHip)?,
            ];
            Some(RegionShape::DilatedQuad {
                corners,
                radius: TORSO_DILATION_FACTOR * d_s,
            })
        }
        limb => {
            let (a, b) = limb.limb_joints().expect("limb");
            let (start, end) = (landmarks.get(a)?, landmarks.get(b)?);
            if start.dist(end) < 1e-9 {
                return None;
            }
            Some(RegionShape::Rect {
                start,
                end,
                half_width: LIMB_WIDTH_FACTOR * d_s / 2.0,
            })
        }
    }
}

/// Coarse per-part region masks `M_R(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaskSet {
    regions: Vec<Mask>,
}

impl RegionMaskSet {
    pub fn new(regions: Vec<Mask>) -> Result<Self> {
        if regions.len() != NUM_PARTS {
            return Err(Error::invalid(format!(
                "expected {NUM_PARTS} region masks, got {}",
                regions.len()
            )));
        }
        let shape = regions[0].shape();
        if regions.iter().any(|m| m.shape() != shape) {
            return Err(Error::invalid("region masks differ in shape"));
        }
        Ok(Self { regions })
    }

    pub fn get(&self, part: BodyPart) -> &Mask {
        &self.regions[part.index()]
    }

    pub fn as_slice(&self) -> &[Mask] {
        &self.regions
    }

    pub fn shape(&self) -> (usize, usize) {
        self.regions[0].shape()
    }
}

pub fn build_region_masks(landmarks: &LandmarkSet, d_s: f64, height: usize, width: usize) -> Result<RegionMaskSet> {
    if !(d_s > 0.0) || !d_s.is_finite() {
        return Err(Error::invalid(format!("body-shape index must be positive, got {d_s}")));
    }
    let regions = BodyPart::ALL
        .iter()
        .map(|&part| match region_shape(landmarks, part, d_s) {
            Some(shape) => shape.rasterize(height, width),
            None => Mask::zeros(height, width),
        })
        .collect();
    RegionMaskSet::new(regions)
}

/// Parses a landmark file: one record per line,
/// `<id> <height> <width>` followed by 18 entries of `row,col` or `null`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_landmark_records(text: &str) -> std::result::Result<Vec<(String, LandmarkSet)>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| format!("line {}: {msg}", lineno + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 + NUM_LANDMARKS {
            return Err(at(format!(
                "expected {} fields, found {}",
                3 + NUM_LANDMARKS,
                fields.len()
            )));
        }
        let height: usize = fields[1]
            .parse()
            .map_err(|_| at(format!("bad height `{}`", fields[1])))?;
        let width: usize = fields[2]
            .parse()
            .map_err(|_| at(format!("bad width `{}`", fields[2])))?;
        let mut points = [None; NUM_LANDMARKS];
        for (j, tok) in fields[3..].iter().enumerate() {
            if *tok == "null" {
                continue;
            }
            let (r, c) = tok
                .split_once(',')
                .ok_or_else(|| at(format!("landmark {j}: expected `row,col` or `null`, got `{tok}`")))?;
            let r: f64 = r.parse().map_err(|_| at(format!("landmark {j}: bad row `{r}`")))?;
            let c: f64 = c.parse().map_err(|_| at(format!("landmark {j}: bad col `{c}`")))?;
            points[j] = Some(Point::new(r, c));
        }
        let set = LandmarkSet::new(points, height, width).map_err(|e| at(e.to_string()))?;
        out.push((fields[0].to_string(), set));
    }
    Ok(out)
}

pub fn format_landmark_record(id: &str, landmarks: &LandmarkSet) -> String {
    let mut s = format!("{id} {} {}", landmarks.height, landmarks.width);
    for p in &landmarks.points {
        match p {
            Some(p) => write!(s, " {},{}", p.row, p.col).unwrap(),
            None => s.push_str(" null"),
        }
    }
    s.push('\n');
    s
}
