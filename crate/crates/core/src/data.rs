//! Dataset layout, preprocessing and pair conditioning.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! images/<id>.png      8-bit RGB
//! masks/<id>.png       8-bit single channel, >= 128 is person
//! landmarks/<id>.txt   one landmark record (see `geometry::parse_landmark_records`)
//! pairs.txt            `<src_id> <tgt_id>` per line
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    body_shape_index_or_default, build_region_masks, heatmaps_with_kernel, parse_landmark_records, HeatMapKernel,
    HeatMapStack, LandmarkSet, Point, DEFAULT_SIGMA, NUM_LANDMARKS,
};
use crate::image::{ImagePlane, Mask};
use crate::partition::{refine_part_masks, split_background_with_fill, DEFAULT_FILL};
use crate::transform::{fit_part_affines, WarpPlan};

pub mod synth;

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const LANDMARKS_DIR: &str = "landmarks";
pub const PAIRS_FILE: &str = "pairs.txt";

/// A source/target pair of the same person.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub src_id: String,
    pub tgt_id: String,
    pub src_image: ImagePlane,
    pub tgt_image: ImagePlane,
    pub src_landmarks: LandmarkSet,
    pub tgt_landmarks: LandmarkSet,
    pub src_mask: Mask,
    pub tgt_mask: Mask,
}

impl PairedSample {
    pub fn id(&self) -> String {
        pair_id(&self.src_id, &self.tgt_id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.src_image.shape()
    }

    /// The same pair with source and target exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            src_id: self.tgt_id.clone(),
            tgt_id: self.src_id.clone(),
            src_image: self.tgt_image.clone(),
            tgt_image: self.src_image.clone(),
            src_landmarks: self.tgt_landmarks.clone(),
            tgt_landmarks: self.src_landmarks.clone(),
            src_mask: self.tgt_mask.clone(),
            tgt_mask: self.src_mask.clone(),
        }
    }
}

pub fn pair_id(src: &str, tgt: &str) -> String {
    format!("{src}:{tgt}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub src: String,
    pub tgt: String,
}

impl PairRecord {
    pub fn new(src: impl Into<String>, tgt: impl Into<String>) -> Self {
        Self {
            src: src.into(),
            tgt: tgt.into(),
        }
    }

    pub fn id(&self) -> String {
        pair_id(&self.src, &self.tgt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    /// No identity occurs in both the train and the test split.
    pub identity_disjoint: bool,
    pub pairs: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            field: "manifest".into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn layout(&self) -> DatasetLayout {
        DatasetLayout::new(&self.root)
    }

    /// Distinct sample ids referenced by the pairs, in first-use order.
    pub fn sample_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            for id in [&p.src, &p.tgt] {
                if seen.insert(id.clone()) {
                    out.push(id.clone());
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DatasetLayout {
    root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join(IMAGES_DIR).join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join(MASKS_DIR).join(format!("{id}.png"))
    }

    pub fn landmark_path(&self, id: &str) -> PathBuf {
        self.root.join(LANDMARKS_DIR).join(format!("{id}.txt"))
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.root.join(PAIRS_FILE)
    }

    /// Checks directories and every file referenced by `pairs.txt`.
    /// All problems are collected into one [`Error::Validation`].
    pub fn validate(&self) -> Result<Vec<PairRecord>> {
        let mut problems = Vec::new();
        for dir in [IMAGES_DIR, MASKS_DIR, LANDMARKS_DIR] {
            let p = self.root.join(dir);
            if !p.is_dir() {
                problems.push(format!("missing directory {}", p.display()));
            }
        }
        let pairs = match read_pairs(&self.pairs_path()) {
            Ok(p) => p,
            Err(e) => {
                problems.push(e.to_string());
                Vec::new()
            }
        };
        if problems.is_empty() {
            let mut checked = std::collections::HashSet::new();
            for rec in &pairs {
                for id in [&rec.src, &rec.tgt] {
                    if !checked.insert(id.clone()) {
                        continue;
                    }
                    for p in [self.image_path(id), self.mask_path(id), self.landmark_path(id)] {
                        if !p.is_file() {
                            problems.push(format!("missing file {}", p.display()));
                        }
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(pairs)
        } else {
            Err(Error::Validation(problems))
        }
    }
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(s), Some(t), None) => out.push(PairRecord::new(s, t)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    field: format!("line {}", i + 1),
                    message: format!("expected `<src_id> <tgt_id>`, got `{line}`"),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let text: String = pairs.iter().map(|p| format!("{} {}\n", p.src, p.tgt)).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        field: "landmarks".into(),
        message,
    };
    let mut records = parse_landmark_records(&text).map_err(parse_err)?;
    match records.len() {
        1 => Ok(records.remove(0).1),
        n => Err(parse_err(format!("expected one record, found {n}"))),
    }
}

fn check_resolution(path: PathBuf, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Parse {
            path,
            field: "resolution".into(),
            message: format!("{}x{} but the manifest says {}x{}", got.0, got.1, want.0, want.1),
        });
    }
    Ok(())
}

/// Loads one image's pixels, mask and landmarks, checked against `resolution`.
pub fn load_sample(
    layout: &DatasetLayout,
    id: &str,
    resolution: (usize, usize),
) -> Result<(ImagePlane, Mask, LandmarkSet)> {
    let image = ImagePlane::load(&layout.image_path(id))?;
    check_resolution(layout.image_path(id), image.shape(), resolution)?;
    let mask = Mask::load(&layout.mask_path(id))?;
    check_resolution(layout.mask_path(id), mask.shape(), resolution)?;
    let landmarks = load_landmarks(&layout.landmark_path(id))?;
    check_resolution(
        layout.landmark_path(id),
        (landmarks.height(), landmarks.width()),
        resolution,
    )?;
    Ok((image, mask, landmarks))
}

pub fn load_pair(manifest: &DatasetManifest, record: &PairRecord) -> Result<PairedSample> {
    let layout = manifest.layout();
    let res = (manifest.height, manifest.width);
    let (src_image, src_mask, src_landmarks) = load_sample(&layout, &record.src, res)?;
    let (tgt_image, tgt_mask, tgt_landmarks) = load_sample(&layout, &record.tgt, res)?;
    Ok(PairedSample {
        src_id: record.src.clone(),
        tgt_id: record.tgt.clone(),
        src_image,
        tgt_image,
        src_landmarks,
        tgt_landmarks,
        src_mask,
        tgt_mask,
    })
}

/// Pairs dropped by [`filter_detectable`] with the reason.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub kept: usize,
    pub dropped: Vec<(String, String)>,
}

impl DropReport {
    pub fn dropped_ids(&self) -> Vec<&str> {
        self.dropped.iter().map(|(id, _)| id.as_str()).collect()
    }
}

/// Why a sample cannot be used, or `None` when it has a detectable person.
fn sample_defect(layout: &DatasetLayout, id: &str) -> Option<String> {
    match load_landmarks(&layout.landmark_path(id)) {
        Ok(lm) if lm.is_empty() => return Some(format!("{id}: no landmarks detected")),
        Ok(_) => {}
        Err(e) => return Some(format!("{id}: {e}")),
    }
    match Mask::load(&layout.mask_path(id)) {
        Ok(m) if m.is_empty() => Some(format!("{id}: empty person mask")),
        Ok(_) => None,
        Err(e) => Some(format!("{id}: {e}")),
    }
}

/// Drops pairs where either image has no landmarks or no person pixels.
pub fn filter_detectable(manifest: &DatasetManifest) -> (DatasetManifest, DropReport) {
    let layout = manifest.layout();
    let mut defects: HashMap<String, Option<String>> = HashMap::new();
    let mut kept = Vec::new();
    let mut report = DropReport::default();
    for rec in &manifest.pairs {
        let mut reasons = Vec::new();
        for id in [&rec.src, &rec.tgt] {
            let d = defects.entry(id.clone()).or_insert_with(|| sample_defect(&layout, id));
            if let Some(d) = d {
                reasons.push(d.clone());
            }
        }
        if reasons.is_empty() {
            kept.push(rec.clone());
        } else {
            log::warn!("dropping pair {}: {}", rec.id(), reasons.join("; "));
            report.dropped.push((rec.id(), reasons.join("; ")));
        }
    }
    report.kept = kept.len();
    let mut out = manifest.clone();
    out.pairs = kept;
    (out, report)
}

/// Person bounding box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Coordinate map of a crop → zero-pad → resize chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMap {
    pub bbox: BBox,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padded: (usize, usize),
    pub output: (usize, usize),
}

impl CropMap {
    /// Padded-canvas coordinates of an input pixel coordinate.
    fn to_padded(&self, p: Point) -> Point {
        Point::new(
            p.row - self.bbox.top as f64 + self.pad_top as f64,
            p.col - self.bbox.left as f64 + self.pad_left as f64,
        )
    }

    /// Output coordinates of an input point, using half-pixel-centered scaling.
    pub fn map_point(&self, p: Point) -> Point {
        let q = self.to_padded(p);
        let sr = self.output.0 as f64 / self.padded.0 as f64;
        let sc = self.output.1 as f64 / self.padded.1 as f64;
        Point::new((q.row + 0.5) * sr - 0.5, (q.col + 0.5) * sc - 0.5)
    }

    pub fn in_bbox(&self, p: Point) -> bool {
        let b = &self.bbox;
        p.row >= b.top as f64
            && p.col >= b.left as f64
            && p.row <= (b.top + b.height - 1) as f64
            && p.col <= (b.left + b.width - 1) as f64
    }

    /// Maps landmarks; points outside the box are dropped, mapped points are
    /// clamped onto the pixel grid of the output frame.
    pub fn map_landmarks(&self, lm: &LandmarkSet) -> Result<LandmarkSet> {
        let (oh, ow) = self.output;
        let mut points = [None; NUM_LANDMARKS];
        for (j, p) in lm.points().iter().enumerate() {
            if let Some(p) = p.filter(|p| self.in_bbox(*p)) {
                let q = self.map_point(p);
                points[j] = Some(Point::new(
                    q.row.clamp(0.0, (oh - 1) as f64),
                    q.col.clamp(0.0, (ow - 1) as f64),
                ));
            }
        }
        LandmarkSet::new(points, oh, ow)
    }

    fn padded_channels(&self, src: &Array3<f32>, fill: f32) -> Array3<f32> {
        let (ph, pw) = self.padded;
        let ch = src.dim().2;
        let b = &self.bbox;
        let mut canvas = Array3::from_elem((ph, pw, ch), fill);
        for r in 0..b.height {
            for c in 0..b.width {
                for k in 0..ch {
                    canvas[[r + self.pad_top, c + self.pad_left, k]] = src[[b.top + r, b.left + c, k]];
                }
            }
        }
        canvas
    }

    pub fn map_image(&self, image: &ImagePlane) -> Result<ImagePlane> {
        let canvas = self.padded_channels(image.data(), 0.0);
        ImagePlane::new(resize_bilinear(&canvas, self.output.0, self.output.1))
    }

    /// Resamples the mask bilinearly and re-binarizes at 0.5.
    pub fn map_mask(&self, mask: &Mask) -> Mask {
        let m = mask.to_f32().insert_axis(Axis(2));
        let canvas = self.padded_channels(&m, 0.0);
        let out = resize_bilinear(&canvas, self.output.0, self.output.1);
        Mask::from_fn(self.output.0, self.output.1, |(r, c)| out[[r, c, 0]] >= 0.5)
    }
}

/// Minimum person size (exclusive) kept by [`crop_and_pad`].
pub const MIN_BBOX: (usize, usize) = (128, 64);

/// Plans a crop of `bbox`, symmetric zero padding to a 2:1 aspect ratio and a
/// resize to `target`.
pub fn crop_plan(image_shape: (usize, usize), bbox: BBox, target: (usize, usize)) -> Result<CropMap> {
    if bbox.height == 0
        || bbox.width == 0
        || bbox.top + bbox.height > image_shape.0
        || bbox.left + bbox.width > image_shape.1
    {
        return Err(Error::invalid(format!(
            "bounding box {bbox:?} outside {}x{} image",
            image_shape.0, image_shape.1
        )));
    }
    if bbox.height <= MIN_BBOX.0 || bbox.width <= MIN_BBOX.1 {
        return Err(Error::SampleRejected(format!(
            "bounding box {}x{} is not larger than {}x{}",
            bbox.height, bbox.width, MIN_BBOX.0, MIN_BBOX.1
        )));
    }
    let (h, w) = (bbox.height, bbox.width);
    let padded = if h >= 2 * w { (h, h.div_ceil(2)) } else { (2 * w, w) };
    Ok(CropMap {
        bbox,
        pad_top: (padded.0 - h) / 2,
        pad_left: (padded.1 - w) / 2,
        padded,
        output: target,
    })
}

pub fn crop_and_pad(image: &ImagePlane, bbox: BBox, target: (usize, usize)) -> Result<(ImagePlane, CropMap)> {
    let plan = crop_plan(image.shape(), bbox, target)?;
    Ok((plan.map_image(image)?, plan))
}

/// Bilinear resize of `(h, w, c)` data with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, ch) = src.dim();
    let sr = h as f64 / out_h as f64;
    let sc = w as f64 / out_w as f64;
    let axis = |i: usize, scale: f64, n: usize| {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (x - i0 as f64) as f32)
    };
    Array3::from_shape_fn((out_h, out_w, ch), |(r, c, k)| {
        let (r0, r1, fr) = axis(r, sr, h);
        let (c0, c1, fc) = axis(c, sc, w);
        let top = src[[r0, c0, k]] * (1.0 - fc) + src[[r0, c1, k]] * fc;
        let bot = src[[r1, c0, k]] * (1.0 - fc) + src[[r1, c1, k]] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Heat-map and mask settings shared by preprocessing and training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningParams {
    pub sigma: f64,
    pub kernel: HeatMapKernel,
    /// Value of masked-out pixels in `[-1, 1]` space.
    pub mask_fill: f32,
}

impl Default for ConditioningParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            kernel: HeatMapKernel::Unsquared,
            mask_fill: DEFAULT_FILL,
        }
    }
}

/// Everything derived from one image's landmarks and person mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleConditioning {
    pub heatmaps: HeatMapStack,
    pub body_shape_index: f64,
    pub regions: Vec<Mask>,
    pub refined: Vec<Mask>,
}

impl SampleConditioning {
    pub fn compute(landmarks: &LandmarkSet, body: &Mask, params: &ConditioningParams) -> Result<Self> {
        let heatmaps = heatmaps_with_kernel(landmarks, params.sigma, params.kernel)?;
        let d_s = body_shape_index_or_default(landmarks);
        let (h, w) = body.shape();
        let regions = build_region_masks(landmarks, d_s, h, w)?;
        let refined = refine_part_masks(body, &regions)?;
        Ok(Self {
            heatmaps,
            body_shape_index: d_s,
            regions: regions.as_slice().to_vec(),
            refined,
        })
    }

    /// Writes heat maps, masks and `D_s` to one safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dev = candle_core::Device::Cpu;
        let stack = |masks: &[Mask]| -> Result<candle_core::Tensor> {
            let (h, w) = masks[0].shape();
            let v: Vec<u8> = masks.iter().flat_map(|m| m.data().iter().map(|&b| b as u8)).collect();
            Ok(candle_core::Tensor::from_vec(v, (masks.len(), h, w), &dev)?)
        };
        let hm = self.heatmaps.data();
        let mut tensors = HashMap::new();
        tensors.insert(
            "heatmaps".to_string(),
            candle_core::Tensor::from_vec(hm.iter().copied().collect::<Vec<f32>>(), hm.dim(), &dev)?,
        );
        tensors.insert("regions".to_string(), stack(&self.regions)?);
        tensors.insert("refined".to_string(), stack(&self.refined)?);
        tensors.insert(
            "body_shape_index".to_string(),
            candle_core::Tensor::new(&[self.body_shape_index], &dev)?,
        );
        candle_core::safetensors::save(&tensors, path).map_err(|e| match e {
            candle_core::Error::Io(io) => Error::io(path, io),
            other => other.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            field: "conditioning".into(),
            message,
        };
        let tensors = candle_core::safetensors::load(path, &candle_core::Device::Cpu).map_err(|e| match e {
            candle_core::Error::Io(io) => Error::io(path, io),
            other => parse(other.to_string()),
        })?;
        let get = |name: &str| {
            tensors
                .get(name)
                .ok_or_else(|| parse(format!("missing tensor `{name}`")))
        };
        let masks = |name: &str| -> Result<Vec<Mask>> {
            let t = get(name)?;
            let (n, h, w) = t.dims3()?;
            let v = t.flatten_all()?.to_vec1::<u8>()?;
            Ok((0..n)
                .map(|k| Mask::from_fn(h, w, |(r, c)| v[k * h * w + r * w + c] != 0))
                .collect())
        };
        let hm = get("heatmaps")?;
        let dims = hm.dims3()?;
        let data =
            Array3::from_shape_vec(dims, hm.flatten_all()?.to_vec1::<f32>()?).map_err(|e| parse(e.to_string()))?;
        Ok(Self {
            heatmaps: HeatMapStack::from_array(data)?,
            body_shape_index: get("body_shape_index")?.to_vec1::<f64>()?[0],
            regions: masks("regions")?,
            refined: masks("refined")?,
        })
    }
}

/// Network-ready arrays of one pair, channel-first.
#[derive(Clone, Debug)]
pub struct PairTensors {
    pub id: String,
    /// `(21, h, w)`: source image and source heat maps.
    pub src_in: Array3<f32>,
    /// `(21, h, w)`: target background and target heat maps.
    pub tgt_in: Array3<f32>,
    /// `(3, h, w)`.
    pub tgt_image: Array3<f32>,
    /// `(18, h, w)`.
    pub tgt_heatmaps: Array3<f32>,
    /// One gather plan per skip level, highest resolution first.
    pub warps: Vec<WarpPlan>,
}

impl PairTensors {
    pub fn build(sample: &PairedSample, skip_shapes: &[(usize, usize)], params: &ConditioningParams) -> Result<Self> {
        let src = SampleConditioning::compute(&sample.src_landmarks, &sample.src_mask, params)?;
        let tgt = SampleConditioning::compute(&sample.tgt_landmarks, &sample.tgt_mask, params)?;
        Self::from_conditioning(sample, &src, &tgt, skip_shapes, params)
    }

    pub fn from_conditioning(
        sample: &PairedSample,
        src: &SampleConditioning,
        tgt: &SampleConditioning,
        skip_shapes: &[(usize, usize)],
        params: &ConditioningParams,
    ) -> Result<Self> {
        let full = sample.shape();
        if sample.tgt_image.shape() != full {
            return Err(Error::invalid("source and target images differ in size"));
        }
        let affines = fit_part_affines(&sample.src_landmarks, &sample.tgt_landmarks, src.body_shape_index)?;
        let warps = skip_shapes
            .iter()
            .map(|&shape| WarpPlan::build(&src.refined, &affines, full, shape))
            .collect::<Result<Vec<_>>>()?;
        let background = split_background_with_fill(&sample.tgt_image, &sample.tgt_mask, params.mask_fill)?;
        let cat = |a: Array3<f32>, b: &Array3<f32>| concatenate(Axis(0), &[a.view(), b.view()]).expect("same frame");
        Ok(Self {
            id: sample.id(),
            src_in: cat(sample.src_image.to_chw(), src.heatmaps.data()),
            tgt_in: cat(background.to_chw(), tgt.heatmaps.data()),
            tgt_image: sample.tgt_image.to_chw(),
            tgt_heatmaps: tgt.heatmaps.data().clone(),
            warps,
        })
    }
}
