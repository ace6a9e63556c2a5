//! Stick-figure scenes with exact landmarks and masks, for hermetic tests and demos.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_pairs, DatasetLayout, DatasetManifest, PairRecord, PairedSample, Split};
use crate::error::{Error, Result};
use crate::geometry::{format_landmark_record, Joint, LandmarkSet, Point, NUM_LANDMARKS};
use crate::image::{ImagePlane, Mask};

/// Clothing and skin colors of one synthetic person, in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Identity {
    pub shirt: [f32; 3],
    pub pants: [f32; 3],
    pub skin: [f32; 3],
}

impl Identity {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut color = || [0; 3].map(|_: i32| rng.gen_range(-0.9f32..0.9));
        let shirt = color();
        let pants = color();
        let tone = rng.gen_range(0.1f32..0.7);
        Self {
            shirt,
            pants,
            skin: [tone, tone * 0.7, tone * 0.5],
        }
    }
}

/// Landmarks of a standing person on a 128x64 canvas.
const BASE: [(f64, f64); NUM_LANDMARKS] = [
    (16.0, 32.0), // nose
    (27.0, 32.0), // neck
    (29.0, 23.0), // right shoulder
    (0.0, 0.0),   // right elbow (posed)
    (0.0, 0.0),   // right wrist (posed)
    (29.0, 41.0), // left shoulder
    (0.0, 0.0),   // left elbow (posed)
    (0.0, 0.0),   // left wrist (posed)
    (64.0, 27.0), // right hip
    (0.0, 0.0),   // right knee (posed)
    (0.0, 0.0),   // right ankle (posed)
    (64.0, 37.0), // left hip
    (0.0, 0.0),   // left knee (posed)
    (0.0, 0.0),   // left ankle (posed)
    (13.0, 29.5), // right eye
    (13.0, 34.5), // left eye
    (15.0, 26.5), // right ear
    (15.0, 37.5), // left ear
];

fn limb(from: Point, len: f64, angle: f64) -> Point {
    // angle 0 points straight down, positive swings toward larger columns
    Point::new(from.row + len * angle.cos(), from.col + len * angle.sin())
}

/// A random pose with all 18 landmarks present.
pub fn random_pose(rng: &mut impl Rng, height: usize, width: usize) -> LandmarkSet {
    let mut p: Vec<Point> = BASE.iter().map(|&(r, c)| Point::new(r, c)).collect();
    use Joint::*;
    let swing = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| rng.gen_range(lo..hi);
    let ra = swing(rng, -1.4, 0.3);
    p[RightElbow.index()] = limb(p[RightShoulder.index()], 17.0, ra);
    p[RightWrist.index()] = limb(p[RightElbow.index()], 15.0, ra + swing(rng, -1.2, 0.4));
    let la = swing(rng, -0.3, 1.4);
    p[LeftElbow.index()] = limb(p[LeftShoulder.index()], 17.0, la);
    p[LeftWrist.index()] = limb(p[LeftElbow.index()], 15.0, la + swing(rng, -0.4, 1.2));
    let rl = swing(rng, -0.45, 0.15);
    p[RightKnee.index()] = limb(p[RightHip.index()], 24.0, rl);
    p[RightAnkle.index()] = limb(p[RightKnee.index()], 24.0, rl + swing(rng, -0.2, 0.3));
    let ll = swing(rng, -0.15, 0.45);
    p[LeftKnee.index()] = limb(p[LeftHip.index()], 24.0, ll);
    p[LeftAnkle.index()] = limb(p[LeftKnee.index()], 24.0, ll + swing(rng, -0.3, 0.2));

    let scale = rng.gen_range(0.9..1.0) * (height as f64 / 128.0).min(width as f64 / 64.0);
    let dr = rng.gen_range(-3.0..3.0);
    let dc = rng.gen_range(-5.0..5.0);
    let (cr, cc) = (64.0, 32.0);
    let mut points = [None; NUM_LANDMARKS];
    for (j, q) in p.iter().enumerate() {
        let r = (q.row - cr) * scale + height as f64 / 2.0 + dr;
        let c = (q.col - cc) * scale + width as f64 / 2.0 + dc;
        points[j] = Some(Point::new(
            r.clamp(0.0, height as f64 - 1.0),
            c.clamp(0.0, width as f64 - 1.0),
        ));
    }
    LandmarkSet::new(points, height, width).expect("clamped into frame")
}

pub fn random_background(rng: &mut impl Rng, height: usize, width: usize) -> ImagePlane {
    let base = [0; 3].map(|_: i32| rng.gen_range(-0.8f32..0.8));
    let stripe = [0; 3].map(|_: i32| rng.gen_range(-1.0f32..1.0));
    let floor = [0; 3].map(|_: i32| rng.gen_range(-1.0f32..0.2));
    let stripe_row = rng.gen_range(0..height / 2);
    let stripe_h = rng.gen_range(height / 16..height / 6).max(1);
    let floor_row = height * 3 / 4 + rng.gen_range(0..height / 8);
    let tilt = rng.gen_range(-0.4f32..0.4);
    let mut img = ImagePlane::zeros(height, width);
    for ((r, c, k), v) in img.data_mut().indexed_iter_mut() {
        let t = r as f32 / height as f32 - 0.5 + tilt * (c as f32 / width as f32 - 0.5);
        *v = if r >= floor_row {
            floor[k]
        } else if (stripe_row..stripe_row + stripe_h).contains(&r) {
            stripe[k]
        } else {
            (base[k] + 0.3 * t).clamp(-1.0, 1.0)
        };
    }
    img
}

struct Canvas<'a> {
    image: &'a mut ImagePlane,
    mask: &'a mut Mask,
}

impl Canvas<'_> {
    fn paint(&mut self, color: [f32; 3], inside: impl Fn(Point) -> bool) {
        let (h, w) = self.image.shape();
        for r in 0..h {
            for c in 0..w {
                if inside(Point::new(r as f64, c as f64)) {
                    for k in 0..3 {
                        self.image.data_mut()[[r, c, k]] = color[k];
                    }
                    self.mask.set(r, c, true);
                }
            }
        }
    }

    fn segment(&mut self, a: Point, b: Point, radius: f64, color: [f32; 3]) {
        self.paint(color, |p| seg_dist(p, a, b) <= radius);
    }
}

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dr, dc) = (b.row - a.row, b.col - a.col);
    let len2 = dr * dr + dc * dc;
    let t = if len2 > 0.0 {
        (((p.row - a.row) * dr + (p.col - a.col) * dc) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(Point::new(a.row + t * dr, a.col + t * dc))
}

fn in_quad(q: &[Point; 4], p: Point) -> bool {
    let mut inside = false;
    for i in 0..4 {
        let (a, b) = (q[i], q[(i + 3) % 4]);
        if (a.row > p.row) != (b.row > p.row) {
            let col = a.col + (p.row - a.row) * (b.col - a.col) / (b.row - a.row);
            if p.col < col {
                inside = !inside;
            }
        }
    }
    inside
}

/// Draws the person over `background`; returns the image and the exact person mask.
pub fn render(identity: &Identity, pose: &LandmarkSet, background: &ImagePlane) -> (ImagePlane, Mask) {
    let (h, w) = background.shape();
    let s = (h as f64 / 128.0).min(w as f64 / 64.0);
    let mut image = background.clone();
    let mut mask = Mask::zeros(h, w);
    let mut cv = Canvas {
        image: &mut image,
        mask: &mut mask,
    };
    let at = |j: Joint| pose.get(j).expect("synthetic poses are complete");
    use Joint::*;
    for (a, b, c) in [(RightHip, RightKnee, RightAnkle), (LeftHip, LeftKnee, LeftAnkle)] {
        cv.segment(at(a), at(b), 3.5 * s, identity.pants);
        cv.segment(at(b), at(c), 3.0 * s, identity.pants);
    }
    let torso = [at(RightShoulder), at(LeftShoulder), at(LeftHip), at(RightHip)];
    cv.paint(identity.shirt, |p| in_quad(&torso, p));
    cv.segment(at(RightShoulder), at(LeftShoulder), 2.5 * s, identity.shirt);
    cv.segment(at(RightHip), at(LeftHip), 2.5 * s, identity.pants);
    cv.segment(at(Neck), at(Nose), 2.5 * s, identity.skin);
    for (a, b, c) in [
        (RightShoulder, RightElbow, RightWrist),
        (LeftShoulder, LeftElbow, LeftWrist),
    ] {
        cv.segment(at(a), at(b), 3.0 * s, identity.shirt);
        cv.segment(at(b), at(c), 2.5 * s, identity.skin);
    }
    let face = [Nose, RightEye, LeftEye, RightEar, LeftEar].map(at);
    let center = Point::new(
        face.iter().map(|p| p.row).sum::<f64>() / 5.0,
        face.iter().map(|p| p.col).sum::<f64>() / 5.0,
    );
    cv.paint(identity.skin, |p| p.dist(center) <= 7.0 * s);
    (image, mask)
}

/// One rendered image with its annotations.
#[derive(Clone, Debug)]
pub struct SynthImage {
    pub id: String,
    pub image: ImagePlane,
    pub mask: Mask,
    pub landmarks: LandmarkSet,
}

/// `n_pairs` identities, each shown twice in different poses and scenes.
pub fn toy_images(n_pairs: usize, seed: u64, height: usize, width: usize) -> Vec<(SynthImage, SynthImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|k| {
            let ident = Identity::random(&mut rng);
            let mut shot = |tag: &str| {
                let pose = random_pose(&mut rng, height, width);
                let bg = random_background(&mut rng, height, width);
                let (image, mask) = render(&ident, &pose, &bg);
                SynthImage {
                    id: format!("p{k:03}_{tag}"),
                    image,
                    mask,
                    landmarks: pose,
                }
            };
            let a = shot("a");
            let b = shot("b");
            (a, b)
        })
        .collect()
}

pub fn toy_pairs(n_pairs: usize, seed: u64, height: usize, width: usize) -> Vec<PairedSample> {
    toy_images(n_pairs, seed, height, width)
        .into_iter()
        .map(|(a, b)| PairedSample {
            src_id: a.id,
            tgt_id: b.id,
            src_image: a.image,
            tgt_image: b.image,
            src_landmarks: a.landmarks,
            tgt_landmarks: b.landmarks,
            src_mask: a.mask,
            tgt_mask: b.mask,
        })
        .collect()
}

/// Writes a dataset root (images, masks, landmarks, pairs) and returns its manifest.
pub fn write_dataset(root: &Path, n_pairs: usize, seed: u64, height: usize, width: usize) -> Result<DatasetManifest> {
    let layout = DatasetLayout::new(root);
    for dir in [super::IMAGES_DIR, super::MASKS_DIR, super::LANDMARKS_DIR] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    for (a, b) in toy_images(n_pairs, seed, height, width) {
        for img in [&a, &b] {
            img.image.save(&layout.image_path(&img.id))?;
            img.mask.save(&layout.mask_path(&img.id))?;
            let path = layout.landmark_path(&img.id);
            fs::write(&path, format_landmark_record(&img.id, &img.landmarks)).map_err(|e| Error::io(&path, e))?;
        }
        pairs.push(PairRecord::new(&a.id, &b.id));
    }
    write_pairs(&layout.pairs_path(), &pairs)?;
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: Split::Train,
        height,
        width,
        identity_disjoint: true,
        pairs,
    })
}
