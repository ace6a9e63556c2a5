//! Pixel-level foreground/background splitting and refined per-part masks.

use ndarray::Zip;

use crate::error::{Error, Result};
use crate::geometry::{BodyPart, RegionMaskSet};
use crate::image::{ImagePlane, Mask};

/// Value written into masked-out pixels. Zero is mid-gray in `[-1, 1]` space.
pub const DEFAULT_FILL: f32 = 0.0;

fn check_shape(image: &ImagePlane, mask: &Mask) -> Result<()> {
    if image.shape() != mask.shape() {
        return Err(Error::invalid(format!(
            "image {:?} and mask {:?} differ in shape",
            image.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn keep_where(image: &ImagePlane, mask: &Mask, keep_person: bool, fill: f32) -> Result<ImagePlane> {
    check_shape(image, mask)?;
    let mut out = image.clone();
    for ((r, c, _), v) in out.data_mut().indexed_iter_mut() {
        if mask.get(r, c) != keep_person {
            *v = fill;
        }
    }
    Ok(out)
}

/// `x ⊙ (1 - M)`: keeps the background, blanks the person.
pub fn split_background(image: &ImagePlane, body: &Mask) -> Result<ImagePlane> {
    keep_where(image, body, false, DEFAULT_FILL)
}

/// `M ⊙ x`: keeps the person, blanks the background.
pub fn split_foreground(image: &ImagePlane, body: &Mask) -> Result<ImagePlane> {
    keep_where(image, body, true, DEFAULT_FILL)
}

pub fn split_background_with_fill(image: &ImagePlane, body: &Mask, fill: f32) -> Result<ImagePlane> {
    keep_where(image, body, false, fill)
}

pub fn split_foreground_with_fill(image: &ImagePlane, body: &Mask, fill: f32) -> Result<ImagePlane> {
    keep_where(image, body, true, fill)
}

/// Intersects every non-torso region with the body mask; the torso takes
/// whatever part of the body is left over.
pub fn refine_part_masks(body: &Mask, regions: &RegionMaskSet) -> Result<Vec<Mask>> {
    if body.shape() != regions.shape() {
        return Err(Error::invalid(format!(
            "body mask {:?} and regions {:?} differ in shape",
            body.shape(),
            regions.shape()
        )));
    }
    let mut refined: Vec<Mask> = regions.as_slice().iter().map(|r| body.and(r)).collect();
    let limbs = refined[1..]
        .iter()
        .fold(Mask::zeros(body.height(), body.width()), |acc, m| acc.or(m));
    refined[BodyPart::Torso.index()] = body.and_not(&limbs);
    Ok(refined)
}

/// Body mask, coarse regions and refined parts of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub body: Mask,
    pub regions: RegionMaskSet,
    pub refined: Vec<Mask>,
}

impl MaskSet {
    pub fn build(body: Mask, regions: RegionMaskSet) -> Result<Self> {
        let refined = refine_part_masks(&body, &regions)?;
        Ok(Self { body, regions, refined })
    }

    pub fn refined(&self, part: BodyPart) -> &Mask {
        &self.refined[part.index()]
    }

    /// Checks the partition invariants; returns a description of the first violation.
    pub fn check(&self) -> std::result::Result<(), String> {
        let torso = &self.refined[0];
        let mut union = Mask::zeros(self.body.height(), self.body.width());
        for (i, m) in self.refined.iter().enumerate() {
            if !m.is_subset_of(&self.body) {
                return Err(format!("refined part {i} not inside body"));
            }
            if i > 0 && !torso.is_disjoint(m) {
                return Err(format!("torso overlaps part {i}"));
            }
            union = union.or(m);
        }
        if union != self.body {
            return Err("refined parts do not cover the body".into());
        }
        Ok(())
    }
}

/// Composite heat-map image: per-pixel maximum over channels, replicated to gray.
pub fn heatmap_composite(heatmaps: &crate::geometry::HeatMapStack) -> ImagePlane {
    let (h, w) = heatmaps.shape();
    let mut out = ImagePlane::filled(h, w, -1.0);
    let data = heatmaps.data();
    Zip::indexed(out.data_mut()).for_each(|(r, c, _), v| {
        let m = (0..data.dim().0).map(|j| data[[j, r, c]]).fold(0.0f32, f32::max);
        *v = 2.0 * m - 1.0;
    });
    out
}
