//! Partition-controlled person image generation.
//!
//! A source image supplies the person's appearance; a target image supplies
//! the pose and the background. Both images are partitioned into pose heat
//! maps, a person foreground and a background, the person is further split
//! into ten body parts, and encoder features of each part are moved into the
//! target pose by a per-part affine warp before the decoder fuses them with
//! the target background.
//!
//! Module map:
//!
//! * [`geometry`]: landmarks, heat maps, body-shape index, region masks.
//! * [`partition`]: foreground/background splits and refined part masks.
//! * [`transform`]: per-part affine fitting and feature warping.
//! * [`wnet`]: the two-encoder generator and the two discriminators.
//! * [`training`]: losses, optimizer, alternating schedule, checkpoints.
//! * [`data`]: dataset layout, preprocessing, filtering, synthetic data.
//! * [`metrics`]: inception score, masked inception score, Fréchet distance.

pub mod data;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod partition;
pub mod training;
pub mod transform;
pub mod wnet;

pub use error::{Error, Result};
pub use geometry::{
    body_shape_index, build_region_masks, heatmaps_from_landmarks, BodyPart, HeatMapStack, Joint, LandmarkSet, Point,
    RegionMaskSet,
};
pub use image::{ImagePlane, Mask};
pub use partition::{refine_part_masks, split_background, split_foreground, MaskSet};
pub use transform::{fit_part_affines, warp_and_merge_features, Affine2, PartAffineSet};
