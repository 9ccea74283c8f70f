//! Condition maps, images and latents shared by every other module.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Depth values live on a dyadic grid of this spacing. Sums and differences
/// of grid values are exact in `f32`, so an accepted shift followed by the
/// opposite shift restores a depth map bit for bit.
pub const DEPTH_QUANTUM: f64 = 1.0 / (1u64 << 24) as f64;

/// Snap a depth value onto the [`DEPTH_QUANTUM`] grid.
pub fn snap_depth(v: f64) -> f32 {
    ((v / DEPTH_QUANTUM).round() * DEPTH_QUANTUM) as f32
}

pub fn is_valid_resolution(r: usize) -> bool {
    r >= 8 && r.is_power_of_two()
}

/// Ordered label names; a label's id is its index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(Vec<String>);

impl Default for LabelSet {
    fn default() -> Self {
        Self::new(["sky", "mountain", "tree", "grass", "earth", "water", "rock"])
    }
}

impl LabelSet {
    pub const SKY: usize = 0;
    pub const MOUNTAIN: usize = 1;
    pub const TREE: usize = 2;
    pub const GRASS: usize = 3;
    pub const EARTH: usize = 4;
    pub const WATER: usize = 5;
    pub const ROCK: usize = 6;

    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Self(names.into_iter().map(Into::into).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    /// Accepts either a label name or a numeric id.
    pub fn resolve(&self, key: &str) -> Result<usize> {
        if let Some(id) = self.id_of(key) {
            return Ok(id);
        }
        match key.parse::<usize>() {
            Ok(id) if id < self.len() => Ok(id),
            _ => Err(Error::UnknownLabel(key.to_string())),
        }
    }
}

/// Per-pixel semantic labels (the content condition).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    label_set: LabelSet,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, label_set: LabelSet) -> Result<Self> {
        if !is_valid_resolution(height) {
            return Err(Error::InvalidResolution(height));
        }
        if !is_valid_resolution(width) {
            return Err(Error::InvalidResolution(width));
        }
        if label_set.len() < 2 || label_set.len() > 256 {
            return Err(Error::InvalidConfig(format!(
                "label set must have 2..=256 labels, got {}",
                label_set.len()
            )));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= label_set.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                num_labels: label_set.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
            label_set,
        })
    }

    /// Build from an `L×H×W` one-hot tensor; every pixel must have exactly
    /// one channel at 1 and the rest at 0.
    pub fn from_one_hot<T: Element>(one_hot: &Tensor<T>, label_set: LabelSet) -> Result<Self> {
        let s = one_hot.shape();
        if s.len() != 3 || s[0] != label_set.len() {
            return Err(Error::ShapeMismatch(format!(
                "one-hot tensor {s:?} for {} labels",
                label_set.len()
            )));
        }
        let (h, w) = (s[1], s[2]);
        let d = one_hot.data();
        let mut labels = vec![0u8; h * w];
        for p in 0..h * w {
            let mut hot = None;
            for l in 0..s[0] {
                let v = d[l * h * w + p];
                if v == T::one() && hot.is_none() {
                    hot = Some(l);
                } else if v != T::zero() {
                    return Err(Error::NotOneHot { y: p / w, x: p % w });
                }
            }
            labels[p] = hot.ok_or(Error::NotOneHot { y: p / w, x: p % w })? as u8;
        }
        Self::new(h, w, labels, label_set)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn num_labels(&self) -> usize {
        self.label_set.len()
    }

    pub fn label_at(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    pub fn present_labels(&self) -> BTreeSet<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// `L×H×W` one-hot encoding.
    pub fn one_hot<T: Element>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut data = vec![T::zero(); self.num_labels() * plane];
        for (p, &l) in self.labels.iter().enumerate() {
            data[l as usize * plane + p] = T::one();
        }
        Tensor::from_vec(&[self.num_labels(), self.height, self.width], data)
    }
}

/// Scalar depth per pixel in `[0, 1]`, 0 = near, 1 = far.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DepthMap {
    /// Validates range and finiteness, then snaps values onto the depth grid.
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} depth values for a {height}x{width} map",
                values.len()
            )));
        }
        if !is_valid_resolution(height) {
            return Err(Error::InvalidResolution(height));
        }
        if !is_valid_resolution(width) {
            return Err(Error::InvalidResolution(width));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { index: i });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::DepthOutOfRange {
                    index: i,
                    value: v as f64,
                });
            }
        }
        let values = values.into_iter().map(|v| snap_depth(v as f64)).collect();
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Clamp into `[0, 1]` before constructing; for network outputs.
    pub fn from_clamped(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(height, width, values)
    }

    pub fn constant(height: usize, width: usize, v: f32) -> Result<Self> {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `1×H×W` tensor in `[0, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.values.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    /// `1×H×W` tensor rescaled to the network range `[-1, 1]`.
    pub fn to_signed_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.values
                .iter()
                .map(|&v| T::of(2.0 * v as f64 - 1.0))
                .collect(),
        )
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// RGB image, `3×H×W`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} image values for 3x{height}x{width}",
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { index: i });
            }
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::ShapeMismatch(format!(
                    "image value {v} at {i} outside [-1, 1]"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.values.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }
}

/// A spatial latent for one generator layer (`C×h×w`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialLatent {
    pub layer_index: usize,
    pub values: Tensor<f32>,
}

impl SpatialLatent {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }
}

/// Check that a segmentation/depth pair is usable as a condition.
pub fn validate_pair(seg: &SegmentationMap, depth: &DepthMap) -> Result<()> {
    if (seg.height, seg.width) != (depth.height, depth.width) {
        return Err(Error::ShapeMismatch(format!(
            "segmentation {}x{} vs depth {}x{}",
            seg.height, seg.width, depth.height, depth.width
        )));
    }
    for (i, &v) in depth.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { index: i });
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::DepthOutOfRange {
                index: i,
                value: v as f64,
            });
        }
    }
    Ok(())
}

pub fn validate_image_pair(image: &ImageTensor, seg: &SegmentationMap) -> Result<()> {
    if (image.height, image.width) != (seg.height, seg.width) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs segmentation {}x{}",
            image.height, image.width, seg.height, seg.width
        )));
    }
    Ok(())
}

/// Resize a condition pair to `target`×`target`: labels by nearest neighbour
/// (top-left sample of each block), depth by area averaging.
pub fn resize_condition(
    seg: &SegmentationMap,
    depth: &DepthMap,
    target: usize,
) -> Result<(SegmentationMap, DepthMap)> {
    validate_pair(seg, depth)?;
    Ok((resize_segmentation(seg, target)?, resize_depth(depth, target)?))
}

pub fn resize_segmentation(seg: &SegmentationMap, target: usize) -> Result<SegmentationMap> {
    let f = downscale_factor(seg.height, seg.width, target)?;
    let labels = (0..target * target)
        .map(|p| seg.labels[(p / target) * f * seg.width + (p % target) * f])
        .collect();
    SegmentationMap::new(target, target, labels, seg.label_set.clone())
}

pub fn resize_depth(depth: &DepthMap, target: usize) -> Result<DepthMap> {
    let f = downscale_factor(depth.height, depth.width, target)?;
    let norm = (f * f) as f64;
    let values = (0..target * target)
        .map(|p| {
            let (ty, tx) = (p / target, p % target);
            let mut acc = 0.0f64;
            for y in ty * f..(ty + 1) * f {
                for x in tx * f..(tx + 1) * f {
                    acc += depth.values[y * depth.width + x] as f64;
                }
            }
            snap_depth(acc / norm)
        })
        .collect();
    DepthMap::new(target, target, values)
}

fn downscale_factor(h: usize, w: usize, target: usize) -> Result<usize> {
    if !is_valid_resolution(target) || target > h.min(w) || h != w {
        return Err(Error::InvalidResolution(target));
    }
    Ok(h / target)
}
