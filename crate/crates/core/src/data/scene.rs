//! Procedural landscapes with analytic depth.
//!
//! Layers, back to front: sky (depth 1), a far mountain ridge, a near ridge
//! of trees or rock, an optional lake and a grass or earth foreground. Ridges
//! are layered 1-D sine noise. The lake and the foreground lie on one ground
//! plane whose depth falls off as `1 / (v - v_horizon)`. Colours are a
//! per-label albedo blended toward the horizon colour in proportion to depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{DepthMap, ImageTensor, LabelSet, SegmentationMap};

/// Fraction of the haze colour mixed in at depth 1.
pub const HAZE_STRENGTH: f64 = 0.75;
/// Horizon (and haze) colour before per-scene jitter.
pub const HAZE_COLOR: [f64; 3] = [0.78, 0.86, 0.94];
const SKY_TOP: [f64; 3] = [0.30, 0.52, 0.85];
const TEXTURE: f64 = 0.03;
/// Distance of the ground plane's vanishing line above its top edge.
const GROUND_GAP: f64 = 0.06;

/// Nominal albedo of each default label (sky's entry is unused).
pub const ALBEDO: [[f64; 3]; 7] = [
    [0.0, 0.0, 0.0],
    [0.42, 0.44, 0.50],
    [0.13, 0.33, 0.15],
    [0.36, 0.62, 0.24],
    [0.52, 0.38, 0.24],
    [0.18, 0.32, 0.52],
    [0.45, 0.42, 0.38],
];

/// One ridge line: `base - amplitude * noise(u)`, noise in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    /// Lowest point of the ridge, fraction of image height from the top. `[0.30, 0.60]`.
    pub base: f64,
    /// `[0.04, 0.22]`.
    pub amplitude: f64,
    /// Base frequency in cycles per image width, `[0.8, 1.6]`; octaves double it.
    pub frequency: f64,
    /// One phase per octave; 2 to 4 octaves.
    pub phases: Vec<f64>,
}

impl Ridge {
    fn sample(rng: &mut ChaCha8Rng, base: (f64, f64), amplitude: (f64, f64)) -> Self {
        let octaves = rng.random_range(2..=4);
        Self {
            base: rng.random_range(base.0..base.1),
            amplitude: rng.random_range(amplitude.0..amplitude.1),
            frequency: rng.random_range(0.8..1.6),
            phases: (0..octaves).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        }
    }

    fn noise(&self, u: f64) -> f64 {
        let (mut sum, mut norm, mut amp, mut f) = (0.0, 0.0, 1.0, self.frequency);
        for &phase in &self.phases {
            sum += amp * (0.5 + 0.5 * (std::f64::consts::TAU * f * u + phase).sin());
            norm += amp;
            amp *= 0.5;
            f *= 2.0;
        }
        sum / norm
    }

    /// Top edge of the ridge at column `u`.
    pub fn line(&self, u: f64) -> f64 {
        self.base - self.amplitude * self.noise(u)
    }
}

/// Every random choice of one scene. Fully determined by `(seed, index)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub seed: u64,
    pub index: u64,
    pub far: Ridge,
    pub near: Ridge,
    /// `tree` or `rock`.
    pub near_label: usize,
    /// Top of the ground plane (lake or foreground), `[0.66, 0.78]`.
    pub ground_top: f64,
    /// Lake height when present, `[0.06, 0.12]`; present in about a third of scenes.
    pub water: Option<f64>,
    /// `grass` or `earth`.
    pub foreground_label: usize,
    /// Amplitude of the foreground edge wobble, `[0, 0.03]`.
    pub foreground_wobble: f64,
    /// Depth at the far ridge's top edge, `[0.72, 0.86]`; falls by 0.05 to its base.
    pub far_depth: f64,
    /// Same for the near ridge, `[0.50, 0.62]`; falls by 0.04.
    pub near_depth: f64,
    /// Depth at the top of the ground plane, `[0.34, 0.44]`.
    pub ground_depth: f64,
    /// Additive per-channel colour jitter, `[-0.04, 0.04]`, per label.
    pub albedo_jitter: Vec<[f64; 3]>,
    /// Additive jitter of the zenith colour, `[-0.05, 0.05]`.
    pub sky_jitter: [f64; 3],
    /// Seed of the per-pixel texture.
    pub texture_seed: u64,
}

impl SceneParams {
    pub fn sample(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let far = Ridge::sample(&mut rng, (0.30, 0.45), (0.08, 0.22));
        let near = Ridge::sample(&mut rng, (0.48, 0.60), (0.04, 0.12));
        let near_label = if rng.random_bool(0.5) { LabelSet::TREE } else { LabelSet::ROCK };
        let ground_top = rng.random_range(0.66..0.78);
        let water = rng.random_bool(0.35).then(|| rng.random_range(0.06..0.12));
        let foreground_label = if rng.random_bool(0.6) { LabelSet::GRASS } else { LabelSet::EARTH };
        let foreground_wobble = rng.random_range(0.0..0.03);
        let far_depth = rng.random_range(0.72..0.86);
        let near_depth = rng.random_range(0.50..0.62);
        let ground_depth = rng.random_range(0.34..0.44);
        let mut jitter = || [0; 3].map(|_: i32| rng.random_range(-0.04..0.04));
        let albedo_jitter = (0..ALBEDO.len()).map(|_| jitter()).collect();
        let sky_jitter = [0; 3].map(|_: i32| rng.random_range(-0.05..0.05));
        let texture_seed = rng.random();
        Self {
            seed,
            index,
            far,
            near,
            near_label,
            ground_top,
            water,
            foreground_label,
            foreground_wobble,
            far_depth,
            near_depth,
            ground_depth,
            albedo_jitter,
            sky_jitter,
            texture_seed,
        }
    }

    fn foreground_top(&self, u: f64) -> f64 {
        let wobble = self.foreground_wobble * (std::f64::consts::TAU * 1.7 * u + self.far.phases[0]).sin();
        self.ground_top + self.water.unwrap_or(0.0) + wobble
    }

    fn ground_plane_depth(&self, v: f64) -> f64 {
        self.ground_depth * GROUND_GAP / (v - (self.ground_top - GROUND_GAP))
    }

    /// Label and analytic depth at normalised coordinates.
    pub fn sample_point(&self, u: f64, v: f64) -> (usize, f64) {
        if v >= self.foreground_top(u) {
            return (self.foreground_label, self.ground_plane_depth(v));
        }
        if self.water.is_some() && v >= self.ground_top {
            return (LabelSet::WATER, self.ground_plane_depth(v));
        }
        let near_top = self.near.line(u);
        if v >= near_top {
            let t = ((v - near_top) / (1.0 - near_top)).clamp(0.0, 1.0);
            return (self.near_label, self.near_depth - 0.04 * t);
        }
        let far_top = self.far.line(u);
        if v >= far_top {
            let t = ((v - far_top) / (1.0 - far_top)).clamp(0.0, 1.0);
            return (LabelSet::MOUNTAIN, self.far_depth - 0.05 * t);
        }
        (LabelSet::SKY, 1.0)
    }
}

/// One `(image, segmentation, depth)` sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub image: ImageTensor,
    pub seg: SegmentationMap,
    pub depth: DepthMap,
}

pub fn scene_id(seed: u64, index: u64) -> String {
    format!("s{seed}-{index:05}")
}

fn hash_unit(seed: u64, x: usize, y: usize) -> f64 {
    // splitmix64 over the packed coordinates
    let mut z = seed ^ ((x as u64) << 32 | y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Render a scene at `resolution`×`resolution`.
pub fn generate_scene(params: &SceneParams, resolution: usize) -> Result<Triplet> {
    let r = resolution;
    let plane = r * r;
    let mut labels = vec![0u8; plane];
    let mut depth = vec![0f32; plane];
    let mut rgb = vec![0f32; 3 * plane];
    let haze: [f64; 3] = HAZE_COLOR;
    let zenith: [f64; 3] = std::array::from_fn(|c| SKY_TOP[c] + params.sky_jitter[c]);
    for y in 0..r {
        let v = (y as f64 + 0.5) / r as f64;
        for x in 0..r {
            let u = (x as f64 + 0.5) / r as f64;
            let p = y * r + x;
            let (label, d) = params.sample_point(u, v);
            labels[p] = label as u8;
            let d = d.clamp(0.0, 1.0);
            depth[p] = d as f32;
            let texture = TEXTURE * hash_unit(params.texture_seed, x, y);
            let colour: [f64; 3] = if label == LabelSet::SKY {
                let t = (v / 0.5).min(1.0);
                std::array::from_fn(|c| zenith[c] + (haze[c] - zenith[c]) * t)
            } else {
                let mix = HAZE_STRENGTH * d;
                std::array::from_fn(|c| {
                    let a = ALBEDO[label][c] + params.albedo_jitter[label][c] + texture;
                    (1.0 - mix) * a + mix * haze[c]
                })
            };
            for c in 0..3 {
                rgb[c * plane + p] = (colour[c].clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
            }
        }
    }
    Ok(Triplet {
        id: scene_id(params.seed, params.index),
        image: ImageTensor::new(r, r, rgb)?,
        seg: SegmentationMap::new(r, r, labels, LabelSet::default())?,
        depth: DepthMap::new(r, r, depth)?,
    })
}

/// Estimate depth from an image by inverting the haze model with the
/// nominal albedo of each pixel's label. Sky is assigned depth 1.
pub fn haze_depth_probe(image: &ImageTensor, seg: &SegmentationMap) -> Result<DepthMap> {
    crate::types::validate_image_pair(image, seg)?;
    let plane = seg.height() * seg.width();
    let v = image.values();
    let values = (0..plane)
        .map(|p| {
            let label = seg.labels()[p] as usize;
            if label == LabelSet::SKY || label >= ALBEDO.len() {
                return 1.0;
            }
            let a = ALBEDO[label];
            let (mut num, mut den) = (0.0, 0.0);
            for c in 0..3 {
                let px = (v[c * plane + p] as f64 + 1.0) * 0.5;
                let dir = HAZE_COLOR[c] - a[c];
                num += (px - a[c]) * dir;
                den += dir * dir;
            }
            ((num / den) / HAZE_STRENGTH).clamp(0.0, 1.0) as f32
        })
        .collect();
    DepthMap::new(seg.height(), seg.width(), values)
}
