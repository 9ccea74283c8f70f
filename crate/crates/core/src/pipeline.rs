//! Two-phase generation: sample depth candidates from a segmentation, pick
//! and optionally edit one, then sample images conditioned on both.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::depth_ops::shift_segment_depth;
use crate::error::{Error, Result};
use crate::generator::{sample_z, Generator};
use crate::types::{DepthMap, ImageTensor, LabelSet, SegmentationMap};

/// `(z_seed, noise_seed)` for each of `n` samples drawn under `seed`.
/// Sample `i` does not depend on `n`.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.next_u64(), rng.next_u64())).collect()
}

/// Seed used for phase 2 when phase 1 ran under `seed`.
pub fn phase2_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEdit {
    pub label: usize,
    pub delta: f64,
}

impl DepthEdit {
    /// Parse `label:delta`, where `label` is a name or numeric id.
    pub fn parse(s: &str, labels: &LabelSet) -> Result<Self> {
        let (l, d) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("edit `{s}` is not label:delta")))?;
        let delta: f64 = d
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("edit `{s}` has a non-numeric delta")))?;
        if !delta.is_finite() {
            return Err(Error::InvalidConfig(format!("edit `{s}` has a non-finite delta")));
        }
        Ok(Self {
            label: labels.resolve(l.trim())?,
            delta,
        })
    }
}

fn expect_mode(g: &Generator<f32>, want: &[Mode], role: &str) -> Result<()> {
    let mode = g.config().mode;
    if !want.contains(&mode) {
        return Err(Error::InvalidConfig(format!("{role} model has mode {mode}")));
    }
    Ok(())
}

/// `n` depth maps for `seg`.
pub fn phase1_sample_depths(s2d: &Generator<f32>, seg: &SegmentationMap, n: usize, seed: u64) -> Result<Vec<DepthMap>> {
    expect_mode(s2d, &[Mode::S2d], "depth")?;
    let z_dim = s2d.config().z_dim;
    sample_seeds(seed, n)
        .into_iter()
        .map(|(zs, ns)| {
            s2d.generate(seg, None, &sample_z(z_dim, zs), ns)?
                .into_depth()
                .ok_or_else(|| Error::InvalidConfig("depth model produced an image".into()))
        })
        .collect()
}

/// `n` images for `seg` and `depth`. An S2I model ignores `depth`.
pub fn phase2_sample_images(
    generator: &Generator<f32>,
    seg: &SegmentationMap,
    depth: &DepthMap,
    n: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    expect_mode(generator, &[Mode::Sd2i, Mode::S2i], "image")?;
    let z_dim = generator.config().z_dim;
    let depth = generator.config().mode.uses_depth_input().then_some(depth);
    sample_seeds(seed, n)
        .into_iter()
        .map(|(zs, ns)| {
            generator
                .generate(seg, depth, &sample_z(z_dim, zs), ns)?
                .into_image()
                .ok_or_else(|| Error::InvalidConfig("image model produced a depth map".into()))
        })
        .collect()
}

/// Apply edits in order; the first failure aborts with its index.
pub fn apply_edits(depth: &DepthMap, seg: &SegmentationMap, edits: &[DepthEdit]) -> Result<DepthMap> {
    let mut d = depth.clone();
    for (index, e) in edits.iter().enumerate() {
        d = shift_segment_depth(&d, seg, e.label, e.delta).map_err(|source| Error::EditRejected {
            index,
            source: Box::new(source),
        })?;
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseRequest {
    pub n_depths: usize,
    pub pick: usize,
    pub edits: Vec<DepthEdit>,
    pub n_images: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TwoPhaseOutput {
    pub candidates: Vec<DepthMap>,
    /// The picked candidate after edits.
    pub depth: DepthMap,
    pub images: Vec<ImageTensor>,
}

/// Phase 1 under `seed`, pick, edit, phase 2 under [`phase2_seed`].
pub fn two_phase(
    s2d: &Generator<f32>,
    sd2i: &Generator<f32>,
    seg: &SegmentationMap,
    req: &TwoPhaseRequest,
) -> Result<TwoPhaseOutput> {
    if req.pick >= req.n_depths {
        return Err(Error::InvalidConfig(format!(
            "pick {} out of range for {} depth candidates",
            req.pick, req.n_depths
        )));
    }
    let candidates = phase1_sample_depths(s2d, seg, req.n_depths, req.seed)?;
    let depth = apply_edits(&candidates[req.pick], seg, &req.edits)?;
    let images = phase2_sample_images(sd2i, seg, &depth, req.n_images, phase2_seed(req.seed))?;
    Ok(TwoPhaseOutput {
        candidates,
        depth,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_scene, SceneParams};

    fn models() -> (Generator, Generator) {
        (
            Generator::new(&ModelConfig::tiny(Mode::S2d, 16)).unwrap(),
            Generator::new(&ModelConfig::tiny(Mode::Sd2i, 16)).unwrap(),
        )
    }

    #[test]
    fn seeds_are_prefix_stable() {
        let a = sample_seeds(9, 3);
        let b = sample_seeds(9, 5);
        assert_eq!(a[..], b[..3]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn parse_edits() {
        let l = LabelSet::default();
        let e = DepthEdit::parse("mountain:+0.1", &l).unwrap();
        assert_eq!(e.label, l.id_of("mountain").unwrap());
        assert!((e.delta - 0.1).abs() < 1e-12);
        assert_eq!(DepthEdit::parse("2:-0.5", &l).unwrap().label, 2);
        assert!(DepthEdit::parse("mountain", &l).is_err());
        assert!(DepthEdit::parse("nope:0.1", &l).is_err());
        assert!(DepthEdit::parse("sky:nan", &l).is_err());
    }

    #[test]
    fn zero_edits_equals_manual_composition() {
        let (s2d, sd2i) = models();
        let t = generate_scene(&SceneParams::sample(1, 0), 16).unwrap();
        let req = TwoPhaseRequest {
            n_depths: 3,
            pick: 1,
            edits: vec![],
            n_images: 2,
            seed: 40,
        };
        let out = two_phase(&s2d, &sd2i, &t.seg, &req).unwrap();
        let depths = phase1_sample_depths(&s2d, &t.seg, 3, 40).unwrap();
        assert_eq!(out.candidates, depths);
        assert_eq!(out.depth, depths[1]);
        let images = phase2_sample_images(&sd2i, &t.seg, &depths[1], 2, phase2_seed(40)).unwrap();
        assert_eq!(out.images, images);
        assert_ne!(images[0], images[1]);
    }

    #[test]
    fn failing_edit_reports_index() {
        let t = generate_scene(&SceneParams::sample(2, 0), 16).unwrap();
        let labels = t.seg.label_set().clone();
        let sky = labels.id_of("sky").unwrap();
        let present: Vec<usize> = t.seg.present_labels().into_iter().filter(|&l| l != sky).collect();
        let edits = [
            DepthEdit {
                label: present[0],
                delta: 0.0,
            },
            DepthEdit { label: sky, delta: -1.0 },
        ];
        match apply_edits(&t.depth, &t.seg, &edits) {
            Err(Error::EditRejected { index: 1, source }) => {
                assert!(matches!(*source, Error::OrderViolation { .. }), "{source:?}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mode_mismatch_and_bad_pick() {
        let (s2d, sd2i) = models();
        let t = generate_scene(&SceneParams::sample(1, 0), 16).unwrap();
        assert!(phase1_sample_depths(&sd2i, &t.seg, 1, 0).is_err());
        let req = TwoPhaseRequest {
            n_depths: 2,
            pick: 2,
            edits: vec![],
            n_images: 1,
            seed: 0,
        };
        assert!(matches!(two_phase(&s2d, &sd2i, &t.seg, &req), Err(Error::InvalidConfig(_))));
    }
}
