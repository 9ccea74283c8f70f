//! Datasets of `(image, segmentation, depth)` triplets.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<id>.png   8-bit RGB
//! <root>/seg/<id>.png      8-bit indexed, index = label id
//! <root>/depth/<id>.png    16-bit gray, 0 = near
//! ```
//!
//! Externally produced triplets in the same layout load the same way.

pub mod png_io;
pub mod scene;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Batch;
use crate::types::{validate_image_pair, validate_pair, LabelSet};

pub use scene::{generate_scene, haze_depth_probe, scene_id, SceneParams, Triplet};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Generator seed; absent for external datasets.
    #[serde(default)]
    pub seed: Option<u64>,
    pub resolution: usize,
    pub label_set: LabelSet,
    pub ids: Vec<String>,
}

pub fn triplet_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    [
        root.join("images").join(format!("{id}.png")),
        root.join("seg").join(format!("{id}.png")),
        root.join("depth").join(format!("{id}.png")),
    ]
}

/// Summary of a build.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub manifest: Manifest,
    /// Files (re)written; 0 when the directory already matched.
    pub files_written: usize,
}

/// Render `count` scenes and write them under `out_dir`. Files whose
/// contents already match are left untouched, so a rebuild is a no-op.
pub fn build_dataset(seed: u64, count: usize, resolution: usize, out_dir: &Path) -> Result<BuildReport> {
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    if !crate::types::is_valid_resolution(resolution) {
        return Err(Error::InvalidResolution(resolution));
    }
    let mut written = 0;
    let mut ids = Vec::with_capacity(count);
    for index in 0..count as u64 {
        let t = generate_scene(&SceneParams::sample(seed, index), resolution)?;
        let [img, seg, depth] = triplet_paths(out_dir, &t.id);
        written += usize::from(png_io::write_if_changed(&img, &png_io::encode_image(&t.image))?);
        written += usize::from(png_io::write_if_changed(&seg, &png_io::encode_segmentation(&t.seg))?);
        written += usize::from(png_io::write_if_changed(&depth, &png_io::encode_depth(&t.depth))?);
        ids.push(t.id);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: Some(seed),
        resolution,
        label_set: LabelSet::default(),
        ids,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    written += usize::from(png_io::write_if_changed(&out_dir.join("manifest.json"), &json)?);
    Ok(BuildReport {
        manifest,
        files_written: written,
    })
}

/// Triplets in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub triplets: Vec<Triplet>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let bytes = png_io::read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::file(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if manifest.ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut triplets = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let [img_p, seg_p, depth_p] = triplet_paths(dir, id);
        let image = png_io::decode_image(&png_io::read_file(&img_p)?).map_err(|e| Error::file(&img_p, e))?;
        let seg = png_io::decode_segmentation(&png_io::read_file(&seg_p)?, &manifest.label_set)
            .map_err(|e| Error::file(&seg_p, e))?;
        let depth = png_io::decode_depth(&png_io::read_file(&depth_p)?).map_err(|e| Error::file(&depth_p, e))?;
        validate_pair(&seg, &depth).map_err(|e| Error::file(&depth_p, e))?;
        validate_image_pair(&image, &seg).map_err(|e| Error::file(&img_p, e))?;
        if seg.height() != manifest.resolution {
            return Err(Error::file(
                &seg_p,
                format!("resolution {} differs from manifest {}", seg.height(), manifest.resolution),
            ));
        }
        triplets.push(Triplet {
            id: id.clone(),
            image,
            seg,
            depth,
        });
    }
    Ok(Dataset { manifest, triplets })
}

impl Dataset {
    /// Generate in memory without touching the disk.
    pub fn synthetic(seed: u64, count: usize, resolution: usize) -> Result<Self> {
        let triplets = (0..count as u64)
            .map(|i| generate_scene(&SceneParams::sample(seed, i), resolution))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest: Manifest {
                version: MANIFEST_VERSION,
                seed: Some(seed),
                resolution,
                label_set: LabelSet::default(),
                ids: triplets.iter().map(|t| t.id.clone()).collect(),
            },
            triplets,
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Index order for one epoch, shuffled by `(seed, epoch)`.
    pub fn shuffled_indices(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        idx.shuffle(&mut rng);
        idx
    }

    /// Batch `step` of an endless shuffled stream; epochs reshuffle and the
    /// last partial batch of an epoch is dropped.
    pub fn batch_for_step(&self, mode: Mode, batch_size: usize, seed: u64, step: u64) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let b = batch_size.min(self.len());
        let per_epoch = (self.len() / b) as u64;
        let epoch = step / per_epoch;
        let offset = (step % per_epoch) as usize * b;
        let order = self.shuffled_indices(seed, epoch);
        let items: Vec<&Triplet> = order[offset..offset + b].iter().map(|&i| &self.triplets[i]).collect();
        make_batch(&items, mode)
    }
}

/// Stack triplets into a network-range batch for `mode`.
pub fn make_batch(items: &[&Triplet], mode: Mode) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let target: Vec<Tensor<f32>> = items
        .iter()
        .map(|t| match mode {
            Mode::S2d => t.depth.to_signed_tensor(),
            Mode::Sd2i | Mode::S2i => t.image.to_tensor(),
        })
        .collect();
    let seg: Vec<Tensor<f32>> = items.iter().map(|t| t.seg.one_hot()).collect();
    let depth = mode
        .uses_depth_input()
        .then(|| Tensor::stack(&items.iter().map(|t| t.depth.to_signed_tensor()).collect::<Vec<_>>()));
    Ok(Batch {
        target: Tensor::stack(&target),
        seg: Tensor::stack(&seg),
        depth,
    })
}
