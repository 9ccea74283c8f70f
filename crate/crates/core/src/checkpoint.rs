//! Binary checkpoints. Layout (see `docs/checkpoint.md`):
//!
//! ```text
//! b"DSCK" | u32 LE version | u64 LE header length | JSON header | f32 LE blobs
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{Discriminator, Encoder};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob section, in f32 elements.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    seed: u64,
    tensors: Vec<Entry>,
}

/// Models restored from disk. Encoder and discriminator are absent in
/// inference-only checkpoints.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub generator: Generator<f32>,
    pub encoder: Option<Encoder<f32>>,
    pub discriminator: Option<Discriminator<f32>>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.generator.config()
    }

    /// Resume training. Missing encoder/discriminator are freshly
    /// initialised; optimizer moments always start at zero.
    pub fn into_train_state(self) -> Result<TrainState> {
        let config = self.generator.config().clone();
        let encoder = match self.encoder {
            Some(e) => e,
            None => Encoder::new(&config)?,
        };
        let discriminator = match self.discriminator {
            Some(d) => d,
            None => Discriminator::new(&config)?,
        };
        Ok(TrainState::from_models(self.generator, encoder, discriminator, self.step, self.seed))
    }
}

fn push_store(prefix: &str, store: &ParamStore<f32>, entries: &mut Vec<Entry>, blob: &mut Vec<u8>) {
    for (name, t) in store.iter() {
        entries.push(Entry {
            name: format!("{prefix}/{name}"),
            shape: t.shape().to_vec(),
            offset: blob.len() / 4,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialise models into checkpoint bytes. Output is a pure function of the
/// inputs.
pub fn to_bytes(
    generator: &Generator<f32>,
    encoder: Option<&Encoder<f32>>,
    discriminator: Option<&Discriminator<f32>>,
    step: u64,
    seed: u64,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    push_store("generator", generator.params(), &mut entries, &mut blob);
    if let Some(e) = encoder {
        push_store("encoder", e.params(), &mut entries, &mut blob);
    }
    if let Some(d) = discriminator {
        push_store("discriminator", d.params(), &mut entries, &mut blob);
    }
    let header = serde_json::to_vec(&Header {
        config: generator.config().clone(),
        step,
        seed,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn fill(prefix: &str, store: &mut ParamStore<f32>, header: &Header, blob: &[u8]) -> Result<()> {
    store
        .load_from(|name| {
            let key = format!("{prefix}/{name}");
            let e = header.tensors.iter().find(|e| e.name == key)?;
            let n: usize = e.shape.iter().product();
            let bytes = blob.get(e.offset * 4..(e.offset + n) * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Some(Tensor::from_vec(&e.shape, data))
        })
        .map_err(bad)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
    let blob = &bytes[16 + hlen..];
    let has = |p: &str| header.tensors.iter().any(|e| e.name.starts_with(p));
    let mut generator = Generator::new(&header.config)?;
    fill("generator", generator.params_mut(), &header, blob)?;
    let encoder = if has("encoder/") {
        let mut e = Encoder::new(&header.config)?;
        fill("encoder", e.params_mut(), &header, blob)?;
        Some(e)
    } else {
        None
    };
    let discriminator = if has("discriminator/") {
        let mut d = Discriminator::new(&header.config)?;
        fill("discriminator", d.params_mut(), &header, blob)?;
        Some(d)
    } else {
        None
    };
    Ok(Checkpoint {
        step: header.step,
        seed: header.seed,
        generator,
        encoder,
        discriminator,
    })
}

/// Write all three models of a training state, via a temporary file.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = to_bytes(
        &state.generator,
        Some(&state.encoder),
        Some(&state.discriminator),
        state.step,
        state.seed,
    )?;
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::file(&tmp, e))?;
    f.sync_all().map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::file(path, e))
}
