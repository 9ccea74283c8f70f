//! Session storage: in memory, optionally mirrored to a directory.
//!
//! Directory layout, one folder per session:
//!
//! ```text
//! <dir>/<session>/session.json
//! <dir>/<session>/segmentation.png
//! <dir>/<session>/assets/<asset>.png
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use depthscape::data::png_io;
use depthscape::pipeline::DepthEdit;
use depthscape::{DepthMap, Error, LabelSet, Result, SegmentationMap};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub id: String,
    /// Request seed the candidate was sampled under.
    pub seed: u64,
    /// Position within that request.
    pub index: usize,
    /// Candidate this one was edited from.
    pub parent: Option<String>,
    /// Edits applied since sampling, oldest first.
    pub edits: Vec<DepthEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub candidate_id: String,
    pub seed: u64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub has_segmentation: bool,
    pub candidates: Vec<CandidateInfo>,
    pub images: Vec<ImageInfo>,
    pub created: u64,
    pub updated: u64,
    next_asset: u64,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub meta: SessionMeta,
    pub segmentation: Option<SegmentationMap>,
    depths: HashMap<String, DepthMap>,
    assets: BTreeMap<String, Vec<u8>>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Session {
    fn new(id: String) -> Self {
        let t = now();
        Self {
            meta: SessionMeta {
                id,
                has_segmentation: false,
                candidates: Vec::new(),
                images: Vec::new(),
                created: t,
                updated: t,
                next_asset: 1,
            },
            segmentation: None,
            depths: HashMap::new(),
            assets: BTreeMap::new(),
        }
    }

    fn next_id(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}{}", self.meta.next_asset);
        self.meta.next_asset += 1;
        id
    }

    pub fn set_segmentation(&mut self, seg: SegmentationMap) {
        self.segmentation = Some(seg);
        self.meta.has_segmentation = true;
        self.meta.updated = now();
    }

    /// Store a depth candidate. The map is kept as it round-trips through
    /// its PNG encoding, so in-memory and persisted sessions agree.
    pub fn add_candidate(&mut self, depth: &DepthMap, seed: u64, index: usize, parent: Option<String>, edits: Vec<DepthEdit>) -> Result<CandidateInfo> {
        let id = self.next_id("d");
        let png = png_io::encode_depth(depth);
        let stored = png_io::decode_depth(&png)?;
        self.depths.insert(id.clone(), stored);
        self.assets.insert(id.clone(), png);
        let info = CandidateInfo {
            id,
            seed,
            index,
            parent,
            edits,
        };
        self.meta.candidates.push(info.clone());
        self.meta.updated = now();
        Ok(info)
    }

    pub fn add_image(&mut self, png: Vec<u8>, candidate_id: &str, seed: u64, index: usize) -> ImageInfo {
        let id = self.next_id("i");
        self.assets.insert(id.clone(), png);
        let info = ImageInfo {
            id,
            candidate_id: candidate_id.to_string(),
            seed,
            index,
        };
        self.meta.images.push(info.clone());
        self.meta.updated = now();
        info
    }

    pub fn candidate(&self, id: &str) -> Option<(&CandidateInfo, &DepthMap)> {
        let info = self.meta.candidates.iter().find(|c| c.id == id)?;
        Some((info, self.depths.get(id)?))
    }

    pub fn asset(&self, id: &str) -> Option<&[u8]> {
        self.assets.get(id).map(Vec::as_slice)
    }
}

pub type SessionHandle = Arc<Mutex<Session>>;

/// All sessions. Mutations of one session are serialised by its mutex.
#[derive(Debug)]
pub struct Store {
    sessions: RwLock<HashMap<String, SessionHandle>>,
    dir: Option<PathBuf>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            dir: None,
        }
    }

    /// Mirror sessions to `dir`, loading any already there.
    pub fn persistent(dir: &Path, label_set: &LabelSet) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::File {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut sessions = HashMap::new();
        let entries = std::fs::read_dir(dir)?;
        for entry in entries {
            let path = entry?.path();
            if path.join("session.json").is_file() {
                let s = load_session(&path, label_set)?;
                sessions.insert(s.meta.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            sessions: RwLock::new(sessions),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn create(&self) -> Result<String> {
        let mut map = self.sessions.write().expect("store lock");
        let id = loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if !map.contains_key(&id) {
                break id;
            }
        };
        let s = Session::new(id.clone());
        self.persist(&s)?;
        map.insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.read().expect("store lock").get(id).cloned()
    }

    /// Write the session to disk when persistence is on. Unchanged files
    /// are not rewritten.
    pub fn persist(&self, s: &Session) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let root = dir.join(&s.meta.id);
        if let Some(seg) = &s.segmentation {
            png_io::write_if_changed(&root.join("segmentation.png"), &png_io::encode_segmentation(seg))?;
        }
        for (id, png) in &s.assets {
            png_io::write_if_changed(&root.join("assets").join(format!("{id}.png")), png)?;
        }
        // Metadata last, so a reader never sees ids without their files.
        png_io::write_if_changed(&root.join("session.json"), &serde_json::to_vec_pretty(&s.meta)?)?;
        Ok(())
    }
}

fn load_session(root: &Path, label_set: &LabelSet) -> Result<Session> {
    let read = |p: PathBuf| std::fs::read(&p).map_err(|e| Error::File { path: p, message: e.to_string() });
    let meta: SessionMeta = serde_json::from_slice(&read(root.join("session.json"))?)?;
    let segmentation = if meta.has_segmentation {
        Some(png_io::decode_segmentation(&read(root.join("segmentation.png"))?, label_set)?)
    } else {
        None
    };
    let mut depths = HashMap::new();
    let mut assets = BTreeMap::new();
    for c in &meta.candidates {
        let png = read(root.join("assets").join(format!("{}.png", c.id)))?;
        depths.insert(c.id.clone(), png_io::decode_depth(&png)?);
        assets.insert(c.id.clone(), png);
    }
    for i in &meta.images {
        assets.insert(i.id.clone(), read(root.join("assets").join(format!("{}.png", i.id)))?);
    }
    Ok(Session {
        meta,
        segmentation,
        depths,
        assets,
    })
}
