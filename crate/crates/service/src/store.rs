//! Directory-backed session store.
//!
//! Each session lives in `<root>/<id>/` with its uploaded inputs, a
//! `manifest.json` and an `artifacts/` directory. Artifact files are written
//! once and never modified. Fusion outputs carry a generation suffix
//! (`result_g3`, `weight_2_g3`), and the bare names resolve to the latest
//! generation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use refill_core::io;
use refill_core::pipeline::{fuse, prepare, FuseParams, Prepared};
use refill_core::raster::{composite, HoleMask, Image};
use refill_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{ApiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Pending,
    Proposed,
    Fused,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub id: Uuid,
    pub state: SessionState,
    pub error: Option<String>,
    pub degraded: bool,
    pub config: PipelineConfig,
    pub proposal_ids: Vec<usize>,
    /// Number of completed fusions; zero before the first.
    pub generation: u64,
    pub toggles: Vec<bool>,
    pub artifacts: Vec<String>,
    pub notes: Vec<String>,
}

/// Whether proposal computation starts on its own after upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeMode {
    Background,
    /// Jobs wait for an explicit [`Store::compute`] call.
    Deferred,
}

pub struct Session {
    pub id: Uuid,
    dir: PathBuf,
    inner: Mutex<Inner>,
    /// Serializes mutating work within the session.
    work: tokio::sync::Mutex<()>,
}

struct Inner {
    manifest: Manifest,
    prepared: Option<Arc<Prepared>>,
    /// Bumped whenever inputs change so stale jobs discard their results.
    epoch: u64,
}

/// Body of a fuse request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseRequest {
    #[serde(default)]
    pub toggles: Vec<bool>,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuseResponse {
    pub result: String,
    pub generation: u64,
    pub weights: Vec<String>,
}

impl Session {
    pub fn manifest(&self) -> Manifest {
        self.inner.lock().expect("session lock").manifest.clone()
    }

    fn artifacts_dir(&self) -> PathBuf {
        self.dir.join("artifacts")
    }

    fn persist(&self, manifest: &Manifest) -> Result<()> {
        let tmp = self.dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(manifest)?)?;
        std::fs::rename(tmp, self.dir.join("manifest.json"))?;
        Ok(())
    }

    fn update(&self, epoch: u64, f: impl FnOnce(&mut Inner)) -> Result<bool> {
        let mut inner = self.inner.lock().expect("session lock");
        if inner.epoch != epoch {
            return Ok(false);
        }
        f(&mut inner);
        self.persist(&inner.manifest)?;
        Ok(true)
    }

    fn load_inputs(&self) -> Result<(Image, HoleMask, Image)> {
        let target = io::load_image(self.dir.join("target.png"), true)?;
        let mask = io::load_mask(self.dir.join("mask.png"))?;
        let source = io::load_image(self.dir.join("source.png"), true)?;
        Ok((target, mask, source))
    }

    /// Resolves an artifact name to a file, mapping bare fusion names to the
    /// latest generation.
    pub fn artifact_path(&self, name: &str) -> Result<(PathBuf, &'static str)> {
        let stem = name.strip_suffix(".png").or_else(|| name.strip_suffix(".json")).unwrap_or(name);
        let unknown = || ApiError::UnknownArtifact(name.to_string());
        if stem.is_empty() || !stem.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(unknown());
        }
        let generation = self.manifest().generation;
        let resolved = if is_fusion_name(stem) {
            if generation == 0 {
                return Err(unknown());
            }
            format!("{stem}_g{generation}")
        } else {
            stem.to_string()
        };
        let dir = self.artifacts_dir();
        for (ext, mime) in [("png", "image/png"), ("json", "application/json")] {
            let p = dir.join(format!("{resolved}.{ext}"));
            if p.is_file() {
                return Ok((p, mime));
            }
        }
        Err(unknown())
    }
}

fn is_fusion_name(stem: &str) -> bool {
    stem == "result"
        || stem == "weight_g"
        || stem
            .strip_prefix("weight_")
            .is_some_and(|i| !i.is_empty() && i.chars().all(|c| c.is_ascii_digit()))
}

fn write_artifact(dir: &Path, names: &mut Vec<String>, name: String, bytes: &[u8]) -> Result<()> {
    let ext = if bytes.starts_with(b"\x89PNG") { "png" } else { "json" };
    std::fs::write(dir.join(format!("{name}.{ext}")), bytes)?;
    names.push(name);
    Ok(())
}

fn prepare_artifacts(dir: &Path, prepared: &Prepared) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for p in &prepared.proposals {
        let i = p.index;
        write_artifact(dir, &mut names, format!("proposal_{i}"), &io::encode_png(&p.warped)?)?;
        write_artifact(dir, &mut names, format!("refined_{i}"), &io::encode_png(p.refined())?)?;
        write_artifact(dir, &mut names, format!("confidence_{i}"), &io::encode_png(&p.confidence)?)?;
        write_artifact(dir, &mut names, format!("preview_{i}"), &io::encode_png(&p.preview)?)?;
    }
    let fill = composite(&prepared.masked, &prepared.fill, &prepared.mask)?;
    write_artifact(dir, &mut names, "fill".into(), &io::encode_png(&fill)?)?;
    let summary = serde_json::json!({
        "degraded": prepared.degraded,
        "n_keypoints_target": prepared.keypoints_target.len(),
        "n_keypoints_source": prepared.keypoints_source.len(),
        "n_matches": prepared.matches.len(),
        "proposals": prepared.proposals.iter().map(|p| serde_json::json!({
            "index": p.index,
            "homography": p.homography,
            "match_count": p.match_count,
            "inlier_count": p.inlier_count,
        })).collect::<Vec<_>>(),
        "notes": prepared.notes,
    });
    write_artifact(dir, &mut names, "summary".into(), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(names)
}

pub struct Store {
    root: PathBuf,
    mode: ComputeMode,
    sessions: RwLock<HashMap<Uuid, Arc<Session>>>,
}

impl Store {
    /// Opens `root`, reloading any sessions persisted there. Sessions whose
    /// proposal job was interrupted are restarted.
    pub fn open(root: impl Into<PathBuf>, mode: ComputeMode) -> Result<Arc<Self>> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let mut sessions = HashMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        entries.sort();
        for dir in entries {
            let Ok(bytes) = std::fs::read(dir.join("manifest.json")) else {
                continue;
            };
            let Ok(manifest) = serde_json::from_slice::<Manifest>(&bytes) else {
                continue;
            };
            let id = manifest.id;
            sessions.insert(
                id,
                Arc::new(Session {
                    id,
                    dir,
                    inner: Mutex::new(Inner {
                        manifest,
                        prepared: None,
                        epoch: 0,
                    }),
                    work: tokio::sync::Mutex::new(()),
                }),
            );
        }
        let store = Arc::new(Self {
            root,
            mode,
            sessions: RwLock::new(sessions),
        });
        if mode == ComputeMode::Background {
            let pending: Vec<Uuid> = store
                .sessions
                .read()
                .expect("store lock")
                .values()
                .filter(|s| s.manifest().state == SessionState::Pending)
                .map(|s| s.id)
                .collect();
            for id in pending {
                store.spawn_compute(id);
            }
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>> {
        let unknown = || ApiError::UnknownSession(id.to_string());
        let uuid = Uuid::parse_str(id).map_err(|_| unknown())?;
        self.sessions
            .read()
            .expect("store lock")
            .get(&uuid)
            .cloned()
            .ok_or_else(unknown)
    }

    /// Validates and stores the inputs of a new session and schedules its
    /// proposal job.
    pub fn create(
        self: &Arc<Self>,
        target: &[u8],
        mask: &[u8],
        source: &[u8],
        config: Option<&[u8]>,
    ) -> Result<Uuid> {
        let t = io::decode_image(target, true).map_err(|e| ApiError::Unprocessable(format!("target: {e}")))?;
        let m = io::decode_mask(mask).map_err(|e| ApiError::Unprocessable(format!("mask: {e}")))?;
        io::decode_image(source, true).map_err(|e| ApiError::Unprocessable(format!("source: {e}")))?;
        check_mask(&t, &m)?;
        let config = match config {
            Some(bytes) => {
                let text = std::str::from_utf8(bytes).map_err(|e| ApiError::Unprocessable(format!("config: {e}")))?;
                PipelineConfig::from_json(text).map_err(|e| ApiError::Unprocessable(format!("config: {e}")))?
            }
            None => PipelineConfig::default(),
        };
        if config.depth_path.is_some() {
            return Err(ApiError::Unprocessable("config: depth_path is not accepted by the service".into()));
        }
        let id = Uuid::new_v4();
        let dir = self.root.join(id.to_string());
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("target.png"), target)?;
        std::fs::write(dir.join("mask.png"), mask)?;
        std::fs::write(dir.join("source.png"), source)?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&config)?)?;
        let manifest = Manifest {
            id,
            state: SessionState::Pending,
            error: None,
            degraded: false,
            toggles: config.proposal_toggles.clone(),
            config,
            proposal_ids: Vec::new(),
            generation: 0,
            artifacts: Vec::new(),
            notes: Vec::new(),
        };
        let session = Arc::new(Session {
            id,
            dir,
            inner: Mutex::new(Inner {
                manifest,
                prepared: None,
                epoch: 0,
            }),
            work: tokio::sync::Mutex::new(()),
        });
        session.persist(&session.manifest())?;
        self.sessions.write().expect("store lock").insert(id, session);
        if self.mode == ComputeMode::Background {
            self.spawn_compute(id);
        }
        Ok(id)
    }

    fn spawn_compute(self: &Arc<Self>, id: Uuid) {
        let store = Arc::clone(self);
        tokio::spawn(async move {
            let _ = store.compute(&id.to_string()).await;
        });
    }

    /// Runs proposal generation and the initial fusion for a pending session.
    pub async fn compute(&self, id: &str) -> Result<()> {
        let session = self.get(id)?;
        let _guard = session.work.lock().await;
        let epoch = {
            let inner = session.inner.lock().expect("session lock");
            if inner.manifest.state != SessionState::Pending {
                return Ok(());
            }
            inner.epoch
        };
        let s = Arc::clone(&session);
        let outcome = tokio::task::spawn_blocking(move || run_prepare(&s, epoch))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        match outcome {
            Ok(()) => {
                let req = FuseRequest {
                    toggles: session.manifest().toggles,
                    tau: None,
                    gamma: None,
                };
                fuse_locked(&session, &req).await.map(|_| ())
            }
            Err(e) => {
                let msg = e.to_string();
                session.update(epoch, |inner| {
                    inner.manifest.state = SessionState::Failed;
                    inner.manifest.error = Some(msg);
                })?;
                Err(e)
            }
        }
    }

    /// Replaces the mask, drops all derived artifacts and reschedules.
    pub async fn replace_mask(self: &Arc<Self>, id: &str, bytes: &[u8]) -> Result<Manifest> {
        let session = self.get(id)?;
        let mask = io::decode_mask(bytes).map_err(|e| ApiError::Unprocessable(format!("mask: {e}")))?;
        let target = io::load_image(session.dir.join("target.png"), true)?;
        check_mask(&target, &mask)?;
        let manifest = {
            let _guard = session.work.lock().await;
            std::fs::write(session.dir.join("mask.png"), bytes)?;
            let dir = session.artifacts_dir();
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            let mut inner = session.inner.lock().expect("session lock");
            inner.epoch += 1;
            inner.prepared = None;
            let m = &mut inner.manifest;
            m.state = SessionState::Pending;
            m.error = None;
            m.degraded = false;
            m.proposal_ids.clear();
            m.generation = 0;
            m.artifacts.clear();
            m.notes.clear();
            session.persist(m)?;
            m.clone()
        };
        if self.mode == ComputeMode::Background {
            self.spawn_compute(session.id);
        }
        Ok(manifest)
    }

    /// Recomputes fusion only.
    pub async fn fuse(&self, id: &str, req: &FuseRequest) -> Result<FuseResponse> {
        let session = self.get(id)?;
        check_ready(&session)?;
        let _guard = session.work.lock().await;
        check_ready(&session)?;
        fuse_locked(&session, req).await
    }

    pub async fn delete(&self, id: &str) -> Result<()> {
        let session = self.get(id)?;
        let _guard = session.work.lock().await;
        self.sessions.write().expect("store lock").remove(&session.id);
        session.inner.lock().expect("session lock").epoch += 1;
        if session.dir.exists() {
            std::fs::remove_dir_all(&session.dir)?;
        }
        Ok(())
    }
}

fn check_mask(target: &Image, mask: &HoleMask) -> Result<()> {
    if mask.dims() != target.dims() {
        return Err(ApiError::Unprocessable(format!(
            "mask is {:?} but target is {:?}",
            mask.dims(),
            target.dims()
        )));
    }
    if mask.known_count() == 0 {
        return Err(ApiError::Unprocessable("mask has no known pixels".into()));
    }
    Ok(())
}

fn check_ready(session: &Session) -> Result<()> {
    let m = session.manifest();
    match m.state {
        SessionState::Pending => Err(ApiError::NotReady("proposals are not ready yet".into())),
        SessionState::Failed => Err(ApiError::NotReady(format!(
            "proposal generation failed: {}",
            m.error.unwrap_or_default()
        ))),
        SessionState::Proposed | SessionState::Fused => Ok(()),
    }
}

fn run_prepare(session: &Session, epoch: u64) -> Result<()> {
    let (target, mask, source) = session.load_inputs()?;
    let cfg = session.manifest().config;
    let prepared = prepare(&target, &mask, &source, None, &cfg)?;
    let names = prepare_artifacts(&session.artifacts_dir(), &prepared)?;
    session.update(epoch, |inner| {
        let m = &mut inner.manifest;
        m.state = SessionState::Proposed;
        m.degraded = prepared.degraded;
        m.proposal_ids = prepared.proposals.iter().map(|p| p.index).collect();
        m.notes = prepared.notes.clone();
        m.artifacts = names;
        inner.prepared = Some(Arc::new(prepared));
    })?;
    Ok(())
}

/// Fusion with the session's work lock held.
async fn fuse_locked(session: &Arc<Session>, req: &FuseRequest) -> Result<FuseResponse> {
    let (cfg, prepared, epoch) = {
        let inner = session.inner.lock().expect("session lock");
        (inner.manifest.config.clone(), inner.prepared.clone(), inner.epoch)
    };
    let n_ids = cfg.n_clusters + 1;
    if req.toggles.len() > n_ids {
        return Err(ApiError::Unprocessable(format!(
            "{} toggles given, at most {n_ids} proposals exist",
            req.toggles.len()
        )));
    }
    let mut params = FuseParams::from_config(&cfg);
    params.toggles = req.toggles.clone();
    if let Some(tau) = req.tau {
        params.tau = tau;
    }
    if let Some(gamma) = req.gamma {
        params.gamma = gamma;
    }
    if !(params.tau > 0.0) || !(params.gamma > 0.0 && params.gamma < 1.0) {
        return Err(ApiError::Unprocessable("tau must be positive and gamma in (0, 1)".into()));
    }
    let s = Arc::clone(session);
    tokio::task::spawn_blocking(move || {
        // Proposals are recomputed from the stored inputs after a restart.
        let prepared = match prepared {
            Some(p) => p,
            None => {
                let (target, mask, source) = s.load_inputs()?;
                let p = Arc::new(prepare(&target, &mask, &source, None, &cfg)?);
                s.update(epoch, |inner| inner.prepared = Some(Arc::clone(&p)))?;
                p
            }
        };
        let fused = fuse(&prepared, &params)?;
        let generation = s.manifest().generation + 1;
        let dir = s.artifacts_dir();
        let mut names = Vec::new();
        for (k, &i) in fused.indices.iter().enumerate() {
            let png = io::encode_png(&fused.weights.proposal_image(k))?;
            write_artifact(&dir, &mut names, format!("weight_{i}_g{generation}"), &png)?;
        }
        let png = io::encode_png(&fused.weights.fallback_image())?;
        write_artifact(&dir, &mut names, format!("weight_g_g{generation}"), &png)?;
        let result = format!("result_g{generation}");
        write_artifact(&dir, &mut names, result.clone(), &io::encode_png(&fused.output)?)?;
        let weights = names[..names.len() - 1].to_vec();
        let toggles = params.toggles.clone();
        let applied = s.update(epoch, |inner| {
            let m = &mut inner.manifest;
            m.state = SessionState::Fused;
            m.generation = generation;
            m.toggles = toggles;
            m.artifacts.extend(names);
        })?;
        if !applied {
            return Err(ApiError::NotReady("session inputs changed during fusion".into()));
        }
        Ok(FuseResponse {
            result,
            generation,
            weights,
        })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}
