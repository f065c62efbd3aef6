//! HTTP label service: hands out unlabeled batches to annotators and turns
//! their choices into preference pairs.
//!
//! Batches are leased rather than locked: a batch handed out by
//! `GET /api/batch/next` is not offered again until its lease expires or it
//! is labeled. Label ingestion and store writes go through one mutex, so the
//! pair store has a single writer.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::Value;

use trafficrlhf_core::preference::{
    append_jsonl, load_jsonl, pairs_from_label, Label, Labeler, PreferencePair, ScenarioBatch,
};
use trafficrlhf_core::{AgentTrack, MapModel};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(600);

/// Files the service reads and appends to.
#[derive(Debug, Clone)]
pub struct LabelStores {
    pub batches: PathBuf,
    pub labels: PathBuf,
    pub pairs: PathBuf,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct SamplePayload<'a> {
    pub sample_id: &'a str,
    pub agents: &'a [AgentTrack],
}

/// What an annotator sees; the ground truth is deliberately absent.
#[derive(Debug, Serialize, PartialEq)]
pub struct BatchPayload<'a> {
    pub batch_id: &'a str,
    pub map: &'a MapModel,
    pub dt: f64,
    pub scenarios: Vec<SamplePayload<'a>>,
}

impl<'a> BatchPayload<'a> {
    pub fn new(batch: &'a ScenarioBatch) -> Self {
        Self {
            batch_id: &batch.batch_id,
            map: &batch.map,
            dt: batch
                .scenarios
                .first()
                .map_or(trafficrlhf_core::DT, |s| s.dt),
            scenarios: batch
                .scenarios
                .iter()
                .map(|s| SamplePayload {
                    sample_id: &s.sample_id,
                    agents: &s.agents,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub labeled: usize,
    pub remaining: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum LabelError {
    UnknownBatch,
    AlreadyLabeled,
    Malformed(String),
    Storage(String),
}

/// Service state with time passed in explicitly.
pub struct LabelDesk {
    stores: LabelStores,
    batches: Vec<ScenarioBatch>,
    index: HashMap<String, usize>,
    labeled: HashSet<String>,
    leases: HashMap<String, Instant>,
    lease: Duration,
}

impl LabelDesk {
    /// Loads the batch archive and the labels already recorded.
    pub fn open(stores: LabelStores, lease: Duration) -> trafficrlhf_core::Result<Self> {
        let batches: Vec<ScenarioBatch> = load_jsonl(&stores.batches)?;
        let labels: Vec<Label> = load_jsonl(&stores.labels)?;
        let index = batches
            .iter()
            .enumerate()
            .map(|(i, b)| (b.batch_id.clone(), i))
            .collect();
        Ok(Self {
            labeled: labels.into_iter().map(|l| l.batch_id).collect(),
            stores,
            batches,
            index,
            leases: HashMap::new(),
            lease,
        })
    }

    pub fn progress(&self) -> Progress {
        let labeled = self
            .batches
            .iter()
            .filter(|b| self.labeled.contains(&b.batch_id))
            .count();
        Progress {
            labeled,
            remaining: self.batches.len() - labeled,
        }
    }

    /// Oldest unlabeled batch without a live lease; leases it until
    /// `now + lease`.
    pub fn next_batch(&mut self, now: Instant) -> Option<&ScenarioBatch> {
        let i = self.batches.iter().position(|b| {
            !self.labeled.contains(&b.batch_id)
                && self
                    .leases
                    .get(&b.batch_id)
                    .is_none_or(|&until| until <= now)
        })?;
        self.leases
            .insert(self.batches[i].batch_id.clone(), now + self.lease);
        Some(&self.batches[i])
    }

    /// Validates and records a human choice. Returns the pairs appended.
    pub fn submit(
        &mut self,
        batch_id: &str,
        choice: Option<usize>,
        timestamp: u64,
    ) -> Result<Vec<PreferencePair>, LabelError> {
        let &i = self.index.get(batch_id).ok_or(LabelError::UnknownBatch)?;
        if self.labeled.contains(batch_id) {
            return Err(LabelError::AlreadyLabeled);
        }
        let label = Label {
            batch_id: batch_id.into(),
            choice,
            labeler: Labeler::Human,
            timestamp,
        };
        let pairs = pairs_from_label(&self.batches[i], &label)
            .map_err(|e| LabelError::Malformed(e.to_string()))?;
        append_jsonl(&self.stores.pairs, &pairs).map_err(|e| LabelError::Storage(e.to_string()))?;
        append_jsonl(&self.stores.labels, &[label])
            .map_err(|e| LabelError::Storage(e.to_string()))?;
        self.labeled.insert(batch_id.into());
        self.leases.remove(batch_id);
        Ok(pairs)
    }
}

/// Reads `{"choice": integer | null}`.
pub fn parse_choice(body: &[u8]) -> Result<Option<usize>, LabelError> {
    let v: Value =
        serde_json::from_slice(body).map_err(|e| LabelError::Malformed(e.to_string()))?;
    match v.get("choice") {
        Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n.as_u64().map(|c| Some(c as usize)).ok_or_else(|| {
            LabelError::Malformed(format!("choice {n} is not a non-negative integer"))
        }),
        Some(other) => Err(LabelError::Malformed(format!(
            "choice must be an integer or null, got {other}"
        ))),
        None => Err(LabelError::Malformed("missing field `choice`".into())),
    }
}

pub type SharedDesk = Arc<Mutex<LabelDesk>>;

pub fn router(desk: SharedDesk) -> Router {
    Router::new()
        .route("/api/batch/next", get(next_handler))
        .route("/api/batch/{id}/label", post(label_handler))
        .route("/api/progress", get(progress_handler))
        .with_state(desk)
}

async fn next_handler(State(desk): State<SharedDesk>) -> Response {
    let mut desk = desk.lock().expect("label desk poisoned");
    match desk.next_batch(Instant::now()) {
        Some(batch) => Json(BatchPayload::new(batch)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn label_handler(
    State(desk): State<SharedDesk>,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    let choice = match parse_choice(&body) {
        Ok(c) => c,
        Err(e) => return error_response(e),
    };
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut desk = desk.lock().expect("label desk poisoned");
    match desk.submit(&id, choice, now) {
        Ok(_) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error_response(e),
    }
}

async fn progress_handler(State(desk): State<SharedDesk>) -> Json<Progress> {
    Json(desk.lock().expect("label desk poisoned").progress())
}

fn error_response(e: LabelError) -> Response {
    let (status, message) = match e {
        LabelError::UnknownBatch => (StatusCode::NOT_FOUND, "unknown batch".to_string()),
        LabelError::AlreadyLabeled => (StatusCode::CONFLICT, "batch already labeled".to_string()),
        LabelError::Malformed(m) => (StatusCode::BAD_REQUEST, m),
        LabelError::Storage(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
    };
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

/// Serves until ctrl-c.
pub async fn serve(desk: LabelDesk, port: u16) -> anyhow::Result<()> {
    let app = router(Arc::new(Mutex::new(desk)));
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("label service listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
