//! Best-of-N batches, labels, preference pairs and their on-disk stores.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::kinematics;
use crate::policy::{rollout_closed_loop, RolloutConfig, TrafficPolicy};
use crate::world::{
    detect_collision, detect_offroad, MapModel, PreparedMap, Scenario, ScenarioContext,
};
use crate::{Error, Result};

/// Winner marker for pairs won by the logged ground truth.
pub const GT_SAMPLE: &str = "gt";

pub fn sample_id(i: usize) -> String {
    format!("s{i}")
}

/// N model futures from one context plus the logged ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBatch {
    pub batch_id: String,
    pub context_id: String,
    pub map: Arc<MapModel>,
    pub scenarios: Vec<Scenario>,
    pub ground_truth: Scenario,
}

impl ScenarioBatch {
    pub fn n(&self) -> usize {
        self.scenarios.len()
    }

    /// Looks up a member by sample id, the ground truth included.
    pub fn sample(&self, id: &str) -> Option<&Scenario> {
        if id == GT_SAMPLE {
            return Some(&self.ground_truth);
        }
        self.scenarios.iter().find(|s| s.sample_id == id)
    }
}

/// Rolls out `n` futures from `context`, sample `i` on ChaCha8 stream `i`
/// of `seed`.
pub fn make_batch(
    policy: &TrafficPolicy,
    batch_id: &str,
    context: &ScenarioContext,
    ground_truth: &Scenario,
    n: usize,
    rollout: &RolloutConfig,
    seed: u64,
) -> Result<ScenarioBatch> {
    if n < 2 {
        return Err(Error::Config(format!(
            "a batch needs at least 2 samples, got {n}"
        )));
    }
    let map = PreparedMap::new(&context.map)?;
    let scenarios = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut s = rollout_closed_loop(policy, &map, context, rollout, &mut rng)?.scenario;
            s.sample_id = sample_id(i);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioBatch {
        batch_id: batch_id.into(),
        context_id: context.scene_id.clone(),
        map: context.map.clone(),
        scenarios,
        ground_truth: ground_truth.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeler {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub batch_id: String,
    /// Index of the most realistic sample; `None` when none is.
    pub choice: Option<usize>,
    pub labeler: Labeler,
    /// Seconds since the Unix epoch; zero for oracle labels.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context_id: String,
    pub winner: String,
    pub loser: String,
    pub labeler: Labeler,
    pub batch_id: String,
}

/// Weights of the synthetic labeler's realism cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub w_collision: f64,
    pub w_offroad: f64,
    pub w_jerk: f64,
    /// Jerk magnitude (m/s³) tolerated before it is penalized. Zero keeps
    /// batches of collision-free samples distinguishable.
    pub jerk_threshold: f64,
    /// Above this minimum cost no sample is accepted.
    pub tau_none: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            w_collision: 10.0,
            w_offroad: 5.0,
            w_jerk: 1.0,
            jerk_threshold: 0.0,
            tau_none: 8.0,
        }
    }
}

/// Realism cost in per-agent-step units: `w_c * (fraction of agent-steps in
/// collision) + w_o * (fraction of agent-steps off road) + w_j * (mean over
/// agent jerk samples of max(0, |jerk| - threshold))`.
pub fn oracle_cost(scenario: &Scenario, map: &MapModel, cfg: &OracleConfig) -> Result<f64> {
    scenario.validate()?;
    let frac = |flags: &[Vec<bool>]| {
        let total: usize = flags.iter().map(|a| a.len()).sum();
        flags.iter().flatten().filter(|&&f| f).count() as f64 / total as f64
    };
    let collision = frac(&detect_collision(scenario));
    let offroad = frac(&detect_offroad(scenario, map)?);
    let (mut excess, mut count) = (0.0, 0usize);
    for agent in &scenario.agents {
        for j in kinematics(&agent.states, scenario.dt).jerk {
            excess += (j.abs() - cfg.jerk_threshold).max(0.0);
            count += 1;
        }
    }
    let jerk = if count == 0 {
        0.0
    } else {
        excess / count as f64
    };
    Ok(cfg.w_collision * collision + cfg.w_offroad * offroad + cfg.w_jerk * jerk)
}

/// Lowest-cost sample, ties to the lowest index; `None` above `tau_none`.
pub fn oracle_label(batch: &ScenarioBatch, cfg: &OracleConfig) -> Result<Label> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in batch.scenarios.iter().enumerate() {
        let c = oracle_cost(s, &batch.map, cfg)?;
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((i, c));
        }
    }
    let choice = best.filter(|&(_, c)| c <= cfg.tau_none).map(|(i, _)| i);
    Ok(Label {
        batch_id: batch.batch_id.clone(),
        choice,
        labeler: Labeler::Oracle,
        timestamp: 0,
    })
}

/// The chosen sample beats every other one (N - 1 pairs); with no choice
/// the ground truth beats all N samples.
pub fn pairs_from_label(batch: &ScenarioBatch, label: &Label) -> Result<Vec<PreferencePair>> {
    if label.batch_id != batch.batch_id {
        return Err(Error::Data(format!(
            "label for batch {} applied to batch {}",
            label.batch_id, batch.batch_id
        )));
    }
    let pair = |winner: String, loser: &Scenario| PreferencePair {
        context_id: batch.context_id.clone(),
        winner,
        loser: loser.sample_id.clone(),
        labeler: label.labeler,
        batch_id: batch.batch_id.clone(),
    };
    match label.choice {
        Some(i) if i >= batch.n() => Err(Error::Data(format!(
            "choice {i} out of range for batch {} of {}",
            batch.batch_id,
            batch.n()
        ))),
        Some(i) => Ok(batch
            .scenarios
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, s)| pair(batch.scenarios[i].sample_id.clone(), s))
            .collect()),
        None => Ok(batch
            .scenarios
            .iter()
            .map(|s| pair(GT_SAMPLE.into(), s))
            .collect()),
    }
}

/// Appends records to a JSON-lines file, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    w.get_ref().sync_data().map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines file; a missing file is an empty store. Blank lines
/// are skipped.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Deterministic position of a context in [0, 1) from its SHA-256 digest.
pub fn context_hash_unit(context_id: &str) -> f64 {
    let digest = Sha256::digest(context_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

/// Train/validation split that keeps all pairs of a context together.
/// Contexts whose hash falls below `val_fraction` validate; with two or more
/// contexts the cut moves, if needed, so neither side is empty.
pub fn split_by_context(
    pairs: &[PreferencePair],
    val_fraction: f64,
) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    let mut units: Vec<f64> = pairs
        .iter()
        .map(|p| context_hash_unit(&p.context_id))
        .collect();
    units.sort_by(f64::total_cmp);
    units.dedup();
    let mut cut = val_fraction;
    if let [lo, second, .., last] | [lo, second @ last] = units[..] {
        if lo >= cut {
            cut = 0.5 * (lo + second);
        } else if last < cut {
            cut = 0.5 * (units[units.len() - 2] + last);
        }
    }
    pairs
        .iter()
        .cloned()
        .partition(|p| context_hash_unit(&p.context_id) >= cut)
}
