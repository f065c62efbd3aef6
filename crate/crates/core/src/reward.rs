//! Sequence reward model: a per-step scorer averaged over agents and steps,
//! trained on preference pairs with the pairwise logistic loss.

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{
    step_features, FeatureConfig, STEP_ABS_JERK, STEP_COLLISION, STEP_OFFROAD, STEP_WINDOW,
};
use crate::nnet::{Activation, Mlp, OptimState};
use crate::world::{PreparedMap, Scenario, T_HIST};
use crate::{Error, Result};

pub const REWARD_FORMAT: &str = "trafficrlhf.reward";
pub const REWARD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub features: FeatureConfig,
    /// Step-feature columns fed to the scorer; empty means all of them.
    pub columns: Vec<usize>,
    /// Hidden widths between the step features and the scalar output.
    pub hidden: Vec<usize>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            columns: SAFETY_COLUMNS.to_vec(),
            hidden: vec![64, 64, 32],
        }
    }
}

impl RewardConfig {
    /// The large head: 512-512-512-128-32.
    pub fn wide() -> Self {
        Self {
            hidden: vec![512, 512, 512, 128, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.features.step_dim();
        if let Some(&c) = self.columns.iter().find(|&&c| c >= dim) {
            return Err(Error::Config(format!(
                "reward column {c} out of range (step features have {dim})"
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![input_dim(&self.features, &self.columns)];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

/// Absolute jerk, off-road and contact. Small preference sets do not
/// support more inputs than this without overfitting.
pub const SAFETY_COLUMNS: [usize; 3] = [STEP_ABS_JERK, STEP_OFFROAD, STEP_COLLISION];

fn input_dim(features: &FeatureConfig, columns: &[usize]) -> usize {
    if columns.is_empty() {
        features.step_dim()
    } else {
        columns.len()
    }
}

/// Tanh everywhere, including the output, so each step scores in (-1, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardRecord", into = "RewardRecord")]
pub struct RewardModel {
    pub features: FeatureConfig,
    pub columns: Vec<usize>,
    pub trunk: Mlp,
}

#[derive(Serialize, Deserialize)]
struct RewardRecord {
    format: String,
    version: u32,
    features: FeatureConfig,
    #[serde(default)]
    columns: Vec<usize>,
    trunk: Mlp,
}

impl From<RewardModel> for RewardRecord {
    fn from(m: RewardModel) -> Self {
        RewardRecord {
            format: REWARD_FORMAT.into(),
            version: REWARD_VERSION,
            features: m.features,
            columns: m.columns,
            trunk: m.trunk,
        }
    }
}

impl TryFrom<RewardRecord> for RewardModel {
    type Error = Error;

    fn try_from(r: RewardRecord) -> Result<Self> {
        if r.format != REWARD_FORMAT || r.version != REWARD_VERSION {
            return Err(Error::Data(format!(
                "unsupported reward checkpoint {:?} v{}",
                r.format, r.version
            )));
        }
        let step_dim = r.features.step_dim();
        if r.columns.iter().any(|&c| c >= step_dim) {
            return Err(Error::Data(
                "reward checkpoint selects a missing step column".into(),
            ));
        }
        if r.trunk.input_dim() != input_dim(&r.features, &r.columns) || r.trunk.output_dim() != 1 {
            return Err(Error::Data(
                "reward checkpoint has inconsistent widths".into(),
            ));
        }
        Ok(RewardModel {
            features: r.features,
            columns: r.columns,
            trunk: r.trunk,
        })
    }
}

/// The part of a closed-loop log that the reward model scores: every future
/// transition plus the history states its first step window reaches back to.
pub fn future_window(scenario: &Scenario) -> Scenario {
    scenario.slice(T_HIST + 1 - (STEP_WINDOW - 1)..scenario.len())
}

/// Step features of every agent, agent-major: row `a * n_steps + k` holds
/// agent `a` at state index `k + STEP_WINDOW - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFeatures {
    pub rows: Array2<f64>,
    pub n_agents: usize,
    pub n_steps: usize,
}

pub fn featurize_steps(
    map: &PreparedMap,
    cfg: &FeatureConfig,
    scenario: &Scenario,
) -> Result<StepFeatures> {
    scenario.validate()?;
    let len = scenario.len();
    if len < STEP_WINDOW {
        return Err(Error::Data(format!(
            "scenario {}/{} has {len} states; scoring needs at least {STEP_WINDOW}",
            scenario.scene_id, scenario.sample_id
        )));
    }
    let n_steps = len - (STEP_WINDOW - 1);
    let n_agents = scenario.n_agents();
    let dim = cfg.step_dim();
    let mut rows = Array2::zeros((n_agents * n_steps, dim));
    let mut buf = vec![0.0; dim];
    for a in 0..n_agents {
        for k in 0..n_steps {
            step_features(
                map,
                cfg,
                &scenario.agents,
                a,
                k + STEP_WINDOW - 1,
                scenario.dt,
                &mut buf,
            );
            rows.row_mut(a * n_steps + k)
                .assign(&ndarray::ArrayView1::from(&buf[..]));
        }
    }
    Ok(StepFeatures {
        rows,
        n_agents,
        n_steps,
    })
}

impl RewardModel {
    pub fn new(cfg: &RewardConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let acts = vec![Activation::Tanh; widths.len() - 1];
        Ok(Self {
            features: cfg.features.clone(),
            columns: cfg.columns.clone(),
            trunk: Mlp::new(&widths, &acts, seed)?,
        })
    }

    pub fn zeros(cfg: &RewardConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let acts = vec![Activation::Tanh; widths.len() - 1];
        Ok(Self {
            features: cfg.features.clone(),
            columns: cfg.columns.clone(),
            trunk: Mlp::zeros(&widths, &acts)?,
        })
    }

    /// Step features restricted to the model's columns.
    pub fn featurize(&self, scenario: &Scenario, map: &PreparedMap) -> Result<StepFeatures> {
        let full = featurize_steps(map, &self.features, scenario)?;
        if self.columns.is_empty() {
            return Ok(full);
        }
        Ok(StepFeatures {
            rows: full.rows.select(ndarray::Axis(1), &self.columns),
            ..full
        })
    }

    /// Per-step scores in row order of `StepFeatures`.
    pub fn step_scores(&self, steps: &StepFeatures) -> Result<Vec<f64>> {
        let cache = self.trunk.forward_batch(steps.rows.clone())?;
        Ok(cache.output().column(0).to_vec())
    }

    pub fn score_features(&self, steps: &StepFeatures) -> Result<f64> {
        let s = self.step_scores(steps)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }

    /// Mean per-step score over agents and steps.
    pub fn score(&self, scenario: &Scenario, map: &PreparedMap) -> Result<f64> {
        self.score_features(&self.featurize(scenario, map)?)
    }
}

/// `-ln sigmoid(r_winner - r_loser)`, stable for large differences.
pub fn pair_loss(r_winner: f64, r_loser: f64) -> f64 {
    softplus(r_loser - r_winner)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Featurized scenarios and `(winner, loser)` index pairs into them.
/// Pairs from one labeled batch share scenarios, so each scenario is
/// featurized and scored once per minibatch.
#[derive(Debug, Clone, Default)]
pub struct RmDataset {
    pub scenarios: Arc<Vec<StepFeatures>>,
    pub pairs: Vec<(usize, usize)>,
}

impl RmDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn push_scenario(&mut self, steps: StepFeatures) -> usize {
        Arc::make_mut(&mut self.scenarios).push(steps);
        self.scenarios.len() - 1
    }

    /// Dataset restricted to the listed pairs; scenarios are shared by index.
    pub fn subset(&self, pair_idx: &[usize]) -> RmDataset {
        RmDataset {
            scenarios: self.scenarios.clone(),
            pairs: pair_idx.iter().map(|&i| self.pairs[i]).collect(),
        }
    }

    /// Every pair with winner and loser exchanged.
    pub fn swapped(&self) -> RmDataset {
        RmDataset {
            scenarios: self.scenarios.clone(),
            pairs: self.pairs.iter().map(|&(w, l)| (l, w)).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Data("empty preference dataset".into()));
        }
        let n = self.scenarios.len();
        if let Some(&(w, l)) = self
            .pairs
            .iter()
            .find(|&&(w, l)| w >= n || l >= n || w == l)
        {
            return Err(Error::Data(format!(
                "invalid pair ({w}, {l}) over {n} scenarios"
            )));
        }
        Ok(())
    }
}

/// Mean pair loss over `pair_idx` and its gradient with respect to the
/// trunk parameters.
pub fn batch_loss(
    rm: &RewardModel,
    data: &RmDataset,
    pair_idx: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let mut used: Vec<usize> = pair_idx
        .iter()
        .flat_map(|&i| [data.pairs[i].0, data.pairs[i].1])
        .collect();
    used.sort_unstable();
    used.dedup();
    let caches = used
        .par_iter()
        .map(|&s| rm.trunk.forward_batch(data.scenarios[s].rows.clone()))
        .collect::<Result<Vec<_>>>()?;
    let slot = |s: usize| used.binary_search(&s).expect("scenario in minibatch");
    let scores: Vec<f64> = caches
        .iter()
        .map(|c| c.output().mean().unwrap_or(0.0))
        .collect();
    let n = pair_idx.len() as f64;
    let mut loss = 0.0;
    // d loss / d score for each used scenario.
    let mut d_score = vec![0.0; used.len()];
    for &i in pair_idx {
        let (w, l) = (slot(data.pairs[i].0), slot(data.pairs[i].1));
        let delta = scores[w] - scores[l];
        loss += pair_loss(scores[w], scores[l]) / n;
        let g = -sigmoid(-delta) / n;
        d_score[w] += g;
        d_score[l] -= g;
    }
    let parts = caches
        .par_iter()
        .zip(&d_score)
        .map(|(cache, &d)| {
            let rows = cache.output().nrows();
            let upstream = Array2::from_elem((rows, 1), d / rows as f64);
            rm.trunk.backward_batch(cache, upstream).map(|(g, _)| g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = vec![0.0; rm.trunk.params().len()];
    for p in parts {
        for (a, b) in grads.iter_mut().zip(p) {
            *a += b;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite reward-model loss {loss}"
        )));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled weight decay; no default beyond zero is implied.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Adam over shuffled minibatches. Returns the model and the mean training
/// loss of each epoch.
pub fn train_rm(
    init: &RewardModel,
    data: &RmDataset,
    cfg: &RmTrainConfig,
) -> Result<(RewardModel, Vec<f64>)> {
    data.check()?;
    let mut rm = init.clone();
    let mut opt = OptimState::new(rm.trunk.params().len(), cfg.lr);
    opt.weight_decay = cfg.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (loss, grads) = batch_loss(&rm, data, chunk)?;
            opt.adam_step(rm.trunk.params_mut(), &grads)?;
            total += loss * chunk.len() as f64;
        }
        curve.push(total / data.len() as f64);
    }
    Ok((rm, curve))
}

/// Fraction of pairs whose winner outscores the loser; ties count one half.
pub fn validate_rm(rm: &RewardModel, data: &RmDataset) -> Result<f64> {
    data.check()?;
    let mut used: Vec<usize> = data.pairs.iter().flat_map(|&(w, l)| [w, l]).collect();
    used.sort_unstable();
    used.dedup();
    let scores = used
        .par_iter()
        .map(|&s| rm.score_features(&data.scenarios[s]))
        .collect::<Result<Vec<_>>>()?;
    let score = |s: usize| scores[used.binary_search(&s).expect("scored")];
    let hits: f64 = data
        .pairs
        .iter()
        .map(|&(w, l)| {
            let (a, b) = (score(w), score(l));
            if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(hits / data.len() as f64)
}
