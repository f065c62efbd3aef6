//! PPO fine-tuning of the traffic policy against the mixed objective: a
//! behavior-cloning term on ground-truth demonstrations plus `alpha` times
//! the learned reward, assigned per executed re-plan segment.

use std::ops::Range;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{failure_rate, realism_deviation, EvalReport, HistogramSpec};
use crate::nnet::{Activation, Mlp, OptimState};
use crate::policy::{
    rollout_closed_loop, Demonstrations, PolicyGrads, Rollout, RolloutConfig, TrafficPolicy,
};
use crate::reward::{future_window, RewardModel};
use crate::scenegen::Scene;
use crate::world::{MapModel, PreparedMap, Scenario, T_HIST};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    None,
    Encoder,
    Decoder,
}

impl FreezeMode {
    pub const ALL: [FreezeMode; 3] = [FreezeMode::Encoder, FreezeMode::Decoder, FreezeMode::None];

    pub fn name(&self) -> &'static str {
        match self {
            FreezeMode::None => "none",
            FreezeMode::Encoder => "encoder",
            FreezeMode::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(FreezeMode::None),
            "encoder" => Ok(FreezeMode::Encoder),
            "decoder" => Ok(FreezeMode::Decoder),
            other => Err(Error::Config(format!("unknown freeze mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub clip_ratio: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub freeze: FreezeMode,
    pub bc_weight: f64,
    pub lr: f64,
    pub value_lr: f64,
    /// Optimizer passes over each epoch's rollouts.
    pub ppo_iters: usize,
    /// Training scenes drawn per epoch.
    pub scenes_per_epoch: usize,
    pub rollouts_per_scene: usize,
    /// Demonstration transitions per BC minibatch.
    pub bc_batch: usize,
    pub rollout: RolloutConfig,
    pub histograms: HistogramSpec,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epochs: 70,
            clip_ratio: 0.2,
            gae_lambda: 0.95,
            discount: 0.99,
            freeze: FreezeMode::None,
            bc_weight: 1.0,
            lr: 1e-4,
            value_lr: 1e-3,
            ppo_iters: 4,
            scenes_per_epoch: 8,
            rollouts_per_scene: 2,
            bc_batch: 256,
            rollout: RolloutConfig::default(),
            histograms: HistogramSpec::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.rollout.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if !((0.0..=1.0).contains(&self.gae_lambda) && (0.0..=1.0).contains(&self.discount)) {
            return bad("gae_lambda and discount must lie in [0, 1]");
        }
        if !(self.bc_weight >= 0.0 && self.lr > 0.0 && self.value_lr > 0.0) {
            return bad("bc_weight must be non-negative and learning rates positive");
        }
        if self.scenes_per_epoch == 0 || self.rollouts_per_scene == 0 || self.ppo_iters == 0 {
            return bad("scenes_per_epoch, rollouts_per_scene and ppo_iters must be positive");
        }
        Ok(())
    }
}

/// State-value estimate from the policy latent. The output layer starts at
/// zero so initial advantages are the rewards themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    pub mlp: Mlp,
}

impl ValueHead {
    pub fn new(latent: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut mlp = Mlp::new(
            &[latent, hidden, 1],
            &[Activation::Tanh, Activation::Identity],
            seed,
        )?;
        let last = mlp.layer_offset(1);
        mlp.params_mut()[last..].fill(0.0);
        Ok(Self { mlp })
    }

    pub fn values(&self, latent: Array2<f64>) -> Result<Vec<f64>> {
        let out = self.mlp.forward_batch(latent)?.output().column(0).to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite value estimate".into()));
        }
        Ok(out)
    }
}

/// RM step scores of each agent's executed transitions, `[agent][step]`.
pub fn step_rewards(
    rm: &RewardModel,
    map: &PreparedMap,
    scenario: &Scenario,
) -> Result<Vec<Vec<f64>>> {
    let steps = rm.featurize(&future_window(scenario), map)?;
    let flat = rm.step_scores(&steps)?;
    Ok(flat.chunks(steps.n_steps).map(|c| c.to_vec()).collect())
}

/// `alpha` times the mean step score of each executed segment,
/// `[agent][segment]`. Segment `c` covers steps `c*exec .. (c+1)*exec`.
pub fn segment_rewards(step_scores: &[Vec<f64>], exec: usize, alpha: f64) -> Vec<Vec<f64>> {
    step_scores
        .iter()
        .map(|agent| {
            agent
                .chunks(exec)
                .map(|c| alpha * c.iter().sum::<f64>() / c.len() as f64)
                .collect()
        })
        .collect()
}

/// Scene-level segment rewards: the per-agent segment rewards averaged over
/// agents. Their mean equals `alpha * score(future_window(scenario))`.
pub fn episode_reward(
    rm: &RewardModel,
    map: &PreparedMap,
    scenario: &Scenario,
    alpha: f64,
    exec: usize,
) -> Result<Vec<f64>> {
    let per_agent = segment_rewards(&step_rewards(rm, map, scenario)?, exec, alpha);
    let n = per_agent.len() as f64;
    let segments = per_agent[0].len();
    Ok((0..segments)
        .map(|c| per_agent.iter().map(|a| a[c]).sum::<f64>() / n)
        .collect())
}

/// Generalized advantage estimates and returns for one trajectory; the value
/// after the last segment is zero.
pub fn gae(rewards: &[f64], values: &[f64], discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for k in (0..n).rev() {
        let next = if k + 1 < n { values[k + 1] } else { 0.0 };
        let delta = rewards[k] + discount * next - values[k];
        running = delta + discount * lambda * running;
        adv[k] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Flattened PPO training data. Each segment is one agent's executed steps
/// of one re-plan cycle and acts as a single decision with the summed log
/// probability of its steps.
#[derive(Debug, Clone, Default)]
pub struct PpoBatch {
    pub features: Vec<f64>,
    pub dim: usize,
    pub raw: Vec<[f64; 2]>,
    pub segments: Vec<Range<usize>>,
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl PpoBatch {
    pub fn n_rows(&self) -> usize {
        self.raw.len()
    }

    pub fn feature_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.n_rows(), self.dim), self.features.clone())
            .expect("row-major batch")
    }

    /// Features of each segment's first step.
    pub fn segment_heads(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.segments.len(), self.dim));
        for (i, r) in self.segments.iter().enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(
                &self.features[r.start * self.dim..(r.start + 1) * self.dim],
            ));
        }
        x
    }

    /// Rescales advantages to zero mean and unit variance. The value head
    /// starts at zero, so early advantages are raw returns that would all
    /// share one sign, and their scale follows the reward model's.
    pub fn normalize_advantages(&mut self) {
        if self.advantages.is_empty() {
            return;
        }
        let n = self.advantages.len() as f64;
        let mean = self.advantages.iter().sum::<f64>() / n;
        let std = (self
            .advantages
            .iter()
            .map(|a| (a - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        for a in &mut self.advantages {
            *a = (*a - mean) * scale;
        }
    }

    fn append(&mut self, other: PpoBatch) {
        let offset = self.raw.len();
        self.dim = other.dim;
        self.features.extend(other.features);
        self.raw.extend(other.raw);
        self.segments.extend(
            other
                .segments
                .into_iter()
                .map(|r| r.start + offset..r.end + offset),
        );
        self.old_log_prob.extend(other.old_log_prob);
        self.advantages.extend(other.advantages);
        self.returns.extend(other.returns);
        self.rewards.extend(other.rewards);
    }
}

/// Groups one rollout's records into per-agent segments, scores them and
/// computes advantages with the current value head.
pub fn build_batch(
    policy: &TrafficPolicy,
    value: &ValueHead,
    rm: &RewardModel,
    map: &PreparedMap,
    rollout: &Rollout,
    cfg: &FinetuneConfig,
) -> Result<PpoBatch> {
    let exec = cfg.rollout.exec_steps()?;
    let cycles = rollout.plan_cycles;
    let n_agents = rollout.scenario.n_agents();
    let rewards = segment_rewards(&step_rewards(rm, map, &rollout.scenario)?, exec, cfg.alpha);
    let dim = policy.features.policy_dim();
    let mut by_agent: Vec<Vec<&crate::policy::StepRecord>> = vec![Vec::new(); n_agents];
    for r in &rollout.records {
        by_agent[r.agent].push(r);
    }
    let mut batch = PpoBatch {
        dim,
        ..Default::default()
    };
    for (agent, recs) in by_agent.iter_mut().enumerate() {
        recs.sort_by_key(|r| r.t);
        if recs.len() != exec * cycles || rewards[agent].len() != cycles {
            return Err(Error::InvalidState(format!(
                "agent {agent}: {} executed records for {cycles} cycles of {exec}",
                recs.len()
            )));
        }
        for (c, seg) in recs.chunks(exec).enumerate() {
            debug_assert_eq!(seg[0].t, T_HIST + c * exec);
            let start = batch.raw.len();
            let mut lp = 0.0;
            for r in seg {
                batch.features.extend_from_slice(&r.features);
                batch.raw.push(r.raw);
                lp += r.log_prob;
            }
            batch.segments.push(start..batch.raw.len());
            batch.old_log_prob.push(lp);
            batch.rewards.push(rewards[agent][c]);
        }
    }
    let latent = policy
        .forward_batch(batch.segment_heads())?
        .encoder
        .output()
        .clone();
    let values = value.values(latent)?;
    for agent in 0..n_agents {
        let r = agent * cycles..(agent + 1) * cycles;
        let (adv, ret) = gae(
            &batch.rewards[r.clone()],
            &values[r],
            cfg.discount,
            cfg.gae_lambda,
        );
        batch.advantages.extend(adv);
        batch.returns.extend(ret);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStats {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss `-mean(min(rho * A, clip(rho) * A))` over segments
/// and its gradient. Segments whose clipped branch is active contribute no
/// gradient.
pub fn surrogate(
    policy: &TrafficPolicy,
    batch: &PpoBatch,
    clip: f64,
) -> Result<(SurrogateStats, PolicyGrads)> {
    let pass = policy.forward_batch(batch.feature_matrix())?;
    let n = batch.segments.len() as f64;
    let mut d_mean = vec![[0.0; 2]; batch.n_rows()];
    let mut d_log_std = vec![[0.0; 2]; batch.n_rows()];
    let mut stats = SurrogateStats::default();
    for (i, rows) in batch.segments.iter().enumerate() {
        let lp: f64 = rows
            .clone()
            .map(|r| pass.dists[r].log_prob(batch.raw[r]))
            .sum();
        let ratio = (lp - batch.old_log_prob[i]).exp();
        let a = batch.advantages[i];
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
        stats.loss -= (ratio * a).min(clipped * a) / n;
        stats.mean_ratio += ratio / n;
        let active = (a > 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
        if active {
            stats.clip_fraction += 1.0 / n;
            continue;
        }
        // d(-ratio * A / n) / d logp = -ratio * A / n
        let g = -ratio * a / n;
        for r in rows.clone() {
            let (gm, gs) = pass.dists[r].log_prob_grad(batch.raw[r]);
            d_mean[r] = [g * gm[0], g * gm[1]];
            d_log_std[r] = [g * gs[0], g * gs[1]];
        }
    }
    let grads = policy.backward(&pass, &d_mean, &d_log_std)?;
    Ok((stats, grads))
}

/// Mean squared error of the value head on returns and its gradient.
pub fn value_loss(
    value: &ValueHead,
    latent: Array2<f64>,
    returns: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let cache = value.mlp.forward_batch(latent)?;
    let n = returns.len() as f64;
    let mut up = Array2::zeros((returns.len(), 1));
    let mut loss = 0.0;
    for (i, &r) in returns.iter().enumerate() {
        let e = cache.output()[[i, 0]] - r;
        loss += e * e / n;
        up[[i, 0]] = 2.0 * e / n;
    }
    let (g, _) = value.mlp.backward_batch(&cache, up)?;
    Ok((loss, g))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub bc_loss: f64,
    pub surrogate: f64,
    pub mean_segment_reward: f64,
}

/// Policy, value head and their optimizer states.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: TrafficPolicy,
    pub value: ValueHead,
    enc_opt: OptimState,
    dec_opt: OptimState,
    value_opt: OptimState,
}

impl Learner {
    pub fn new(policy: TrafficPolicy, cfg: &FinetuneConfig) -> Result<Self> {
        let value = ValueHead::new(policy.latent_dim(), 64, cfg.seed ^ 0x5eed)?;
        Ok(Self {
            enc_opt: OptimState::new(policy.encoder.params().len(), cfg.lr),
            dec_opt: OptimState::new(policy.decoder.params().len(), cfg.lr),
            value_opt: OptimState::new(value.mlp.params().len(), cfg.value_lr),
            policy,
            value,
        })
    }

    /// `cfg.ppo_iters` passes of surrogate + BC updates and value
    /// regression. Frozen blocks are never handed to their optimizer.
    pub fn ppo_update(
        &mut self,
        batch: &PpoBatch,
        demos: Option<&Demonstrations>,
        cfg: &FinetuneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<PpoDiagnostics> {
        let mut diag = PpoDiagnostics {
            mean_segment_reward: batch.rewards.iter().sum::<f64>()
                / batch.rewards.len().max(1) as f64,
            ..Default::default()
        };
        let heads = batch.segment_heads();
        for _ in 0..cfg.ppo_iters {
            let (stats, mut grads) = surrogate(&self.policy, batch, cfg.clip_ratio)?;
            diag.mean_ratio = stats.mean_ratio;
            diag.clip_fraction = stats.clip_fraction;
            diag.surrogate = stats.loss;
            if let (Some(demos), true) = (demos, cfg.bc_weight > 0.0) {
                let k = cfg.bc_batch.min(demos.len()).max(1);
                let idx = sample(rng, demos.len(), k).into_vec();
                let (x, y) = demos.subset(&idx);
                let (bc, g) = self.policy.bc_loss(x, &y)?;
                diag.bc_loss = bc;
                for (a, b) in grads.encoder.iter_mut().zip(&g.encoder) {
                    *a += cfg.bc_weight * b;
                }
                for (a, b) in grads.decoder.iter_mut().zip(&g.decoder) {
                    *a += cfg.bc_weight * b;
                }
            }
            let total = diag.surrogate + cfg.bc_weight * diag.bc_loss;
            if !total.is_finite() {
                return Err(Error::Training(format!("non-finite PPO loss: {diag:?}")));
            }
            let latent = self
                .policy
                .forward_batch(heads.clone())?
                .encoder
                .output()
                .clone();
            let (vl, vg) = value_loss(&self.value, latent, &batch.returns)?;
            diag.value_loss = vl;
            if cfg.freeze != FreezeMode::Encoder {
                self.enc_opt
                    .adam_step(self.policy.encoder.params_mut(), &grads.encoder)?;
            }
            if cfg.freeze != FreezeMode::Decoder {
                self.dec_opt
                    .adam_step(self.policy.decoder.params_mut(), &grads.decoder)?;
            }
            self.value_opt.adam_step(self.value.mlp.params_mut(), &vg)?;
        }
        Ok(diag)
    }
}

/// A scene with its map prepared for projection queries.
pub struct PreparedScene<'a> {
    pub scene: &'a Scene,
    pub map: PreparedMap,
}

pub fn prepare_scenes(scenes: &[Scene]) -> Result<Vec<PreparedScene<'_>>> {
    scenes
        .iter()
        .map(|scene| {
            Ok(PreparedScene {
                scene,
                map: PreparedMap::new(&scene.map)?,
            })
        })
        .collect()
}

fn scene_rng(seed: u64, round: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ round.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

/// Rolls out `samples` futures per scene (sample `j` of scene `i` on stream
/// `i * samples + j` of `seed`).
pub fn rollout_scenes(
    policy: &TrafficPolicy,
    scenes: &[PreparedScene<'_>],
    rollout: &RolloutConfig,
    samples: usize,
    seed: u64,
    round: u64,
) -> Result<Vec<(usize, Rollout)>> {
    (0..scenes.len() * samples)
        .into_par_iter()
        .map(|k| {
            let i = k / samples;
            let mut rng = scene_rng(seed, round, k as u64);
            let r = rollout_closed_loop(
                policy,
                &scenes[i].map,
                &scenes[i].scene.context,
                rollout,
                &mut rng,
            )?;
            Ok((i, r))
        })
        .collect()
}

/// Failure rate, realism deviation and reward cost of the policy's futures
/// on `scenes`, measured against their ground truth.
pub fn evaluate_policy(
    policy: &TrafficPolicy,
    rm: &RewardModel,
    scenes: &[PreparedScene<'_>],
    rollout: &RolloutConfig,
    histograms: &HistogramSpec,
    seed: u64,
) -> Result<EvalReport> {
    let rollouts = rollout_scenes(policy, scenes, rollout, 1, seed, 0)?;
    evaluate_rollouts(rm, scenes, &rollouts, histograms)
}

pub fn evaluate_rollouts(
    rm: &RewardModel,
    scenes: &[PreparedScene<'_>],
    rollouts: &[(usize, Rollout)],
    histograms: &HistogramSpec,
) -> Result<EvalReport> {
    let maps: Vec<(&Scenario, &MapModel)> = rollouts
        .iter()
        .map(|(i, r)| (&r.scenario, scenes[*i].scene.map.as_ref()))
        .collect();
    let fail = failure_rate(&maps)?;
    let generated: Vec<Scenario> = rollouts
        .iter()
        .map(|(_, r)| future_window(&r.scenario))
        .collect();
    let truth: Vec<Scenario> = scenes
        .iter()
        .map(|s| future_window(&s.scene.ground_truth))
        .collect();
    let realism = realism_deviation(&generated, &truth, histograms)?;
    let scored: Vec<(&Scenario, &PreparedMap)> = generated
        .iter()
        .zip(rollouts)
        .map(|(g, (i, _))| (g, &scenes[*i].map))
        .collect();
    let reward_cost = crate::metrics::reward_cost(rm, &scored)?;
    Ok(EvalReport {
        fail,
        real: realism.real,
        reward_cost,
        realism,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fail: f64,
    pub real: f64,
    pub reward_cost: f64,
    /// Absent for the evaluation before the first update.
    pub diagnostics: Option<PpoDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub policy: TrafficPolicy,
    pub value: ValueHead,
    /// Probe metrics before training (epoch 0) and after every epoch.
    pub history: Vec<EpochRecord>,
}

/// Seed of the fixed probe rollouts, so that epochs are compared on the
/// same noise.
const PROBE_SEED: u64 = 0x9e0b;

/// Each epoch: roll out the current policy on a draw of training scenes,
/// score segments with the reward model, run the PPO update, then measure
/// the probe set. `on_epoch` sees every record with the updated policy.
pub fn finetune_loop(
    policy: &TrafficPolicy,
    rm: &RewardModel,
    train: &[Scene],
    probe: &[Scene],
    demos: &Demonstrations,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrafficPolicy) -> Result<()>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || probe.is_empty() {
        return Err(Error::Data(
            "fine-tuning needs training and probe scenes".into(),
        ));
    }
    let train = prepare_scenes(train)?;
    let probe = prepare_scenes(probe)?;
    let mut learner = Learner::new(policy.clone(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe_eval = |p: &TrafficPolicy| {
        evaluate_policy(
            p,
            rm,
            &probe,
            &cfg.rollout,
            &cfg.histograms,
            cfg.seed ^ PROBE_SEED,
        )
    };
    let first = probe_eval(policy)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        fail: first.fail,
        real: first.real,
        reward_cost: first.reward_cost,
        diagnostics: None,
    }];
    on_epoch(&history[0], policy)?;
    for epoch in 1..=cfg.epochs {
        let k = cfg.scenes_per_epoch.min(train.len());
        let mut picked = sample(&mut rng, train.len(), k).into_vec();
        picked.sort_unstable();
        let chosen: Vec<PreparedScene<'_>> = picked
            .iter()
            .map(|&i| PreparedScene {
                scene: train[i].scene,
                map: train[i].map.clone(),
            })
            .collect();
        let rollouts = rollout_scenes(
            &learner.policy,
            &chosen,
            &cfg.rollout,
            cfg.rollouts_per_scene,
            cfg.seed,
            epoch as u64,
        )?;
        let parts = rollouts
            .par_iter()
            .map(|(i, r)| build_batch(&learner.policy, &learner.value, rm, &chosen[*i].map, r, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut batch = PpoBatch::default();
        for p in parts {
            batch.append(p);
        }
        batch.normalize_advantages();
        let diag = learner.ppo_update(&batch, Some(demos), cfg, &mut rng)?;
        let report = probe_eval(&learner.policy)?;
        let record = EpochRecord {
            epoch,
            fail: report.fail,
            real: report.real,
            reward_cost: report.reward_cost,
            diagnostics: Some(diag),
        };
        on_epoch(&record, &learner.policy)?;
        history.push(record);
    }
    Ok(FinetuneOutcome {
        policy: learner.policy,
        value: learner.value,
        history,
    })
}
