//! The baseline traffic model: a shared-weight Gaussian action policy with
//! an explicit encoder/decoder split, its closed-loop rollout engine and
//! behavior-cloning pretraining.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::features::{policy_features, FeatureConfig};
use crate::nnet::{Activation, ForwardCache, Mlp, OptimState};
use crate::world::{
    invert_step, step_unicycle, Action, ActionLimits, AgentTrack, PreparedMap, Scenario,
    ScenarioContext, Source, T_HIST,
};
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Decoder outputs are scaled into action units.
const MEAN_SCALE: [f64; 2] = [2.0, 0.2];
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub const POLICY_FORMAT: &str = "trafficrlhf.policy";
pub const POLICY_VERSION: u32 = 1;

/// Diagonal Gaussian over (accel, yaw_rate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDist {
    pub mean: [f64; 2],
    pub log_std: [f64; 2],
    /// Derivative of each log-std with respect to its raw network output.
    log_std_slope: [f64; 2],
}

impl ActionDist {
    fn from_output(out: &[f64]) -> Self {
        // Smooth squash into [LOG_STD_MIN, LOG_STD_MAX]; a hard clamp would
        // leave saturated outputs without gradient.
        let mut log_std = [0.0; 2];
        let mut slope = [0.0; 2];
        for d in 0..2 {
            let s = 1.0 / (1.0 + (-out[2 + d]).exp());
            log_std[d] = LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * s;
            slope[d] = (LOG_STD_MAX - LOG_STD_MIN) * s * (1.0 - s);
        }
        Self {
            mean: [out[0] * MEAN_SCALE[0], out[1] * MEAN_SCALE[1]],
            log_std,
            log_std_slope: slope,
        }
    }

    pub fn std(&self) -> [f64; 2] {
        [self.log_std[0].exp(), self.log_std[1].exp()]
    }

    pub fn log_prob(&self, a: [f64; 2]) -> f64 {
        (0..2)
            .map(|d| {
                let z = (a[d] - self.mean[d]) / self.log_std[d].exp();
                -0.5 * z * z - self.log_std[d] - HALF_LN_2PI
            })
            .sum()
    }

    /// Gradient of `log_prob(a)` with respect to (mean, log_std).
    pub fn log_prob_grad(&self, a: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let mut gm = [0.0; 2];
        let mut gs = [0.0; 2];
        for d in 0..2 {
            let inv_var = (-2.0 * self.log_std[d]).exp();
            let diff = a[d] - self.mean[d];
            gm[d] = diff * inv_var;
            gs[d] = diff * diff * inv_var - 1.0;
        }
        (gm, gs)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let s = self.std();
        [
            self.mean[0] + s[0] * rng.sample::<f64, _>(StandardNormal),
            self.mean[1] + s[1] * rng.sample::<f64, _>(StandardNormal),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub features: FeatureConfig,
    pub limits: ActionLimits,
    pub encoder_hidden: Vec<usize>,
    pub latent: usize,
    pub decoder_hidden: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            limits: ActionLimits::default(),
            encoder_hidden: vec![64],
            latent: 64,
            decoder_hidden: vec![64],
        }
    }
}

/// Intermediate values from a batched forward pass.
pub struct PolicyPass {
    pub encoder: ForwardCache,
    pub decoder: ForwardCache,
    pub dists: Vec<ActionDist>,
}

impl PolicyPass {
    pub fn latent(&self) -> &Array2<f64> {
        self.encoder.output()
    }
}

/// Parameter gradients split along the encoder/decoder boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRecord", into = "PolicyRecord")]
pub struct TrafficPolicy {
    pub features: FeatureConfig,
    pub limits: ActionLimits,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Serialize, Deserialize)]
struct PolicyRecord {
    format: String,
    version: u32,
    features: FeatureConfig,
    limits: ActionLimits,
    encoder: Mlp,
    decoder: Mlp,
}

impl From<TrafficPolicy> for PolicyRecord {
    fn from(p: TrafficPolicy) -> Self {
        PolicyRecord {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            features: p.features,
            limits: p.limits,
            encoder: p.encoder,
            decoder: p.decoder,
        }
    }
}

impl TryFrom<PolicyRecord> for TrafficPolicy {
    type Error = Error;

    fn try_from(r: PolicyRecord) -> Result<Self> {
        if r.format != POLICY_FORMAT || r.version != POLICY_VERSION {
            return Err(Error::Data(format!(
                "unsupported policy checkpoint {:?} v{}",
                r.format, r.version
            )));
        }
        if r.encoder.input_dim() != r.features.policy_dim()
            || r.encoder.output_dim() != r.decoder.input_dim()
            || r.decoder.output_dim() != 4
        {
            return Err(Error::Data(
                "policy checkpoint has inconsistent layer widths".into(),
            ));
        }
        Ok(TrafficPolicy {
            features: r.features,
            limits: r.limits,
            encoder: r.encoder,
            decoder: r.decoder,
        })
    }
}

impl TrafficPolicy {
    pub fn new(cfg: &PolicyConfig, seed: u64) -> Result<Self> {
        let mut enc_w = vec![cfg.features.policy_dim()];
        enc_w.extend(&cfg.encoder_hidden);
        enc_w.push(cfg.latent);
        let mut dec_w = vec![cfg.latent];
        dec_w.extend(&cfg.decoder_hidden);
        dec_w.push(4);
        let enc_act = vec![Activation::Tanh; enc_w.len() - 1];
        let mut dec_act = vec![Activation::Tanh; dec_w.len() - 1];
        *dec_act.last_mut().unwrap() = Activation::Identity;
        Ok(Self {
            features: cfg.features.clone(),
            limits: cfg.limits,
            encoder: Mlp::new(&enc_w, &enc_act, seed)?,
            decoder: Mlp::new(&dec_w, &dec_act, seed.wrapping_add(1))?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn forward_batch(&self, features: Array2<f64>) -> Result<PolicyPass> {
        let encoder = self.encoder.forward_batch(features)?;
        let decoder = self.decoder.forward_batch(encoder.output().clone())?;
        let out = decoder.output();
        let mut dists = Vec::with_capacity(out.nrows());
        for row in out.rows() {
            let d = ActionDist::from_output(row.as_slice().expect("contiguous"));
            if !(d.mean.iter().chain(&d.log_std).all(|v| v.is_finite())) {
                return Err(Error::Model(format!("non-finite policy output {d:?}")));
            }
            dists.push(d);
        }
        Ok(PolicyPass {
            encoder,
            decoder,
            dists,
        })
    }

    pub fn dist(&self, features: &[f64]) -> Result<ActionDist> {
        let x = Array2::from_shape_vec((1, features.len()), features.to_vec()).map_err(|_| {
            Error::Dimension {
                expected: self.encoder.input_dim(),
                got: features.len(),
            }
        })?;
        Ok(self.forward_batch(x)?.dists[0])
    }

    /// Backpropagates per-row gradients with respect to (mean, log_std).
    pub fn backward(
        &self,
        pass: &PolicyPass,
        d_mean: &[[f64; 2]],
        d_log_std: &[[f64; 2]],
    ) -> Result<PolicyGrads> {
        let n = pass.dists.len();
        let mut up = Array2::zeros((n, 4));
        for (r, dist) in pass.dists.iter().enumerate() {
            for d in 0..2 {
                up[[r, d]] = d_mean[r][d] * MEAN_SCALE[d];
                up[[r, 2 + d]] = d_log_std[r][d] * dist.log_std_slope[d];
            }
        }
        let (decoder, d_latent) = self.decoder.backward_batch(&pass.decoder, up)?;
        let (encoder, _) = self.encoder.backward_batch(&pass.encoder, d_latent)?;
        Ok(PolicyGrads { encoder, decoder })
    }

    /// Mean Gaussian negative log-likelihood of `targets` and its gradient.
    pub fn bc_loss(
        &self,
        features: Array2<f64>,
        targets: &[[f64; 2]],
    ) -> Result<(f64, PolicyGrads)> {
        let pass = self.forward_batch(features)?;
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let mut gm = Vec::with_capacity(targets.len());
        let mut gs = Vec::with_capacity(targets.len());
        for (dist, t) in pass.dists.iter().zip(targets) {
            loss -= dist.log_prob(*t);
            let (m, s) = dist.log_prob_grad(*t);
            gm.push([-m[0] / n, -m[1] / n]);
            gs.push([-s[0] / n, -s[1] / n]);
        }
        let grads = self.backward(&pass, &gm, &gs)?;
        Ok((loss / n, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon_s: f64,
    pub replan_hz: f64,
    pub dt: f64,
    pub plan_horizon: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon_s: 10.0,
            replan_hz: 2.0,
            dt: crate::DT,
            plan_horizon: 20,
        }
    }
}

fn exact_ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{what}: {num} / {den} is not a positive integer"
        )));
    }
    Ok(n as usize)
}

impl RolloutConfig {
    /// Steps executed between re-plans.
    pub fn exec_steps(&self) -> Result<usize> {
        exact_ratio(1.0 / self.replan_hz, self.dt, "replan period / dt")
    }

    pub fn cycles(&self) -> Result<usize> {
        exact_ratio(
            self.horizon_s,
            1.0 / self.replan_hz,
            "horizon / replan period",
        )
    }

    pub fn total_steps(&self) -> Result<usize> {
        Ok(self.exec_steps()? * self.cycles()?)
    }

    pub fn validate(&self) -> Result<()> {
        let exec = self.exec_steps()?;
        self.cycles()?;
        if self.plan_horizon < exec {
            return Err(Error::Config(format!(
                "plan_horizon {} is shorter than the {exec} executed steps",
                self.plan_horizon
            )));
        }
        Ok(())
    }
}

/// One sampled action with what PPO needs to re-evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub agent: usize,
    /// Index of the state the action was taken from.
    pub t: usize,
    pub features: Vec<f64>,
    /// Pre-clip Gaussian sample.
    pub raw: [f64; 2],
    pub log_prob: f64,
}

/// Per-agent planned actions (`actions[agent][step]`) and the records of
/// every sampled step.
#[derive(Debug, Clone)]
pub struct Plan {
    pub actions: Vec<Vec<Action>>,
    pub records: Vec<StepRecord>,
}

/// Extends `tracks` (all ending at the same current state) by `horizon`
/// autoregressively sampled steps.
fn sample_into(
    policy: &TrafficPolicy,
    map: &PreparedMap,
    tracks: &mut [AgentTrack],
    horizon: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Plan> {
    let n = tracks.len();
    let dim = policy.features.policy_dim();
    let mut actions = vec![Vec::with_capacity(horizon); n];
    let mut records = Vec::with_capacity(horizon * n);
    for _ in 0..horizon {
        let t = tracks[0].states.len() - 1;
        let mut feats = Array2::zeros((n, dim));
        for i in 0..n {
            policy_features(
                map,
                &policy.features,
                tracks,
                i,
                t,
                feats.row_mut(i).into_slice().expect("contiguous"),
            );
        }
        let pass = policy.forward_batch(feats.clone())?;
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let dist = pass.dists[i];
            let raw = dist.sample(rng);
            let action = policy.limits.clip(Action::new(raw[0], raw[1]));
            next.push(step_unicycle(tracks[i].states[t], action, dt)?);
            actions[i].push(action);
            records.push(StepRecord {
                agent: i,
                t,
                features: feats.row(i).to_vec(),
                raw,
                log_prob: dist.log_prob(raw),
            });
        }
        for (track, s) in tracks.iter_mut().zip(next) {
            track.states.push(s);
        }
    }
    Ok(Plan { actions, records })
}

/// Samples a `plan_horizon`-step joint plan from the context's current state.
pub fn sample_plan(
    policy: &TrafficPolicy,
    map: &PreparedMap,
    context: &ScenarioContext,
    config: &RolloutConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Plan> {
    let mut tracks = context.history.clone();
    sample_into(
        policy,
        map,
        &mut tracks,
        config.plan_horizon,
        config.dt,
        rng,
    )
}

/// A closed-loop episode together with the records of executed steps.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub scenario: Scenario,
    pub records: Vec<StepRecord>,
    pub plan_cycles: usize,
}

/// Plan, execute the first re-plan period, re-plan; repeated over the
/// horizon. The returned scenario starts with the context's history.
pub fn rollout_closed_loop(
    policy: &TrafficPolicy,
    map: &PreparedMap,
    context: &ScenarioContext,
    config: &RolloutConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    config.validate()?;
    let exec = config.exec_steps()?;
    let cycles = config.cycles()?;
    let mut tracks = context.history.clone();
    for t in &mut tracks {
        t.states.reserve(exec * cycles + config.plan_horizon);
    }
    let mut records = Vec::with_capacity(exec * cycles * tracks.len());
    for _ in 0..cycles {
        let start = tracks[0].states.len();
        let mut plan = sample_into(
            policy,
            map,
            &mut tracks,
            config.plan_horizon,
            config.dt,
            rng,
        )?;
        // Executing the first `exec` planned actions reproduces the planned states.
        for t in &mut tracks {
            t.states.truncate(start + exec);
        }
        plan.records.retain(|r| r.t < start - 1 + exec);
        records.extend(plan.records);
    }
    Ok(Rollout {
        scenario: Scenario {
            scene_id: context.scene_id.clone(),
            sample_id: "rollout".into(),
            dt: config.dt,
            source: Source::Model,
            agents: tracks,
        },
        records,
        plan_cycles: cycles,
    })
}

/// Behavior-cloning transitions: features at each state and the action that
/// produced the next state.
#[derive(Debug, Clone)]
pub struct Demonstrations {
    pub features: Array2<f64>,
    pub targets: Vec<[f64; 2]>,
}

impl Demonstrations {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn from_scenarios(
        features: &FeatureConfig,
        demos: &[(&PreparedMap, &Scenario)],
    ) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::Data("no demonstrations".into()));
        }
        let dim = features.policy_dim();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (map, sc) in demos {
            if sc.len() < 2 {
                return Err(Error::Data(format!(
                    "demonstration {}/{} has fewer than 2 states",
                    sc.scene_id, sc.sample_id
                )));
            }
            // Short logs are front-padded with their first state.
            let pad = (T_HIST + 1).saturating_sub(sc.len() - 1);
            let tracks: Vec<AgentTrack> = sc
                .agents
                .iter()
                .map(|a| {
                    let mut states = vec![a.states[0]; pad];
                    states.extend(&a.states);
                    AgentTrack {
                        states,
                        ..a.clone()
                    }
                })
                .collect();
            let len = tracks[0].states.len();
            let mut buf = vec![0.0; dim];
            for t in T_HIST.max(pad)..len - 1 {
                for i in 0..tracks.len() {
                    policy_features(map, features, &tracks, i, t, &mut buf);
                    rows.extend_from_slice(&buf);
                    let a = invert_step(&tracks[i].states[t], &tracks[i].states[t + 1], sc.dt);
                    targets.push([a.accel, a.yaw_rate]);
                }
            }
        }
        let features = Array2::from_shape_vec((targets.len(), dim), rows).expect("row-major demos");
        Ok(Self { features, targets })
    }

    pub fn subset(&self, idx: &[usize]) -> (Array2<f64>, Vec<[f64; 2]>) {
        let dim = self.features.ncols();
        let mut x = Array2::zeros((idx.len(), dim));
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).assign(&self.features.row(i));
            y.push(self.targets[i]);
        }
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Minimizes the mean Gaussian NLL of demonstrated actions with a cosine
/// learning-rate schedule. Returns the trained policy and the per-epoch
/// mean training loss.
pub fn pretrain_bc(
    policy: &TrafficPolicy,
    demos: &Demonstrations,
    cfg: &BcConfig,
) -> Result<(TrafficPolicy, Vec<f64>)> {
    if demos.is_empty() {
        return Err(Error::Data("no demonstration transitions".into()));
    }
    let mut policy = policy.clone();
    let mut enc_opt = OptimState::new(policy.encoder.params().len(), cfg.lr);
    let mut dec_opt = OptimState::new(policy.decoder.params().len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // Cosine decay: late epochs settle instead of chasing outlier batches.
        let lr =
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        enc_opt.lr = lr;
        dec_opt.lr = lr;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = demos.subset(chunk);
            let (loss, g) = policy.bc_loss(x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite BC loss {loss}")));
            }
            total += loss * chunk.len() as f64;
            enc_opt.adam_step(policy.encoder.params_mut(), &g.encoder)?;
            dec_opt.adam_step(policy.decoder.params_mut(), &g.decoder)?;
        }
        curve.push(total / demos.len() as f64);
    }
    Ok((policy, curve))
}
