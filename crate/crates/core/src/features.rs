//! Ego-centric feature vectors shared by the policy and the reward model.
//!
//! Both families start from the same ingredients: lane-relative pose from
//! the nearest centerline, lookahead geometry, and the `k_neighbors` closest
//! agents in the ego frame ordered by distance. The policy adds history
//! deltas; the reward model scores single transitions.

use serde::{Deserialize, Serialize};

use crate::world::{normalize_angle, AgentTrack, Obb, PreparedMap, ScenarioContext, T_HIST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub k_neighbors: usize,
    pub neighbor_radius: f64,
    /// Arc-length offsets ahead of the ego projection used for lookahead
    /// curvature and target points.
    pub lookaheads: Vec<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 4,
            neighbor_radius: 40.0,
            lookaheads: vec![10.0, 25.0],
        }
    }
}

const NEIGHBOR_WIDTH: usize = 6;
const SPEED_SCALE: f64 = 10.0;
const ACCEL_SCALE: f64 = 3.0;
const YAW_RATE_SCALE: f64 = 0.5;
const CURVATURE_SCALE: f64 = 50.0;
const CURVATURE_SPAN: f64 = 4.0;
const JERK_SCALE: f64 = 10.0;
const STEP_FIXED: usize = 13;

/// States consumed by one reward-model step: the transition `t - 1 -> t`
/// and the one before it, for jerk.
pub const STEP_WINDOW: usize = 3;

/// Step-feature column of the absolute jerk.
pub const STEP_ABS_JERK: usize = 6;
/// Step-feature column of the off-road flag.
pub const STEP_OFFROAD: usize = 10;
/// Step-feature column of the contact flag.
pub const STEP_COLLISION: usize = 11;

impl FeatureConfig {
    pub fn policy_dim(&self) -> usize {
        4 + 2 * self.lookaheads.len() + NEIGHBOR_WIDTH * self.k_neighbors + 2 * T_HIST
    }

    pub fn step_dim(&self) -> usize {
        STEP_FIXED + self.lookaheads.len() + NEIGHBOR_WIDTH * self.k_neighbors + 1
    }

    /// Index of the lateral-offset entry in policy features.
    pub const POLICY_LATERAL: usize = 2;
    /// Index of the heading-error entry in policy features.
    pub const POLICY_HEADING: usize = 3;

    pub fn policy_neighbor_offset(&self) -> usize {
        4 + 2 * self.lookaheads.len()
    }
}

/// Lane-relative pose, lookahead geometry. Returns the number of entries written.
fn lane_block(
    map: &PreparedMap,
    cfg: &FeatureConfig,
    tracks: &[AgentTrack],
    ego: usize,
    t: usize,
    out: &mut [f64],
    targets: bool,
) -> usize {
    let s = tracks[ego].states[t];
    let proj = map.project(s.position());
    out[0] = proj.lateral;
    out[1] = normalize_angle(s.theta - proj.heading);
    let mut k = 2;
    let (sin, cos) = s.theta.sin_cos();
    for &ahead in &cfg.lookaheads {
        out[k] = map.curvature_at(proj.lane, proj.s + ahead, CURVATURE_SPAN) * CURVATURE_SCALE;
        k += 1;
        if targets {
            let (p, _) = map.point_at(proj.lane, proj.s + ahead);
            let (dx, dy) = (p.x - s.x, p.y - s.y);
            out[k] = (-sin * dx + cos * dy) / 5.0;
            k += 1;
        }
    }
    k
}

/// Nearest `k_neighbors` agents in the ego frame, zero-padded. Returns the
/// center distance to the closest neighbor (or the radius if none).
fn neighbor_block(
    cfg: &FeatureConfig,
    tracks: &[AgentTrack],
    ego: usize,
    t: usize,
    out: &mut [f64],
) -> f64 {
    let e = tracks[ego].states[t];
    let (sin, cos) = e.theta.sin_cos();
    let (evx, evy) = (e.v * cos, e.v * sin);
    let mut cands: Vec<(f64, [f64; NEIGHBOR_WIDTH])> = tracks
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != ego)
        .filter_map(|(_, tr)| {
            let o = tr.states[t];
            let (dx, dy) = (o.x - e.x, o.y - e.y);
            let dist = dx.hypot(dy);
            if dist > cfg.neighbor_radius {
                return None;
            }
            let (osin, ocos) = o.theta.sin_cos();
            let (dvx, dvy) = (o.v * ocos - evx, o.v * osin - evy);
            Some((
                dist,
                [
                    (cos * dx + sin * dy) / 20.0,
                    (-sin * dx + cos * dy) / 20.0,
                    (cos * dvx + sin * dvy) / SPEED_SCALE,
                    (-sin * dvx + cos * dvy) / SPEED_SCALE,
                    normalize_angle(o.theta - e.theta),
                    1.0,
                ],
            ))
        })
        .collect();
    // Distance first, then relative coordinates, so that agent order never matters.
    cands.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1[0].total_cmp(&b.1[0]))
            .then_with(|| a.1[1].total_cmp(&b.1[1]))
    });
    out[..cfg.k_neighbors * NEIGHBOR_WIDTH].fill(0.0);
    for (slot, (_, f)) in cands.iter().take(cfg.k_neighbors).enumerate() {
        out[slot * NEIGHBOR_WIDTH..(slot + 1) * NEIGHBOR_WIDTH].copy_from_slice(f);
    }
    cands.first().map_or(cfg.neighbor_radius, |c| c.0)
}

/// Policy input for agent `ego` at state index `t` (needs `t >= T_HIST`).
///
/// Layout: speed, headroom to the speed limit, lateral offset (m, left
/// positive), heading error (rad), per-lookahead curvature and ego-frame
/// target offset, neighbor slots, then `T_HIST` (accel, yaw-rate) deltas,
/// most recent first.
pub fn policy_features(
    map: &PreparedMap,
    cfg: &FeatureConfig,
    tracks: &[AgentTrack],
    ego: usize,
    t: usize,
    out: &mut [f64],
) {
    debug_assert!(t >= T_HIST);
    debug_assert_eq!(out.len(), cfg.policy_dim());
    let states = &tracks[ego].states;
    let s = states[t];
    out[0] = s.v / SPEED_SCALE;
    out[1] = (map.speed_limit - s.v) / SPEED_SCALE;
    let k = 2 + lane_block(map, cfg, tracks, ego, t, &mut out[2..], true);
    neighbor_block(cfg, tracks, ego, t, &mut out[k..]);
    let mut k = k + NEIGHBOR_WIDTH * cfg.k_neighbors;
    for lag in 0..T_HIST {
        let (a, b) = (states[t - lag - 1], states[t - lag]);
        // dt is folded into the scale; deltas are per 0.1 s step.
        out[k] = (b.v - a.v) / crate::DT / ACCEL_SCALE;
        out[k + 1] = normalize_angle(b.theta - a.theta) / crate::DT / YAW_RATE_SCALE;
        k += 2;
    }
}

/// Policy features of one agent at the last state of a context.
pub fn featurize(
    map: &PreparedMap,
    cfg: &FeatureConfig,
    context: &ScenarioContext,
    agent: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cfg.policy_dim()];
    policy_features(map, cfg, &context.history, agent, T_HIST, &mut out);
    out
}

/// Reward-model input for agent `ego` at state `t` (needs `t >= 2`).
///
/// Depends only on states `t - 2 ..= t`, so splitting a scenario into
/// windows that overlap by two states leaves every step's features unchanged.
pub fn step_features(
    map: &PreparedMap,
    cfg: &FeatureConfig,
    tracks: &[AgentTrack],
    ego: usize,
    t: usize,
    dt: f64,
    out: &mut [f64],
) {
    debug_assert!(t >= STEP_WINDOW - 1);
    debug_assert_eq!(out.len(), cfg.step_dim());
    let track = &tracks[ego];
    let (pre, prev, cur) = (track.states[t - 2], track.states[t - 1], track.states[t]);
    let accel = (cur.v - prev.v) / dt;
    let jerk = (accel - (prev.v - pre.v) / dt) / dt;
    let yaw_rate = normalize_angle(cur.theta - prev.theta) / dt;
    out[0] = cur.v / SPEED_SCALE;
    out[1] = accel / ACCEL_SCALE;
    out[2] = accel.abs() / ACCEL_SCALE;
    out[3] = yaw_rate / YAW_RATE_SCALE;
    out[4] = prev.v * yaw_rate / ACCEL_SCALE;
    out[5] = jerk / JERK_SCALE;
    out[STEP_ABS_JERK] = jerk.abs() / JERK_SCALE;
    let mut lane = vec![0.0; 2 + cfg.lookaheads.len()];
    lane_block(map, cfg, tracks, ego, t, &mut lane, false);
    let proj = map.project(cur.position());
    out[7] = lane[0];
    out[8] = lane[1];
    out[9] = proj.distance - proj.half_width;
    out[STEP_OFFROAD] = if proj.distance > proj.half_width {
        1.0
    } else {
        0.0
    };
    let ego_box = Obb::new(&cur, &track.shape);
    let hit = tracks
        .iter()
        .enumerate()
        .any(|(j, o)| j != ego && ego_box.overlaps(&Obb::new(&o.states[t], &o.shape)));
    out[STEP_COLLISION] = if hit { 1.0 } else { 0.0 };
    out[12] = (cur.v - map.speed_limit) / SPEED_SCALE;
    let k = STEP_FIXED;
    out[k..k + cfg.lookaheads.len()].copy_from_slice(&lane[2..]);
    let k = k + cfg.lookaheads.len();
    let nearest = neighbor_block(cfg, tracks, ego, t, &mut out[k..]);
    out[k + NEIGHBOR_WIDTH * cfg.k_neighbors] = nearest / SPEED_SCALE;
}
