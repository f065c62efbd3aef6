//! Agent kinematics, scenario containers and failure geometry.

mod geometry;

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use geometry::{detect_collision, detect_offroad, LaneProjection, Obb, PreparedMap};

/// Simulation step in seconds.
pub const DT: f64 = 0.1;
/// Number of history transitions preceding the current state.
pub const T_HIST: usize = 10;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Kinematic state of one agent. Serialized as `[x, y, v, theta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self { x, y, v, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.v.is_finite() && self.theta.is_finite()
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

impl From<[f64; 4]> for AgentState {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<AgentState> for [f64; 4] {
    fn from(s: AgentState) -> Self {
        [s.x, s.y, s.v, s.theta]
    }
}

/// Longitudinal acceleration and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl Action {
    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub accel_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            accel_max: 3.0,
            yaw_rate_max: 0.5,
        }
    }
}

impl ActionLimits {
    pub fn clip(&self, a: Action) -> Action {
        Action {
            accel: a.accel.clamp(-self.accel_max, self.accel_max),
            yaw_rate: a.yaw_rate.clamp(-self.yaw_rate_max, self.yaw_rate_max),
        }
    }

    pub fn contains(&self, a: Action) -> bool {
        a.accel.abs() <= self.accel_max && a.yaw_rate.abs() <= self.yaw_rate_max
    }
}

/// Advances one agent by integrating the unicycle ODE with the action held
/// constant over `dt`.
///
/// Speed and heading follow `v' = max(0, v + accel * dt)` and
/// `theta' = wrap(theta + yaw_rate * dt)`. Deceleration that would reverse
/// the agent is reduced so the speed reaches zero exactly at the end of the
/// step; the position is the exact integral of the resulting speed and
/// heading profiles.
pub fn step_unicycle(state: AgentState, action: Action, dt: f64) -> Result<AgentState> {
    if !state.is_finite() || !action.accel.is_finite() || !action.yaw_rate.is_finite() {
        return Err(Error::InvalidState(format!(
            "non-finite input: state {state:?}, action {action:?}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidState(format!(
            "dt must be positive, got {dt}"
        )));
    }
    if state.v < 0.0 {
        return Err(Error::InvalidState(format!("negative speed {}", state.v)));
    }
    let accel = action.accel.max(-state.v / dt);
    let (dx, dy) = displacement(state.v, accel, state.theta, action.yaw_rate, dt);
    Ok(AgentState {
        x: state.x + dx,
        y: state.y + dy,
        v: (state.v + accel * dt).max(0.0),
        theta: normalize_angle(state.theta + action.yaw_rate * dt),
    })
}

/// `integral_0^dt (v + a t) (cos, sin)(theta + w t) dt`.
fn displacement(v: f64, a: f64, theta: f64, w: f64, dt: f64) -> (f64, f64) {
    if (w * dt).abs() < 0.1 {
        // Power series of the rotation: sum_n (i w)^n / n! * int (v + a t) t^n.
        let (mut re, mut im) = (0.0, 0.0);
        let mut coeff = 1.0;
        for n in 0..12 {
            let k = n as f64;
            let moment = v * dt.powi(n + 1) / (k + 1.0) + a * dt.powi(n + 2) / (k + 2.0);
            let term = coeff * moment;
            match n % 4 {
                0 => re += term,
                1 => im += term,
                2 => re -= term,
                _ => im -= term,
            }
            coeff *= w / (k + 1.0);
        }
        let (s, c) = theta.sin_cos();
        (c * re - s * im, s * re + c * im)
    } else {
        let (s0, c0) = theta.sin_cos();
        let (s1, c1) = (theta + w * dt).sin_cos();
        let v1 = v + a * dt;
        (
            (v1 * s1 - v * s0) / w + a * (c1 - c0) / (w * w),
            (v * c0 - v1 * c1) / w + a * (s1 - s0) / (w * w),
        )
    }
}

/// Recovers the action that moved `from` to `to` under [`step_unicycle`].
pub fn invert_step(from: &AgentState, to: &AgentState, dt: f64) -> Action {
    Action {
        accel: (to.v - from.v) / dt,
        yaw_rate: normalize_angle(to.theta - from.theta) / dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentShape {
    pub length: f64,
    pub width: f64,
}

impl Default for AgentShape {
    fn default() -> Self {
        Self {
            length: 4.5,
            width: 1.9,
        }
    }
}

/// A 2-D point, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Vec<Point>,
    pub width: f64,
}

/// Vector road map: lane centerlines with corridor widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapModel {
    pub lanes: Vec<Lane>,
    pub speed_limit: f64,
}

impl MapModel {
    pub fn validate(&self) -> Result<()> {
        if self.lanes.is_empty() {
            return Err(Error::Config("map has no lanes".into()));
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.centerline.len() < 2 {
                return Err(Error::Config(format!(
                    "lanes[{i}].centerline has fewer than 2 points"
                )));
            }
            if !(lane.width > 0.0) {
                return Err(Error::Config(format!("lanes[{i}].width must be positive")));
            }
        }
        if !(self.speed_limit > 0.0) {
            return Err(Error::Config("speed_limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Model,
    GroundTruth,
}

/// One agent's footprint and state sequence inside a [`Scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    #[serde(flatten)]
    pub shape: AgentShape,
    pub states: Vec<AgentState>,
}

/// Stacked state sequences for all agents of one scene sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scene_id: String,
    pub sample_id: String,
    pub dt: f64,
    pub source: Source,
    pub agents: Vec<AgentTrack>,
}

impl Scenario {
    /// Number of states per agent.
    pub fn len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.states.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidState(format!(
                "scenario {}: dt must be positive",
                self.scene_id
            )));
        }
        if self.agents.is_empty() {
            return Err(Error::InvalidState(format!(
                "scenario {}: no agents",
                self.scene_id
            )));
        }
        let len = self.len();
        if len < 2 {
            return Err(Error::InvalidState(format!(
                "scenario {}: sequences need at least 2 states",
                self.scene_id
            )));
        }
        for agent in &self.agents {
            if agent.states.len() != len {
                return Err(Error::InvalidState(format!(
                    "scenario {}: agent {} has {} states, expected {len}",
                    self.scene_id,
                    agent.id,
                    agent.states.len()
                )));
            }
            if !(agent.shape.length > 0.0 && agent.shape.width > 0.0) {
                return Err(Error::InvalidState(format!(
                    "scenario {}: agent {} has a degenerate shape",
                    self.scene_id, agent.id
                )));
            }
            if agent.states.iter().any(|s| !s.is_finite()) {
                return Err(Error::InvalidState(format!(
                    "scenario {}: agent {} has non-finite states",
                    self.scene_id, agent.id
                )));
            }
        }
        Ok(())
    }

    /// Copy restricted to the state indices `range` (shared by all agents).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Scenario {
        Scenario {
            scene_id: self.scene_id.clone(),
            sample_id: self.sample_id.clone(),
            dt: self.dt,
            source: self.source,
            agents: self
                .agents
                .iter()
                .map(|a| AgentTrack {
                    id: a.id,
                    shape: a.shape,
                    states: a.states[range.clone()].to_vec(),
                })
                .collect(),
        }
    }

    /// The history window of `T_HIST + 1` states ending at state index `t`.
    pub fn context_at(&self, map: Arc<MapModel>, t: usize) -> Result<ScenarioContext> {
        if t < T_HIST || t >= self.len() {
            return Err(Error::InvalidState(format!(
                "scenario {}: no full history window ending at {t}",
                self.scene_id
            )));
        }
        ScenarioContext::new(
            self.scene_id.clone(),
            map,
            self.slice(t - T_HIST..t + 1).agents,
        )
    }
}

/// Map plus the observed history from which futures are generated.
#[derive(Debug, Clone)]
pub struct ScenarioContext {
    pub scene_id: String,
    pub map: Arc<MapModel>,
    pub history: Vec<AgentTrack>,
}

impl ScenarioContext {
    pub fn new(scene_id: String, map: Arc<MapModel>, history: Vec<AgentTrack>) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::InvalidState(format!(
                "context {scene_id}: no agents"
            )));
        }
        if let Some(bad) = history.iter().find(|a| a.states.len() != T_HIST + 1) {
            return Err(Error::InvalidState(format!(
                "context {scene_id}: agent {} has {} history states, expected {}",
                bad.id,
                bad.states.len(),
                T_HIST + 1
            )));
        }
        Ok(Self {
            scene_id,
            map,
            history,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.history.len()
    }

    pub fn current_states(&self) -> Vec<AgentState> {
        self.history.iter().map(|a| a.states[T_HIST]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: AgentState, b: AgentState, tol: f64) -> bool {
        (a.x - b.x).abs() < tol
            && (a.y - b.y).abs() < tol
            && (a.v - b.v).abs() < tol
            && normalize_angle(a.theta - b.theta).abs() < tol
    }

    #[test]
    fn straight_motion() {
        let s = step_unicycle(AgentState::new(0.0, 0.0, 2.0, 0.0), Action::default(), 0.5).unwrap();
        assert_eq!(s, AgentState::new(1.0, 0.0, 2.0, 0.0));
    }

    #[test]
    fn heading_along_y() {
        let s = step_unicycle(
            AgentState::new(0.0, 0.0, 1.0, PI / 2.0),
            Action::default(),
            1.0,
        )
        .unwrap();
        assert!(close(s, AgentState::new(0.0, 1.0, 1.0, PI / 2.0), 1e-12));
    }

    /// Plain forward Euler on the ODE, independent of `step_unicycle`.
    fn euler_reference(mut s: AgentState, a: Action, dt: f64, substeps: usize) -> AgentState {
        let h = dt / substeps as f64;
        for _ in 0..substeps {
            s = AgentState {
                x: s.x + s.v * s.theta.cos() * h,
                y: s.y + s.v * s.theta.sin() * h,
                v: (s.v + a.accel * h).max(0.0),
                theta: s.theta + a.yaw_rate * h,
            };
        }
        s
    }

    #[test]
    fn matches_substepped_integration() {
        let start = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let action = Action::new(1.0, 0.5);
        let coarse = step_unicycle(start, action, 0.1).unwrap();
        let fine = euler_reference(start, action, 0.1, 1000);
        let d = (coarse.x - fine.x).hypot(coarse.y - fine.y);
        assert!(d < 1e-3, "position gap {d}");
        assert!(close(coarse, fine, 1e-3));
    }

    #[test]
    fn closed_form_and_series_branches_agree() {
        let s = AgentState::new(1.0, 2.0, 7.0, 0.4);
        for w in [0.0999, 0.1001, 1e-9, -0.9] {
            let a = Action::new(-1.3, w);
            let exact = step_unicycle(s, a, 1.0).unwrap();
            let fine = euler_reference(s, a, 1.0, 200_000);
            assert!(
                (exact.x - fine.x).abs() < 1e-3 && (exact.y - fine.y).abs() < 1e-3,
                "w={w}"
            );
        }
    }

    #[test]
    fn zero_action_composes() {
        let s = AgentState::new(1.0, -2.0, 3.0, 0.3);
        let once = step_unicycle(s, Action::default(), 0.2).unwrap();
        let twice = step_unicycle(
            step_unicycle(s, Action::default(), 0.1).unwrap(),
            Action::default(),
            0.1,
        )
        .unwrap();
        assert!(close(once, twice, 1e-12));
        assert_eq!(once.v, s.v);
        assert_eq!(once.theta, s.theta);
    }

    #[test]
    fn speed_clamped_at_zero() {
        let s = step_unicycle(
            AgentState::new(0.0, 0.0, 0.1, 0.0),
            Action::new(-3.0, 0.0),
            0.1,
        )
        .unwrap();
        assert_eq!(s.v, 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(step_unicycle(
            AgentState::new(f64::NAN, 0.0, 1.0, 0.0),
            Action::default(),
            0.1
        )
        .is_err());
        assert!(step_unicycle(
            AgentState::new(0.0, 0.0, 1.0, 0.0),
            Action::new(f64::INFINITY, 0.0),
            0.1
        )
        .is_err());
        assert!(
            step_unicycle(AgentState::new(0.0, 0.0, 1.0, 0.0), Action::default(), 0.0).is_err()
        );
    }

    #[test]
    fn inversion_recovers_action() {
        let a = invert_step(
            &AgentState::new(0.0, 0.0, 1.0, 0.0),
            &AgentState::new(0.1, 0.0, 1.1, 0.0),
            0.1,
        );
        assert!((a.accel - 1.0).abs() < 1e-12);
        assert_eq!(a.yaw_rate, 0.0);
    }

    #[test]
    fn angle_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn scenario_wire_format() {
        let sc = Scenario {
            scene_id: "scene-0001".into(),
            sample_id: "s0".into(),
            dt: 0.1,
            source: Source::GroundTruth,
            agents: vec![AgentTrack {
                id: 3,
                shape: AgentShape {
                    length: 4.0,
                    width: 2.0,
                },
                states: vec![AgentState::new(1.0, 2.0, 3.0, 0.5); 2],
            }],
        };
        let json = serde_json::to_string(&sc).unwrap();
        assert_eq!(
            json,
            r#"{"scene_id":"scene-0001","sample_id":"s0","dt":0.1,"source":"ground_truth","agents":[{"id":3,"length":4.0,"width":2.0,"states":[[1.0,2.0,3.0,0.5],[1.0,2.0,3.0,0.5]]}]}"#
        );
        let back: Scenario = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sc);

        let map = MapModel {
            lanes: vec![Lane {
                centerline: vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0)],
                width: 3.5,
            }],
            speed_limit: 15.0,
        };
        assert_eq!(
            serde_json::to_string(&map).unwrap(),
            r#"{"lanes":[{"centerline":[[0.0,0.0],[10.0,0.0]],"width":3.5}],"speed_limit":15.0}"#
        );
    }

    #[test]
    fn validate_rejects_ragged_agents() {
        let mut sc = Scenario {
            scene_id: "x".into(),
            sample_id: "s0".into(),
            dt: 0.1,
            source: Source::Model,
            agents: vec![
                AgentTrack {
                    id: 0,
                    shape: AgentShape::default(),
                    states: vec![AgentState::new(0.0, 0.0, 0.0, 0.0); 3],
                },
                AgentTrack {
                    id: 1,
                    shape: AgentShape::default(),
                    states: vec![AgentState::new(9.0, 0.0, 0.0, 0.0); 3],
                },
            ],
        };
        assert!(sc.validate().is_ok());
        sc.agents[1].states.pop();
        assert!(sc.validate().is_err());
    }
}
