//! Procedural road maps and rule-based reference drivers.
//!
//! Reference drivers combine intelligent-driver-model car following for
//! acceleration with pure-pursuit tracking of their lane centerline for yaw
//! rate. Each driver has private parameters (desired speed, headway,
//! lookahead) that are not observable from the state alone. Generated
//! demonstrations are rejected and re-drawn until they are free of
//! collisions and road departures.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::world::{
    detect_collision, detect_offroad, step_unicycle, Action, ActionLimits, AgentShape, AgentState,
    AgentTrack, Lane, MapModel, Point, PreparedMap, Scenario, ScenarioContext, Source, DT, T_HIST,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadKind {
    Straight,
    Curve,
    Merge,
}

impl RoadKind {
    pub const ALL: [RoadKind; 3] = [RoadKind::Straight, RoadKind::Curve, RoadKind::Merge];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_agents: usize,
    pub road_kind: RoadKind,
    /// Total number of states, history included.
    pub episode_len: usize,
}

/// History plus a 10 s future at 10 Hz.
pub const DEFAULT_EPISODE_LEN: usize = T_HIST + 1 + 100;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("scene needs at least one agent".into()));
        }
        if self.episode_len < T_HIST + 2 {
            return Err(Error::Config(format!(
                "episode_len {} is shorter than T_HIST + 2 = {}",
                self.episode_len,
                T_HIST + 2
            )));
        }
        Ok(())
    }

    pub fn scene_id(&self) -> String {
        format!("scene-{:06}", self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub lane_width: f64,
    pub speed_limit: f64,
    pub limits: ActionLimits,
    /// Whole-scene redraws before giving up.
    pub max_attempts: usize,
    pub desired_speed: (f64, f64),
    pub headway: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lane_width: 3.6,
            speed_limit: 15.0,
            limits: ActionLimits::default(),
            max_attempts: 40,
            desired_speed: (9.0, 14.0),
            headway: (1.0, 1.8),
        }
    }
}

/// A generated scene: map, observed history and the reference future.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SceneRecord", into = "SceneRecord")]
pub struct Scene {
    pub spec: SceneSpec,
    pub map: Arc<MapModel>,
    pub context: ScenarioContext,
    pub ground_truth: Scenario,
}

/// On disk the context is implied by the first `T_HIST + 1` ground-truth
/// states.
#[derive(Serialize, Deserialize)]
struct SceneRecord {
    spec: SceneSpec,
    map: Arc<MapModel>,
    ground_truth: Scenario,
}

impl From<Scene> for SceneRecord {
    fn from(s: Scene) -> Self {
        SceneRecord {
            spec: s.spec,
            map: s.map,
            ground_truth: s.ground_truth,
        }
    }
}

impl TryFrom<SceneRecord> for Scene {
    type Error = Error;

    fn try_from(r: SceneRecord) -> Result<Self> {
        r.map.validate()?;
        r.ground_truth.validate()?;
        let context = r.ground_truth.context_at(r.map.clone(), T_HIST)?;
        Ok(Scene {
            spec: r.spec,
            map: r.map,
            context,
            ground_truth: r.ground_truth,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Driver {
    lane: usize,
    desired_speed: f64,
    headway: f64,
    min_gap: f64,
    max_accel: f64,
    comfort_decel: f64,
    lookahead_base: f64,
    lookahead_gain: f64,
}

fn sample_path(points: &mut Vec<Point>, f: impl Fn(f64) -> Point, s0: f64, s1: f64, step: f64) {
    let n = ((s1 - s0) / step).ceil().max(1.0) as usize;
    for i in 0..=n {
        let p = f(s0 + (s1 - s0) * i as f64 / n as f64);
        if points
            .last()
            .is_some_and(|q: &Point| (q.x - p.x).hypot(q.y - p.y) < 1e-9)
        {
            continue;
        }
        points.push(p);
    }
}

fn build_map(kind: RoadKind, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> MapModel {
    let w = cfg.lane_width;
    let lanes = match kind {
        RoadKind::Straight => (0..2)
            .map(|k| {
                let mut pts = Vec::new();
                sample_path(&mut pts, |x| Point::new(x, k as f64 * w), -60.0, 460.0, 4.0);
                Lane {
                    centerline: pts,
                    width: w,
                }
            })
            .collect(),
        RoadKind::Curve => {
            let radius: f64 = rng.random_range(70.0..120.0);
            let sweep: f64 = rng.random_range(PI / 3.0..PI / 2.0);
            (0..2)
                .map(|k| {
                    let off = k as f64 * w;
                    let r = radius - off;
                    let mut pts = Vec::new();
                    sample_path(&mut pts, |x| Point::new(x, off), -60.0, 0.0, 2.0);
                    // Arc centered at (0, radius), turning left.
                    sample_path(
                        &mut pts,
                        |a| Point::new(r * a.sin(), radius - r * a.cos()),
                        0.0,
                        sweep,
                        2.0 / radius,
                    );
                    let end = Point::new(r * sweep.sin(), radius - r * sweep.cos());
                    let (c, s) = (sweep.cos(), sweep.sin());
                    sample_path(
                        &mut pts,
                        |d| Point::new(end.x + d * c, end.y + d * s),
                        0.0,
                        350.0,
                        4.0,
                    );
                    Lane {
                        centerline: pts,
                        width: w,
                    }
                })
                .collect()
        }
        RoadKind::Merge => {
            let offset: f64 = rng.random_range(7.0..10.0);
            let mut main = Vec::new();
            sample_path(&mut main, |x| Point::new(x, 0.0), -60.0, 460.0, 4.0);
            let mut ramp = Vec::new();
            sample_path(&mut ramp, |x| Point::new(x, -offset), -60.0, -10.0, 4.0);
            sample_path(
                &mut ramp,
                |x| {
                    let u = (x + 10.0) / 80.0;
                    Point::new(x, -offset * (1.0 - u * u * (3.0 - 2.0 * u)))
                },
                -10.0,
                70.0,
                2.0,
            );
            sample_path(&mut ramp, |x| Point::new(x, 0.0), 70.0, 460.0, 4.0);
            vec![
                Lane {
                    centerline: main,
                    width: w,
                },
                Lane {
                    centerline: ramp,
                    width: w,
                },
            ]
        }
    };
    MapModel {
        lanes,
        speed_limit: cfg.speed_limit,
    }
}

fn idm_accel(d: &Driver, v: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / d.desired_speed).powi(4);
    let interaction = match leader {
        Some((gap, lead_v)) => {
            let s_star = d.min_gap
                + (v * d.headway
                    + v * (v - lead_v) / (2.0 * (d.max_accel * d.comfort_decel).sqrt()))
                .max(0.0);
            (s_star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    d.max_accel * (free - interaction)
}

fn driver_action(
    map: &PreparedMap,
    cfg: &GeneratorConfig,
    drivers: &[Driver],
    shapes: &[AgentShape],
    states: &[AgentState],
    i: usize,
) -> Action {
    let d = &drivers[i];
    let me = states[i];
    let my = map.project_onto(d.lane, me.position());
    let mut leader: Option<(f64, f64)> = None;
    for (j, other) in states.iter().enumerate() {
        if j == i {
            continue;
        }
        let p = map.project_onto(d.lane, other.position());
        if p.distance < cfg.lane_width * 0.8 && p.s > my.s {
            let gap = p.s - my.s - (shapes[i].length + shapes[j].length) / 2.0;
            if leader.is_none_or(|(g, _)| gap < g) {
                leader = Some((gap, other.v * (other.theta - p.heading).cos()));
            }
        }
    }
    let mut accel = idm_accel(d, me.v, leader).clamp(-cfg.limits.accel_max, cfg.limits.accel_max);
    accel = accel.min((cfg.speed_limit - me.v) / DT);

    let lookahead = d.lookahead_base + d.lookahead_gain * me.v;
    let (target, _) = map.point_at(d.lane, my.s + lookahead);
    let alpha = crate::world::normalize_angle((target.y - me.y).atan2(target.x - me.x) - me.theta);
    let yaw_rate = (2.0 * me.v.max(1.0) * alpha.sin() / lookahead)
        .clamp(-cfg.limits.yaw_rate_max, cfg.limits.yaw_rate_max);
    Action::new(accel, yaw_rate)
}

fn place_agents(
    kind: RoadKind,
    n: usize,
    map: &PreparedMap,
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Driver>, Vec<AgentShape>, Vec<AgentState>)> {
    let mut drivers = Vec::with_capacity(n);
    let mut shapes = Vec::with_capacity(n);
    let mut states: Vec<AgentState> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..200 {
            let lane = rng.random_range(0..map.n_lanes());
            let s_max = match (kind, lane) {
                (RoadKind::Merge, 1) => 60.0,
                _ => (50.0 + 25.0 * n as f64).min(200.0),
            };
            let s = rng.random_range(0.0..s_max);
            let (p, heading) = map.point_at(lane, s);
            let clear = states.iter().all(|o| (o.x - p.x).hypot(o.y - p.y) > 14.0);
            if !clear {
                continue;
            }
            let desired_speed = rng.random_range(cfg.desired_speed.0..cfg.desired_speed.1);
            let driver = Driver {
                lane,
                desired_speed,
                headway: rng.random_range(cfg.headway.0..cfg.headway.1),
                min_gap: rng.random_range(2.0..3.5),
                max_accel: rng.random_range(1.0..2.0),
                comfort_decel: rng.random_range(1.5..2.5),
                lookahead_base: rng.random_range(4.0..8.0),
                lookahead_gain: rng.random_range(0.4..1.0),
            };
            let shape = AgentShape {
                length: rng.random_range(4.2..5.0),
                width: rng.random_range(1.8..2.0),
            };
            drivers.push(driver);
            shapes.push(shape);
            states.push(AgentState::new(
                p.x,
                p.y,
                desired_speed * rng.random_range(0.75..1.0),
                heading,
            ));
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some((drivers, shapes, states))
}

/// Generates map, context and ground truth for one spec. Deterministic in
/// `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, cfg: &GeneratorConfig) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let map = Arc::new(build_map(spec.road_kind, cfg, &mut rng));
    let prepared = PreparedMap::new(&map)?;
    let scene_id = spec.scene_id();
    for _ in 0..cfg.max_attempts {
        let Some((drivers, shapes, init)) =
            place_agents(spec.road_kind, spec.n_agents, &prepared, cfg, &mut rng)
        else {
            continue;
        };
        let mut tracks: Vec<AgentTrack> = shapes
            .iter()
            .zip(&init)
            .enumerate()
            .map(|(i, (shape, s))| AgentTrack {
                id: i as u32,
                shape: *shape,
                states: {
                    let mut v = Vec::with_capacity(spec.episode_len);
                    v.push(*s);
                    v
                },
            })
            .collect();
        let mut current = init;
        for _ in 1..spec.episode_len {
            let actions: Vec<Action> = (0..current.len())
                .map(|i| driver_action(&prepared, cfg, &drivers, &shapes, &current, i))
                .collect();
            for (i, a) in actions.iter().enumerate() {
                current[i] = step_unicycle(current[i], *a, DT)?;
                tracks[i].states.push(current[i]);
            }
        }
        let gt = Scenario {
            scene_id: scene_id.clone(),
            sample_id: "gt".into(),
            dt: DT,
            source: Source::GroundTruth,
            agents: tracks,
        };
        let clean = !detect_collision(&gt).iter().flatten().any(|&f| f)
            && !detect_offroad(&gt, &map)?.iter().flatten().any(|&f| f)
            && gt
                .agents
                .iter()
                .flat_map(|a| &a.states)
                .all(|s| s.v <= cfg.speed_limit);
        if clean {
            let context = gt.context_at(map.clone(), T_HIST)?;
            return Ok(Scene {
                spec: *spec,
                map,
                context,
                ground_truth: gt,
            });
        }
    }
    Err(Error::Generation(format!(
        "{scene_id}: no failure-free placement after {} attempts",
        cfg.max_attempts
    )))
}

/// Specs for `count` scenes starting at `first_seed`: road kinds cycle,
/// agent counts drawn from `agents` (inclusive).
pub fn corpus_specs(first_seed: u64, count: usize, agents: (usize, usize)) -> Vec<SceneSpec> {
    (0..count as u64)
        .map(|k| {
            let seed = first_seed + k;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce_9e17);
            SceneSpec {
                seed,
                n_agents: rng.random_range(agents.0..=agents.1),
                road_kind: RoadKind::ALL[(seed % 3) as usize],
                episode_len: DEFAULT_EPISODE_LEN,
            }
        })
        .collect()
}

/// Generates scenes in parallel; output order follows `specs`.
pub fn generate_corpus(specs: &[SceneSpec], cfg: &GeneratorConfig) -> Result<Vec<Scene>> {
    specs.par_iter().map(|s| generate_scene(s, cfg)).collect()
}
