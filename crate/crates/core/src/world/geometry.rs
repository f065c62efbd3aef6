use super::{normalize_angle, AgentShape, AgentState, MapModel, Point, Scenario};
use crate::Result;

/// Oriented rectangle of an agent footprint.
#[derive(Debug, Clone, Copy)]
pub struct Obb {
    pub center: Point,
    /// Unit heading axis and its left normal.
    pub axes: [(f64, f64); 2],
    pub half_extents: [f64; 2],
}

impl Obb {
    pub fn new(state: &AgentState, shape: &AgentShape) -> Self {
        let (s, c) = state.theta.sin_cos();
        Self {
            center: state.position(),
            axes: [(c, s), (-s, c)],
            half_extents: [shape.length / 2.0, shape.width / 2.0],
        }
    }

    fn project_radius(&self, axis: (f64, f64)) -> f64 {
        self.half_extents[0] * (self.axes[0].0 * axis.0 + self.axes[0].1 * axis.1).abs()
            + self.half_extents[1] * (self.axes[1].0 * axis.0 + self.axes[1].1 * axis.1).abs()
    }

    /// Separating-axis test. Boxes that merely touch do not overlap.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let d = (
            other.center.x - self.center.x,
            other.center.y - self.center.y,
        );
        for axis in self.axes.iter().chain(other.axes.iter()) {
            let dist = (d.0 * axis.0 + d.1 * axis.1).abs();
            if dist >= self.project_radius(*axis) + other.project_radius(*axis) {
                return false;
            }
        }
        true
    }

    pub fn contains(&self, p: Point) -> bool {
        let d = (p.x - self.center.x, p.y - self.center.y);
        (d.0 * self.axes[0].0 + d.1 * self.axes[0].1).abs() < self.half_extents[0]
            && (d.0 * self.axes[1].0 + d.1 * self.axes[1].1).abs() < self.half_extents[1]
    }
}

/// Per-agent, per-step overlap flags (`[agent][step]`).
pub fn detect_collision(scenario: &Scenario) -> Vec<Vec<bool>> {
    let n = scenario.n_agents();
    let len = scenario.len();
    let mut flags = vec![vec![false; len]; n];
    for t in 0..len {
        let boxes: Vec<Obb> = scenario
            .agents
            .iter()
            .map(|a| Obb::new(&a.states[t], &a.shape))
            .collect();
        for i in 0..n {
            for j in i + 1..n {
                if boxes[i].overlaps(&boxes[j]) {
                    flags[i][t] = true;
                    flags[j][t] = true;
                }
            }
        }
    }
    flags
}

/// Per-agent, per-step flags for centroids outside the nearest lane corridor.
pub fn detect_offroad(scenario: &Scenario, map: &MapModel) -> Result<Vec<Vec<bool>>> {
    let prepared = PreparedMap::new(map)?;
    Ok(scenario
        .agents
        .iter()
        .map(|a| {
            a.states
                .iter()
                .map(|s| prepared.is_offroad(s.position()))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone)]
struct PreparedLane {
    points: Vec<Point>,
    /// Arc length at each point.
    s: Vec<f64>,
    headings: Vec<f64>,
    width: f64,
}

impl PreparedLane {
    fn length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.headings.len();
        match self.s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }
}

/// Result of projecting a point onto a lane centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneProjection {
    pub lane: usize,
    /// Arc length of the foot point.
    pub s: f64,
    /// Signed offset, positive to the left of the direction of travel.
    pub lateral: f64,
    pub distance: f64,
    /// Centerline heading at the foot point.
    pub heading: f64,
    pub half_width: f64,
}

/// Map with precomputed arc lengths and segment headings.
#[derive(Debug, Clone)]
pub struct PreparedMap {
    lanes: Vec<PreparedLane>,
    pub speed_limit: f64,
}

impl PreparedMap {
    pub fn new(map: &MapModel) -> Result<Self> {
        map.validate()?;
        let lanes = map
            .lanes
            .iter()
            .map(|lane| {
                let points = lane.centerline.clone();
                let mut s = Vec::with_capacity(points.len());
                let mut headings = Vec::with_capacity(points.len() - 1);
                s.push(0.0);
                for w in points.windows(2) {
                    let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
                    s.push(s.last().unwrap() + dx.hypot(dy));
                    headings.push(dy.atan2(dx));
                }
                PreparedLane {
                    points,
                    s,
                    headings,
                    width: lane.width,
                }
            })
            .collect();
        Ok(Self {
            lanes,
            speed_limit: map.speed_limit,
        })
    }

    pub fn n_lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn lane_length(&self, lane: usize) -> f64 {
        self.lanes[lane].length()
    }

    pub fn project_onto(&self, lane: usize, p: Point) -> LaneProjection {
        let l = &self.lanes[lane];
        let mut best = LaneProjection {
            lane,
            s: 0.0,
            lateral: 0.0,
            distance: f64::INFINITY,
            heading: 0.0,
            half_width: l.width / 2.0,
        };
        for (k, w) in l.points.windows(2).enumerate() {
            let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
            let seg_len2 = dx * dx + dy * dy;
            let (px, py) = (p.x - w[0].x, p.y - w[0].y);
            let u = if seg_len2 > 0.0 {
                ((px * dx + py * dy) / seg_len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (fx, fy) = (px - u * dx, py - u * dy);
            let dist = fx.hypot(fy);
            if dist < best.distance {
                let cross = dx * py - dy * px;
                best.distance = dist;
                best.lateral = if cross >= 0.0 { dist } else { -dist };
                best.s = l.s[k] + u * seg_len2.sqrt();
                best.heading = l.headings[k];
            }
        }
        best
    }

    /// Projection onto the nearest lane; ties go to the lowest lane index.
    pub fn project(&self, p: Point) -> LaneProjection {
        let mut best = self.project_onto(0, p);
        for lane in 1..self.lanes.len() {
            let cand = self.project_onto(lane, p);
            if cand.distance < best.distance {
                best = cand;
            }
        }
        best
    }

    pub fn is_offroad(&self, p: Point) -> bool {
        let proj = self.project(p);
        proj.distance > proj.half_width
    }

    /// Centerline point and heading at arc length `s`, extrapolated linearly
    /// past either end.
    pub fn point_at(&self, lane: usize, s: f64) -> (Point, f64) {
        let l = &self.lanes[lane];
        let k = l.segment_at(s);
        let h = l.headings[k];
        let ds = s - l.s[k];
        let p0 = l.points[k];
        (Point::new(p0.x + ds * h.cos(), p0.y + ds * h.sin()), h)
    }

    /// Signed curvature from the heading change over `[s - span, s + span]`.
    pub fn curvature_at(&self, lane: usize, s: f64, span: f64) -> f64 {
        let (_, h0) = self.point_at(lane, s - span);
        let (_, h1) = self.point_at(lane, s + span);
        normalize_angle(h1 - h0) / (2.0 * span)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{AgentTrack, Lane, Source};
    use std::f64::consts::PI;

    fn two_agent_scenario(a: AgentState, b: AgentState, shape: AgentShape) -> Scenario {
        Scenario {
            scene_id: "t".into(),
            sample_id: "s0".into(),
            dt: 0.1,
            source: Source::Model,
            agents: vec![
                AgentTrack {
                    id: 0,
                    shape,
                    states: vec![a, a],
                },
                AgentTrack {
                    id: 1,
                    shape,
                    states: vec![b, b],
                },
            ],
        }
    }

    /// Rasterize both boxes on a 1 mm grid and report any shared cell.
    fn raster_overlap(a: &Obb, b: &Obb) -> bool {
        let r = |o: &Obb| o.half_extents[0].hypot(o.half_extents[1]);
        let x0 = (a.center.x - r(a)).max(b.center.x - r(b));
        let x1 = (a.center.x + r(a)).min(b.center.x + r(b));
        let y0 = (a.center.y - r(a)).max(b.center.y - r(b));
        let y1 = (a.center.y + r(a)).min(b.center.y + r(b));
        if x0 > x1 || y0 > y1 {
            return false;
        }
        let step = 1e-3;
        let nx = ((x1 - x0) / step).ceil() as i64;
        let ny = ((y1 - y0) / step).ceil() as i64;
        for i in 0..=nx {
            for j in 0..=ny {
                let p = Point::new(x0 + i as f64 * step, y0 + j as f64 * step);
                if a.contains(p) && b.contains(p) {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn far_apart_agents_do_not_collide() {
        let sc = two_agent_scenario(
            AgentState::new(0.0, 0.0, 0.0, 0.0),
            AgentState::new(100.0, 0.0, 0.0, 0.0),
            AgentShape::default(),
        );
        assert!(detect_collision(&sc).iter().flatten().all(|f| !f));
    }

    #[test]
    fn identical_poses_collide() {
        let s = AgentState::new(3.0, -1.0, 5.0, 0.7);
        let sc = two_agent_scenario(s, s, AgentShape::default());
        assert!(detect_collision(&sc).iter().flatten().all(|&f| f));
    }

    /// Largest x-coordinate of a box's corners relative to its center.
    fn x_reach(o: &Obb) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                m = m.max(
                    sx * o.half_extents[0] * o.axes[0].0 + sy * o.half_extents[1] * o.axes[1].0,
                );
            }
        }
        m
    }

    #[test]
    fn rotated_corner_contacts_match_raster_oracle() {
        let shape = AgentShape {
            length: 2.0,
            width: 1.0,
        };
        // Rotated corner against an axis-aligned edge, then corner to corner.
        for (t1, t2, dy) in [(0.0, PI / 4.0, 0.1), (0.3, -1.1, 0.05)] {
            for gap in [-0.02, -0.005, 0.005, 0.02] {
                let o1 = Obb::new(&AgentState::new(0.0, 0.0, 0.0, t1), &shape);
                let probe = Obb::new(&AgentState::new(0.0, 0.0, 0.0, t2), &shape);
                let x = x_reach(&o1) + x_reach(&probe) + gap;
                let o2 = Obb::new(&AgentState::new(x, dy, 0.0, t2), &shape);
                let expected = raster_overlap(&o1, &o2);
                assert_eq!(o1.overlaps(&o2), expected, "angles {t1},{t2} gap {gap}");
                assert_eq!(o2.overlaps(&o1), expected);
            }
        }
    }

    fn straight_map(width: f64) -> MapModel {
        MapModel {
            lanes: vec![Lane {
                centerline: vec![Point::new(0.0, 0.0), Point::new(100.0, 0.0)],
                width,
            }],
            speed_limit: 15.0,
        }
    }

    #[test]
    fn offroad_boundary() {
        let map = straight_map(3.6);
        let sc = two_agent_scenario(
            AgentState::new(50.0, 0.0, 0.0, 0.0),
            AgentState::new(20.0, 1.8 + 0.01, 0.0, 0.0),
            AgentShape::default(),
        );
        let flags = detect_offroad(&sc, &map).unwrap();
        assert!(flags[0].iter().all(|f| !f));
        assert!(flags[1].iter().all(|&f| f));
    }

    #[test]
    fn empty_map_is_config_error() {
        let map = MapModel {
            lanes: vec![],
            speed_limit: 10.0,
        };
        let sc = two_agent_scenario(
            AgentState::new(0.0, 0.0, 0.0, 0.0),
            AgentState::new(10.0, 0.0, 0.0, 0.0),
            AgentShape::default(),
        );
        assert!(matches!(
            detect_offroad(&sc, &map),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn curved_lane_matches_dense_resampling() {
        let radius = 30.0;
        let centerline: Vec<Point> = (0..=24)
            .map(|k| {
                let a = k as f64 * PI / 48.0;
                Point::new(radius * a.sin(), radius * (1.0 - a.cos()))
            })
            .collect();
        let map = MapModel {
            lanes: vec![Lane {
                centerline: centerline.clone(),
                width: 3.0,
            }],
            speed_limit: 10.0,
        };
        let prepared = PreparedMap::new(&map).unwrap();
        // Oracle: resample every 1 cm and take the nearest sample.
        let mut dense = Vec::new();
        for w in centerline.windows(2) {
            let len = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
            let n = (len / 0.01).ceil() as usize;
            for i in 0..n {
                let u = i as f64 / n as f64;
                dense.push(Point::new(
                    w[0].x + u * (w[1].x - w[0].x),
                    w[0].y + u * (w[1].y - w[0].y),
                ));
            }
        }
        dense.push(*centerline.last().unwrap());
        let probes = [
            Point::new(10.0, 1.0),
            Point::new(15.0, 6.5),
            Point::new(20.0, 8.0),
            Point::new(21.0, 10.5),
            Point::new(5.0, -1.4),
            Point::new(5.0, -1.6),
        ];
        for p in probes {
            let oracle = dense
                .iter()
                .map(|q| (q.x - p.x).hypot(q.y - p.y))
                .fold(f64::INFINITY, f64::min);
            let proj = prepared.project(p);
            assert!(
                (proj.distance - oracle).abs() < 0.01,
                "{p:?}: {} vs {oracle}",
                proj.distance
            );
            assert_eq!(prepared.is_offroad(p), oracle > 1.5, "{p:?}");
        }
    }

    #[test]
    fn lateral_sign_is_left_positive() {
        let prepared = PreparedMap::new(&straight_map(3.6)).unwrap();
        assert!((prepared.project(Point::new(10.0, 1.0)).lateral - 1.0).abs() < 1e-12);
        assert!((prepared.project(Point::new(10.0, -0.5)).lateral + 0.5).abs() < 1e-12);
    }
}
