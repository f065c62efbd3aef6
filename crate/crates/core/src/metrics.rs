//! Evaluation: failure rate, realism deviation over driving-profile
//! histograms, and reward cost.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::reward::RewardModel;
use crate::world::{
    detect_collision, detect_offroad, normalize_angle, MapModel, PreparedMap, Scenario,
};
use crate::{Error, Result};

/// Pooled magnitudes of the three driving properties.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DrivingProfile {
    pub longitudinal: Vec<f64>,
    pub lateral: Vec<f64>,
    pub jerk: Vec<f64>,
}

impl DrivingProfile {
    pub fn extend(&mut self, other: DrivingProfile) {
        self.longitudinal.extend(other.longitudinal);
        self.lateral.extend(other.lateral);
        self.jerk.extend(other.jerk);
    }
}

/// Signed per-agent differences of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    /// `(v[t+1] - v[t]) / dt`
    pub longitudinal: Vec<f64>,
    /// `v[t] * wrap(theta[t+1] - theta[t]) / dt`
    pub lateral: Vec<f64>,
    /// Difference of consecutive longitudinal accelerations over `dt`.
    pub jerk: Vec<f64>,
}

pub fn kinematics(states: &[crate::AgentState], dt: f64) -> Kinematics {
    let longitudinal: Vec<f64> = states.windows(2).map(|w| (w[1].v - w[0].v) / dt).collect();
    let lateral = states
        .windows(2)
        .map(|w| w[0].v * normalize_angle(w[1].theta - w[0].theta) / dt)
        .collect();
    let jerk = longitudinal
        .windows(2)
        .map(|w| (w[1] - w[0]) / dt)
        .collect();
    Kinematics {
        longitudinal,
        lateral,
        jerk,
    }
}

pub fn extract_profile(scenario: &Scenario) -> Result<DrivingProfile> {
    if scenario.len() < 3 {
        return Err(Error::Data(format!(
            "scenario {}/{} has {} states; profiles need at least 3",
            scenario.scene_id,
            scenario.sample_id,
            scenario.len()
        )));
    }
    let mut p = DrivingProfile::default();
    for agent in &scenario.agents {
        let k = kinematics(&agent.states, scenario.dt);
        p.longitudinal
            .extend(k.longitudinal.iter().map(|v| v.abs()));
        p.lateral.extend(k.lateral.iter().map(|v| v.abs()));
        p.jerk.extend(k.jerk.iter().map(|v| v.abs()));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

/// `bins` uniform bins over `[0, max]` plus one overflow bin of the same
/// width that absorbs everything at or above `max`.
pub fn uniform_edges(max: f64, bins: usize) -> Vec<f64> {
    let w = max / bins as f64;
    (0..=bins + 1).map(|k| k as f64 * w).collect()
}

impl Histogram {
    pub fn new(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || masses.len() != edges.len() - 1 {
            return Err(Error::Data(
                "histogram needs |masses| = |edges| - 1 >= 1".into(),
            ));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("histogram edges must increase".into()));
        }
        if masses.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::Data(
                "histogram masses must be finite and non-negative".into(),
            ));
        }
        Ok(Self { edges, masses })
    }

    /// Normalized histogram of non-negative samples; values beyond the last
    /// edge land in the last bin.
    pub fn from_samples(edges: &[f64], samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("cannot histogram an empty sample pool".into()));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0.0; bins];
        for &x in samples {
            if !x.is_finite() {
                return Err(Error::Data(format!("non-finite profile sample {x}")));
            }
            let k = edges
                .partition_point(|&e| e <= x)
                .saturating_sub(1)
                .min(bins - 1);
            counts[k] += 1.0;
        }
        let n = samples.len() as f64;
        Histogram::new(edges.to_vec(), counts.into_iter().map(|c| c / n).collect())
    }
}

/// `sum_k |CDF_a(k) - CDF_b(k)| * width_k` over shared edges.
pub fn wasserstein1(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(Error::Data("histograms have different bin edges".into()));
    }
    let (mut ca, mut cb, mut w) = (0.0, 0.0, 0.0);
    for k in 0..a.masses.len() {
        ca += a.masses[k];
        cb += b.masses[k];
        w += (ca - cb).abs() * (a.edges[k + 1] - a.edges[k]);
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub accel_max: f64,
    pub jerk_max: f64,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            accel_max: 8.0,
            jerk_max: 20.0,
            bins: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Realism {
    pub real: f64,
    pub longitudinal: f64,
    pub lateral: f64,
    pub jerk: f64,
}

pub fn realism_from_profiles(
    generated: &DrivingProfile,
    reference: &DrivingProfile,
    spec: &HistogramSpec,
) -> Result<Realism> {
    let acc = uniform_edges(spec.accel_max, spec.bins);
    let jerk_edges = uniform_edges(spec.jerk_max, spec.bins);
    let w = |edges: &[f64], a: &[f64], b: &[f64]| -> Result<f64> {
        wasserstein1(
            &Histogram::from_samples(edges, a)?,
            &Histogram::from_samples(edges, b)?,
        )
    };
    let longitudinal = w(&acc, &generated.longitudinal, &reference.longitudinal)?;
    let lateral = w(&acc, &generated.lateral, &reference.lateral)?;
    let jerk = w(&jerk_edges, &generated.jerk, &reference.jerk)?;
    Ok(Realism {
        real: (longitudinal + lateral + jerk) / 3.0,
        longitudinal,
        lateral,
        jerk,
    })
}

fn pooled(scenarios: &[Scenario]) -> Result<DrivingProfile> {
    if scenarios.is_empty() {
        return Err(Error::Data("empty scenario set".into()));
    }
    let parts: Vec<DrivingProfile> = scenarios
        .par_iter()
        .map(extract_profile)
        .collect::<Result<_>>()?;
    let mut all = DrivingProfile::default();
    for p in parts {
        all.extend(p);
    }
    Ok(all)
}

pub fn realism_deviation(
    generated: &[Scenario],
    ground_truth: &[Scenario],
    spec: &HistogramSpec,
) -> Result<Realism> {
    realism_from_profiles(&pooled(generated)?, &pooled(ground_truth)?, spec)
}

/// Whether each agent collides or leaves the road at any step.
pub fn agent_failures(scenario: &Scenario, map: &MapModel) -> Result<Vec<bool>> {
    let col = detect_collision(scenario);
    let off = detect_offroad(scenario, map)?;
    Ok(col
        .iter()
        .zip(&off)
        .map(|(c, o)| c.iter().chain(o).any(|&f| f))
        .collect())
}

/// Mean over scenes of the fraction of failing agents.
pub fn failure_rate(scenarios: &[(&Scenario, &MapModel)]) -> Result<f64> {
    if scenarios.is_empty() {
        return Err(Error::Data("failure rate of an empty scenario set".into()));
    }
    let per_scene: Vec<f64> = scenarios
        .par_iter()
        .map(|(s, m)| {
            let f = agent_failures(s, m)?;
            Ok(f.iter().filter(|&&x| x).count() as f64 / f.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.iter().sum::<f64>() / per_scene.len() as f64)
}

/// Negative mean reward-model score; lower is better.
pub fn reward_cost(rm: &RewardModel, scenarios: &[(&Scenario, &PreparedMap)]) -> Result<f64> {
    if scenarios.is_empty() {
        return Err(Error::Data("reward cost of an empty scenario set".into()));
    }
    let scores: Vec<f64> = scenarios
        .par_iter()
        .map(|(s, m)| rm.score(s, m))
        .collect::<Result<_>>()?;
    Ok(-scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fail: f64,
    pub real: f64,
    pub reward_cost: f64,
    pub realism: Realism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Aligned text table with one row per model variant.
pub fn format_table(rows: &[ReportRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(0)
        .max("variant".len());
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>11}  {:>8}  {:>8}  {:>8}\n",
        "variant", "real", "fail", "reward_cost", "long", "lat", "jerk"
    );
    for r in rows {
        let e = &r.report;
        out.push_str(&format!(
            "{:<width$}  {:>8.4}  {:>8.4}  {:>11.4}  {:>8.4}  {:>8.4}  {:>8.4}\n",
            r.variant,
            e.real,
            e.fail,
            e.reward_cost,
            e.realism.longitudinal,
            e.realism.lateral,
            e.realism.jerk
        ));
    }
    out
}
