//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.
//! The end-to-end checks run the desk preset and take several minutes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{anyhow, ensure, Context, Result};
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficrlhf_cli::pipeline::{
    self, learning_curve, read_json, Layout, PipelineConfig, Preset, SweepRecord,
};
use trafficrlhf_core::finetune::FreezeMode;
use trafficrlhf_core::metrics::{wasserstein1, Histogram, ReportRow};
use trafficrlhf_core::policy::{
    rollout_closed_loop, Demonstrations, PolicyConfig, RolloutConfig, TrafficPolicy,
};
use trafficrlhf_core::preference::{
    pairs_from_label, sample_id, Label, Labeler, ScenarioBatch, GT_SAMPLE,
};
use trafficrlhf_core::reward::{batch_loss, pair_loss, RewardConfig, RewardModel, RmDataset};
use trafficrlhf_core::scenegen::{
    generate_scene, GeneratorConfig, RoadKind, Scene, SceneSpec, DEFAULT_EPISODE_LEN,
};
use trafficrlhf_core::world::{step_unicycle, PreparedMap};
use trafficrlhf_core::{Action, ActionLimits, AgentState, Scenario, Source, DT};

const DESK_SEED: u64 = 11;

fn scene(seed: u64, agents: usize, kind: RoadKind) -> Result<Scene> {
    let spec = SceneSpec {
        seed,
        n_agents: agents,
        road_kind: kind,
        episode_len: DEFAULT_EPISODE_LEN,
    };
    Ok(generate_scene(&spec, &GeneratorConfig::default())?)
}

fn pair_loss_values() -> Result<String> {
    let tie = (pair_loss(0.7, 0.7) - 2f64.ln()).abs();
    let sat = pair_loss(20.0, 0.0);
    let unit = (pair_loss(1.0, 0.0) - (1.0 + (-1.0f64).exp()).ln()).abs();
    ensure!(tie < 1e-12, "tie error {tie:e}");
    ensure!(sat < 1e-8, "saturated loss {sat:e}");
    ensure!(unit < 1e-12, "unit-margin error {unit:e}");
    Ok(format!(
        "tie err {tie:.1e}, L(20) {sat:.1e}, unit err {unit:.1e}"
    ))
}

fn relative(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn gradient_integrity() -> Result<String> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Reward model: pairs over a context's ground truth and random-policy rollouts.
    let s = scene(21, 4, RoadKind::Merge)?;
    let map = PreparedMap::new(&s.map)?;
    let rm = RewardModel::new(
        &RewardConfig {
            hidden: vec![8, 6],
            ..Default::default()
        },
        3,
    )?;
    let policy = TrafficPolicy::new(&PolicyConfig::default(), 4)?;
    let mut data = RmDataset::default();
    data.push_scenario(rm.featurize(&s.ground_truth, &map)?);
    for k in 0..3 {
        let r = rollout_closed_loop(
            &policy,
            &map,
            &s.context,
            &RolloutConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(k),
        )?;
        data.push_scenario(rm.featurize(&r.scenario, &map)?);
    }
    data.pairs = vec![(0, 1), (0, 2), (3, 1), (2, 3)];
    let idx: Vec<usize> = (0..data.len()).collect();
    let (_, grads) = batch_loss(&rm, &data, &idx)?;
    let mut rm_worst: f64 = 0.0;
    for _ in 0..120 {
        let i = rng.random_range(0..grads.len());
        let mut plus = rm.clone();
        plus.trunk.params_mut()[i] += h;
        let mut minus = rm.clone();
        minus.trunk.params_mut()[i] -= h;
        let fd =
            (batch_loss(&plus, &data, &idx)?.0 - batch_loss(&minus, &data, &idx)?.0) / (2.0 * h);
        rm_worst = rm_worst.max(relative(fd, grads[i]));
    }

    let demos = Demonstrations::from_scenarios(&policy.features, &[(&map, &s.ground_truth)])?;
    let (x, y) = demos.subset(&(0..64).collect::<Vec<_>>());
    let (_, g) = policy.bc_loss(x.clone(), &y)?;
    let loss = |p: &TrafficPolicy| p.bc_loss(x.clone(), &y).map(|r| r.0);
    let mut bc_worst: f64 = 0.0;
    for k in 0..120 {
        let enc = k % 2 == 0;
        let n = if enc {
            g.encoder.len()
        } else {
            g.decoder.len()
        };
        let i = rng.random_range(0..n);
        let (mut plus, mut minus) = (policy.clone(), policy.clone());
        let (pp, mp, an) = if enc {
            (&mut plus.encoder, &mut minus.encoder, g.encoder[i])
        } else {
            (&mut plus.decoder, &mut minus.decoder, g.decoder[i])
        };
        pp.params_mut()[i] += h;
        mp.params_mut()[i] -= h;
        let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        bc_worst = bc_worst.max(relative(fd, an));
    }
    ensure!(
        rm_worst < 1e-4 && bc_worst < 1e-4,
        "max relative error rm {rm_worst:.2e}, bc {bc_worst:.2e}"
    );
    Ok(format!(
        "120 coords each, max rel err rm {rm_worst:.1e}, bc {bc_worst:.1e}"
    ))
}

fn pair_count_law() -> Result<String> {
    let s = scene(2, 3, RoadKind::Straight)?;
    let model = |i: usize| Scenario {
        sample_id: sample_id(i),
        source: Source::Model,
        ..s.ground_truth.clone()
    };
    let mut runner = TestRunner::new(RunnerConfig::with_cases(1000));
    runner
        .run(
            &(2usize..=10, 0usize..10, any::<bool>()),
            |(n, pick, none)| {
                let batch = ScenarioBatch {
                    batch_id: "b".into(),
                    context_id: s.context.scene_id.clone(),
                    map: s.map.clone(),
                    scenarios: (0..n).map(model).collect(),
                    ground_truth: s.ground_truth.clone(),
                };
                let choice = (!none).then_some(pick % n);
                let label = Label {
                    batch_id: "b".into(),
                    choice,
                    labeler: Labeler::Human,
                    timestamp: 0,
                };
                let pairs = pairs_from_label(&batch, &label)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                match choice {
                    Some(i) => {
                        prop_assert_eq!(pairs.len(), n - 1);
                        prop_assert!(pairs
                            .iter()
                            .all(|p| p.winner == sample_id(i) && p.loser != p.winner));
                    }
                    None => {
                        prop_assert_eq!(pairs.len(), n);
                        prop_assert!(pairs.iter().all(|p| p.winner == GT_SAMPLE));
                    }
                }
                Ok(())
            },
        )
        .map_err(|e| anyhow!("{e}"))?;
    Ok("1000 cases, 0 violations".into())
}

const UNITS: usize = 8;

fn compositions(bins: usize, units: usize) -> Vec<Vec<usize>> {
    if bins == 1 {
        return vec![vec![units]];
    }
    (0..=units)
        .flat_map(|k| {
            compositions(bins - 1, units - k)
                .into_iter()
                .map(move |mut rest| {
                    rest.insert(0, k);
                    rest
                })
        })
        .collect()
}

/// Minimum-cost assignment of every source unit to a destination bin.
fn transport_oracle(a: &[usize], b: &[usize], pos: &[f64]) -> f64 {
    fn best(
        i: usize,
        src: &[usize],
        left: &mut [usize],
        pos: &[f64],
        memo: &mut HashMap<u64, f64>,
    ) -> f64 {
        if i == src.len() {
            return 0.0;
        }
        let key = left
            .iter()
            .fold(0u64, |k, &m| k * (UNITS as u64 + 1) + m as u64);
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let mut min = f64::INFINITY;
        for j in 0..left.len() {
            if left[j] > 0 {
                left[j] -= 1;
                min = min.min((pos[src[i]] - pos[j]).abs() + best(i + 1, src, left, pos, memo));
                left[j] += 1;
            }
        }
        memo.insert(key, min);
        min
    }
    let src: Vec<usize> = a
        .iter()
        .enumerate()
        .flat_map(|(i, &m)| std::iter::repeat_n(i, m))
        .collect();
    best(0, &src, &mut b.to_vec(), pos, &mut HashMap::new()) / UNITS as f64
}

fn wasserstein_oracle() -> Result<String> {
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for bins in 1..=5 {
        let hists = compositions(bins, UNITS);
        let expected = (1..bins).fold(1usize, |c, k| c * (UNITS + k) / k);
        ensure!(
            hists.len() == expected,
            "{} compositions into {bins} bins, expected {expected}",
            hists.len()
        );
        for width in [1.0, 0.35] {
            let edges: Vec<f64> = (0..=bins).map(|k| 1.5 + k as f64 * width).collect();
            let h = |u: &[usize]| {
                Histogram::new(
                    edges.clone(),
                    u.iter().map(|&m| m as f64 / UNITS as f64).collect(),
                )
            };
            for a in &hists {
                for b in &hists {
                    let w = wasserstein1(&h(a)?, &h(b)?)?;
                    worst = worst.max((w - transport_oracle(a, b, &edges)).abs());
                    checked += 1;
                }
            }
        }
    }
    ensure!(worst < 1e-9, "max gap to exhaustive transport {worst:e}");

    let masses = |n: usize| {
        prop::collection::vec(0.0..1.0f64, n).prop_filter_map("zero mass", |m| {
            let t: f64 = m.iter().sum();
            (t > 1e-6).then(|| m.iter().map(|x| x / t).collect::<Vec<f64>>())
        })
    };
    let strategy =
        (1usize..12).prop_flat_map(move |n| (masses(n), masses(n), masses(n), 0.5..20.0f64));
    TestRunner::new(RunnerConfig::with_cases(1000))
        .run(&strategy, |(a, b, c, max)| {
            let edges: Vec<f64> = (0..=a.len())
                .map(|k| k as f64 * max / a.len() as f64)
                .collect();
            let h = |m: &Vec<f64>| Histogram::new(edges.clone(), m.clone()).unwrap();
            let w = |x: &Histogram, y: &Histogram| wasserstein1(x, y).unwrap();
            let (ha, hb, hc) = (h(&a), h(&b), h(&c));
            prop_assert_eq!(w(&ha, &ha), 0.0);
            prop_assert!((w(&ha, &hb) - w(&hb, &ha)).abs() < 1e-12);
            prop_assert!(w(&ha, &hb) <= w(&ha, &hc) + w(&hc, &hb) + 1e-12);
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9) {
                prop_assert!(w(&ha, &hb) > 0.0);
            }
            Ok(())
        })
        .map_err(|e| anyhow!("{e}"))?;
    Ok(format!(
        "{checked} exhaustive pairs (max gap {worst:.1e}), 1000 axiom triples"
    ))
}

fn dynamics_oracle() -> Result<String> {
    let lim = ActionLimits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let mut coarse = AgentState::new(
            0.0,
            0.0,
            rng.random_range(3.5..20.0),
            rng.random_range(-3.1..3.1),
        );
        let mut fine = coarse;
        for _ in 0..10 {
            let a = Action::new(
                rng.random_range(-lim.accel_max..=lim.accel_max),
                rng.random_range(-lim.yaw_rate_max..=lim.yaw_rate_max),
            );
            coarse = step_unicycle(coarse, a, DT)?;
            for _ in 0..1000 {
                fine = step_unicycle(fine, a, DT / 1000.0)?;
            }
        }
        worst = worst.max((coarse.x - fine.x).hypot(coarse.y - fine.y));
    }
    ensure!(worst < 1e-3, "max 1 s gap {worst:e} m");

    let policy = TrafficPolicy::new(&PolicyConfig::default(), 8)?;
    let mut replayed = 0;
    for (seed, kind) in [
        (31, RoadKind::Straight),
        (32, RoadKind::Curve),
        (33, RoadKind::Merge),
    ] {
        let s = scene(seed, 5, kind)?;
        let map = PreparedMap::new(&s.map)?;
        let r = rollout_closed_loop(
            &policy,
            &map,
            &s.context,
            &RolloutConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        for rec in &r.records {
            let track = &r.scenario.agents[rec.agent].states;
            let next = step_unicycle(
                track[rec.t],
                policy.limits.clip(Action::new(rec.raw[0], rec.raw[1])),
                DT,
            )?;
            ensure!(
                next == track[rec.t + 1],
                "agent {} step {} does not replay",
                rec.agent,
                rec.t
            );
            replayed += 1;
        }
    }
    Ok(format!(
        "300 random plans within {worst:.1e} m, {replayed} logged steps replay exactly"
    ))
}

fn rollout_arithmetic() -> Result<String> {
    let cfg = RolloutConfig::default();
    ensure!(
        cfg.total_steps()? == 100 && cfg.cycles()? == 20,
        "config gives {} steps / {} cycles",
        cfg.total_steps()?,
        cfg.cycles()?
    );
    let policy = TrafficPolicy::new(&PolicyConfig::default(), 9)?;
    let s = scene(41, 4, RoadKind::Curve)?;
    let map = PreparedMap::new(&s.map)?;
    let r = rollout_closed_loop(
        &policy,
        &map,
        &s.context,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(41),
    )?;
    let hist = s.context.history[0].states.len();
    for (i, a) in r.scenario.agents.iter().enumerate() {
        ensure!(
            a.states.len() - hist == 100,
            "agent {i} logged {} future steps",
            a.states.len() - hist
        );
        let mut ts: Vec<usize> = r
            .records
            .iter()
            .filter(|rec| rec.agent == i)
            .map(|rec| rec.t)
            .collect();
        ts.sort_unstable();
        ensure!(
            ts == (hist - 1..hist + 99).collect::<Vec<_>>(),
            "agent {i} actions not contiguous"
        );
    }
    ensure!(r.plan_cycles == 20, "{} plan cycles", r.plan_cycles);
    Ok(format!(
        "{} agents x 100 steps, 20 plan cycles",
        r.scenario.agents.len()
    ))
}

fn files(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root)?.to_path_buf(),
                    std::fs::read(&path)?,
                );
            }
        }
    }
    Ok(out)
}

fn repro(dir: &Path, seed: u64) -> Result<()> {
    let status = Command::new(env!("CARGO_BIN_EXE_trafficrlhf"))
        .arg("--data-dir")
        .arg(dir)
        .args(["repro", "--seed", &seed.to_string()])
        .stdout(std::process::Stdio::null())
        .status()
        .context("spawning trafficrlhf")?;
    ensure!(status.success(), "repro exited with {status}");
    Ok(())
}

fn determinism(a: &Path, b: &Path) -> Result<String> {
    let (fa, fb) = (files(a)?, files(b)?);
    ensure!(fa.keys().eq(fb.keys()), "runs wrote different file sets");
    let differing: Vec<_> = fa
        .iter()
        .filter(|(k, v)| fb[*k] != **v)
        .map(|(k, _)| k.display().to_string())
        .collect();
    ensure!(differing.is_empty(), "differing files: {differing:?}");
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

fn rm_curve(layout: &Layout) -> Result<String> {
    let text = std::fs::read_to_string(layout.rm_sweep())?;
    let records: Vec<SweepRecord> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    let at = |size: usize| records.iter().filter(move |r| r.size == size);
    ensure!(
        at(200).count() == 5 && at(50).count() == 5,
        "expected 5 seeds at sizes 50 and 200"
    );
    ensure!(
        at(200).all(|r| r.train_pairs == 200),
        "fewer than 200 training pairs available"
    );
    let curve = learning_curve(&records);
    let mean = |size: usize| {
        curve
            .iter()
            .find(|p| p.size == size)
            .map(|p| p.mean)
            .unwrap_or(f64::NAN)
    };
    let low = at(200).map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
    ensure!(low >= 0.80, "accuracy at 200 pairs drops to {low:.3}");
    ensure!(
        mean(200) >= mean(50),
        "mean at 200 {:.3} < mean at 50 {:.3}",
        mean(200),
        mean(50)
    );
    Ok(format!(
        "acc@200 min {low:.3} mean {:.3}, mean@50 {:.3}",
        mean(200),
        mean(50)
    ))
}

fn finetune_effect(layout: &Layout) -> Result<String> {
    let rows: Vec<ReportRow> = read_json(&layout.eval_json())?;
    let row = |v: &str| {
        rows.iter()
            .find(|r| r.variant == v)
            .map(|r| r.report)
            .ok_or_else(|| anyhow!("no {v} row"))
    };
    let (base, tuned) = (row("baseline")?, row("tuned")?);
    let reduction = 1.0 - tuned.fail / base.fail;
    ensure!(
        base.fail > 0.0 && reduction >= 0.30,
        "fail {:.3} -> {:.3}",
        base.fail,
        tuned.fail
    );
    ensure!(
        tuned.reward_cost < base.reward_cost,
        "reward_cost {:.4} -> {:.4}",
        base.reward_cost,
        tuned.reward_cost
    );
    ensure!(
        tuned.real <= 1.10 * base.real,
        "real {:.4} -> {:.4}",
        base.real,
        tuned.real
    );
    Ok(format!(
        "fail {:.3} -> {:.3} (-{:.0}%), reward_cost {:.4} -> {:.4}, real {:.4} -> {:.4}",
        base.fail,
        tuned.fail,
        100.0 * reduction,
        base.reward_cost,
        tuned.reward_cost,
        base.real,
        tuned.real
    ))
}

fn ablation(layout: &Layout, cfg: &PipelineConfig) -> Result<String> {
    let rows = pipeline::ablate(layout, cfg)?;
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    ensure!(
        names == ["frozen-encoder", "frozen-decoder", "full"],
        "rows {names:?}"
    );
    let table = std::fs::read_to_string(layout.ablation_txt())?;
    ensure!(
        table.lines().count() == 4,
        "table has {} lines",
        table.lines().count()
    );

    let bc: TrafficPolicy = read_json(&layout.policy_bc())?;
    let mut checkpoints = 0;
    for freeze in [FreezeMode::Encoder, FreezeMode::Decoder] {
        let mut paths: Vec<PathBuf> = (1..=cfg.finetune.epochs)
            .map(|e| layout.epoch_checkpoint(freeze, e))
            .collect();
        paths.push(layout.tuned(freeze));
        for path in paths {
            let p: TrafficPolicy = read_json(&path)?;
            let (kept, moved) = match freeze {
                FreezeMode::Encoder => ((&p.encoder, &bc.encoder), (&p.decoder, &bc.decoder)),
                _ => ((&p.decoder, &bc.decoder), (&p.encoder, &bc.encoder)),
            };
            let same = kept
                .0
                .params()
                .iter()
                .zip(kept.1.params())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "{} changed frozen parameters", path.display());
            ensure!(
                moved.0.params() != moved.1.params(),
                "{} left trainable half untouched",
                path.display()
            );
            checkpoints += 1;
        }
    }
    Ok(format!(
        "3 rows, frozen halves bit-identical in {checkpoints} checkpoints"
    ))
}

struct Report {
    failed: usize,
}

impl Report {
    fn run(&mut self, name: &str, check: impl FnOnce() -> Result<String>) {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<26} {detail} [{secs:.1}s]"),
            Err(e) => {
                self.failed += 1;
                println!("FAIL  {name:<26} {e:#} [{secs:.1}s]");
            }
        }
    }
}

fn main() {
    let mut report = Report { failed: 0 };
    report.run("pair loss values", pair_loss_values);
    report.run("gradient integrity", gradient_integrity);
    report.run("pair-count law", pair_count_law);
    report.run("wasserstein oracle", wasserstein_oracle);
    report.run("dynamics oracle", dynamics_oracle);
    report.run("rollout arithmetic", rollout_arithmetic);

    let tmp = tempfile::tempdir().expect("tempdir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = repro(&a, DESK_SEED);
    if let Err(e) = &first {
        println!("FAIL  desk pipeline run            {e:#}");
        report.failed += 1;
    }
    report.run("determinism", || {
        first
            .as_ref()
            .map_err(|e| anyhow!("first run failed: {e}"))?;
        repro(&b, DESK_SEED)?;
        determinism(&a, &b)
    });
    let layout = Layout::new(&a);
    report.run("rm learning curve", || rm_curve(&layout));
    report.run("fine-tuning effect", || finetune_effect(&layout));
    let cfg = PipelineConfig::preset(Preset::Desk, DESK_SEED);
    report.run("ablation harness", || ablation(&layout, &cfg));

    if report.failed > 0 {
        println!("{} criteria failed", report.failed);
        std::process::exit(1);
    }
}
