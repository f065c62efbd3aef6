//! Pipeline stages over one data directory. Every stage reads the artifacts
//! of earlier stages from disk and writes its own, so stages can be run one
//! at a time from the command line or chained by `repro`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use trafficrlhf_core::finetune::{
    evaluate_policy, finetune_loop, prepare_scenes, EpochRecord, FinetuneConfig, FreezeMode,
};
use trafficrlhf_core::metrics::{format_table, EvalReport, HistogramSpec, ReportRow};
use trafficrlhf_core::policy::{
    pretrain_bc, BcConfig, Demonstrations, PolicyConfig, RolloutConfig, TrafficPolicy,
};
use trafficrlhf_core::preference::{
    append_jsonl, load_jsonl, make_batch, oracle_label, pairs_from_label, split_by_context, Label,
    OracleConfig, PreferencePair, ScenarioBatch,
};
use trafficrlhf_core::reward::{
    future_window, train_rm, validate_rm, RewardConfig, RewardModel, RmDataset, RmTrainConfig,
};
use trafficrlhf_core::scenegen::{corpus_specs, generate_corpus, GeneratorConfig, Scene};
use trafficrlhf_core::world::PreparedMap;
use trafficrlhf_core::{Error, Result};

use crate::service::LabelStores;

/// Where each artifact lives under the data directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.at("config.json")
    }
    pub fn train_scenes(&self) -> PathBuf {
        self.at("scenes/train.jsonl")
    }
    pub fn probe_scenes(&self) -> PathBuf {
        self.at("scenes/probe.jsonl")
    }
    pub fn policy_bc(&self) -> PathBuf {
        self.at("policy/bc.json")
    }
    pub fn bc_curve(&self) -> PathBuf {
        self.at("policy/bc_curve.json")
    }
    pub fn batches(&self) -> PathBuf {
        self.at("labels/batches.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.at("labels/labels.jsonl")
    }
    pub fn pairs(&self) -> PathBuf {
        self.at("labels/pairs.jsonl")
    }
    pub fn rm_checkpoint(&self, size: usize, seed: u64) -> PathBuf {
        self.at(&format!("rm/size{size:04}-seed{seed}.json"))
    }
    pub fn rm_sweep(&self) -> PathBuf {
        self.at("rm/sweep.jsonl")
    }
    pub fn rm_curve(&self) -> PathBuf {
        self.at("rm/curve.txt")
    }
    pub fn rm_selected(&self) -> PathBuf {
        self.at("rm/selected.json")
    }
    pub fn finetune_dir(&self, freeze: FreezeMode) -> PathBuf {
        self.at(&format!("finetune/{}", freeze.name()))
    }
    pub fn history(&self, freeze: FreezeMode) -> PathBuf {
        self.finetune_dir(freeze).join("history.jsonl")
    }
    pub fn epoch_checkpoint(&self, freeze: FreezeMode, epoch: usize) -> PathBuf {
        self.finetune_dir(freeze)
            .join(format!("epoch-{epoch:03}.json"))
    }
    pub fn tuned(&self, freeze: FreezeMode) -> PathBuf {
        self.finetune_dir(freeze).join("policy.json")
    }
    pub fn eval_json(&self) -> PathBuf {
        self.at("reports/eval.json")
    }
    pub fn eval_txt(&self) -> PathBuf {
        self.at("reports/eval.txt")
    }
    pub fn ablation_json(&self) -> PathBuf {
        self.at("reports/ablation.json")
    }
    pub fn ablation_txt(&self) -> PathBuf {
        self.at("reports/ablation.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.at("manifest.json")
    }

    pub fn stores(&self) -> LabelStores {
        LabelStores {
            batches: self.batches(),
            labels: self.labels(),
            pairs: self.pairs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Minutes on one core: 64 training scenes, 50 fine-tuning epochs.
    Desk,
    /// Full size: 500 + 100 scenes, the wide reward head,
    /// 70 fine-tuning epochs.
    Full,
    /// Seconds; exercises every stage on a handful of scenes.
    Smoke,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            "smoke" => Ok(Preset::Smoke),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (desk, full, smoke)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenes: usize,
    pub eval_scenes: usize,
    /// Inclusive range of agents per scene.
    pub agents: (usize, usize),
    pub generator: GeneratorConfig,
    pub policy: PolicyConfig,
    pub bc: BcConfig,
    pub rollout: RolloutConfig,
    /// Futures per labeling batch.
    pub samples: usize,
    /// Batches drawn from each training context.
    pub batches_per_scene: usize,
    pub oracle: OracleConfig,
    pub val_fraction: f64,
    pub reward: RewardConfig,
    pub rm_train: RmTrainConfig,
    pub sweep_sizes: Vec<usize>,
    pub sweep_seeds: u64,
    /// Training-set size of the reward model handed to fine-tuning.
    pub rm_size: usize,
    pub finetune: FinetuneConfig,
    pub histograms: HistogramSpec,
}

impl PipelineConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let desk = PipelineConfig {
            seed,
            scenes: 64,
            eval_scenes: 24,
            agents: (3, 6),
            generator: GeneratorConfig::default(),
            policy: PolicyConfig::default(),
            bc: BcConfig {
                epochs: 20,
                ..BcConfig::default()
            },
            rollout: RolloutConfig::default(),
            samples: 5,
            batches_per_scene: 2,
            oracle: OracleConfig::default(),
            val_fraction: 0.2,
            // One narrow layer held near its linear regime by strong decay;
            // deeper or unregularized trunks lose accuracy as pairs are added.
            reward: RewardConfig {
                hidden: vec![32],
                ..RewardConfig::default()
            },
            rm_train: RmTrainConfig {
                epochs: 10,
                batch_size: 8,
                weight_decay: 10.0,
                ..RmTrainConfig::default()
            },
            sweep_sizes: vec![50, 100, 200, 400],
            sweep_seeds: 5,
            rm_size: 200,
            // The decayed reward model scores within a few hundredths of
            // zero, so alpha is scaled up to keep its segment rewards and
            // value targets near one.
            finetune: FinetuneConfig {
                alpha: 100.0,
                epochs: 50,
                ..FinetuneConfig::default()
            },
            histograms: HistogramSpec::default(),
        };
        let cfg = match preset {
            Preset::Desk => desk,
            Preset::Full => PipelineConfig {
                scenes: 500,
                eval_scenes: 100,
                bc: BcConfig::default(),
                reward: RewardConfig::wide(),
                finetune: FinetuneConfig::default(),
                ..desk
            },
            Preset::Smoke => PipelineConfig {
                scenes: 6,
                eval_scenes: 3,
                agents: (2, 3),
                bc: BcConfig {
                    epochs: 2,
                    ..BcConfig::default()
                },
                samples: 3,
                rm_train: RmTrainConfig {
                    epochs: 2,
                    batch_size: 4,
                    ..RmTrainConfig::default()
                },
                sweep_sizes: vec![4, 8],
                sweep_seeds: 2,
                rm_size: 8,
                finetune: FinetuneConfig {
                    epochs: 2,
                    scenes_per_epoch: 2,
                    rollouts_per_scene: 1,
                    ppo_iters: 1,
                    bc_batch: 64,
                    ..FinetuneConfig::default()
                },
                ..desk
            },
        };
        cfg.with_seed(seed)
    }

    /// Sets the run seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.bc.seed = sub_seed(seed, "bc");
        self.rm_train.seed = sub_seed(seed, "rm-train");
        self.finetune.seed = sub_seed(seed, "finetune");
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scenes == 0 || self.eval_scenes == 0 {
            return bad("scenes and eval_scenes must be positive".into());
        }
        if self.agents.0 == 0 || self.agents.0 > self.agents.1 {
            return bad(format!(
                "agents range {:?} is empty or starts at zero",
                self.agents
            ));
        }
        if self.samples < 2 {
            return bad(format!("samples must be at least 2, got {}", self.samples));
        }
        if self.batches_per_scene == 0 {
            return bad("batches_per_scene must be positive".into());
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return bad(format!(
                "val_fraction {} must lie in (0, 1)",
                self.val_fraction
            ));
        }
        if self.sweep_seeds == 0 || self.sweep_sizes.contains(&0) || self.rm_size == 0 {
            return bad("sweep sizes, sweep_seeds and rm_size must be positive".into());
        }
        self.rollout.validate()?;
        self.reward.validate()?;
        FinetuneConfig {
            rollout: self.rollout,
            ..self.finetune.clone()
        }
        .validate()
    }

    fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            rollout: self.rollout,
            histograms: self.histograms.clone(),
            ..self.finetune.clone()
        }
    }
}

/// A seed for one pipeline component, derived from the run seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&d[..8]);
    u64::from_le_bytes(head)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r).map_err(|e| Error::Data(e.to_string()))?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Like `load_jsonl`, but a missing or empty file names the stage that
/// produces it.
fn load_required<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} is missing; run `{producer}` first",
            path.display()
        )));
    }
    let records = load_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{} is empty; run `{producer}` first",
            path.display()
        )));
    }
    Ok(records)
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{} is missing; run `{producer}` first",
            path.display()
        )))
    }
}

pub fn load_config(layout: &Layout) -> Result<PipelineConfig> {
    require(&layout.config(), "gen")?;
    let cfg: PipelineConfig = read_json(&layout.config())?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_policy(path: &Path) -> Result<TrafficPolicy> {
    require(path, "pretrain")?;
    read_json(path)
}

pub fn load_rm(path: &Path) -> Result<RewardModel> {
    require(path, "train-rm")?;
    read_json(path)
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    load_required(path, "gen")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GenSummary {
    pub train: usize,
    pub probe: usize,
}

/// Writes the configuration and both scene corpora.
pub fn gen(layout: &Layout, cfg: &PipelineConfig) -> Result<GenSummary> {
    cfg.validate()?;
    let base = sub_seed(cfg.seed, "scenes") >> 24;
    let train = generate_corpus(&corpus_specs(base, cfg.scenes, cfg.agents), &cfg.generator)?;
    let probe_base = base + cfg.scenes as u64;
    let probe = generate_corpus(
        &corpus_specs(probe_base, cfg.eval_scenes, cfg.agents),
        &cfg.generator,
    )?;
    write_json(&layout.config(), cfg)?;
    write_jsonl(&layout.train_scenes(), &train)?;
    write_jsonl(&layout.probe_scenes(), &probe)?;
    Ok(GenSummary {
        train: train.len(),
        probe: probe.len(),
    })
}

fn demonstrations(cfg: &PipelineConfig, scenes: &[Scene]) -> Result<Demonstrations> {
    let maps = scenes
        .iter()
        .map(|s| PreparedMap::new(&s.map))
        .collect::<Result<Vec<_>>>()?;
    let demos: Vec<_> = maps
        .iter()
        .zip(scenes)
        .map(|(m, s)| (m, &s.ground_truth))
        .collect();
    Demonstrations::from_scenarios(&cfg.policy.features, &demos)
}

/// Behavior-clones the initial policy on the training ground truth. Returns
/// the per-epoch loss curve.
pub fn pretrain(layout: &Layout, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let scenes = load_scenes(&layout.train_scenes())?;
    let demos = demonstrations(cfg, &scenes)?;
    let init = TrafficPolicy::new(&cfg.policy, sub_seed(cfg.seed, "policy-init"))?;
    let (policy, curve) = pretrain_bc(&init, &demos, &cfg.bc)?;
    write_json(&layout.policy_bc(), &policy)?;
    write_json(&layout.bc_curve(), &curve)?;
    Ok(curve)
}

/// Draws `batches_per_scene` best-of-N batches per training context. Stale
/// labels and pairs from an earlier batch set are removed.
pub fn batch(layout: &Layout, cfg: &PipelineConfig) -> Result<usize> {
    let scenes = load_scenes(&layout.train_scenes())?;
    let policy = load_policy(&layout.policy_bc())?;
    let base = sub_seed(cfg.seed, "batch");
    let jobs: Vec<(usize, usize)> = (0..scenes.len())
        .flat_map(|i| (0..cfg.batches_per_scene).map(move |b| (i, b)))
        .collect();
    let batches = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, b))| {
            let s = &scenes[i];
            let id = format!("{}-b{b}", s.spec.scene_id());
            make_batch(
                &policy,
                &id,
                &s.context,
                &s.ground_truth,
                cfg.samples,
                &cfg.rollout,
                base.wrapping_add(k as u64 * 1024),
            )
        })
        .collect::<Result<Vec<ScenarioBatch>>>()?;
    for stale in [layout.labels(), layout.pairs()] {
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
    }
    write_jsonl(&layout.batches(), &batches)?;
    Ok(batches.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LabelSummary {
    pub labeled: usize,
    pub none: usize,
    pub pairs: usize,
}

/// Labels every batch that has no label yet with the synthetic oracle.
pub fn label_oracle(layout: &Layout, cfg: &PipelineConfig) -> Result<LabelSummary> {
    let batches: Vec<ScenarioBatch> = load_required(&layout.batches(), "batch")?;
    let done: HashSet<String> = load_jsonl::<Label>(&layout.labels())?
        .into_iter()
        .map(|l| l.batch_id)
        .collect();
    let todo: Vec<&ScenarioBatch> = batches
        .iter()
        .filter(|b| !done.contains(&b.batch_id))
        .collect();
    let labels = todo
        .par_iter()
        .map(|b| oracle_label(b, &cfg.oracle))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for (b, l) in todo.iter().zip(&labels) {
        pairs.extend(pairs_from_label(b, l)?);
    }
    append_jsonl(&layout.pairs(), &pairs)?;
    append_jsonl(&layout.labels(), &labels)?;
    Ok(LabelSummary {
        labeled: labels.len(),
        none: labels.iter().filter(|l| l.choice.is_none()).count(),
        pairs: pairs.len(),
    })
}

/// Step features of every scenario the pairs mention, with train and
/// validation pair indices into them.
pub struct PreferenceData {
    pub train: RmDataset,
    pub val: RmDataset,
}

pub fn preference_data(layout: &Layout, cfg: &PipelineConfig) -> Result<PreferenceData> {
    let batches: Vec<ScenarioBatch> = load_required(&layout.batches(), "batch")?;
    let pairs: Vec<PreferencePair> = load_required(&layout.pairs(), "label")?;
    let by_id: HashMap<&str, &ScenarioBatch> =
        batches.iter().map(|b| (b.batch_id.as_str(), b)).collect();
    let mut wanted: Vec<(&str, &str)> = Vec::new();
    let mut seen = HashSet::new();
    for p in &pairs {
        if !by_id.contains_key(p.batch_id.as_str()) {
            return Err(Error::Data(format!(
                "pair refers to unknown batch {}",
                p.batch_id
            )));
        }
        for id in [&p.winner, &p.loser] {
            if seen.insert((p.batch_id.as_str(), id.as_str())) {
                wanted.push((p.batch_id.as_str(), id.as_str()));
            }
        }
    }
    let scorer = RewardModel::zeros(&cfg.reward)?;
    let maps: HashMap<&str, PreparedMap> = batches
        .iter()
        .map(|b| Ok((b.batch_id.as_str(), PreparedMap::new(&b.map)?)))
        .collect::<Result<_>>()?;
    let features = wanted
        .par_iter()
        .map(|&(b, s)| {
            let scenario = by_id[b]
                .sample(s)
                .ok_or_else(|| Error::Data(format!("batch {b} has no sample {s}")))?;
            scorer.featurize(&future_window(scenario), &maps[b])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = RmDataset::default();
    let mut index = HashMap::new();
    for (key, f) in wanted.iter().zip(features) {
        index.insert(*key, all.push_scenario(f));
    }
    let (train, val) = split_by_context(&pairs, cfg.val_fraction);
    let to_idx = |ps: &[PreferencePair]| -> Vec<(usize, usize)> {
        ps.iter()
            .map(|p| {
                (
                    index[&(p.batch_id.as_str(), p.winner.as_str())],
                    index[&(p.batch_id.as_str(), p.loser.as_str())],
                )
            })
            .collect()
    };
    Ok(PreferenceData {
        train: RmDataset {
            scenarios: all.scenarios.clone(),
            pairs: to_idx(&train),
        },
        val: RmDataset {
            scenarios: all.scenarios,
            pairs: to_idx(&val),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub size: usize,
    pub seed: u64,
    pub accuracy: f64,
    /// Pairs actually used; below `size` when the training split is smaller.
    pub train_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub size: usize,
    pub mean: f64,
    pub variance: f64,
}

pub fn learning_curve(records: &[SweepRecord]) -> Vec<CurvePoint> {
    let mut sizes: Vec<usize> = records.iter().map(|r| r.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|size| {
            let acc: Vec<f64> = records
                .iter()
                .filter(|r| r.size == size)
                .map(|r| r.accuracy)
                .collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let variance = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            CurvePoint {
                size,
                mean,
                variance,
            }
        })
        .collect()
}

pub fn format_curve(points: &[CurvePoint]) -> String {
    let mut out = format!("{:>6}  {:>8}  {:>10}\n", "size", "mean", "variance");
    for p in points {
        out.push_str(&format!(
            "{:>6}  {:>8.4}  {:>10.6}\n",
            p.size, p.mean, p.variance
        ));
    }
    out
}

fn train_one(
    data: &PreferenceData,
    cfg: &PipelineConfig,
    size: usize,
    seed: u64,
) -> Result<(RewardModel, SweepRecord)> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(
        sub_seed(cfg.seed, "rm-subset").wrapping_add(seed),
    ));
    order.truncate(size);
    let subset = data.train.subset(&order);
    let init = RewardModel::new(
        &cfg.reward,
        sub_seed(cfg.seed, "rm-init").wrapping_add(seed),
    )?;
    let train_cfg = RmTrainConfig {
        seed: cfg.rm_train.seed.wrapping_add(seed),
        ..cfg.rm_train
    };
    let (rm, _) = train_rm(&init, &subset, &train_cfg)?;
    let accuracy = validate_rm(&rm, &data.val)?;
    Ok((
        rm,
        SweepRecord {
            size,
            seed,
            accuracy,
            train_pairs: subset.len(),
        },
    ))
}

/// Trains one reward model per (size, seed), writes every checkpoint and
/// the sweep report, and selects the model at `rm_size`, seed 0.
pub fn train_rm_sweep(layout: &Layout, cfg: &PipelineConfig) -> Result<Vec<SweepRecord>> {
    let data = preference_data(layout, cfg)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data(format!(
            "split left {} training and {} validation pairs; label more batches",
            data.train.len(),
            data.val.len()
        )));
    }
    let mut jobs: Vec<(usize, u64)> = cfg
        .sweep_sizes
        .iter()
        .flat_map(|&size| (0..cfg.sweep_seeds).map(move |seed| (size, seed)))
        .collect();
    if !cfg.sweep_sizes.contains(&cfg.rm_size) {
        jobs.push((cfg.rm_size, 0));
    }
    let trained = jobs
        .par_iter()
        .map(|&(size, seed)| train_one(&data, cfg, size, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for ((size, seed), (rm, rec)) in jobs.iter().zip(&trained) {
        write_json(&layout.rm_checkpoint(*size, *seed), rm)?;
        if cfg.sweep_sizes.contains(size) {
            records.push(*rec);
        }
        if *size == cfg.rm_size && *seed == 0 {
            write_json(&layout.rm_selected(), rm)?;
        }
    }
    write_jsonl(&layout.rm_sweep(), &records)?;
    write_atomic(
        &layout.rm_curve(),
        format_curve(&learning_curve(&records)).as_bytes(),
    )?;
    Ok(records)
}

/// Fine-tunes the pretrained policy against the selected reward model,
/// checkpointing every epoch. Returns the probe history, epoch 0 first.
pub fn finetune(
    layout: &Layout,
    cfg: &PipelineConfig,
    freeze: FreezeMode,
) -> Result<Vec<EpochRecord>> {
    let policy = load_policy(&layout.policy_bc())?;
    let rm = load_rm(&layout.rm_selected())?;
    let train = load_scenes(&layout.train_scenes())?;
    let probe = load_scenes(&layout.probe_scenes())?;
    let demos = demonstrations(cfg, &train)?;
    let ft = FinetuneConfig {
        freeze,
        ..cfg.finetune_config()
    };
    let dir = layout.finetune_dir(freeze);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let history_path = layout.history(freeze);
    ensure_parent(&history_path)?;
    let out = finetune_loop(&policy, &rm, &train, &probe, &demos, &ft, |record, p| {
        append_jsonl(&history_path, std::slice::from_ref(record))?;
        if record.epoch > 0 {
            write_json(&layout.epoch_checkpoint(freeze, record.epoch), p)?;
        }
        Ok(())
    })?;
    write_json(&layout.tuned(freeze), &out.policy)?;
    Ok(out.history)
}

/// Probe-set metrics of one policy under the selected reward model.
pub fn evaluate(
    layout: &Layout,
    cfg: &PipelineConfig,
    policy: &TrafficPolicy,
) -> Result<EvalReport> {
    let rm = load_rm(&layout.rm_selected())?;
    let probe = load_scenes(&layout.probe_scenes())?;
    let prepared = prepare_scenes(&probe)?;
    evaluate_policy(
        policy,
        &rm,
        &prepared,
        &cfg.rollout,
        &cfg.histograms,
        sub_seed(cfg.seed, "eval"),
    )
}

fn write_report(json: &Path, txt: &Path, rows: &[ReportRow]) -> Result<String> {
    write_json(json, &rows)?;
    let table = format_table(rows);
    write_atomic(txt, table.as_bytes())?;
    Ok(table)
}

/// Baseline-vs-tuned table; both default to the pipeline's own checkpoints.
pub fn eval(
    layout: &Layout,
    cfg: &PipelineConfig,
    baseline: Option<&Path>,
    tuned: Option<&Path>,
) -> Result<Vec<ReportRow>> {
    let baseline = baseline.map_or_else(|| layout.policy_bc(), Path::to_path_buf);
    let tuned = tuned.map_or_else(|| layout.tuned(FreezeMode::None), Path::to_path_buf);
    let mut rows = Vec::new();
    for (variant, path) in [("baseline", &baseline), ("tuned", &tuned)] {
        require(
            path,
            if variant == "baseline" {
                "pretrain"
            } else {
                "finetune"
            },
        )?;
        let policy: TrafficPolicy = read_json(path)?;
        rows.push(ReportRow {
            variant: variant.into(),
            report: evaluate(layout, cfg, &policy)?,
        });
    }
    write_report(&layout.eval_json(), &layout.eval_txt(), &rows)?;
    Ok(rows)
}

pub fn ablation_variant(freeze: FreezeMode) -> &'static str {
    match freeze {
        FreezeMode::Encoder => "frozen-encoder",
        FreezeMode::Decoder => "frozen-decoder",
        FreezeMode::None => "full",
    }
}

/// Fine-tunes once per freeze mode and tabulates the tuned policies.
pub fn ablate(layout: &Layout, cfg: &PipelineConfig) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for freeze in FreezeMode::ALL {
        finetune(layout, cfg, freeze)?;
        let policy: TrafficPolicy = read_json(&layout.tuned(freeze))?;
        rows.push(ReportRow {
            variant: ablation_variant(freeze).into(),
            report: evaluate(layout, cfg, &policy)?,
        });
    }
    write_report(&layout.ablation_json(), &layout.ablation_txt(), &rows)?;
    Ok(rows)
}
