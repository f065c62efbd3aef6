//! Run manifests: the configuration of a run plus a content hash of every
//! artifact it produced, written by `repro`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use trafficrlhf_core::finetune::FreezeMode;
use trafficrlhf_core::{Error, Result};

use crate::pipeline::{self, Layout, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    /// Relative to the data directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn relative(layout: &Layout, path: &Path) -> Result<String> {
    let rel = path.strip_prefix(&layout.root).map_err(|_| {
        Error::InvalidState(format!("{} is outside the data directory", path.display()))
    })?;
    Ok(rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/"))
}

impl RunManifest {
    pub fn build(
        layout: &Layout,
        cfg: &PipelineConfig,
        run_id: String,
        stages: &[(&str, Vec<std::path::PathBuf>)],
    ) -> Result<Self> {
        let mut artifacts = Vec::new();
        for (stage, paths) in stages {
            for p in paths {
                artifacts.push(Artifact {
                    stage: (*stage).into(),
                    path: relative(layout, p)?,
                    sha256: sha256_file(p)?,
                });
            }
        }
        Ok(Self {
            run_id,
            seed: cfg.seed,
            config: cfg.clone(),
            artifacts,
        })
    }

    /// Checks that every artifact exists and still has its recorded hash.
    pub fn verify(&self, layout: &Layout) -> Result<()> {
        for a in &self.artifacts {
            let path = layout.root.join(&a.path);
            let actual = sha256_file(&path)?;
            if actual != a.sha256 {
                return Err(Error::Data(format!(
                    "{}: hash {actual} does not match manifest {}",
                    path.display(),
                    a.sha256
                )));
            }
        }
        Ok(())
    }
}

/// Runs every stage from an empty data directory and writes the manifest.
/// The directory must be empty or absent so no stale artifact leaks in.
pub fn repro(layout: &Layout, cfg: &PipelineConfig) -> Result<RunManifest> {
    if layout.root.exists() {
        let mut entries = fs::read_dir(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "{} is not empty; repro needs a fresh data directory",
                layout.root.display()
            )));
        }
    }
    pipeline::gen(layout, cfg)?;
    pipeline::pretrain(layout, cfg)?;
    pipeline::batch(layout, cfg)?;
    pipeline::label_oracle(layout, cfg)?;
    pipeline::train_rm_sweep(layout, cfg)?;
    let history = pipeline::finetune(layout, cfg, FreezeMode::None)?;
    pipeline::eval(layout, cfg, None, None)?;
    let free = FreezeMode::None;
    let checkpoints = (1..history.len()).map(|e| layout.epoch_checkpoint(free, e));
    let stages = vec![
        (
            "gen",
            vec![
                layout.config(),
                layout.train_scenes(),
                layout.probe_scenes(),
            ],
        ),
        ("pretrain", vec![layout.policy_bc(), layout.bc_curve()]),
        ("batch", vec![layout.batches()]),
        ("label", vec![layout.labels(), layout.pairs()]),
        (
            "train-rm",
            vec![layout.rm_sweep(), layout.rm_curve(), layout.rm_selected()],
        ),
        (
            "finetune",
            std::iter::once(layout.history(free))
                .chain(checkpoints)
                .chain(std::iter::once(layout.tuned(free)))
                .collect(),
        ),
        ("eval", vec![layout.eval_json(), layout.eval_txt()]),
    ];
    let manifest = RunManifest::build(layout, cfg, format!("repro-seed{}", cfg.seed), &stages)?;
    pipeline::write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}
