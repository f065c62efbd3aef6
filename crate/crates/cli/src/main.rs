use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use trafficrlhf_cli::exit_code;
use trafficrlhf_cli::manifest::repro;
use trafficrlhf_cli::pipeline::{
    self, format_curve, learning_curve, load_config, read_json, Layout, PipelineConfig, Preset,
};
use trafficrlhf_cli::service::{serve, LabelDesk};
use trafficrlhf_core::finetune::FreezeMode;
use trafficrlhf_core::metrics::format_table;
use trafficrlhf_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "trafficrlhf",
    version,
    about = "Preference-based realism fine-tuning for traffic policies"
)]
struct Cli {
    /// Directory holding every artifact of a run.
    #[arg(
        long,
        env = "TRAFFICRLHF_DATA_DIR",
        default_value = "data",
        global = true
    )]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the run configuration and generate training and probe scenes.
    Gen {
        #[arg(long, default_value = "desk")]
        preset: Preset,
        /// Start from this configuration file instead of a preset.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        eval_scenes: Option<usize>,
    },
    /// Behavior-clone the initial policy on the training ground truth.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Draw best-of-N rollout batches from every training context.
    Batch {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        batches_per_scene: Option<usize>,
    },
    /// Label batches with the synthetic oracle or serve them to annotators.
    Label {
        #[arg(long, value_enum, default_value = "oracle")]
        mode: LabelMode,
        #[arg(long, env = "TRAFFICRLHF_PORT", default_value_t = 8080)]
        port: u16,
        /// Seconds a served batch stays reserved for its annotator.
        #[arg(long, default_value_t = 600)]
        lease_secs: u64,
    },
    /// Train reward models over a grid of training sizes and seeds.
    TrainRm {
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
        #[arg(long)]
        seeds: Option<u64>,
        /// Training size of the model selected for fine-tuning.
        #[arg(long)]
        select_size: Option<usize>,
    },
    /// PPO fine-tuning against the selected reward model.
    Finetune {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "none")]
        freeze: FreezeMode,
    },
    /// Compare two policy checkpoints on the probe scenes.
    Eval {
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        tuned: Option<PathBuf>,
    },
    /// Fine-tune under every freeze mode and tabulate the results.
    Ablate {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the whole pipeline from one seed into an empty data directory.
    Repro {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "desk")]
        preset: Preset,
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelMode {
    Oracle,
    Serve,
}

fn base_config(
    preset: Preset,
    config: Option<&PathBuf>,
    seed: Option<u64>,
) -> Result<PipelineConfig> {
    let cfg = match config {
        Some(path) => {
            let cfg: PipelineConfig = read_json(path)?;
            let seed = seed.unwrap_or(cfg.seed);
            cfg.with_seed(seed)
        }
        None => PipelineConfig::preset(preset, seed.unwrap_or(0)),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let layout = Layout::new(&cli.data_dir);
    match cli.command {
        Command::Gen {
            preset,
            config,
            seed,
            scenes,
            eval_scenes,
        } => {
            let mut cfg = base_config(preset, config.as_ref(), seed)?;
            cfg.scenes = scenes.unwrap_or(cfg.scenes);
            cfg.eval_scenes = eval_scenes.unwrap_or(cfg.eval_scenes);
            let s = pipeline::gen(&layout, &cfg)?;
            println!(
                "generated {} training and {} probe scenes in {}",
                s.train,
                s.probe,
                layout.root.display()
            );
        }
        Command::Pretrain { epochs } => {
            let mut cfg = load_config(&layout)?;
            cfg.bc.epochs = epochs.unwrap_or(cfg.bc.epochs);
            let curve = pipeline::pretrain(&layout, &cfg)?;
            let last = curve.last().copied().unwrap_or(f64::NAN);
            println!(
                "behavior cloning: {} epochs, final loss {last:.4}",
                curve.len()
            );
        }
        Command::Batch {
            samples,
            batches_per_scene,
        } => {
            let mut cfg = load_config(&layout)?;
            cfg.samples = samples.unwrap_or(cfg.samples);
            cfg.batches_per_scene = batches_per_scene.unwrap_or(cfg.batches_per_scene);
            cfg.validate()?;
            let n = pipeline::batch(&layout, &cfg)?;
            println!("wrote {n} batches of {} samples", cfg.samples);
        }
        Command::Label {
            mode,
            port,
            lease_secs,
        } => {
            let cfg = load_config(&layout)?;
            match mode {
                LabelMode::Oracle => {
                    let s = pipeline::label_oracle(&layout, &cfg)?;
                    println!(
                        "labeled {} batches ({} none realistic), {} pairs",
                        s.labeled, s.none, s.pairs
                    );
                }
                LabelMode::Serve => {
                    let desk = LabelDesk::open(layout.stores(), Duration::from_secs(lease_secs))?;
                    let rt =
                        tokio::runtime::Runtime::new().map_err(|e| Error::io(&layout.root, e))?;
                    rt.block_on(serve(desk, port))
                        .map_err(|e| Error::InvalidState(format!("label service: {e:#}")))?;
                }
            }
        }
        Command::TrainRm {
            sweep,
            seeds,
            select_size,
        } => {
            let mut cfg = load_config(&layout)?;
            cfg.sweep_sizes = sweep.unwrap_or(cfg.sweep_sizes);
            cfg.sweep_seeds = seeds.unwrap_or(cfg.sweep_seeds);
            cfg.rm_size = select_size.unwrap_or(cfg.rm_size);
            cfg.validate()?;
            let records = pipeline::train_rm_sweep(&layout, &cfg)?;
            print!("{}", format_curve(&learning_curve(&records)));
        }
        Command::Finetune {
            alpha,
            epochs,
            freeze,
        } => {
            let mut cfg = load_config(&layout)?;
            cfg.finetune.alpha = alpha.unwrap_or(cfg.finetune.alpha);
            cfg.finetune.epochs = epochs.unwrap_or(cfg.finetune.epochs);
            cfg.validate()?;
            for r in pipeline::finetune(&layout, &cfg, freeze)? {
                println!(
                    "epoch {:>3}  fail {:.4}  real {:.4}  reward_cost {:.4}",
                    r.epoch, r.fail, r.real, r.reward_cost
                );
            }
        }
        Command::Eval { baseline, tuned } => {
            let cfg = load_config(&layout)?;
            let rows = pipeline::eval(&layout, &cfg, baseline.as_deref(), tuned.as_deref())?;
            print!("{}", format_table(&rows));
        }
        Command::Ablate { alpha, epochs } => {
            let mut cfg = load_config(&layout)?;
            cfg.finetune.alpha = alpha.unwrap_or(cfg.finetune.alpha);
            cfg.finetune.epochs = epochs.unwrap_or(cfg.finetune.epochs);
            cfg.validate()?;
            print!("{}", format_table(&pipeline::ablate(&layout, &cfg)?));
        }
        Command::Repro {
            seed,
            preset,
            config,
        } => {
            let cfg = base_config(preset, config.as_ref(), Some(seed))?;
            let manifest = repro(&layout, &cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(layout.eval_txt())
                    .map_err(|e| Error::io(layout.eval_txt(), e))?
            );
            println!(
                "{} artifacts recorded in {}",
                manifest.artifacts.len(),
                layout.manifest().display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
