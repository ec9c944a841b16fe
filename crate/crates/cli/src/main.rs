use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pointmap_align::io::read_json;
use pointmap_align::pipeline::{self, PipelineOptions};
use pointmap_align::pseudo_label::LossConfig;
use pointmap_align::synth::{NoiseModel, SceneConfig};
use pointmap_align::{AlignConfig, Error, Result};

/// Multi-view point-map alignment with calibrated confidences.
#[derive(Debug, Parser)]
#[command(name = "pmalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Simulate(SimulateArgs),
    /// Estimate cameras and refine the global point map.
    Align {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold calibrated weights into pseudo-labels.
    PseudoLabel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        aligned: PathBuf,
        #[arg(long, default_value_t = LossConfig::default().cutoff, allow_negative_numbers = true)]
        cutoff: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an aligned directory against ground truth.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        aligned: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output metrics JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate, align, pseudo-label and evaluate in one run.
    Pipeline {
        #[command(flatten)]
        scene: SimulateArgs,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long, default_value_t = LossConfig::default().cutoff, allow_negative_numbers = true)]
        cutoff: f64,
        /// Run robust and plain alignment side by side.
        #[arg(long)]
        ab: bool,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scene configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noise model JSON; defaults apply to missing fields.
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AlignArgs {
    /// Closed-form confidence re-weighting (default).
    #[arg(long, overrides_with = "no_robust")]
    robust: bool,
    /// Keep the floored raw confidences as weights.
    #[arg(long, overrides_with = "robust")]
    no_robust: bool,
    #[arg(long, default_value_t = AlignConfig::default().mu)]
    mu: f64,
    #[arg(long, default_value_t = AlignConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = AlignConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = AlignConfig::default().weight_update_every)]
    weight_update_every: usize,
    #[arg(long, default_value_t = AlignConfig::default().conf_floor)]
    conf_floor: f64,
}

impl AlignArgs {
    fn config(&self) -> AlignConfig {
        AlignConfig {
            mu: self.mu,
            steps: self.steps,
            learning_rate: self.lr,
            weight_update_every: self.weight_update_every,
            conf_floor: self.conf_floor,
            robust: !self.no_robust,
            ..AlignConfig::default()
        }
    }
}

impl SimulateArgs {
    fn configs(&self) -> Result<(SceneConfig, NoiseModel)> {
        let scene: SceneConfig = self.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
        let noise: NoiseModel = self.noise.as_deref().map(read_json).transpose()?.unwrap_or_default();
        let scene = SceneConfig { seed: self.seed, ..scene };
        scene.validate()?;
        noise.validate()?;
        Ok((scene, noise))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let (scene, noise) = args.configs()?;
            let manifest = pipeline::simulate(&scene, &noise, args.seed, &args.out)?;
            println!("{}", manifest.display());
        }
        Command::Align { manifest, align, out } => {
            pipeline::align(&manifest, &align.config(), &out)?;
            println!("{}", out.display());
        }
        Command::PseudoLabel {
            manifest,
            aligned,
            cutoff,
            out,
        } => {
            let summary = pipeline::pseudo_label(&manifest, &aligned, cutoff, &out)?;
            println!("retained {} of {} pixels", summary.retained, summary.total);
        }
        Command::Evaluate {
            manifest,
            aligned,
            labels,
            out,
        } => {
            pipeline::evaluate(&manifest, &aligned, labels.as_deref(), &out)?;
            println!("{}", out.display());
        }
        Command::Pipeline {
            scene,
            align,
            cutoff,
            ab,
        } => {
            let (scene_config, noise) = scene.configs()?;
            let options = PipelineOptions {
                scene: scene_config,
                noise,
                seed: scene.seed,
                align: align.config(),
                cutoff,
                ab,
            };
            let report = pipeline::pipeline(&options, &scene.out)?;
            for (name, _) in &report.runs {
                println!("{}", Path::new(&scene.out).join(name).join("metrics.json").display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
