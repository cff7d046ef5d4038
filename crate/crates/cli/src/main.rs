use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use craft_core::pipeline::{AttributionMethod, Direction};
use craft_core::run::{self, CropModeKind, RankingKind, Report, RunConfig};
use craft_core::CraftError;

#[derive(Parser)]
#[command(name = "craft-kit", version, about = "Concept extraction, importance and attribution over a run directory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Factorize activations into a concept bank (bank/, coeffs.npy).
    Fit(Common),
    /// Sobol and TCAV concept importance (importance.json).
    Importance(Common),
    /// Concept attribution maps (heatmaps/).
    Explain(Common),
    /// Deletion or insertion fidelity curve (curves*.csv).
    Fidelity(Common),
    /// Refine one concept into sub-concepts (sub_<concept>/).
    Recurse(Common),
    /// Compare the bank with one fit on a randomized model (sanity.json).
    Sanity(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum CropModeArg {
    Grid,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankingArg {
    Sobol,
    Tcav,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gradient,
    Smoothgrad,
    Occlusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Deletion,
    Insertion,
}

#[derive(Args)]
struct Common {
    /// Run directory to read and write.
    #[arg(long)]
    out: PathBuf,
    /// `toy:<seed>`, `toy2:<seed>` or a model directory with manifest.json.
    #[arg(long)]
    model: Option<String>,
    /// Precomputed activations, n × p NPY.
    #[arg(long)]
    activations: Option<PathBuf>,
    /// Images as an N × H × W × C NPY.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    class: i64,
    /// Concepts in the bank (sub-concepts for `recurse`).
    #[arg(long, default_value_t = 4)]
    rank: usize,
    /// Base sample count of the Sobol estimator.
    #[arg(long, default_value_t = 1024)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    crop_fraction: f64,
    #[arg(long, default_value_t = 8)]
    crops_per_image: usize,
    #[arg(long, value_enum, default_value_t = CropModeArg::Grid)]
    crop_mode: CropModeArg,
    /// Baseline value of masked concept coefficients.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mu: f64,
    #[arg(long, value_enum, default_value_t = RankingArg::Sobol)]
    ranking: RankingArg,
    #[arg(long, value_enum, default_value_t = DirectionArg::Deletion)]
    direction: DirectionArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Gradient)]
    method: MethodArg,
    /// Concept index for `explain` and `recurse`.
    #[arg(long)]
    concept: Option<usize>,
    /// Images generated for toy models.
    #[arg(long, default_value_t = 200)]
    n_images: usize,
    /// Pixel noise of generated images.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Class-set images explained by `explain`.
    #[arg(long, default_value_t = 4)]
    max_images: usize,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "CRAFT_KIT_THREADS")]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> RunConfig {
        RunConfig {
            out: self.out.clone(),
            model: self.model.clone(),
            activations: self.activations.clone(),
            images: self.images.clone(),
            class: self.class,
            rank: self.rank,
            n_samples: self.n_samples,
            seed: self.seed,
            crop_fraction: self.crop_fraction,
            crops_per_image: self.crops_per_image,
            crop_mode: match self.crop_mode {
                CropModeArg::Grid => CropModeKind::Grid,
                CropModeArg::Random => CropModeKind::Random,
            },
            mu: self.mu,
            ranking: match self.ranking {
                RankingArg::Sobol => RankingKind::Sobol,
                RankingArg::Tcav => RankingKind::Tcav,
                RankingArg::Random => RankingKind::Random,
            },
            direction: match self.direction {
                DirectionArg::Deletion => Direction::Deletion,
                DirectionArg::Insertion => Direction::Insertion,
            },
            method: match self.method {
                MethodArg::Gradient => AttributionMethod::Gradient,
                MethodArg::Smoothgrad => AttributionMethod::SmoothGrad,
                MethodArg::Occlusion => AttributionMethod::Occlusion,
            },
            concept: self.concept,
            n_images: self.n_images,
            noise: self.noise,
            max_images: self.max_images,
        }
    }
}

fn exit_code(err: &CraftError) -> u8 {
    match err {
        CraftError::Argument(_) => 2,
        CraftError::Degenerate { .. } | CraftError::Numerical(_) => 4,
        _ => 3,
    }
}

type Action = fn(&RunConfig) -> craft_core::Result<Report>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, action): (&str, &Common, Action) = match &cli.command {
        Command::Fit(c) => ("fit", c, run::cmd_fit),
        Command::Importance(c) => ("importance", c, run::cmd_importance),
        Command::Explain(c) => ("explain", c, run::cmd_explain),
        Command::Fidelity(c) => ("fidelity", c, run::cmd_fidelity),
        Command::Recurse(c) => ("recurse", c, run::cmd_recurse),
        Command::Sanity(c) => ("sanity", c, run::cmd_sanity),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("craft-kit: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match action(&common.config()) {
        Ok(report) => {
            for path in &report.written {
                println!("wrote {}", path.display());
            }
            match report.numerical_issue {
                Some(msg) => {
                    eprintln!("craft-kit {name}: {msg}");
                    ExitCode::from(4)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("craft-kit {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
