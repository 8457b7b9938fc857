mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;
use config::RunConfig;

/// Infrared/visible face image fusion.
///
/// Exit codes: 0 success, 1 gradient check failed or other runtime error,
/// 2 configuration error, 3 ingestion error, 4 training diverged,
/// 5 checkpoint error, 6 image size mismatch.
#[derive(Debug, Parser)]
#[command(name = "hyperfuse", version)]
struct Cli {
    /// key = value configuration file; flags override its entries
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a corpus (or synthetic pairs) and write a checkpoint and log
    Train(ConfigArgs),
    /// Fuse one registered pair with a trained checkpoint
    Fuse {
        /// infrared image
        ir: PathBuf,
        /// visible image
        vis: PathBuf,
        /// output PGM path
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fuse and score a corpus split with a trained checkpoint
    Eval(ConfigArgs),
    /// Run the finite-difference gradient check suite
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// scale one op's adjoint to exercise the failure path
        #[arg(long, hide = true, value_name = "OP")]
        corrupt_adjoint: Option<String>,
    },
    /// Synthetic corpus, desk-scale training, fusion and report in one go
    Demo(ConfigArgs),
}

/// One flag per configuration key.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    a1: Option<String>,
    #[arg(long)]
    prefuse_at_test: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    ssim_window: Option<String>,
    #[arg(long)]
    ssim_sigma: Option<String>,
    #[arg(long)]
    ssim_c1: Option<String>,
    #[arg(long)]
    ssim_c2: Option<String>,
    #[arg(long)]
    ag_mode: Option<String>,
    #[arg(long)]
    pixel_mode: Option<String>,
    #[arg(long)]
    feedback_iterations: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    adam_beta1: Option<String>,
    #[arg(long)]
    adam_beta2: Option<String>,
    #[arg(long)]
    adam_eps: Option<String>,
    #[arg(long)]
    ir_dir: Option<String>,
    #[arg(long)]
    vis_dir: Option<String>,
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    eval_split: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 27] {
        [
            ("seed", &self.seed),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("steps", &self.steps),
            ("size", &self.size),
            ("a1", &self.a1),
            ("prefuse_at_test", &self.prefuse_at_test),
            ("lambda", &self.lambda),
            ("gamma", &self.gamma),
            ("ssim_window", &self.ssim_window),
            ("ssim_sigma", &self.ssim_sigma),
            ("ssim_c1", &self.ssim_c1),
            ("ssim_c2", &self.ssim_c2),
            ("ag_mode", &self.ag_mode),
            ("pixel_mode", &self.pixel_mode),
            ("feedback_iterations", &self.feedback_iterations),
            ("optimizer", &self.optimizer),
            ("adam_beta1", &self.adam_beta1),
            ("adam_beta2", &self.adam_beta2),
            ("adam_eps", &self.adam_eps),
            ("ir_dir", &self.ir_dir),
            ("vis_dir", &self.vis_dir),
            ("synthetic", &self.synthetic),
            ("checkpoint", &self.checkpoint),
            ("out_dir", &self.out_dir),
            ("eval_split", &self.eval_split),
        ]
    }

    /// Defaults, then the config file, then flags.
    fn resolve(&self, mut cfg: RunConfig, file: Option<&PathBuf>) -> Result<RunConfig, Failure> {
        if let Some(path) = file {
            cfg.apply_file(path).map_err(Failure::Config)?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)
                    .map_err(|e| Failure::Config(format!("--{}: {e}", key.replace('_', "-"))))?;
            }
        }
        cfg.validate().map_err(Failure::Config)?;
        print!("# resolved configuration\n{}", cfg.render());
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = cli.config.as_ref();
    match cli.command {
        Command::Train(args) => commands::train(&args.resolve(RunConfig::default(), file)?),
        Command::Fuse { ir, vis, out, cfg } => {
            commands::fuse(&cfg.resolve(RunConfig::default(), file)?, &ir, &vis, &out)
        }
        Command::Eval(args) => commands::eval(&args.resolve(RunConfig::default(), file)?),
        Command::Gradcheck {
            seed,
            corrupt_adjoint,
        } => commands::gradcheck(seed, corrupt_adjoint.as_deref()),
        Command::Demo(args) => commands::demo(&args.resolve(RunConfig::demo(), file)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
