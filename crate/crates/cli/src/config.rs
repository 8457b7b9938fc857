//! Flat `key = value` run configuration shared by every verb.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hyperfuse::losses::{AgMode, LossConfig, PixelMode};
use hyperfuse::network::{FeedbackConfig, FusionOptions, PreFusionConfig};
use hyperfuse::optim::{AdamConfig, OptimizerKind};
use hyperfuse::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerName {
    Adam,
    Sgd,
}

/// Every accepted key, with a one-line description. The order here is the
/// order of the echoed configuration.
pub const KEYS: &[(&str, &str)] = &[
    (
        "seed",
        "RNG seed for initialization, shuffling, splits and synthetic data",
    ),
    ("lr", "learning rate"),
    ("batch_size", "training pairs per optimizer step"),
    ("epochs", "training epochs"),
    (
        "steps",
        "stop after this many optimizer steps (0 = no limit)",
    ),
    ("size", "side length images are resized to"),
    ("a1", "pre-fusion weight in [0.5, 1]; a2 = 1 - a1"),
    (
        "prefuse_at_test",
        "also pre-fuse at inference time (ablation): true|false",
    ),
    ("lambda", "weight on 1 - SSIM"),
    ("gamma", "weight on the average-gradient term"),
    ("ssim_window", "odd Gaussian window size"),
    ("ssim_sigma", "Gaussian window sigma"),
    ("ssim_c1", "SSIM luminance constant"),
    ("ssim_c2", "SSIM contrast constant"),
    ("ag_mode", "sharpness_match|literal"),
    ("pixel_mode", "mse|norm"),
    ("feedback_iterations", "decoder passes, at least 1"),
    ("optimizer", "adam|sgd"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("ir_dir", "directory of infrared images"),
    ("vis_dir", "directory of visible images (same file names)"),
    (
        "synthetic",
        "use N synthetic pairs instead of directories (0 = off)",
    ),
    (
        "checkpoint",
        "checkpoint path (default: <out_dir>/model.hfn)",
    ),
    ("out_dir", "directory for every output"),
    ("eval_split", "test|all"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps: usize,
    pub size: usize,
    pub a1: f64,
    pub prefuse_at_test: bool,
    pub lambda: f64,
    pub gamma: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub ag_mode: AgMode,
    pub pixel_mode: PixelMode,
    pub feedback_iterations: usize,
    pub optimizer: OptimizerName,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ir_dir: Option<PathBuf>,
    pub vis_dir: Option<PathBuf>,
    pub synthetic: usize,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub eval_split: EvalSplit,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let loss = LossConfig::default();
        let adam = AdamConfig::default();
        RunConfig {
            seed: train.seed,
            lr: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            steps: 0,
            size: 256,
            a1: PreFusionConfig::default().a1(),
            prefuse_at_test: false,
            lambda: loss.lambda,
            gamma: loss.gamma,
            ssim_window: loss.ssim_window,
            ssim_sigma: loss.ssim_sigma,
            ssim_c1: loss.ssim_c1,
            ssim_c2: loss.ssim_c2,
            ag_mode: loss.ag_mode,
            pixel_mode: loss.pixel_mode,
            feedback_iterations: FeedbackConfig::default().n_iterations(),
            optimizer: OptimizerName::Adam,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            ir_dir: None,
            vis_dir: None,
            synthetic: 0,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            eval_split: EvalSplit::Test,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for key {key}"))
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Desk-scale defaults used by `demo`.
    pub fn demo() -> Self {
        RunConfig {
            lr: 3e-4,
            batch_size: 3,
            steps: 200,
            epochs: 1000,
            size: 32,
            synthetic: 4,
            out_dir: PathBuf::from("demo_out"),
            eval_split: EvalSplit::All,
            ..RunConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "a1" => self.a1 = parse(key, v)?,
            "prefuse_at_test" => self.prefuse_at_test = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "ssim_window" => self.ssim_window = parse(key, v)?,
            "ssim_sigma" => self.ssim_sigma = parse(key, v)?,
            "ssim_c1" => self.ssim_c1 = parse(key, v)?,
            "ssim_c2" => self.ssim_c2 = parse(key, v)?,
            "ag_mode" => {
                self.ag_mode = match v {
                    "sharpness_match" => AgMode::SharpnessMatch,
                    "literal" => AgMode::Literal,
                    _ => {
                        return Err(format!(
                            "ag_mode must be sharpness_match or literal, got {v:?}"
                        ))
                    }
                }
            }
            "pixel_mode" => {
                self.pixel_mode = match v {
                    "mse" => PixelMode::Mse,
                    "norm" => PixelMode::Norm,
                    _ => return Err(format!("pixel_mode must be mse or norm, got {v:?}")),
                }
            }
            "feedback_iterations" => self.feedback_iterations = parse(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerName::Adam,
                    "sgd" => OptimizerName::Sgd,
                    _ => return Err(format!("optimizer must be adam or sgd, got {v:?}")),
                }
            }
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "ir_dir" => self.ir_dir = path_or_none(v),
            "vis_dir" => self.vis_dir = path_or_none(v),
            "synthetic" => self.synthetic = parse(key, v)?,
            "checkpoint" => self.checkpoint = path_or_none(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "eval_split" => {
                self.eval_split = match v {
                    "test" => EvalSplit::Test,
                    "all" => EvalSplit::All,
                    _ => return Err(format!("eval_split must be test or all, got {v:?}")),
                }
            }
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Apply a `key = value` file. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected key = value", n + 1))?;
            self.set(k.trim(), v)
                .map_err(|e| format!("{origin}:{}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps" => self.steps.to_string(),
            "size" => self.size.to_string(),
            "a1" => self.a1.to_string(),
            "prefuse_at_test" => self.prefuse_at_test.to_string(),
            "lambda" => self.lambda.to_string(),
            "gamma" => self.gamma.to_string(),
            "ssim_window" => self.ssim_window.to_string(),
            "ssim_sigma" => self.ssim_sigma.to_string(),
            "ssim_c1" => self.ssim_c1.to_string(),
            "ssim_c2" => self.ssim_c2.to_string(),
            "ag_mode" => match self.ag_mode {
                AgMode::SharpnessMatch => "sharpness_match".into(),
                AgMode::Literal => "literal".into(),
            },
            "pixel_mode" => match self.pixel_mode {
                PixelMode::Mse => "mse".into(),
                PixelMode::Norm => "norm".into(),
            },
            "feedback_iterations" => self.feedback_iterations.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerName::Adam => "adam".into(),
                OptimizerName::Sgd => "sgd".into(),
            },
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "ir_dir" => show_path(&self.ir_dir),
            "vis_dir" => show_path(&self.vis_dir),
            "synthetic" => self.synthetic.to_string(),
            "checkpoint" => self.checkpoint_path().display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "eval_split" => match self.eval_split {
                EvalSplit::Test => "test".into(),
                EvalSplit::All => "all".into(),
            },
            _ => unreachable!("key table and value_of disagree on {key}"),
        }
    }

    /// The resolved configuration in the same `key = value` syntax it is
    /// read from, so a run can be replayed from its own echo.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.value_of(k));
        }
        out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.hfn"))
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            ssim_window: self.ssim_window,
            ssim_sigma: self.ssim_sigma,
            ssim_c1: self.ssim_c1,
            ssim_c2: self.ssim_c2,
            ag_mode: self.ag_mode,
            pixel_mode: self.pixel_mode,
        }
    }

    pub fn feedback(&self) -> Result<FeedbackConfig, String> {
        FeedbackConfig::new(self.feedback_iterations).map_err(|e| e.to_string())
    }

    pub fn pre_fusion(&self) -> Result<PreFusionConfig, String> {
        PreFusionConfig::new(self.a1).map_err(|e| e.to_string())
    }

    pub fn fusion_options(&self) -> Result<FusionOptions, String> {
        Ok(FusionOptions {
            feedback: self.feedback()?,
            pre_fusion: if self.prefuse_at_test {
                Some(self.pre_fusion()?)
            } else {
                None
            },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let optimizer = match self.optimizer {
            OptimizerName::Adam => OptimizerKind::Adam(AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            }),
            OptimizerName::Sgd => OptimizerKind::Sgd,
        };
        let cfg = TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: (self.steps > 0).then_some(self.steps),
            seed: self.seed,
            pre_fusion: self.pre_fusion()?,
            loss: self.loss(),
            feedback: self.feedback()?,
            optimizer,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Cross-field checks that do not depend on the verb.
    pub fn validate(&self) -> Result<(), String> {
        if self.size < 2 {
            return Err("size must be at least 2".into());
        }
        if self.ssim_window > self.size {
            return Err(format!(
                "ssim_window {} exceeds image size {}",
                self.ssim_window, self.size
            ));
        }
        self.train_config()?;
        self.fusion_options()?;
        Ok(())
    }
}
