use std::fmt;
use std::path::{Path, PathBuf};

use hyperfuse::autodiff::OpKind;
use hyperfuse::checkpoint;
use hyperfuse::data::{self, IngestConfig, PairDataset};
use hyperfuse::gradcheck::{self, SuiteConfig};
use hyperfuse::metrics::{self, MetricReport, MetricValues};
use hyperfuse::pnm;
use hyperfuse::trainer::{self, TrainingLog};
use hyperfuse::{init_params, Error, ModelParams, Provenance};

use crate::config::{EvalSplit, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Core(Error),
    Gradcheck(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Gradcheck(_) => 1,
            Failure::Core(e) => match e {
                Error::Contract(_) => 2,
                Error::Ingestion(_) => 3,
                Error::Divergence { .. } => 4,
                Error::Format(_) | Error::Schema(_) | Error::Param(_) => 5,
                Error::Shape(_) => 6,
                Error::Domain(_) | Error::Io { .. } => 1,
            },
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Gradcheck(m) => write!(f, "gradient check failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Failure::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| {
        Failure::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_corpus(cfg: &RunConfig) -> Result<(PairDataset, String), Failure> {
    if cfg.synthetic > 0 {
        let ds = data::synth_corpus(cfg.synthetic, cfg.size, cfg.seed)?;
        let name = format!(
            "synthetic-{}x{}px-seed{}",
            cfg.synthetic, cfg.size, cfg.seed
        );
        return Ok((ds, name));
    }
    let (Some(ir), Some(vis)) = (&cfg.ir_dir, &cfg.vis_dir) else {
        return Err(Failure::Config(
            "set ir_dir and vis_dir, or synthetic = N".into(),
        ));
    };
    let ingest = IngestConfig {
        image_size: (cfg.size, cfg.size),
        seed: cfg.seed,
    };
    let ds = data::load_dataset(ir, vis, &ingest)?;
    let name = ir
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| ir.display().to_string());
    Ok((ds, name))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>, Failure> {
    checkpoint::load(path).map_err(|e| match e {
        Error::Io { path, source } => Failure::Core(Error::Format(format!(
            "cannot read checkpoint {}: {source}",
            path.display()
        ))),
        other => Failure::Core(other),
    })
}

fn train_model(
    cfg: &RunConfig,
    ds: &PairDataset,
) -> Result<(ModelParams<f32>, TrainingLog), Failure> {
    let tc = cfg.train_config().map_err(Failure::Config)?;
    println!(
        "# training on {} pairs ({} held out)",
        ds.train().len(),
        ds.test().len()
    );
    println!("{}", TrainingLog::HEADER);
    let (params, log) = trainer::train_from(init_params(tc.seed), ds, &tc, |r| {
        println!("{}", TrainingLog::step_line(r));
    })?;
    println!(
        "# fusion layer invocations during training: {}",
        log.fusion_invocations
    );
    Ok((params, log))
}

fn save_run(
    cfg: &RunConfig,
    params: &ModelParams<f32>,
    log: &TrainingLog,
) -> Result<PathBuf, Failure> {
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.render())?;
    write_text(&cfg.out_dir.join("train_log.csv"), &log.to_csv())?;
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint::save(params, &ckpt)?;
    println!("# checkpoint written to {}", ckpt.display());
    Ok(ckpt)
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let (ds, _) = load_corpus(cfg)?;
    let (params, log) = train_model(cfg, &ds)?;
    save_run(cfg, &params, &log)?;
    Ok(())
}

fn print_metrics(v: &MetricValues) {
    println!(
        "EN {:.6}  Qabf {:.6}  SSIM {:.6}  PSNR {:.6}",
        v.en, v.qabf, v.ssim, v.psnr
    );
}

pub fn fuse(cfg: &RunConfig, ir: &Path, vis: &Path, out: &Path) -> Outcome {
    let params = load_checkpoint(&cfg.checkpoint_path())?;
    let a = data::read_image(ir, Provenance::Infrared)?;
    let b = data::read_image(vis, Provenance::Visible)?;
    a.same_size(&b)?;
    let opts = cfg.fusion_options().map_err(Failure::Config)?;
    let fused = hyperfuse::fuse_images(&a, &b, &params, &opts)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    pnm::write(&fused, out)?;
    println!("# fused image written to {}", out.display());
    print_metrics(&MetricValues::compute(&a, &b, &fused, &cfg.loss())?);
    Ok(())
}

fn evaluate(
    cfg: &RunConfig,
    ds: &PairDataset,
    corpus: &str,
    params: &ModelParams<f32>,
) -> Result<(MetricReport, Vec<hyperfuse::ImageGray>), Failure> {
    let pairs = match cfg.eval_split {
        EvalSplit::Test => ds.test(),
        EvalSplit::All => ds.pairs().iter().collect(),
    };
    if pairs.is_empty() {
        return Err(Failure::Core(Error::Contract(
            "the test split is empty; use eval_split = all".into(),
        )));
    }
    let opts = cfg.fusion_options().map_err(Failure::Config)?;
    let (report, fused) = metrics::evaluate_pairs(&pairs, params, &opts, &cfg.loss(), corpus)?;
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("report.txt"), &report.to_table())?;
    write_text(&cfg.out_dir.join("report.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    print!("{}", report.to_csv());
    Ok((report, fused))
}

pub fn eval(cfg: &RunConfig) -> Outcome {
    let params = load_checkpoint(&cfg.checkpoint_path())?;
    let (ds, corpus) = load_corpus(cfg)?;
    evaluate(cfg, &ds, &corpus, &params)?;
    Ok(())
}

pub fn gradcheck(seed: u64, corrupt: Option<&str>) -> Outcome {
    let fault = match corrupt {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Failure::Config(format!("unknown op {name:?} (known: {})", known.join(", ")))
        })?),
    };
    println!("# gradient check, seed {seed}, float64");
    let report = gradcheck::run_suite(
        seed,
        SuiteConfig {
            fault,
            ..SuiteConfig::default()
        },
    )?;
    print!("{}", report.render());
    if report.passed() {
        println!(
            "# all components within tolerance {:e}",
            gradcheck::TOLERANCE
        );
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(Failure::Gradcheck(names.join(", ")))
    }
}

pub fn demo(cfg: &RunConfig) -> Outcome {
    if cfg.synthetic == 0 {
        return Err(Failure::Config("demo needs synthetic > 0".into()));
    }
    let (ds, corpus) = load_corpus(cfg)?;
    let corpus_dir = cfg.out_dir.join("corpus");
    data::write_dataset(&ds, &corpus_dir.join("ir"), &corpus_dir.join("vis"))?;
    let (params, log) = train_model(cfg, &ds)?;
    save_run(cfg, &params, &log)?;
    let (report, fused) = evaluate(cfg, &ds, &corpus, &params)?;
    let fused_dir = cfg.out_dir.join("fused");
    create_dir(&fused_dir)?;
    for (row, img) in report.rows.iter().zip(&fused) {
        pnm::write(img, &fused_dir.join(format!("{}.pgm", row.pair_id)))?;
    }
    println!("# demo outputs written under {}", cfg.out_dir.display());
    Ok(())
}
