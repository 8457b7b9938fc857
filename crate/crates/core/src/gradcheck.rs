//! Finite-difference verification of every differentiable component.
//!
//! [`check_gradients`] compares `Tape::backward` against central
//! differences for any graph builder. [`run_suite`] applies it to the tensor
//! operations, the loss terms and the full fusion network, all in `f64`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{relative_error, OpKind, Tape, Var};
use crate::error::Result;
use crate::losses::{self, AgMode, LossConfig, PixelMode};
use crate::network::{self, FeedbackConfig, ModelParams};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors. Derivatives smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a relu/abs/sqrt kink.
    pub skipped: usize,
}

impl CheckOutcome {
    fn merge(self, other: CheckOutcome) -> CheckOutcome {
        CheckOutcome {
            worst: self.worst.max(other.worst),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }

    fn empty() -> Self {
        CheckOutcome {
            worst: 0.0,
            checked: 0,
            skipped: 0,
        }
    }
}

/// Which coordinates of each input get perturbed.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many random coordinates per input, drawn from `seed`.
    Sample {
        per_input: usize,
        seed: u64,
    },
}

/// Options for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub floor: f64,
    pub coverage: Coverage,
    pub fault: Option<OpKind>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: STEP,
            floor: REL_FLOOR,
            coverage: Coverage::All,
            fault: None,
        }
    }
}

fn evaluate(
    inputs: &[Tensor<f64>],
    build: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    fault: Option<OpKind>,
) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_adjoint_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compare reverse-mode gradients of `build` with central differences at
/// `inputs`. Coordinates whose `±step` probes change the kink signature of
/// the graph are skipped.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    opts: CheckOptions,
) -> Result<CheckOutcome> {
    let (tape, vars, loss) = evaluate(inputs, &build, opts.fault)?;
    let grads = tape.backward(loss)?;
    let base_sig = tape.kink_signature();
    let mut outcome = CheckOutcome::empty();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&tape, vars[k]);
        let coords: Vec<usize> = match opts.coverage {
            Coverage::All => (0..input.len()).collect(),
            Coverage::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32));
                let n = per_input.min(input.len());
                let mut idx = index::sample(&mut rng, input.len(), n).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        let mut probe_inputs = inputs.to_vec();
        for i in coords {
            let orig = input.data()[i];
            let mut probe = |v: f64| -> Result<(f64, bool)> {
                probe_inputs[k].data_mut()[i] = v;
                let (t, _, l) = evaluate(&probe_inputs, &build, None)?;
                Ok((t.value(l).item()?, t.kink_signature() == base_sig))
            };
            let (up, same_up) = probe(orig + opts.step)?;
            let (down, same_down) = probe(orig - opts.step)?;
            probe_inputs[k].data_mut()[i] = orig;
            if !(same_up && same_down) {
                outcome.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[i], numeric, opts.floor);
            outcome.worst = outcome.worst.max(err);
            outcome.checked += 1;
        }
    }
    Ok(outcome)
}

/// One line of the gradient-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub outcome: CheckOutcome,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.outcome.worst < TOLERANCE && self.outcome.checked > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub components: Vec<ComponentResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentResult::passed)
    }

    pub fn failures(&self) -> Vec<&ComponentResult> {
        self.components.iter().filter(|c| !c.passed()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<28} {:>14} {:>8} {:>8}  status\n",
            "component", "worst_rel_err", "checked", "skipped"
        );
        for c in &self.components {
            out.push_str(&format!(
                "{:<28} {:>14.3e} {:>8} {:>8}  {}\n",
                c.name,
                c.outcome.worst,
                c.outcome.checked,
                c.outcome.skipped,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Suite settings. The defaults are the full check used by `gradcheck`.
#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    /// Random inputs drawn per component.
    pub trials: usize,
    /// Side length of the loss and pipeline inputs (at most 16).
    pub image_side: usize,
    /// Coordinates sampled per parameter tensor in the pipeline checks.
    pub pipeline_samples: usize,
    pub fault: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            trials: 3,
            image_side: 16,
            pipeline_samples: 2,
            fault: None,
        }
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

struct Case {
    name: &'static str,
    inputs: Inputs,
    build: Builder,
}

fn op_cases() -> Vec<Case> {
    let img = |c: usize| move |rng: &mut ChaCha8Rng| vec![uniform(&[1, c, 5, 6], -1.0, 1.0, rng)];
    let pair = |rng: &mut ChaCha8Rng| {
        vec![
            uniform(&[1, 2, 4, 4], -1.0, 1.0, rng),
            uniform(&[1, 2, 4, 4], -1.0, 1.0, rng),
        ]
    };
    // every case reduces through a fixed random projection so the upstream
    // gradient is not uniform
    fn project(t: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = uniform(t.shape(x), -1.0, 1.0, &mut rng);
        let w = t.leaf(w);
        let p = t.mul(x, w)?;
        Ok(t.sum(p))
    }
    vec![
        Case {
            name: "op.conv2d_3x3",
            inputs: Box::new(|rng| {
                vec![
                    uniform(&[2, 3, 5, 6], -1.0, 1.0, rng),
                    uniform(&[4, 3, 3, 3], -1.0, 1.0, rng),
                    uniform(&[4], -1.0, 1.0, rng),
                ]
            }),
            build: Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                project(t, y, 1)
            }),
        },
        Case {
            name: "op.conv2d_1x1",
            inputs: Box::new(|rng| {
                vec![
                    uniform(&[1, 4, 4, 5], -1.0, 1.0, rng),
                    uniform(&[3, 4, 1, 1], -1.0, 1.0, rng),
                    uniform(&[3], -1.0, 1.0, rng),
                ]
            }),
            build: Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                project(t, y, 2)
            }),
        },
        Case {
            name: "op.relu",
            inputs: Box::new(img(2)),
            build: Box::new(|t, v| {
                let y = t.relu(v[0]);
                project(t, y, 3)
            }),
        },
        Case {
            name: "op.abs",
            inputs: Box::new(img(2)),
            build: Box::new(|t, v| {
                let y = t.abs(v[0]);
                project(t, y, 4)
            }),
        },
        Case {
            name: "op.add_sub",
            inputs: Box::new(pair),
            build: Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(a, v[1])?;
                let s = t.sub(s, v[1])?;
                project(t, s, 5)
            }),
        },
        Case {
            name: "op.mul",
            inputs: Box::new(pair),
            build: Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 6)
            }),
        },
        Case {
            name: "op.div",
            inputs: Box::new(|rng| {
                vec![
                    uniform(&[1, 2, 4, 4], -1.0, 1.0, rng),
                    uniform(&[1, 2, 4, 4], 0.5, 2.0, rng),
                ]
            }),
            build: Box::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                project(t, y, 7)
            }),
        },
        Case {
            name: "op.scale_offset",
            inputs: Box::new(img(1)),
            build: Box::new(|t, v| {
                let y = t.scale(v[0], -2.5);
                let y = t.offset(y, 0.75);
                project(t, y, 8)
            }),
        },
        Case {
            name: "op.sqrt",
            inputs: Box::new(|rng| vec![uniform(&[1, 1, 4, 4], 0.1, 2.0, rng)]),
            build: Box::new(|t, v| {
                let y = t.sqrt(v[0])?;
                project(t, y, 9)
            }),
        },
        Case {
            name: "op.square",
            inputs: Box::new(img(1)),
            build: Box::new(|t, v| {
                let y = t.square(v[0]);
                project(t, y, 10)
            }),
        },
        Case {
            name: "op.sum_mean",
            inputs: Box::new(img(2)),
            build: Box::new(|t, v| {
                let sq = t.square(v[0]);
                let m = t.mean(sq);
                let s = t.sum(v[0]);
                let s2 = t.square(s);
                t.add(m, s2)
            }),
        },
        Case {
            name: "op.concat_channels",
            inputs: Box::new(|rng| {
                vec![
                    uniform(&[2, 1, 3, 3], -1.0, 1.0, rng),
                    uniform(&[2, 2, 3, 3], -1.0, 1.0, rng),
                    uniform(&[2, 3, 3, 3], -1.0, 1.0, rng),
                ]
            }),
            build: Box::new(|t, v| {
                let y = t.concat_channels(&[v[0], v[1], v[2], v[0]])?;
                project(t, y, 11)
            }),
        },
        Case {
            name: "op.narrow",
            inputs: Box::new(|rng| vec![uniform(&[2, 3, 5, 6], -1.0, 1.0, rng)]),
            build: Box::new(|t, v| {
                let a = t.narrow(v[0], 1, 1, 2)?;
                let a = t.narrow(a, 3, 2, 3)?;
                let a = t.narrow(a, 2, 0, 4)?;
                project(t, a, 12)
            }),
        },
        Case {
            name: "op.tile_channels",
            inputs: Box::new(|rng| vec![uniform(&[2, 2, 3, 3], -1.0, 1.0, rng)]),
            build: Box::new(|t, v| {
                let y = t.tile_channels(v[0], 4)?;
                project(t, y, 13)
            }),
        },
        Case {
            name: "op.gaussian_filter",
            inputs: Box::new(|rng| vec![uniform(&[1, 2, 9, 8], -1.0, 1.0, rng)]),
            build: Box::new(|t, v| {
                let k = crate::autodiff::kernels::gaussian_kernel_1d(5, 1.5);
                let y = t.filter_valid(v[0], &k)?;
                project(t, y, 14)
            }),
        },
    ]
}

fn loss_cases(side: usize) -> Vec<Case> {
    let pair = move |rng: &mut ChaCha8Rng| {
        vec![
            uniform(&[1, 1, side, side], 0.0, 1.0, rng),
            uniform(&[1, 1, side, side], 0.0, 1.0, rng),
        ]
    };
    let window = if side >= 11 { 11 } else { 5 };
    let cfg = move |ag_mode, pixel_mode| LossConfig {
        ssim_window: window,
        ag_mode,
        pixel_mode,
        ..LossConfig::default()
    };
    vec![
        Case {
            name: "loss.pixel_mse",
            inputs: Box::new(pair),
            build: Box::new(|t, v| losses::pixel_loss(t, v[0], v[1], PixelMode::Mse)),
        },
        Case {
            name: "loss.pixel_norm",
            inputs: Box::new(pair),
            build: Box::new(|t, v| losses::pixel_loss(t, v[0], v[1], PixelMode::Norm)),
        },
        Case {
            name: "loss.ssim",
            inputs: Box::new(pair),
            build: Box::new(move |t, v| {
                losses::ssim_loss(t, v[0], v[1], &cfg(AgMode::SharpnessMatch, PixelMode::Mse))
            }),
        },
        Case {
            name: "loss.avg_gradient",
            inputs: Box::new(move |rng| vec![uniform(&[1, 1, side, side], 0.0, 1.0, rng)]),
            build: Box::new(|t, v| losses::avg_gradient(t, v[0])),
        },
        Case {
            name: "loss.composite_literal",
            inputs: Box::new(pair),
            build: Box::new(move |t, v| {
                let c = cfg(AgMode::Literal, PixelMode::Mse);
                Ok(losses::composite_loss(t, v[0], v[1], &c)?.total)
            }),
        },
        Case {
            name: "loss.composite_sharpness",
            inputs: Box::new(pair),
            build: Box::new(move |t, v| {
                let c = cfg(AgMode::SharpnessMatch, PixelMode::Mse);
                Ok(losses::composite_loss(t, v[0], v[1], &c)?.total)
            }),
        },
    ]
}

/// Run one case over `trials` random draws and merge the outcomes.
fn run_case(case: &Case, seed: u64, trials: usize, fault: Option<OpKind>) -> Result<CheckOutcome> {
    let mut total = CheckOutcome::empty();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(trial as u64));
        let inputs = (case.inputs)(&mut rng);
        let opts = CheckOptions {
            fault,
            ..CheckOptions::default()
        };
        total = total.merge(check_gradients(&inputs, &case.build, opts)?);
    }
    Ok(total)
}

/// Which network path a pipeline check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelinePath {
    /// encode both inputs, add, decode (inference graph)
    Fusion,
    /// encode, decode a single pre-fused input (training graph)
    Reconstruction,
}

/// Gradient of the composite loss with respect to every parameter tensor of
/// a randomly initialized network. Coordinates are sampled per tensor.
pub fn check_pipeline(
    seed: u64,
    side: usize,
    samples_per_tensor: usize,
    path: PipelinePath,
    fault: Option<OpKind>,
) -> Result<CheckOutcome> {
    let params: ModelParams<f64> = network::init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let a = uniform(&[1, 1, side, side], 0.0, 1.0, &mut rng);
    let b = uniform(&[1, 1, side, side], 0.0, 1.0, &mut rng);
    let loss_cfg = LossConfig {
        ssim_window: if side >= 11 { 11 } else { 5 },
        ..LossConfig::default()
    };
    let fb = FeedbackConfig::default();
    let inputs: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    let n_params = inputs.len();
    let build = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let pv = network::ParamVars::from_vars(&v[..n_params])?;
        let av = t.leaf(a.clone());
        let out = match path {
            PipelinePath::Fusion => {
                let bv = t.leaf(b.clone());
                let fa = network::encode(t, av, &pv)?;
                let fb_ = network::encode(t, bv, &pv)?;
                let y = network::fuse_add(t, fa, fb_)?;
                network::decode(t, y, &pv, fb)?
            }
            PipelinePath::Reconstruction => {
                let f = network::encode(t, av, &pv)?;
                network::decode(t, f, &pv, fb)?
            }
        };
        let target = match path {
            PipelinePath::Fusion => t.leaf(b.clone()),
            PipelinePath::Reconstruction => av,
        };
        Ok(losses::composite_loss(t, out, target, &loss_cfg)?.total)
    };
    check_gradients(
        &inputs,
        build,
        CheckOptions {
            coverage: Coverage::Sample {
                per_input: samples_per_tensor,
                seed,
            },
            fault,
            ..CheckOptions::default()
        },
    )
}

/// Full suite: every op, every loss term, and both network paths.
pub fn run_suite(seed: u64, cfg: SuiteConfig) -> Result<SuiteReport> {
    let mut components = Vec::new();
    let cases = op_cases().into_iter().chain(loss_cases(cfg.image_side));
    for case in cases {
        let outcome = run_case(&case, seed, cfg.trials, cfg.fault)?;
        components.push(ComponentResult {
            name: case.name.to_string(),
            outcome,
        });
    }
    for (name, path) in [
        ("pipeline.fusion", PipelinePath::Fusion),
        ("pipeline.reconstruction", PipelinePath::Reconstruction),
    ] {
        let outcome = check_pipeline(seed, cfg.image_side, cfg.pipeline_samples, path, cfg.fault)?;
        components.push(ComponentResult {
            name: name.to_string(),
            outcome,
        });
    }
    Ok(SuiteReport { seed, components })
}
