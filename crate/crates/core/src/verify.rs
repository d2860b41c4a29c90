//! Randomized gradient checks for every layer kernel, loss and
//! architecture, run by the `grad-check` subcommand.
//!
//! Each check compares the hand-written backward pass against central
//! differences and reports the worst per-tensor relative error
//! `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖, 1e-12)` over all trials.
//! Points closer than [`RELU_MARGIN`] to a ReLU kink are redrawn, since the
//! finite difference straddles the kink there and measures nothing useful.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{grad_check, init_params, relu_margin, Architecture, LossMode, ModelConfig};
use crate::numerics::gradcheck::{central_difference, relative_error};
use crate::numerics::layers::{
    hadamard, hadamard_backward, linear_backward, linear_forward, relu, relu_backward, sigmoid,
    sigmoid_backward,
};
use crate::numerics::loss::{sigmoid_bce, softmax_cross_entropy};
use crate::numerics::{ParameterSet, Tensor};
use crate::rng::{child_rng_indexed, RngStream};
use crate::stream::Example;

/// Minimum distance of any ReLU input from zero at a checked point.
pub const RELU_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            eps: 1e-4,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.max_relative_error))
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("sized above")
}

/// `⟨weights, f(x)⟩` turns a tensor-valued layer into a scalar whose
/// gradient is the layer's backward pass applied to `weights`.
fn weighted(y: &Tensor, weights: &Tensor) -> f64 {
    y.dot(weights)
}

type Trial = dyn FnMut(&mut rand_chacha::ChaCha8Rng, f64) -> Result<f64>;

fn linear_trial(rng: &mut rand_chacha::ChaCha8Rng, eps: f64) -> Result<f64> {
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let x = random_tensor(rng, &[n, i]);
    let w = random_tensor(rng, &[o, i]);
    let b = random_tensor(rng, &[o]);
    let dy = random_tensor(rng, &[n, o]);
    let g = linear_backward(&x, &w, &dy, true);
    let fx = central_difference(&x, eps, |t| weighted(&linear_forward(t, &w, &b), &dy));
    let fw = central_difference(&w, eps, |t| weighted(&linear_forward(&x, t, &b), &dy));
    let fb = central_difference(&b, eps, |t| weighted(&linear_forward(&x, &w, t), &dy));
    Ok(relative_error(g.dx.expect("requested").data(), fx.data())
        .max(relative_error(g.dw.data(), fw.data()))
        .max(relative_error(g.db.data(), fb.data())))
}

fn relu_trial(rng: &mut rand_chacha::ChaCha8Rng, eps: f64) -> Result<f64> {
    let n = rng.random_range(1..20);
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.01..1.0);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    let x = Tensor::vector(data);
    let dy = random_tensor(rng, &[n]);
    let fd = central_difference(&x, eps, |t| weighted(&relu(t), &dy));
    Ok(relative_error(relu_backward(&x, &dy).data(), fd.data()))
}

fn sigmoid_trial(rng: &mut rand_chacha::ChaCha8Rng, eps: f64) -> Result<f64> {
    let n = rng.random_range(1..20);
    let x = random_tensor(rng, &[n]).map(|v| 4.0 * v);
    let dy = random_tensor(rng, &[n]);
    let fd = central_difference(&x, eps, |t| weighted(&sigmoid(t), &dy));
    Ok(relative_error(sigmoid_backward(&sigmoid(&x), &dy).data(), fd.data()))
}

fn hadamard_trial(rng: &mut rand_chacha::ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = [rng.random_range(1..5), rng.random_range(1..6)];
    let a = random_tensor(rng, &shape);
    let b = random_tensor(rng, &shape);
    let dy = random_tensor(rng, &shape);
    let (da, db) = hadamard_backward(&a, &b, &dy);
    let fa = central_difference(&a, eps, |t| weighted(&hadamard(t, &b), &dy));
    let fb = central_difference(&b, eps, |t| weighted(&hadamard(&a, t), &dy));
    Ok(relative_error(da.data(), fa.data()).max(relative_error(db.data(), fb.data())))
}

fn softmax_ce_trial(rng: &mut rand_chacha::ChaCha8Rng, eps: f64) -> Result<f64> {
    let (n, c) = (rng.random_range(1..6), rng.random_range(2..6));
    let logits = random_tensor(rng, &[n, c]).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    let fd = central_difference(&logits, eps, |t| {
        softmax_cross_entropy(t, &labels).map(|r| r.0).unwrap_or(f64::NAN)
    });
    Ok(relative_error(g.data(), fd.data()))
}

fn sigmoid_bce_trial(rng: &mut rand_chacha::ChaCha8Rng, eps: f64) -> Result<f64> {
    let n = rng.random_range(1..12);
    let logits = random_tensor(rng, &[n]).map(|v| 3.0 * v);
    let targets: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let (_, g) = sigmoid_bce(&logits, &targets)?;
    let fd = central_difference(&logits, eps, |t| {
        sigmoid_bce(t, &targets).map(|r| r.0).unwrap_or(f64::NAN)
    });
    Ok(relative_error(g.data(), fd.data()))
}

fn random_model(rng: &mut impl Rng, architecture: Architecture, loss: LossMode) -> ModelConfig {
    let layers = rng.random_range(1..3);
    let candidate = loss == LossMode::CandidateBce;
    ModelConfig {
        input_dim: rng.random_range(2..6),
        encoder_dims: (0..layers).map(|_| rng.random_range(2..6)).collect(),
        num_classes: rng.random_range(2..5),
        architecture,
        nm_hidden_dim: rng.random_range(2..5),
        loss,
        candidate_dim: if candidate { rng.random_range(1..4) } else { 0 },
        freeze_lower_encoder: layers > 1 && rng.random_bool(0.5),
    }
}

fn random_examples(rng: &mut impl Rng, config: &ModelConfig) -> Vec<Example> {
    let n = rng.random_range(1..5);
    (0..n)
        .map(|_| {
            let features = (0..config.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            match config.loss {
                LossMode::MulticlassCe => Example::new(features, rng.random_range(0..config.num_classes)),
                LossMode::CandidateBce => {
                    let k = rng.random_range(1..4);
                    let candidates = (0..k)
                        .map(|_| (0..config.candidate_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .collect();
                    Example {
                        features,
                        label: rng.random_range(0..k),
                        candidates,
                    }
                }
            }
        })
        .collect()
}

/// Initial weights with every bias shifted by U(−0.5, 0.5), so that no
/// ReLU layer starts out exactly at its kink.
fn random_params(rng: &mut impl Rng, config: &ModelConfig) -> Result<ParameterSet> {
    let mut params = init_params(config, rng)?;
    for (name, p) in params.iter_mut() {
        if name.ends_with(".bias") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|b| *b += rng.random_range(-0.5..0.5));
        }
    }
    Ok(params)
}

fn architecture_trial(architecture: Architecture, loss: LossMode) -> Box<Trial> {
    Box::new(move |rng, eps| {
        let config = random_model(rng, architecture, loss);
        for _ in 0..1000 {
            let params = random_params(rng, &config)?;
            let batch = random_examples(rng, &config);
            if relu_margin(&params, &config, &batch)? >= RELU_MARGIN {
                return grad_check(&params, &config, &batch, eps);
            }
        }
        Err(Error::input("no point clear of the ReLU kinks after 1000 draws"))
    })
}

fn run_check(name: &str, trial: &mut Trial, config: &GradCheckConfig, stream: u32) -> Result<CheckResult> {
    let mut rng = child_rng_indexed(config.seed, RngStream::Init, 1000 + stream);
    let mut worst: f64 = 0.0;
    for _ in 0..config.trials {
        let err = trial(&mut rng, config.eps)?;
        // NaN must not read as a pass
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(CheckResult {
        name: name.to_string(),
        trials: config.trials,
        max_relative_error: worst,
        passed: worst < config.tolerance,
    })
}

/// Runs every layer, loss and architecture check for `config.trials`
/// randomized trials each.
pub fn run_grad_check_suite(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.trials == 0 || !(config.eps > 0.0) || !(config.tolerance > 0.0) {
        return Err(Error::input("grad check needs trials > 0, eps > 0 and tolerance > 0"));
    }
    let mut checks: Vec<(String, Box<Trial>)> = vec![
        ("linear".into(), Box::new(linear_trial)),
        ("relu".into(), Box::new(relu_trial)),
        ("sigmoid".into(), Box::new(sigmoid_trial)),
        ("hadamard".into(), Box::new(hadamard_trial)),
        ("softmax_cross_entropy".into(), Box::new(softmax_ce_trial)),
        ("sigmoid_bce".into(), Box::new(sigmoid_bce_trial)),
    ];
    for arch in [Architecture::Oml, Architecture::Anml, Architecture::Maml] {
        for loss in [LossMode::MulticlassCe, LossMode::CandidateBce] {
            let loss_name = match loss {
                LossMode::MulticlassCe => "multiclass_ce",
                LossMode::CandidateBce => "candidate_bce",
            };
            let name = format!("{arch:?}/{loss_name}").to_lowercase();
            checks.push((name, architecture_trial(arch, loss)));
        }
    }
    let mut results = Vec::with_capacity(checks.len());
    for (i, (name, trial)) in checks.iter_mut().enumerate() {
        results.push(run_check(name, trial.as_mut(), config, i as u32)?);
    }
    Ok(GradCheckReport {
        eps: config.eps,
        tolerance: config.tolerance,
        checks: results,
    })
}
