//! Classifier architectures.
//!
//! * **OML**: a representation network (`encoder.*`, partition
//!   [`Partition::Encoder`]) followed by a linear prediction head
//!   (`head.*`). The inner loop adapts only the head.
//! * **ANML**: a prediction network (`pn.*` then `head.*`) whose final
//!   encoder activations are multiplied elementwise by a gate produced by a
//!   neuromodulatory network (`nm.*`). The gate network sees the raw input
//!   through a frozen random projection (`nm.proj.*`), then two trainable
//!   linear layers with a ReLU between them and a sigmoid at the end.
//! * **MAML**: ANML with the gate removed.
//!
//! In candidate-scoring mode each `(example, candidate)` pair is scored by
//! running the concatenated feature vector through the network, which then
//! has a single output unit.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::numerics::layers::{
    hadamard, hadamard_backward, linear_backward, linear_forward, relu, relu_backward, sigmoid,
    sigmoid_backward,
};
use crate::numerics::loss::{sigmoid_bce, softmax_cross_entropy};
use crate::numerics::{GradMap, Objective, ParameterSet, Partition, PartitionSet, Tensor};
use crate::stream::Example;

/// Initial bias of the gate's output layer; σ(2) ≈ 0.88 keeps the gate open
/// at the start of training.
pub const NM_OUTPUT_BIAS_INIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Oml,
    Anml,
    /// ANML without the neuromodulatory gate.
    Maml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Softmax cross-entropy over `num_classes` classes.
    #[default]
    MulticlassCe,
    /// Sigmoid cross-entropy over candidate pairs; the true candidate is the
    /// positive class, prediction is the argmax score.
    CandidateBce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_encoder_dims")]
    pub encoder_dims: Vec<usize>,
    pub num_classes: usize,
    pub architecture: Architecture,
    #[serde(default = "default_nm_hidden")]
    pub nm_hidden_dim: usize,
    #[serde(default)]
    pub loss: LossMode,
    /// Width of each candidate's feature vector (candidate mode only).
    #[serde(default)]
    pub candidate_dim: usize,
    /// Freeze every encoder layer except the last one.
    #[serde(default)]
    pub freeze_lower_encoder: bool,
}

fn default_encoder_dims() -> Vec<usize> {
    vec![64]
}

fn default_nm_hidden() -> usize {
    64
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize, architecture: Architecture) -> Self {
        Self {
            input_dim,
            encoder_dims: default_encoder_dims(),
            num_classes,
            architecture,
            nm_hidden_dim: default_nm_hidden(),
            loss: LossMode::MulticlassCe,
            candidate_dim: 0,
            freeze_lower_encoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::input("input_dim must be >= 1"));
        }
        if self.encoder_dims.is_empty() || self.encoder_dims.contains(&0) {
            return Err(Error::input("encoder_dims must be non-empty and positive"));
        }
        match self.loss {
            LossMode::MulticlassCe if self.num_classes < 2 => {
                Err(Error::input("multiclass cross-entropy needs num_classes >= 2"))
            }
            LossMode::CandidateBce if self.candidate_dim == 0 => {
                Err(Error::input("candidate mode needs candidate_dim >= 1"))
            }
            _ if self.architecture == Architecture::Anml && self.nm_hidden_dim == 0 => {
                Err(Error::input("nm_hidden_dim must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    fn network_input_dim(&self) -> usize {
        match self.loss {
            LossMode::MulticlassCe => self.input_dim,
            LossMode::CandidateBce => self.input_dim + self.candidate_dim,
        }
    }

    fn output_dim(&self) -> usize {
        match self.loss {
            LossMode::MulticlassCe => self.num_classes,
            LossMode::CandidateBce => 1,
        }
    }

    fn encoder_prefix(&self) -> &'static str {
        match self.architecture {
            Architecture::Oml => "encoder",
            Architecture::Anml | Architecture::Maml => "pn",
        }
    }

    fn encoder_partition(&self, layer: usize) -> Partition {
        if self.freeze_lower_encoder && layer + 1 < self.encoder_dims.len() {
            return Partition::FrozenEncoder;
        }
        match self.architecture {
            Architecture::Oml => Partition::Encoder,
            Architecture::Anml | Architecture::Maml => Partition::PnEncoder,
        }
    }

    fn representation_dim(&self) -> usize {
        *self.encoder_dims.last().expect("validated non-empty")
    }
}

/// Partitions adapted by SGD in the inner loop.
pub fn partition_for_inner_loop(config: &ModelConfig) -> PartitionSet {
    match config.architecture {
        Architecture::Oml => [Partition::Head].into(),
        Architecture::Anml | Architecture::Maml => [Partition::PnEncoder, Partition::Head].into(),
    }
}

/// Partitions updated by the meta-optimizer. The frozen gate projection is
/// never among them.
pub fn partition_for_outer_loop(config: &ModelConfig) -> PartitionSet {
    match config.architecture {
        Architecture::Oml => [Partition::Encoder, Partition::Head].into(),
        Architecture::Anml => [Partition::PnEncoder, Partition::Head, Partition::Nm].into(),
        Architecture::Maml => [Partition::PnEncoder, Partition::Head].into(),
    }
}

/// Everything a plain (non-meta) learner trains.
pub fn trainable_partitions(config: &ModelConfig) -> PartitionSet {
    partition_for_outer_loop(config)
}

fn glorot(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("sized above")
}

/// Glorot-uniform weights, zero biases, gate output bias at
/// [`NM_OUTPUT_BIAS_INIT`].
pub fn init_params(config: &ModelConfig, rng: &mut impl Rng) -> Result<ParameterSet> {
    config.validate()?;
    let mut params = ParameterSet::new();
    let prefix = config.encoder_prefix();
    let mut fan_in = config.network_input_dim();
    for (l, &width) in config.encoder_dims.iter().enumerate() {
        let part = config.encoder_partition(l);
        params.insert(format!("{prefix}.{l}.weight"), glorot(rng, width, fan_in), part);
        params.insert(format!("{prefix}.{l}.bias"), Tensor::zeros(&[width]), part);
        fan_in = width;
    }
    let out = config.output_dim();
    params.insert("head.weight", glorot(rng, out, fan_in), Partition::Head);
    params.insert("head.bias", Tensor::zeros(&[out]), Partition::Head);

    if config.architecture == Architecture::Anml {
        let h = config.nm_hidden_dim;
        let gate = config.representation_dim();
        let input = config.network_input_dim();
        params.insert("nm.proj.weight", glorot(rng, h, input), Partition::NmEncoder);
        params.insert("nm.proj.bias", Tensor::zeros(&[h]), Partition::NmEncoder);
        params.insert("nm.0.weight", glorot(rng, h, h), Partition::Nm);
        params.insert("nm.0.bias", Tensor::zeros(&[h]), Partition::Nm);
        params.insert("nm.1.weight", glorot(rng, gate, h), Partition::Nm);
        params.insert(
            "nm.1.bias",
            Tensor::filled(&[gate], NM_OUTPUT_BIAS_INIT),
            Partition::Nm,
        );
    }
    Ok(params)
}

/// Gate activations for one forward pass, `width` values per input row.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub width: usize,
    pub values: Vec<f64>,
}

/// Scores per example: class logits, or one score per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<Vec<f64>>,
    pub gates: Option<GateRecord>,
}

impl Prediction {
    pub fn predicted(&self, i: usize) -> usize {
        argmax(&self.scores[i])
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

struct GateTrace {
    proj_pre: Tensor,
    proj_out: Tensor,
    hid_pre: Tensor,
    hid_out: Tensor,
    gate: Tensor,
}

struct Trace {
    input: Tensor,
    /// Pre-activation of each encoder layer.
    enc_pre: Vec<Tensor>,
    /// Post-ReLU output of each encoder layer.
    enc_out: Vec<Tensor>,
    gate: Option<GateTrace>,
    /// Head input (gated encoder output for ANML).
    rep: Tensor,
    logits: Tensor,
}

/// Network input rows plus, for each example, the range of rows it owns.
fn build_input(config: &ModelConfig, batch: &[Example]) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut spans = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        if ex.features.len() != config.input_dim {
            return Err(Error::input(format!(
                "example {i} has {} features, model expects {}",
                ex.features.len(),
                config.input_dim
            )));
        }
        let start = rows.len();
        match config.loss {
            LossMode::MulticlassCe => rows.push(ex.features.clone()),
            LossMode::CandidateBce => {
                if ex.candidates.is_empty() {
                    return Err(Error::input(format!("example {i} has no candidates")));
                }
                for c in &ex.candidates {
                    if c.len() != config.candidate_dim {
                        return Err(Error::input(format!(
                            "candidate of example {i} has {} features, expected {}",
                            c.len(),
                            config.candidate_dim
                        )));
                    }
                    let mut row = ex.features.clone();
                    row.extend_from_slice(c);
                    rows.push(row);
                }
            }
        }
        spans.push((start, rows.len()));
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let width = config.network_input_dim();
    let input = if refs.is_empty() {
        Tensor::zeros(&[0, width])
    } else {
        Tensor::from_rows(&refs)?
    };
    Ok((input, spans))
}

fn forward(params: &ParameterSet, config: &ModelConfig, input: Tensor) -> Trace {
    let prefix = config.encoder_prefix();
    let mut enc_pre = Vec::with_capacity(config.encoder_dims.len());
    let mut enc_out: Vec<Tensor> = Vec::with_capacity(config.encoder_dims.len());
    for l in 0..config.encoder_dims.len() {
        let x = enc_out.last().unwrap_or(&input);
        let pre = linear_forward(
            x,
            params.value(&format!("{prefix}.{l}.weight")),
            params.value(&format!("{prefix}.{l}.bias")),
        );
        enc_out.push(relu(&pre));
        enc_pre.push(pre);
    }
    let encoded = enc_out.last().expect("non-empty encoder").clone();

    let (rep, gate) = if config.architecture == Architecture::Anml {
        let proj_pre = linear_forward(
            &input,
            params.value("nm.proj.weight"),
            params.value("nm.proj.bias"),
        );
        let proj_out = relu(&proj_pre);
        let hid_pre = linear_forward(&proj_out, params.value("nm.0.weight"), params.value("nm.0.bias"));
        let hid_out = relu(&hid_pre);
        let gate = sigmoid(&linear_forward(
            &hid_out,
            params.value("nm.1.weight"),
            params.value("nm.1.bias"),
        ));
        let rep = hadamard(&encoded, &gate);
        (
            rep,
            Some(GateTrace {
                proj_pre,
                proj_out,
                hid_pre,
                hid_out,
                gate,
            }),
        )
    } else {
        (encoded, None)
    };
    let logits = linear_forward(&rep, params.value("head.weight"), params.value("head.bias"));
    Trace {
        input,
        enc_pre,
        enc_out,
        gate,
        rep,
        logits,
    }
}

fn backward(
    params: &ParameterSet,
    config: &ModelConfig,
    trace: &Trace,
    dlogits: &Tensor,
    filter: &PartitionSet,
) -> GradMap {
    let mut grads = GradMap::new();
    let prefix = config.encoder_prefix();
    let layers = config.encoder_dims.len();
    let enc_wanted: Vec<bool> = (0..layers)
        .map(|l| filter.contains(&config.encoder_partition(l)))
        .collect();
    let any_enc = enc_wanted.iter().any(|&w| w);
    let nm_tail = filter.contains(&Partition::Nm);
    let nm_proj = filter.contains(&Partition::NmEncoder);
    let any_nm = trace.gate.is_some() && (nm_tail || nm_proj);

    let head = linear_backward(
        &trace.rep,
        params.value("head.weight"),
        dlogits,
        any_enc || any_nm,
    );
    if filter.contains(&Partition::Head) {
        grads.insert("head.weight", head.dw);
        grads.insert("head.bias", head.db);
    }
    let Some(d_rep) = head.dx else {
        return grads;
    };

    let encoded = trace.enc_out.last().expect("non-empty encoder");
    let d_encoded = match &trace.gate {
        Some(g) => {
            let (d_enc, d_gate) = hadamard_backward(encoded, &g.gate, &d_rep);
            if any_nm {
                let d_gate_pre = sigmoid_backward(&g.gate, &d_gate);
                let l1 = linear_backward(&g.hid_out, params.value("nm.1.weight"), &d_gate_pre, true);
                let d_hid_pre = relu_backward(&g.hid_pre, &l1.dx.expect("requested"));
                let l0 = linear_backward(&g.proj_out, params.value("nm.0.weight"), &d_hid_pre, nm_proj);
                if nm_tail {
                    grads.insert("nm.1.weight", l1.dw);
                    grads.insert("nm.1.bias", l1.db);
                    grads.insert("nm.0.weight", l0.dw);
                    grads.insert("nm.0.bias", l0.db);
                }
                if nm_proj {
                    let d_proj_pre = relu_backward(&g.proj_pre, &l0.dx.expect("requested"));
                    let lp = linear_backward(
                        &trace.input,
                        params.value("nm.proj.weight"),
                        &d_proj_pre,
                        false,
                    );
                    grads.insert("nm.proj.weight", lp.dw);
                    grads.insert("nm.proj.bias", lp.db);
                }
            }
            d_enc
        }
        None => d_rep,
    };

    if any_enc {
        let lowest = enc_wanted.iter().position(|&w| w).expect("any_enc");
        let mut d_out = d_encoded;
        for l in (lowest..layers).rev() {
            let d_pre = relu_backward(&trace.enc_pre[l], &d_out);
            let x = if l == 0 { &trace.input } else { &trace.enc_out[l - 1] };
            let g = linear_backward(
                x,
                params.value(&format!("{prefix}.{l}.weight")),
                &d_pre,
                l > lowest,
            );
            if enc_wanted[l] {
                grads.insert(format!("{prefix}.{l}.weight"), g.dw);
                grads.insert(format!("{prefix}.{l}.bias"), g.db);
            }
            match g.dx {
                Some(dx) => d_out = dx,
                None => break,
            }
        }
    }
    grads
}

fn batch_loss(config: &ModelConfig, batch: &[Example], logits: &Tensor, spans: &[(usize, usize)]) -> Result<(f64, Tensor)> {
    match config.loss {
        LossMode::MulticlassCe => {
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            softmax_cross_entropy(logits, &labels)
        }
        LossMode::CandidateBce => {
            let mut targets = vec![0.0; logits.len()];
            for (ex, &(start, end)) in batch.iter().zip(spans) {
                if ex.label >= end - start {
                    return Err(Error::input(format!(
                        "positive candidate index {} out of range for {} candidates",
                        ex.label,
                        end - start
                    )));
                }
                targets[start + ex.label] = 1.0;
            }
            sigmoid_bce(logits, &targets)
        }
    }
}

/// Mean loss over `batch` and exact gradients for the parameters whose
/// partition is in `filter`.
pub fn loss_and_grad(
    params: &ParameterSet,
    config: &ModelConfig,
    batch: &[Example],
    filter: &PartitionSet,
) -> Result<(f64, GradMap)> {
    if batch.is_empty() {
        return Err(Error::input("loss_and_grad on an empty batch"));
    }
    if filter.is_empty() {
        return Err(Error::input("loss_and_grad with an empty partition filter"));
    }
    let (input, spans) = build_input(config, batch)?;
    let trace = forward(params, config, input);
    let (loss, dlogits) = batch_loss(config, batch, &trace.logits, &spans)?;
    if !loss.is_finite() {
        let max_logit = trace
            .logits
            .data()
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        return Err(Error::numerical(
            "loss_and_grad",
            format!(
                "loss = {loss}, batch size = {}, max |logit| = {max_logit}",
                batch.len()
            ),
        ));
    }
    Ok((loss, backward(params, config, &trace, &dlogits, filter)))
}

/// Mean loss only.
pub fn loss(params: &ParameterSet, config: &ModelConfig, batch: &[Example]) -> Result<f64> {
    let (input, spans) = build_input(config, batch)?;
    let trace = forward(params, config, input);
    Ok(batch_loss(config, batch, &trace.logits, &spans)?.0)
}

/// Smallest `|pre-activation|` over every ReLU in the forward pass. Finite
/// differences are only trustworthy when this exceeds the step size.
pub fn relu_margin(params: &ParameterSet, config: &ModelConfig, batch: &[Example]) -> Result<f64> {
    let (input, _) = build_input(config, batch)?;
    let trace = forward(params, config, input);
    let mut pres: Vec<&Tensor> = trace.enc_pre.iter().collect();
    if let Some(g) = &trace.gate {
        pres.push(&g.proj_pre);
        pres.push(&g.hid_pre);
    }
    Ok(pres
        .iter()
        .flat_map(|t| t.data())
        .fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

impl Objective for ModelConfig {
    type Batch = [Example];

    fn loss_and_grad(
        &self,
        params: &ParameterSet,
        batch: &[Example],
        filter: &PartitionSet,
    ) -> Result<(f64, GradMap)> {
        loss_and_grad(params, self, batch, filter)
    }
}

pub fn predict(params: &ParameterSet, config: &ModelConfig, batch: &[Example]) -> Result<Prediction> {
    let (input, spans) = build_input(config, batch)?;
    let trace = forward(params, config, input);
    let out = trace.logits.cols();
    let scores = spans
        .iter()
        .map(|&(start, end)| match config.loss {
            LossMode::MulticlassCe => trace.logits.row(start).to_vec(),
            LossMode::CandidateBce => trace.logits.data()[start * out..end * out].to_vec(),
        })
        .collect();
    let gates = trace.gate.map(|g| GateRecord {
        width: g.gate.cols(),
        values: g.gate.into_data(),
    });
    Ok(Prediction { scores, gates })
}

/// Fraction of `examples` whose argmax prediction equals the label, plus the
/// gate activations seen while evaluating (ANML only).
pub fn evaluate(
    params: &ParameterSet,
    config: &ModelConfig,
    examples: &[Example],
) -> Result<(f64, Option<GateRecord>)> {
    if examples.is_empty() {
        return Err(Error::input("evaluation on an empty set"));
    }
    let mut correct = 0usize;
    let mut gates: Option<GateRecord> = None;
    for chunk in examples.chunks(256) {
        let pred = predict(params, config, chunk)?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(i, ex)| pred.predicted(*i) == ex.label)
            .count();
        if let Some(g) = pred.gates {
            match &mut gates {
                Some(acc) => acc.values.extend(g.values),
                None => gates = Some(g),
            }
        }
    }
    Ok((correct as f64 / examples.len() as f64, gates))
}

/// Largest per-tensor relative error between analytic gradients and central
/// differences with step `eps`, over every parameter of the model.
pub fn grad_check(
    params: &ParameterSet,
    config: &ModelConfig,
    batch: &[Example],
    eps: f64,
) -> Result<f64> {
    let all: PartitionSet = params.iter().map(|(_, p)| p.partition).collect();
    let (_, analytic) = loss_and_grad(params, config, batch, &all)?;
    crate::numerics::gradcheck::max_relative_error(params, &analytic, eps, |p| {
        loss(p, config, batch)
    })
}
