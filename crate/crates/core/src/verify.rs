//! Finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes; tape gradients are
//! compared against it coordinate by coordinate.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Batch;
use crate::eau::EvaluatorAdjusterUnit;
use crate::error::{Error, Result};
use crate::grc::GatedResidualConnection;
use crate::layers::{AttnMask, FeedForward, ForwardCtx, LayerNormLayer, MultiHeadAttention};
use crate::model::{ModelConfig, TransformerModel};
use crate::optim::rng_stream;
use crate::tape::{Tape, Var};
use crate::tensor::{Parameterized, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const COMPONENT_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Probe points closer than this to a ReLU kink are resampled.
pub const RELU_MARGIN: f64 = 1e-6;
const MAX_ATTEMPTS: u64 = 32;
const GRADCHECK_STREAM: &str = "gradcheck";

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: "finite difference",
            });
        }
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Round-off level of a central difference of a function of magnitude `f`.
/// A tensor whose analytic and numeric gradients both stay below it (for
/// example a key bias, which softmax ignores) carries no signal to compare.
pub fn noise_floor(f: f64, h: f64) -> f64 {
    10.0 * f64::EPSILON * f.abs().max(1.0) / h
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Eau,
    Grc,
    Mha,
    LayerNorm,
    Ffn,
    FullMicroModel,
    All,
}

impl Component {
    /// Every concrete component, in reporting order.
    pub const EACH: [Component; 6] = [
        Component::Eau,
        Component::Grc,
        Component::Mha,
        Component::LayerNorm,
        Component::Ffn,
        Component::FullMicroModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Eau => "eau",
            Component::Grc => "grc",
            Component::Mha => "mha",
            Component::LayerNorm => "layer_norm",
            Component::Ffn => "ffn",
            Component::FullMicroModel => "full_micro_model",
            Component::All => "all",
        }
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            Component::FullMicroModel => MODEL_TOLERANCE,
            _ => COMPONENT_TOLERANCE,
        }
    }

    /// The concrete components this selection covers.
    pub fn expand(self) -> Vec<Component> {
        match self {
            Component::All => Self::EACH.to_vec(),
            c => vec![c],
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::EACH
            .into_iter()
            .chain([Component::All])
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown component `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// Largest elementwise `|a − n| / max(|a|, |n|, 1e-12)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest per-coordinate error after also allowing disagreement
    /// relative to the tensor's largest gradient, the quantity compared
    /// against the tolerance. Tiny coordinates of a tensor otherwise
    /// dominated by round-off would fail the elementwise measure.
    pub max_scaled_error: f64,
    /// Both gradients lie entirely below the noise floor.
    pub noise_only: bool,
    /// The tensor's largest gradient times the tolerance clears the noise
    /// floor, so a disagreement at the tolerance would be visible.
    pub resolvable: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub component: Component,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub noise_floor: f64,
    /// Probe points drawn, including those rejected near a ReLU kink or
    /// for an unresolvable tensor.
    pub attempts: u64,
    pub checks: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_scaled_error(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| !c.noise_only)
            .map(|c| c.max_scaled_error)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {} {} analytic_norm={:.6e} numeric_norm={:.6e} max_rel_error={:.3e} max_scaled_error={:.3e} max_abs_error={:.3e}{}",
                if c.passed { "PASS" } else { "FAIL" },
                self.component.name(),
                c.name,
                c.analytic_norm,
                c.numeric_norm,
                c.max_rel_error,
                c.max_scaled_error,
                c.max_abs_error,
                if c.noise_only {
                    " noise_only"
                } else if !c.resolvable {
                    " unresolvable"
                } else {
                    ""
                }
            );
        }
        let _ = writeln!(
            out,
            "{} {} seed={} tolerance={:e} h={:e} noise_floor={:.3e} attempts={} max_scaled_error={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.component.name(),
            self.seed,
            self.tolerance,
            self.step,
            self.noise_floor,
            self.attempts,
            self.max_scaled_error()
        );
        out
    }
}

type LossFn<M> = Box<dyn Fn(&M, &mut Tape, &[Var]) -> Result<Var>>;

/// A module under test, its probe inputs and a scalar loss built from them.
struct Subject<M> {
    module: M,
    inputs: Vec<Tensor>,
    loss: LossFn<M>,
}

impl<M: Parameterized> Subject<M> {
    fn evaluate(&self, inputs: &[Tensor]) -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = (self.loss)(&self.module, &mut tape, &vars)?;
        Ok((tape, loss, vars))
    }

    fn loss_value(&self, inputs: &[Tensor]) -> Result<f64> {
        let (tape, loss, _) = self.evaluate(inputs)?;
        Ok(tape.value(loss).data()[0])
    }

    fn check(mut self, h: f64, tolerance: f64) -> Result<(Vec<TensorCheck>, f64)> {
        let (tape, loss, vars) = self.evaluate(&self.inputs)?;
        let floor = noise_floor(tape.value(loss).data()[0], h);
        let grads = tape.backward(loss)?;
        let mut analytic: Vec<(String, Tensor)> = Vec::new();
        for (name, p) in self.module.named_params() {
            let g = grads
                .param(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            analytic.push((name, g));
        }
        for (i, v) in vars.iter().enumerate() {
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.inputs[i].shape().to_vec()));
            analytic.push((format!("input.{i}"), g));
        }

        let num_params = self.module.named_params().len();
        let mut checks = Vec::with_capacity(analytic.len());
        for (idx, (name, a)) in analytic.into_iter().enumerate() {
            let numeric = if idx < num_params {
                let start = self.module.named_params()[idx].1.value.clone();
                let n = finite_diff_grad(
                    |t| {
                        self.module.named_params_mut()[idx].1.value = t.clone();
                        self.loss_value(&self.inputs)
                    },
                    &start,
                    h,
                )?;
                self.module.named_params_mut()[idx].1.value = start;
                n
            } else {
                let i = idx - num_params;
                let mut inputs = self.inputs.clone();
                finite_diff_grad(
                    |t| {
                        inputs[i] = t.clone();
                        self.loss_value(&inputs)
                    },
                    &self.inputs[i],
                    h,
                )?
            };
            let scale = a
                .data()
                .iter()
                .chain(numeric.data())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let noise_only = scale <= floor;
            let (mut max_rel_error, mut max_abs_error, mut max_scaled_error) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in a.data().iter().zip(numeric.data()) {
                let rel = relative_error(x, y);
                let abs = (x - y).abs();
                max_rel_error = max_rel_error.max(rel);
                max_abs_error = max_abs_error.max(abs);
                max_scaled_error = max_scaled_error.max(rel.min(abs / scale.max(1e-12)));
            }
            checks.push(TensorCheck {
                name,
                analytic_norm: a.norm(),
                numeric_norm: numeric.norm(),
                max_rel_error,
                max_abs_error,
                max_scaled_error,
                noise_only,
                resolvable: noise_only || scale * tolerance > floor,
                passed: noise_only || max_scaled_error <= tolerance,
            });
        }
        Ok((checks, floor))
    }

    fn relu_margin(&self) -> Result<Option<f64>> {
        let (tape, _, _) = self.evaluate(&self.inputs)?;
        Ok(tape.min_relu_margin())
    }
}

fn randomize(module: &mut impl Parameterized, rng: &mut ChaCha8Rng) {
    for (name, p) in module.named_params_mut() {
        let shift = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in p.value.data_mut() {
            *v = shift + rng.gen_range(-0.5..0.5);
        }
    }
}

/// Loss `Σ w ⊙ out` with fixed random weights `w`.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

const K: usize = 4;
const SEQ: usize = 3;

/// Configuration of the model used by the `full_micro_model` check.
pub fn micro_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        max_seq_len: SEQ,
        model_dim: K,
        ffn_dim: 8,
        num_heads: 2,
        dropout: 0.0,
        use_eau: true,
        use_grc: true,
        src_vocab_size: 11,
        tgt_vocab_size: 11,
        label_smoothing: 0.1,
        seed,
        layer_norm_eps: 1e-5,
        scale_embeddings: true,
        gate_bias_init: 0.0,
    }
}

fn run_once(
    component: Component,
    rng: &mut ChaCha8Rng,
    seed: u64,
    h: f64,
    tolerance: f64,
) -> Result<Option<(Vec<TensorCheck>, f64)>> {
    macro_rules! finish {
        ($subject:expr) => {{
            let subject = $subject;
            if subject.relu_margin()?.is_some_and(|m| m < RELU_MARGIN) {
                return Ok(None);
            }
            return subject.check(h, tolerance).map(Some);
        }};
    }
    match component {
        Component::Eau => {
            let mut m = EvaluatorAdjusterUnit::new(K, rng)?;
            randomize(&mut m, rng);
            let w = uniform(&[SEQ, K], rng);
            finish!(Subject {
                module: m,
                inputs: vec![uniform(&[SEQ, K], rng)],
                loss: Box::new(move |m: &EvaluatorAdjusterUnit, t: &mut Tape, x: &[Var]| {
                    let y = m.forward(t, x[0])?;
                    weighted_sum(t, y, &w)
                }),
            })
        }
        Component::Grc => {
            let mut m = GatedResidualConnection::new(K, rng, 0.0)?;
            randomize(&mut m, rng);
            let w = uniform(&[SEQ, K], rng);
            finish!(Subject {
                module: m,
                inputs: vec![uniform(&[SEQ, K], rng), uniform(&[SEQ, K], rng)],
                loss: Box::new(move |m: &GatedResidualConnection, t: &mut Tape, x: &[Var]| {
                    let y = m.forward(t, x[0], x[1], &ForwardCtx::eval())?;
                    weighted_sum(t, y, &w)
                }),
            })
        }
        Component::Mha => {
            let mut m = MultiHeadAttention::new(K, 2, rng)?;
            randomize(&mut m, rng);
            let w = uniform(&[2, SEQ, K], rng);
            let mask = AttnMask::key_padding(&[vec![false; 4], vec![false, false, true, true]], SEQ);
            finish!(Subject {
                module: m,
                inputs: vec![uniform(&[2, SEQ, K], rng), uniform(&[2, 4, K], rng)],
                loss: Box::new(move |m: &MultiHeadAttention, t: &mut Tape, x: &[Var]| {
                    let y = m.forward(t, x[0], x[1], x[1], Some(&mask), &mut ForwardCtx::eval())?;
                    weighted_sum(t, y, &w)
                }),
            })
        }
        Component::LayerNorm => {
            let mut m = LayerNormLayer::new(K, 1e-5);
            randomize(&mut m, rng);
            let w = uniform(&[SEQ, K], rng);
            finish!(Subject {
                module: m,
                inputs: vec![uniform(&[SEQ, K], rng)],
                loss: Box::new(move |m: &LayerNormLayer, t: &mut Tape, x: &[Var]| {
                    let y = m.forward(t, x[0])?;
                    weighted_sum(t, y, &w)
                }),
            })
        }
        Component::Ffn => {
            let mut m = FeedForward::new(K, 8, rng);
            randomize(&mut m, rng);
            let w = uniform(&[SEQ, K], rng);
            finish!(Subject {
                module: m,
                inputs: vec![uniform(&[SEQ, K], rng)],
                loss: Box::new(move |m: &FeedForward, t: &mut Tape, x: &[Var]| {
                    let y = m.forward(t, x[0])?;
                    weighted_sum(t, y, &w)
                }),
            })
        }
        Component::FullMicroModel => {
            let mut m = TransformerModel::new(micro_model_config(seed))?;
            randomize(&mut m, rng);
            let mut id = || rng.gen_range(4..11u32);
            let pairs = [
                crate::data::EncodedPair {
                    src: vec![id()],
                    tgt: vec![id(), id()],
                },
                crate::data::EncodedPair {
                    src: vec![],
                    tgt: vec![id()],
                },
            ];
            let batch = Batch::from_pairs(&[&pairs[0], &pairs[1]]);
            finish!(Subject {
                module: m,
                inputs: Vec::new(),
                loss: Box::new(move |m: &TransformerModel, t: &mut Tape, _: &[Var]| {
                    Ok(m.batch_loss(t, &batch, &mut ForwardCtx::eval())?.0)
                }),
            })
        }
        Component::All => Err(Error::Config("`all` expands to several reports".into())),
    }
}

/// Checks every parameter tensor and every input of one component against
/// central differences. Points within [`RELU_MARGIN`] of a ReLU kink are
/// redrawn, and so are points where some tensor's gradient is too small to
/// resolve at `tolerance`; if every draw is unresolvable the last one is
/// judged. The full micro model takes token ids, so only its parameters are
/// checked.
pub fn gradcheck_component(component: Component, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_stream(seed, GRADCHECK_STREAM, attempt);
        if let Some((checks, noise_floor)) = run_once(component, &mut rng, seed, DEFAULT_STEP, tolerance)? {
            let report = GradCheckReport {
                component,
                seed,
                tolerance,
                step: DEFAULT_STEP,
                noise_floor,
                attempts: attempt + 1,
                passed: checks.iter().all(|c| c.passed),
                checks,
            };
            if report.checks.iter().all(|c| c.resolvable) {
                return Ok(report);
            }
            last = Some(report);
        }
    }
    // no well-conditioned point: judge the last one as it stands
    if let Some(report) = last {
        return Ok(report);
    }
    Err(Error::Config(format!(
        "no probe point for `{}` cleared the ReLU margin in {MAX_ATTEMPTS} attempts",
        component.name()
    )))
}
