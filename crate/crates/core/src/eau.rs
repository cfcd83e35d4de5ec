//! Evaluator-adjuster unit.
//!
//! For every position vector `x ∈ R^k`:
//!
//! ```text
//! hidden     = ReLU(W_eval_hidden · x + b)        (k/2 units)
//! scores     = σ(W_eval_score · hidden + b)       (k units, in (0, 1))
//! adjustment = tanh(W_adjust · x + b)             (k units, in (-1, 1))
//! y          = x + adjustment ⊙ scores
//! ```
//!
//! The unit therefore never moves any coordinate by a full unit, and with a
//! zero adjustment layer it is exactly the identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::LinearLayer;
use crate::tape::{Tape, Var};
use crate::tensor::{join_name, Param, Parameterized, Tensor};

#[derive(Clone, Debug)]
pub struct EvaluatorAdjusterUnit {
    /// Evaluation network, first layer: `k → k/2`.
    pub eval_hidden: LinearLayer,
    /// Evaluation network, scoring layer: `k/2 → k`.
    pub eval_score: LinearLayer,
    /// Adjustment network: `k → k`.
    pub adjust: LinearLayer,
}

/// Tape variables of one evaluation, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct EauTrace {
    pub hidden: Var,
    pub scores: Var,
    pub adjustment: Var,
    pub output: Var,
}

/// Eagerly evaluated intermediates.
#[derive(Clone, Debug)]
pub struct EauIntermediates {
    pub hidden: Tensor,
    pub scores: Tensor,
    pub adjustment: Tensor,
    pub output: Tensor,
}

/// Learnable scalars in one unit of width `k`: `2k² + 5k/2`.
pub const fn eau_param_count(k: usize) -> usize {
    2 * k * k + 5 * k / 2
}

fn check_width(k: usize) -> Result<()> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "evaluator-adjuster width must be even and at least 2, got {k}"
        )));
    }
    Ok(())
}

impl EvaluatorAdjusterUnit {
    /// Uniform fan-in weights, zero biases.
    pub fn new(k: usize, rng: &mut impl Rng) -> Result<Self> {
        check_width(k)?;
        Ok(Self {
            eval_hidden: LinearLayer::new(k, k / 2, rng),
            eval_score: LinearLayer::new(k / 2, k, rng),
            adjust: LinearLayer::new(k, k, rng),
        })
    }

    pub fn from_layers(eval_hidden: LinearLayer, eval_score: LinearLayer, adjust: LinearLayer) -> Result<Self> {
        let k = eval_hidden.in_dim();
        check_width(k)?;
        let dims_ok = eval_hidden.out_dim() == k / 2
            && eval_score.in_dim() == k / 2
            && eval_score.out_dim() == k
            && adjust.in_dim() == k
            && adjust.out_dim() == k;
        if !dims_ok {
            return Err(Error::Config(format!(
                "inconsistent evaluator-adjuster layer shapes for width {k}"
            )));
        }
        Ok(Self {
            eval_hidden,
            eval_score,
            adjust,
        })
    }

    pub fn width(&self) -> usize {
        self.adjust.in_dim()
    }

    pub fn trace(&self, tape: &mut Tape, x: Var) -> Result<EauTrace> {
        let k = tape.value(x).last_dim();
        if k != self.width() {
            return Err(Error::Shape {
                op: "evaluator-adjuster",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![self.width()],
            });
        }
        let hidden = self.eval_hidden.forward(tape, x)?;
        let hidden = tape.relu(hidden)?;
        let scores = self.eval_score.forward(tape, hidden)?;
        let scores = tape.sigmoid(scores)?;
        let adjustment = self.adjust.forward(tape, x)?;
        let adjustment = tape.tanh(adjustment)?;
        let delta = tape.mul(adjustment, scores)?;
        let output = tape.add(x, delta)?;
        Ok(EauTrace {
            hidden,
            scores,
            adjustment,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.trace(tape, x)?.output)
    }

    pub fn intermediates(&self, x: &Tensor) -> Result<EauIntermediates> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let t = self.trace(&mut tape, xv)?;
        Ok(EauIntermediates {
            hidden: tape.value(t.hidden).clone(),
            scores: tape.value(t.scores).clone(),
            adjustment: tape.value(t.adjustment).clone(),
            output: tape.value(t.output).clone(),
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.intermediates(x)?.output)
    }
}

impl Parameterized for EvaluatorAdjusterUnit {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.eval_hidden.collect_params(&join_name(prefix, "eval_hidden"), out);
        self.eval_score.collect_params(&join_name(prefix, "eval_score"), out);
        self.adjust.collect_params(&join_name(prefix, "adjust"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.eval_hidden
            .collect_params_mut(&join_name(prefix, "eval_hidden"), out);
        self.eval_score
            .collect_params_mut(&join_name(prefix, "eval_score"), out);
        self.adjust.collect_params_mut(&join_name(prefix, "adjust"), out);
    }
}
