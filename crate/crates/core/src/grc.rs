//! Gated residual connection: `y = r + σ(W_gate · r + b_gate) ⊙ s`, where `r`
//! is the residual stream entering a sublayer and `s` the sublayer's output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, LinearLayer};
use crate::tape::{Tape, Var};
use crate::tensor::{join_name, Param, Parameterized, Tensor};

#[derive(Clone, Debug)]
pub struct GatedResidualConnection {
    pub gate: LinearLayer,
}

/// Learnable scalars in one connection of width `k`: `k² + k`.
pub const fn grc_param_count(k: usize) -> usize {
    k * k + k
}

impl GatedResidualConnection {
    /// Uniform fan-in gate weights; every gate bias starts at `gate_bias_init`.
    pub fn new(k: usize, rng: &mut impl Rng, gate_bias_init: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("gated residual width must be positive".into()));
        }
        if !gate_bias_init.is_finite() {
            return Err(Error::Config("gate bias init must be finite".into()));
        }
        let mut gate = LinearLayer::new(k, k, rng);
        gate.bias.value.fill(gate_bias_init);
        Ok(Self { gate })
    }

    pub fn from_layer(gate: LinearLayer) -> Result<Self> {
        if gate.in_dim() != gate.out_dim() {
            return Err(Error::Config("gate layer must be square".into()));
        }
        Ok(Self { gate })
    }

    pub fn width(&self) -> usize {
        self.gate.in_dim()
    }

    /// Gate vector `σ(W_gate · r + b_gate)`.
    pub fn gate_values(&self, tape: &mut Tape, residual: Var) -> Result<Var> {
        let z = self.gate.forward(tape, residual)?;
        tape.sigmoid(z)
    }

    pub fn forward(&self, tape: &mut Tape, residual: Var, sublayer: Var, ctx: &ForwardCtx) -> Result<Var> {
        let (rs, ss) = (tape.value(residual).shape(), tape.value(sublayer).shape());
        if rs != ss || rs.last() != Some(&self.width()) {
            return Err(Error::Shape {
                op: "gated residual",
                lhs: rs.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let gate = match ctx.gate_override() {
            Some(v) => tape.constant(Tensor::full(rs.to_vec(), v)),
            None => self.gate_values(tape, residual)?,
        };
        let scaled = tape.mul(gate, sublayer)?;
        tape.add(residual, scaled)
    }

    pub fn apply(&self, residual: &Tensor, sublayer: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = tape.constant(residual.clone());
        let s = tape.constant(sublayer.clone());
        let y = self.forward(&mut tape, r, s, &ForwardCtx::eval())?;
        Ok(tape.value(y).clone())
    }

    pub fn gate_of(&self, residual: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = tape.constant(residual.clone());
        let g = self.gate_values(&mut tape, r)?;
        Ok(tape.value(g).clone())
    }
}

impl Parameterized for GatedResidualConnection {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.gate.collect_params(&join_name(prefix, "gate"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.gate.collect_params_mut(&join_name(prefix, "gate"), out);
    }
}
