//! AdamW with decoupled weight decay, learning-rate schedules, and the
//! seeded random streams used for initialization, dropout and shuffling.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::{Param, ParamKind, Tensor};

/// Stream purposes.
pub const INIT_STREAM: &str = "init";
pub const DROPOUT_STREAM: &str = "dropout";
pub const SHUFFLE_STREAM: &str = "data-shuffle";
pub const SYNTH_STREAM: &str = "synthetic-data";

/// A generator keyed by `(seed, purpose, counter)`.
///
/// The key is hashed, so streams for different purposes or counters are
/// unrelated while identical keys always replay the same draws.
pub fn rng_stream(seed: u64, purpose: &str, counter: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(counter.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Also decay biases, norm gains/shifts. Off by default.
    #[serde(default)]
    pub decay_all: bool,
    /// Global gradient-norm clip. Off by default.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
}

fn default_epsilon() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon: default_epsilon(),
            weight_decay,
            decay_all: false,
            clip_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("epsilon must be > 0 and weight_decay >= 0".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config("clip_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn decays(&self, kind: ParamKind) -> bool {
        self.decay_all || matches!(kind, ParamKind::Weight | ParamKind::Embedding)
    }
}

/// One AdamW update of a flat parameter buffer, in place.
///
/// `t` is the 1-based step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + wd * theta[i]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Optimizer state: first/second moments per named parameter and the step
/// counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Restores state saved from [`AdamW::moments`] and [`AdamW::step_count`].
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments>) {
        self.step = step;
        self.moments = moments;
    }

    /// Applies one update to every parameter. Parameters without a gradient
    /// are treated as having a zero gradient (they still decay).
    pub fn step(&mut self, params: Vec<(String, &mut Param)>, grads: &Gradients, lr: f64) -> Result<()> {
        let mut flat: Vec<(String, &mut Param, Vec<f64>)> = Vec::with_capacity(params.len());
        for (name, p) in params {
            let g = match grads.param(p) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; p.numel()],
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { name });
            }
            flat.push((name, p, g));
        }
        if let Some(max_norm) = self.config.clip_grad_norm {
            let norm = flat
                .iter()
                .flat_map(|(_, _, g)| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                flat.iter_mut().for_each(|(_, _, g)| g.iter_mut().for_each(|v| *v *= s));
            }
        }
        self.step += 1;
        for (name, p, g) in flat {
            let shape = p.value.shape().to_vec();
            let mo = self.moments.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            });
            let decay = self.config.decays(p.kind);
            adamw_update(
                p.value.data_mut(),
                &g,
                mo.m.data_mut(),
                mo.v.data_mut(),
                self.step,
                lr,
                &self.config,
                decay,
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        peak_lr: f64,
    },
    /// Linear warmup to `peak_lr` over `warmup_steps`, then `∝ 1/√t`.
    WarmupInvSqrt {
        peak_lr: f64,
        warmup_steps: u64,
    },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { peak_lr } if peak_lr >= 0.0 && peak_lr.is_finite() => Ok(()),
            LrSchedule::WarmupInvSqrt { peak_lr, warmup_steps }
                if peak_lr >= 0.0 && peak_lr.is_finite() && warmup_steps > 0 =>
            {
                Ok(())
            }
            _ => Err(Error::Config(format!("invalid learning-rate schedule {self:?}"))),
        }
    }

    /// Learning rate for 1-based step `t` (0 is treated as 1).
    pub fn lr_at(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        match *self {
            LrSchedule::Constant { peak_lr } => peak_lr,
            LrSchedule::WarmupInvSqrt { peak_lr, warmup_steps } => {
                let w = warmup_steps as f64;
                if t <= w {
                    peak_lr * t / w
                } else {
                    peak_lr * (w / t).sqrt()
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn single_step_hand_value() {
        let cfg = AdamWConfig::new(0.9, 0.98, 0.01);
        let (mut theta, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.001, &cfg, true);
        let expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert_abs_diff_eq!(theta[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(theta[0], 0.998_990, epsilon = 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig::new(0.9, 0.999, 0.0);
        let (mut theta, mut m, mut v) = ([0.7, -3.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut theta, &[0.0; 2], &mut m, &mut v, 1, 0.01, &cfg, true);
        assert_eq!(theta, [0.7, -3.0]);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig::new(0.9, 0.999, 0.1);
        let lr = 0.05;
        let (mut theta, mut m, mut v) = ([2.0], [0.0], [0.0]);
        let mut expected = 2.0;
        for t in 1..=20 {
            adamw_update(&mut theta, &[0.0], &mut m, &mut v, t, lr, &cfg, true);
            expected *= 1.0 - lr * 0.1;
            assert_abs_diff_eq!(theta[0], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn weight_decay_policy() {
        let cfg = AdamWConfig::new(0.9, 0.98, 0.01);
        assert!(cfg.decays(ParamKind::Weight));
        assert!(!cfg.decays(ParamKind::Bias));
        assert!(!cfg.decays(ParamKind::Norm));
        let all = AdamWConfig { decay_all: true, ..cfg };
        assert!(all.decays(ParamKind::Norm));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = Param::new(Tensor::from_vec(vec![1.0, 2.0]).unwrap(), ParamKind::Weight);
        let bad = Tensor::from_parts(vec![2], vec![0.5, f64::INFINITY]);
        let grads = Gradients::from_param_grads(vec![(&p, bad)]);
        let mut opt = AdamW::new(AdamWConfig::new(0.9, 0.98, 0.0)).unwrap();
        let err = opt.step(vec![("enc.w".into(), &mut p)], &grads, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "enc.w"));
        assert_eq!(opt.step_count(), 0);
        assert_eq!(p.value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn schedules() {
        let s = LrSchedule::WarmupInvSqrt {
            peak_lr: 1e-3,
            warmup_steps: 4000,
        };
        assert_abs_diff_eq!(s.lr_at(2000), 5e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(s.lr_at(4000), 1e-3, epsilon = 1e-18);
        assert_abs_diff_eq!(s.lr_at(16000), 5e-4, epsilon = 1e-18);
        let c = LrSchedule::Constant { peak_lr: 2e-5 };
        assert_eq!(c.lr_at(1), 2e-5);
        assert_eq!(c.lr_at(10_000), 2e-5);
    }

    #[test]
    fn schedule_is_continuous_and_unimodal() {
        let s = LrSchedule::WarmupInvSqrt {
            peak_lr: 1.0,
            warmup_steps: 50,
        };
        let lrs: Vec<f64> = (1..=400).map(|t| s.lr_at(t)).collect();
        assert!(lrs.iter().all(|&v| v >= 0.0));
        assert!(lrs[..50].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[49..].windows(2).all(|w| w[1] <= w[0]));
        assert!((s.lr_at(50) - s.lr_at(51)).abs() < 0.02);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draws = |mut r: ChaCha8Rng| (0..1000).map(|_| r.gen::<u64>()).collect::<Vec<_>>();
        assert_eq!(
            draws(rng_stream(5, INIT_STREAM, 0)),
            draws(rng_stream(5, INIT_STREAM, 0))
        );
        assert_ne!(
            draws(rng_stream(5, INIT_STREAM, 0)),
            draws(rng_stream(5, DROPOUT_STREAM, 0))
        );
        assert_ne!(
            draws(rng_stream(5, DROPOUT_STREAM, 0)),
            draws(rng_stream(5, DROPOUT_STREAM, 1))
        );
        assert_ne!(
            draws(rng_stream(5, INIT_STREAM, 0)),
            draws(rng_stream(6, INIT_STREAM, 0))
        );
    }

    #[test]
    fn config_validation() {
        assert!(AdamW::new(AdamWConfig::new(1.0, 0.9, 0.0)).is_err());
        assert!(AdamW::new(AdamWConfig::new(0.9, 0.9, -1.0)).is_err());
        assert!(LrSchedule::WarmupInvSqrt {
            peak_lr: 1.0,
            warmup_steps: 0
        }
        .validate()
        .is_err());
    }
}
