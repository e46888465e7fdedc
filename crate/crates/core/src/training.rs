//! Teacher-forced likelihood training and gradient verification.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, TurnInput};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// Numeric precision of parameters and arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Float32,
    #[default]
    Float64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Float32 => f32::NAME,
            Precision::Float64 => f64::NAME,
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub max_steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Stop after this many validation checks without improvement.
    #[serde(default)]
    pub patience: Option<u32>,
    /// Steps between validation-perplexity checks (0 disables them).
    #[serde(default)]
    pub eval_every: u64,
}

fn default_lr() -> f64 {
    0.005
}
fn default_batch() -> usize {
    32
}
fn default_steps() -> u64 {
    1000
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_steps: default_steps(),
            seed: 0,
            precision: Precision::default(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            patience: None,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Matrix<T>>,
    pub second_moment: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: &TrainConfig) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Matrix<T>]) {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let pd = p.value.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Loss and parameter gradients of one conversation (summed, not averaged).
#[derive(Clone, Debug)]
pub struct ConversationGradient<T> {
    pub loss: T,
    pub per_turn: Vec<T>,
    pub tokens: usize,
    pub grads: Vec<Matrix<T>>,
}

pub fn conversation_gradient<T: Scalar>(
    model: &Model<T>,
    turns: &[TurnInput],
) -> Result<ConversationGradient<T>> {
    let mut tape = Tape::new();
    let out = model.conversation_loss(&mut tape, turns)?;
    let grads = tape.backward(out.total);
    Ok(ConversationGradient {
        loss: tape.scalar(out.total),
        per_turn: out.per_turn.iter().map(|&v| tape.scalar(v)).collect(),
        tokens: out.tokens,
        grads: model.params.gradients(&tape, &grads),
    })
}

/// Gradient of the mean per-token NLL over a set of conversations.
#[derive(Clone, Debug)]
pub struct BatchGradient<T> {
    /// Summed NLL.
    pub loss_sum: T,
    pub tokens: usize,
    /// Gradients of `loss_sum / tokens`.
    pub grads: Vec<Matrix<T>>,
}

impl<T: Scalar> BatchGradient<T> {
    pub fn mean_loss(&self) -> T {
        self.loss_sum / T::from_f64(self.tokens.max(1) as f64)
    }
}

/// Sums per-conversation results in the given order.
pub fn reduce_gradients<T: Scalar>(parts: Vec<ConversationGradient<T>>) -> BatchGradient<T> {
    let mut iter = parts.into_iter();
    let Some(first) = iter.next() else {
        return BatchGradient {
            loss_sum: T::zero(),
            tokens: 0,
            grads: Vec::new(),
        };
    };
    let mut loss_sum = first.loss;
    let mut tokens = first.tokens;
    let mut grads = first.grads;
    for part in iter {
        loss_sum = loss_sum + part.loss;
        tokens += part.tokens;
        for (g, p) in grads.iter_mut().zip(&part.grads) {
            g.add_assign(p);
        }
    }
    let inv = T::one() / T::from_f64(tokens.max(1) as f64);
    for g in &mut grads {
        for v in g.data_mut() {
            *v = *v * inv;
        }
    }
    BatchGradient {
        loss_sum,
        tokens,
        grads,
    }
}

pub fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    conversations: &[Vec<TurnInput>],
) -> Result<BatchGradient<T>> {
    let parts = conversations
        .iter()
        .map(|c| conversation_gradient(model, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_gradients(parts))
}

/// Applies one optimizer step from a precomputed gradient. Returns the mean
/// per-token loss.
pub fn apply_gradient<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    gradient: &BatchGradient<T>,
    batch_index: usize,
) -> Result<f64> {
    let loss = gradient.mean_loss().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: adam.step + 1,
            batch: batch_index,
        });
    }
    adam.update(&mut model.params, &gradient.grads);
    Ok(loss)
}

/// One gradient step on the mean per-token NLL of `batch`.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &Batch,
    batch_index: usize,
) -> Result<f64> {
    let convs: Vec<Vec<TurnInput>> = (0..batch.size()).map(|b| batch.conversation(b)).collect();
    let gradient = batch_gradient(model, &convs)?;
    apply_gradient(model, adam, &gradient, batch_index)
}

/// Denominator floor of the relative error, so entries whose true gradient is
/// near zero are compared absolutely.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;
pub const GRADIENT_CHECK_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_CHECK_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    /// Entries re-differenced with a tenth of the step.
    pub refined_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradientCheckReport {
    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Mean per-token NLL over `conversations`.
pub fn mean_loss(model: &Model<f64>, conversations: &[Vec<TurnInput>]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for c in conversations {
        let mut tape = Tape::new();
        let out = model.conversation_loss(&mut tape, c)?;
        total += tape.scalar(out.total);
        tokens += out.tokens;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Decoder memory states of every conversation under `model`.
pub fn memory_states(
    model: &Model<f64>,
    conversations: &[Vec<TurnInput>],
) -> Result<Vec<Vec<Vec<Matrix<f64>>>>> {
    conversations
        .iter()
        .map(|c| {
            let mut tape = Tape::new();
            Ok(model.conversation_loss(&mut tape, c)?.states)
        })
        .collect()
}

/// Mean per-token NLL with each conversation's memory pinned to `frozen`.
pub fn frozen_mean_loss(
    model: &Model<f64>,
    conversations: &[Vec<TurnInput>],
    frozen: &[Vec<Vec<Matrix<f64>>>],
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for (c, f) in conversations.iter().zip(frozen) {
        let mut tape = Tape::new();
        let out = model.conversation_loss_frozen(&mut tape, c, f)?;
        total += tape.scalar(out.total);
        tokens += out.tokens;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Compares analytic gradients of the mean per-token loss against central
/// finite differences for every entry of every parameter tensor. The
/// response memory is held at its unperturbed value while differencing,
/// matching the stop-gradient the analytic pass applies.
pub fn gradient_report(
    model: &Model<f64>,
    conversations: &[Vec<TurnInput>],
    eps: f64,
) -> Result<GradientCheckReport> {
    if model.config.d_model > 8 || model.config.layers > 2 {
        return Err(Error::Contract(format!(
            "gradient check needs d_model <= 8 and layers <= 2, got {} and {}",
            model.config.d_model, model.config.layers
        )));
    }
    let analytic = batch_gradient(model, conversations)?;
    let frozen = memory_states(model, conversations)?;
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(model.params.len());
    for (id, param) in model.params.iter() {
        let mut check = GroupCheck {
            name: param.name.clone(),
            entries: param.value.len(),
            max_relative_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
            refined_entries: 0,
        };
        for i in 0..param.value.len() {
            let a = analytic.grads[id.index()].data()[i];
            let mut numeric = central_difference(&mut probe, id, i, eps, conversations, &frozen)?;
            let mut err = relative_error(a, numeric);
            if err >= GRADIENT_CHECK_TOLERANCE {
                // A ReLU kink inside the step makes the difference one-sided
                // on the wrong branch; a smaller step tells kinks from errors.
                let fine = central_difference(&mut probe, id, i, eps / 10.0, conversations, &frozen)?;
                let fine_err = relative_error(a, fine);
                if fine_err < err {
                    numeric = fine;
                    err = fine_err;
                    check.refined_entries += 1;
                }
            }
            check.max_relative_error = check.max_relative_error.max(err);
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
        }
        groups.push(check);
    }
    Ok(GradientCheckReport { groups })
}

fn central_difference(
    probe: &mut Model<f64>,
    id: ParamId,
    i: usize,
    eps: f64,
    conversations: &[Vec<TurnInput>],
    frozen: &[Vec<Vec<Matrix<f64>>>],
) -> Result<f64> {
    let orig = probe.params.get(id).data()[i];
    probe.params.get_mut(id).data_mut()[i] = orig + eps;
    let plus = frozen_mean_loss(probe, conversations, frozen)?;
    probe.params.get_mut(id).data_mut()[i] = orig - eps;
    let minus = frozen_mean_loss(probe, conversations, frozen)?;
    probe.params.get_mut(id).data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

/// [`gradient_report`] that fails on the worst group at or above the
/// tolerance.
pub fn gradient_check(
    model: &Model<f64>,
    conversations: &[Vec<TurnInput>],
    eps: f64,
) -> Result<GradientCheckReport> {
    let report = gradient_report(model, conversations, eps)?;
    if let Some(worst) = report.worst() {
        if worst.max_relative_error >= GRADIENT_CHECK_TOLERANCE {
            return Err(Error::GradientCheck {
                group: worst.name.clone(),
                error: worst.max_relative_error,
            });
        }
    }
    Ok(report)
}
