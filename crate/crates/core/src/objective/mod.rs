//! Sum energy efficiency, box penalties, entropy, and the reparameterized
//! stochastic surrogate.
//!
//! The optimization objective uses natural logarithms. Reporting in
//! Mbit/J replaces `ln` by `B * log2` and divides by `1e6`, which is a
//! constant rescaling of the same quantity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chanmodel::{ChannelMatrix, ScenarioConfig};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Power-consumption model `mu * p + P_c` of one link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub amp_inefficiency: f64,
    pub static_power_w: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            amp_inefficiency: 4.0,
            static_power_w: 1.0,
        }
    }
}

impl From<&ScenarioConfig> for PowerModel {
    fn from(c: &ScenarioConfig) -> Self {
        Self {
            amp_inefficiency: c.amp_inefficiency,
            static_power_w: c.static_power_w,
        }
    }
}

/// Transmit powers of all users, W. Feasibility against `p_max` is the
/// caller's business.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerVector(Vec<f64>);

impl PowerVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some(user) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("power of user {user} is {}", p[user])));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Uniform distribution over the box `[a, a + ell]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformBox {
    pub a: Vec<f64>,
    pub ell: Vec<f64>,
}

impl UniformBox {
    pub fn new(a: Vec<f64>, ell: Vec<f64>) -> Result<Self> {
        if a.len() != ell.len() {
            return Err(Error::DimensionMismatch(format!(
                "box has {} lower bounds and {} widths",
                a.len(),
                ell.len()
            )));
        }
        check_widths(&ell)?;
        Ok(Self { a, ell })
    }

    pub fn upper(&self) -> Vec<f64> {
        self.a.iter().zip(&self.ell).map(|(a, l)| a + l).collect()
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// `a + ell ⊙ u`.
    pub fn sample_at(&self, u: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.ell)
            .zip(u)
            .map(|((a, l), u)| a + l * u)
            .collect()
    }
}

fn check_widths(ell: &[f64]) -> Result<()> {
    match ell.iter().position(|&l| !(l > 0.0 && l.is_finite())) {
        Some(user) => Err(Error::NonPositiveWidth { user, value: ell[user] }),
        None => Ok(()),
    }
}

fn check_powers(g: &ChannelMatrix, p: &[f64]) -> Result<()> {
    if p.len() != g.users() {
        return Err(Error::DimensionMismatch(format!(
            "{} powers for {} users",
            p.len(),
            g.users()
        )));
    }
    match p.iter().position(|&v| !(v >= 0.0)) {
        Some(user) => Err(Error::NegativePower { user, value: p[user] }),
        None => Ok(()),
    }
}

/// `sum_i ln(1 + SINR_i) / (mu p_i + P_c)` where user `i` sees
/// interference `sum_{j != i} G[i][j] p_j` at its serving station.
pub fn sum_ee(g: &ChannelMatrix, p: &[f64], model: &PowerModel) -> Result<f64> {
    check_powers(g, p)?;
    let n = g.users();
    let mut total = 0.0;
    for i in 0..n {
        let interference: f64 = (0..n).filter(|&j| j != i).map(|j| g.get(i, j) * p[j]).sum();
        let sinr = g.get(i, i) * p[i] / (1.0 + interference);
        total += sinr.ln_1p() / (model.amp_inefficiency * p[i] + model.static_power_w);
    }
    Ok(total)
}

/// Value and gradient of [`sum_ee`].
///
/// Writing `ln(1 + SINR_i) = ln T_i - ln D_i` with `D_i` the interference
/// plus noise and `T_i = D_i + g_ii p_i`, each rate has the simple partials
/// `g_ik / T_i - [k != i] g_ik / D_i`.
pub fn sum_ee_grad(g: &ChannelMatrix, p: &[f64], model: &PowerModel) -> Result<(f64, Vec<f64>)> {
    check_powers(g, p)?;
    let n = g.users();
    let (mu, pc) = (model.amp_inefficiency, model.static_power_w);
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let row = &g.gains()[i * n..(i + 1) * n];
        let d: f64 = 1.0 + (0..n).filter(|&j| j != i).map(|j| row[j] * p[j]).sum::<f64>();
        let t = d + row[i] * p[i];
        let rate = (row[i] * p[i] / d).ln_1p();
        let cost = mu * p[i] + pc;
        value += rate / cost;
        for k in 0..n {
            let dr = if k == i { row[k] / t } else { row[k] / t - row[k] / d };
            grad[k] += dr / cost;
        }
        grad[i] -= mu * rate / (cost * cost);
    }
    Ok((value, grad))
}

/// Converts a `sum_ee` value to Mbit/J for bandwidth `bandwidth_hz`.
pub fn nats_to_mbit_per_joule(value: f64, bandwidth_hz: f64) -> f64 {
    value * bandwidth_hz / (std::f64::consts::LN_2 * 1e6)
}

/// Sum EE in Mbit/J.
pub fn report_ee(g: &ChannelMatrix, p: &[f64], model: &PowerModel, bandwidth_hz: f64) -> Result<f64> {
    Ok(nats_to_mbit_per_joule(sum_ee(g, p, model)?, bandwidth_hz))
}

/// How per-user violations are combined into a penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyForm {
    /// `sum_i max(violation_i, 0)`.
    #[default]
    Hinge,
    /// `max(sum_i violation_i, 0)`: signed violations may cancel.
    Literal,
}

fn combine(violations: impl Iterator<Item = f64>, form: PenaltyForm) -> f64 {
    match form {
        PenaltyForm::Hinge => violations.map(|v| v.max(0.0)).sum(),
        PenaltyForm::Literal => violations.sum::<f64>().max(0.0),
    }
}

/// Distance of the lower bounds below `p_min`.
pub fn penalty_low(a: &[f64], p_min: f64, form: PenaltyForm) -> f64 {
    combine(a.iter().map(|a| p_min - a), form)
}

/// Distance of the upper bounds above `p_max`.
pub fn penalty_high(b: &[f64], p_max: f64, form: PenaltyForm) -> f64 {
    combine(b.iter().map(|b| b - p_max), form)
}

/// Differential entropy `sum_i ln ell_i` of the box, nats.
pub fn entropy(bx: &UniformBox) -> Result<f64> {
    check_widths(&bx.ell)?;
    Ok(bx.ell.iter().map(|l| l.ln()).sum())
}

/// Components of the total loss, each averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub surrogate_mean: f64,
    pub penalty_a: f64,
    pub penalty_b: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Settings of the stochastic surrogate.
///
/// Boxes are expressed in units of `scale_w`, so the feasible region is
/// always `[0, 1]^I` in box coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub model: PowerModel,
    pub scale_w: f64,
    pub eps: f64,
    pub kappa: f64,
    pub form: PenaltyForm,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            model: PowerModel::default(),
            scale_w: 1.0,
            eps: 10.0,
            kappa: 0.0,
            form: PenaltyForm::Hinge,
        }
    }
}

/// Tape handles of the loss terms built by [`surrogate_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub surrogate: Var,
    pub penalty_a: Var,
    pub penalty_b: Var,
    pub entropy: Var,
}

impl LossVars {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        LossTerms {
            surrogate_mean: tape.value(self.surrogate).item(),
            penalty_a: tape.value(self.penalty_a).item(),
            penalty_b: tape.value(self.penalty_b).item(),
            entropy: tape.value(self.entropy).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// `U(0,1)` draws of the given shape.
pub fn draw_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Monte-Carlo estimate of `E[f(a + ell ⊙ u)]` with `samples` draws.
pub fn mc_mean<R: Rng + ?Sized>(f: impl Fn(&[f64]) -> f64, bx: &UniformBox, samples: usize, rng: &mut R) -> f64 {
    let mut u = vec![0.0; bx.dim()];
    let mut acc = 0.0;
    for _ in 0..samples {
        u.iter_mut().for_each(|v| *v = rng.gen());
        acc += f(&bx.sample_at(&u));
    }
    acc / samples as f64
}

/// Records the total loss
/// `mean J(a + ell ⊙ u) - eps (P(a) + Q(a + ell)) - kappa H(ell)` on `tape`.
///
/// `a` and `ell` have shape `[B, I]` in box units, `u` has shape
/// `[B, S, I]` and `gains[b]` is the channel of batch row `b`. Sampled
/// powers are projected onto the feasible region before `J` is evaluated.
pub fn surrogate_on_tape(
    tape: &mut Tape,
    gains: &[&ChannelMatrix],
    a: Var,
    ell: Var,
    u: &Tensor,
    cfg: &SurrogateConfig,
) -> Result<LossVars> {
    let shape = tape.value(a).shape().to_vec();
    if shape.len() != 2 || tape.value(ell).shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "surrogate",
            left: shape,
            right: tape.value(ell).shape().to_vec(),
        });
    }
    let (batch, users) = (shape[0], shape[1]);
    let us = u.shape();
    if us.len() != 3 || us[0] != batch || us[2] != users || us[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "surrogate draws",
            left: shape,
            right: us.to_vec(),
        });
    }
    if gains.len() != batch || gains.iter().any(|g| g.users() != users) {
        return Err(Error::DimensionMismatch(format!(
            "batch of {batch} boxes with {users} users does not match the channels"
        )));
    }
    let samples = us[1];
    let full = [batch, samples, users];

    let a3 = tape.reshape(a, &[batch, 1, users])?;
    let a3 = tape.broadcast_to(a3, &full)?;
    let l3 = tape.reshape(ell, &[batch, 1, users])?;
    let l3 = tape.broadcast_to(l3, &full)?;
    let uc = tape.constant(u.clone());
    let spread = tape.mul(l3, uc)?;
    let p = tape.add(a3, spread)?;
    let p = tape.clamp(p, 0.0, 1.0);

    let mut values = Vec::with_capacity(batch * samples);
    let mut local = Vec::with_capacity(batch * samples * users);
    let mut watts = vec![0.0; users];
    for (row, q) in tape.value(p).data().chunks_exact(users).enumerate() {
        watts.iter_mut().zip(q).for_each(|(w, q)| *w = cfg.scale_w * q);
        let (v, gr) = sum_ee_grad(gains[row / samples], &watts, &cfg.model)?;
        values.push(v);
        local.extend(gr.into_iter().map(|d| d * cfg.scale_w));
    }
    let j = tape.rows(p, Tensor::new(vec![batch, samples], values)?, Tensor::new(full.to_vec(), local)?)?;
    let surrogate = tape.mean_all(j);

    let below = tape.scale(a, -1.0);
    let penalty_a = penalty_on_tape(tape, below, cfg.form)?;
    let b = tape.add(a, ell)?;
    let above = tape.add_scalar(b, -1.0);
    let penalty_b = penalty_on_tape(tape, above, cfg.form)?;

    let log_width = tape.ln(ell);
    let per_sample = tape.sum_last(log_width)?;
    let entropy = tape.mean_all(per_sample);

    let pen = tape.add(penalty_a, penalty_b)?;
    let pen = tape.scale(pen, cfg.eps);
    let reg = tape.scale(entropy, cfg.kappa);
    let total = tape.sub(surrogate, pen)?;
    let total = tape.sub(total, reg)?;
    Ok(LossVars {
        total,
        surrogate,
        penalty_a,
        penalty_b,
        entropy,
    })
}

/// Batch mean of the combined violations `v` (shape `[B, I]`).
fn penalty_on_tape(tape: &mut Tape, v: Var, form: PenaltyForm) -> Result<Var> {
    let per_sample = match form {
        PenaltyForm::Hinge => {
            let h = tape.relu(v);
            tape.sum_last(h)?
        }
        PenaltyForm::Literal => {
            let s = tape.sum_last(v)?;
            tape.relu(s)
        }
    };
    Ok(tape.mean_all(per_sample))
}

/// Loss terms and gradients with respect to `a` and `ell` for one channel,
/// drawing `samples` Monte-Carlo points from `rng`.
pub fn surrogate_loss<R: Rng + ?Sized>(
    g: &ChannelMatrix,
    bx: &UniformBox,
    samples: usize,
    cfg: &SurrogateConfig,
    rng: &mut R,
) -> Result<(LossTerms, Vec<f64>, Vec<f64>)> {
    if samples == 0 {
        return Err(Error::InvalidConfig("at least one Monte-Carlo sample is required".into()));
    }
    check_widths(&bx.ell)?;
    let n = bx.dim();
    let u = draw_uniform(rng, &[1, samples, n]);
    let mut tape = Tape::new();
    let a = tape.param(Tensor::new(vec![1, n], bx.a.clone())?);
    let ell = tape.param(Tensor::new(vec![1, n], bx.ell.clone())?);
    let vars = surrogate_on_tape(&mut tape, &[g], a, ell, &u, cfg)?;
    let grads = tape.backward(vars.total)?;
    Ok((
        vars.terms(&tape),
        grads.get_or_zeros(a).into_data(),
        grads.get_or_zeros(ell).into_data(),
    ))
}
