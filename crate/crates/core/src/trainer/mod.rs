//! Unsupervised training of the α/β network pair by stochastic gradient
//! ascent on the box surrogate, with the entropy-weight schedule, optional
//! feasible-region adaptation and per-epoch metrics.
//!
//! Network outputs live in units of the current region scale `s`; they
//! are converted to watts only when powers are reported.

mod optim;
mod rastrigin;
mod schedule;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chanmodel::{sample_rng, ChannelMatrix, Dataset};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::inet::{init_input_batch, net_forward_batch, net_on_tape, Head, NetParams, NetShape, NetVars, ELL_MIN};
use crate::objective::{
    draw_uniform, penalty_high, penalty_low, report_ee, surrogate_on_tape, PenaltyForm, PowerModel, SurrogateConfig,
};
use crate::oracle::ComparisonRow;

pub use optim::{Optimizer, OptimizerKind};
pub use rastrigin::{
    rastrigin, rastrigin_box, rastrigin_box_rng, rastrigin_demo, rastrigin_gd, rastrigin_grad, rastrigin_start,
    RastriginConfig, RastriginTrace,
};
pub use schedule::{KappaState, RegionState};

/// Hyperparameters of a training run. Every field has a default, so a
/// partial JSON object deserializes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epoch cap.
    pub epochs: usize,
    /// Monte-Carlo draws per sample and step.
    pub mc_samples: usize,
    /// Penalty weight.
    pub eps: f64,
    pub kappa_step: f64,
    pub kappa_window: usize,
    /// Entropy stop threshold, nats. `None` means `I * ln(10 * ell_min)`.
    pub h0: Option<f64>,
    pub rho: f64,
    pub region_adaptation: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub ell_min: f64,
    pub shape: NetShape,
    pub penalty_form: PenaltyForm,
    /// Initial output of the α head, in units of `s`.
    pub alpha_init: f64,
    /// Initial output of the β head, in units of `s`.
    pub beta_init: f64,
    pub p_max_w: f64,
    pub model: PowerModel,
    pub bandwidth_hz: f64,
    /// Replace the β head by the constant width `ell_min`.
    pub fixed_width: bool,
    /// Use this value for every uniform draw instead of sampling.
    pub fixed_draw: Option<f64>,
    /// Hold `kappa` at this value instead of scheduling it.
    pub fixed_kappa: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 1000,
            mc_samples: 16,
            eps: 10.0,
            kappa_step: 1e-3,
            kappa_window: 50,
            h0: None,
            rho: 0.99,
            region_adaptation: false,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            ell_min: ELL_MIN,
            shape: NetShape::default(),
            penalty_form: PenaltyForm::Hinge,
            alpha_init: -0.1,
            beta_init: 1.2,
            p_max_w: 1.0,
            model: PowerModel::default(),
            bandwidth_hz: 180e3,
            fixed_width: false,
            fixed_draw: None,
            fixed_kappa: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.mc_samples == 0 || self.kappa_window == 0 {
            return bad("batch size, Monte-Carlo samples and kappa window must be at least 1".into());
        }
        if !(self.kappa_step > 0.0) || !(self.eps >= 0.0) {
            return bad(format!("need kappa step > 0 and eps >= 0, got {} and {}", self.kappa_step, self.eps));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.ell_min > 0.0) || !(self.p_max_w > 0.0) || !(self.bandwidth_hz > 0.0) {
            return bad("ell_min, p_max and bandwidth must be positive".into());
        }
        if self.fixed_draw.is_some_and(|u| !(0.0..=1.0).contains(&u)) {
            return bad("fixed draw must lie in [0, 1]".into());
        }
        if self.fixed_kappa.is_some_and(|k| !(k >= 0.0)) {
            return bad("fixed kappa must be >= 0".into());
        }
        self.shape.validate()
    }

    /// Entropy threshold for `users` users.
    pub fn entropy_threshold(&self, users: usize) -> f64 {
        self.h0.unwrap_or(users as f64 * (10.0 * self.ell_min).ln())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_ee_mbit_per_j: f64,
    pub mean_entropy_nats: f64,
    pub mean_penalty: f64,
    pub kappa: f64,
    pub s_watts: f64,
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub kappa: KappaState,
    pub region: RegionState,
    pub opt_alpha: Optimizer,
    pub opt_beta: Optimizer,
}

impl TrainState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::State(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::State(e.to_string()))
    }
}

/// Statistics of the current parameters over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snapshot {
    pub mean_ee_mbit_per_j: f64,
    pub mean_entropy_nats: f64,
    /// Mean of `P(a) + Q(a + ell)`, unweighted.
    pub mean_penalty: f64,
    pub mean_width_w: f64,
    pub max_width_w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EntropyThreshold,
    EpochCap,
}

/// Parameters plus schedule state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    alpha: NetParams,
    beta: NetParams,
    state: TrainState,
}

impl Trainer {
    /// Fresh networks initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = sample_rng(cfg.seed, 0);
        let alpha = NetParams::init(cfg.shape, cfg.alpha_init, &mut rng)?;
        let beta = NetParams::init(cfg.shape, cfg.beta_init, &mut rng)?;
        let state = TrainState {
            epoch: 0,
            kappa: KappaState::new(cfg.kappa_window, cfg.kappa_step)?,
            region: RegionState { s: cfg.p_max_w },
            opt_alpha: Optimizer::new(cfg.optimizer, alpha.param_count()),
            opt_beta: Optimizer::new(cfg.optimizer, beta.param_count()),
        };
        Ok(Self { cfg, alpha, beta, state })
    }

    /// Continues from saved parameters and state.
    pub fn resume(cfg: TrainConfig, alpha: NetParams, beta: NetParams, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if alpha.shape != cfg.shape || beta.shape != cfg.shape {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint shapes {:?}/{:?} differ from configured {:?}",
                alpha.shape, beta.shape, cfg.shape
            )));
        }
        if state.opt_alpha.kind != cfg.optimizer || state.opt_beta.kind != cfg.optimizer {
            return Err(Error::State("saved optimizer differs from the configured one".into()));
        }
        if !(state.region.s > 0.0 && state.region.s <= cfg.p_max_w) {
            return Err(Error::State(format!("region scale {} outside (0, {}]", state.region.s, cfg.p_max_w)));
        }
        Ok(Self { cfg, alpha, beta, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn alpha(&self) -> &NetParams {
        &self.alpha
    }

    pub fn beta(&self) -> &NetParams {
        &self.beta
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn alpha_mut(&mut self) -> &mut NetParams {
        &mut self.alpha
    }

    pub fn beta_mut(&mut self) -> &mut NetParams {
        &mut self.beta
    }

    pub fn kappa(&self) -> f64 {
        self.cfg.fixed_kappa.unwrap_or(self.state.kappa.kappa())
    }

    pub fn scale(&self) -> f64 {
        self.state.region.s
    }

    pub fn into_parts(self) -> (NetParams, NetParams, TrainState) {
        (self.alpha, self.beta, self.state)
    }

    /// Box bounds `(a, ell)` of a batch, each `[B, I]` in units of `s`.
    fn boxes(&self, gs: &[&ChannelMatrix]) -> Result<(Tensor, Tensor)> {
        let a = net_forward_batch(gs, &self.alpha, Head::Alpha, self.cfg.ell_min)?;
        let ell = if self.cfg.fixed_width {
            Tensor::full(a.shape(), self.cfg.ell_min)
        } else {
            net_forward_batch(gs, &self.beta, Head::Beta, self.cfg.ell_min)?
        };
        Ok((a, ell))
    }

    /// Metrics of the current parameters over `ds`, without updating
    /// anything.
    pub fn snapshot(&self, ds: &Dataset) -> Result<Snapshot> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (n, s, form) = (ds.users(), self.state.region.s, self.cfg.penalty_form);
        let (mut ee, mut ent, mut pen, mut wsum, mut wmax) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
        let mut p = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for (c, chunk) in ds.samples().chunks(self.cfg.batch_size.max(256)).enumerate() {
            let gs: Vec<&ChannelMatrix> = chunk.iter().collect();
            let (a, ell) = self.boxes(&gs)?;
            for (k, ((g, a), l)) in gs.iter().zip(a.data().chunks_exact(n)).zip(ell.data().chunks_exact(n)).enumerate() {
                let sample = c * self.cfg.batch_size.max(256) + k;
                let diverged = || Error::NonFiniteLoss {
                    epoch: self.state.epoch,
                    sample,
                };
                if !a.iter().chain(l).all(|v| v.is_finite()) {
                    return Err(diverged());
                }
                p.iter_mut().zip(a).for_each(|(p, a)| *p = a.clamp(0.0, 1.0) * s);
                upper.iter_mut().zip(a.iter().zip(l)).for_each(|(u, (a, l))| *u = a + l);
                ee += report_ee(g, &p, &self.cfg.model, self.cfg.bandwidth_hz)?;
                ent += l.iter().map(|l| l.ln()).sum::<f64>();
                pen += penalty_low(a, 0.0, form) + penalty_high(&upper, 1.0, form);
                for l in l {
                    wsum += l * s;
                    wmax = wmax.max(l * s);
                }
            }
        }
        let m = ds.len() as f64;
        Ok(Snapshot {
            mean_ee_mbit_per_j: ee / m,
            mean_entropy_nats: ent / m,
            mean_penalty: pen / m,
            mean_width_w: wsum / (m * n as f64),
            max_width_w: wmax,
        })
    }

    fn metrics(&self, snap: &Snapshot, kappa: f64, s: f64) -> EpochMetrics {
        EpochMetrics {
            epoch: self.state.epoch,
            mean_ee_mbit_per_j: snap.mean_ee_mbit_per_j,
            mean_entropy_nats: snap.mean_entropy_nats,
            mean_penalty: snap.mean_penalty,
            kappa,
            s_watts: s,
        }
    }

    /// The metrics row of the current parameters, labelled with the number
    /// of completed epochs.
    pub fn current_metrics(&self, ds: &Dataset) -> Result<EpochMetrics> {
        let snap = self.snapshot(ds)?;
        Ok(self.metrics(&snap, self.kappa(), self.scale()))
    }

    /// One pass of mini-batch ascent over a shuffled `ds`, followed by the
    /// `kappa` and region updates. The returned row holds the `kappa` and
    /// `s` used during the epoch and the metrics of the updated parameters.
    pub fn step_epoch(&mut self, ds: &Dataset) -> Result<(EpochMetrics, Snapshot)> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.state.epoch + 1;
        let mut rng = sample_rng(self.cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);

        let (kappa, s) = (self.kappa(), self.scale());
        let scfg = SurrogateConfig {
            model: self.cfg.model,
            scale_w: s,
            eps: self.cfg.eps,
            kappa,
            form: self.cfg.penalty_form,
        };
        let n = ds.users();
        for idx in order.chunks(self.cfg.batch_size) {
            let shape = [idx.len(), self.cfg.mc_samples, n];
            let u = match self.cfg.fixed_draw {
                Some(v) => Tensor::full(&shape, v),
                None => draw_uniform(&mut rng, &shape),
            };
            self.ascent_step(ds, idx, &u, &scfg, epoch)?;
        }

        self.state.epoch = epoch;
        let snap = self.snapshot(ds)?;
        let row = self.metrics(&snap, kappa, s);
        self.state.kappa.update(snap.mean_entropy_nats);
        if self.cfg.region_adaptation {
            self.state
                .region
                .update(snap.mean_width_w, snap.max_width_w, self.cfg.rho);
        }
        Ok((row, snap))
    }

    fn ascent_step(&mut self, ds: &Dataset, idx: &[usize], u: &Tensor, scfg: &SurrogateConfig, epoch: usize) -> Result<()> {
        let gs: Vec<&ChannelMatrix> = idx.iter().map(|&k| &ds.samples()[k]).collect();
        let mut tape = Tape::new();
        let av = NetVars::bind(&mut tape, &self.alpha, true);
        let bv = (!self.cfg.fixed_width).then(|| NetVars::bind(&mut tape, &self.beta, true));
        let lg = tape.constant(init_input_batch(&gs)?);
        let a = net_on_tape(&mut tape, &av, lg, Head::Alpha, self.cfg.ell_min)?;
        let ell = match &bv {
            Some(bv) => net_on_tape(&mut tape, bv, lg, Head::Beta, self.cfg.ell_min)?,
            None => tape.constant(Tensor::full(&[gs.len(), ds.users()], self.cfg.ell_min)),
        };
        let diverged = |row: usize| Error::NonFiniteLoss {
            epoch,
            sample: idx[row],
        };
        let loss = match surrogate_on_tape(&mut tape, &gs, a, ell, u, scfg) {
            Ok(l) if tape.value(l.total).item().is_finite() => l,
            outcome => {
                let boxes = (tape.value(a).clone(), tape.value(ell).clone());
                return match first_nonfinite(&gs, &boxes, u, scfg)? {
                    Some(row) => Err(diverged(row)),
                    None => outcome.map(|_| ()).and(Err(diverged(0))),
                };
            }
        };
        let grads = tape.backward(loss.total)?;
        let lr = self.cfg.learning_rate;
        let ga: Vec<Tensor> = av.vars().into_iter().map(|v| grads.get_or_zeros(v)).collect();
        self.state.opt_alpha.ascend(self.alpha.tensors_mut(), &ga, lr)?;
        if let Some(bv) = bv {
            let gb: Vec<Tensor> = bv.vars().into_iter().map(|v| grads.get_or_zeros(v)).collect();
            self.state.opt_beta.ascend(self.beta.tensors_mut(), &gb, lr)?;
        }
        Ok(())
    }

    /// Trains until the entropy threshold or `epochs` further epochs,
    /// whichever comes first. `log` receives the initial row (only when no
    /// epoch has run yet) and one row per epoch.
    pub fn run(
        &mut self,
        ds: &Dataset,
        epochs: usize,
        mut log: impl FnMut(&EpochMetrics, &Self) -> Result<()>,
    ) -> Result<StopReason> {
        let h0 = self.cfg.entropy_threshold(ds.users());
        let below = |m: &EpochMetrics, cfg: &TrainConfig| !cfg.fixed_width && m.mean_entropy_nats < h0;
        if self.state.epoch == 0 {
            let row = self.current_metrics(ds)?;
            log(&row, self)?;
            if below(&row, &self.cfg) {
                return Ok(StopReason::EntropyThreshold);
            }
        }
        for _ in 0..epochs {
            let (row, _) = self.step_epoch(ds)?;
            log(&row, self)?;
            if below(&row, &self.cfg) {
                return Ok(StopReason::EntropyThreshold);
            }
        }
        Ok(StopReason::EpochCap)
    }
}

/// Batch row whose own loss is not finite, if any.
fn first_nonfinite(
    gs: &[&ChannelMatrix],
    (a, ell): &(Tensor, Tensor),
    u: &Tensor,
    scfg: &SurrogateConfig,
) -> Result<Option<usize>> {
    let n = a.shape()[1];
    let draws = u.shape()[1];
    for (row, g) in gs.iter().enumerate() {
        let pick = |t: &Tensor| Tensor::new(vec![1, n], t.data()[row * n..(row + 1) * n].to_vec());
        let (ar, lr) = (pick(a)?, pick(ell)?);
        if !ar.all_finite() || !lr.all_finite() {
            return Ok(Some(row));
        }
        let ur = Tensor::new(vec![1, draws, n], u.data()[row * draws * n..(row + 1) * draws * n].to_vec())?;
        let mut tape = Tape::new();
        let (av, lv) = (tape.constant(ar), tape.constant(lr));
        match surrogate_on_tape(&mut tape, &[g], av, lv, &ur, scfg) {
            Ok(l) if tape.value(l.total).item().is_finite() => {}
            _ => return Ok(Some(row)),
        }
    }
    Ok(None)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub alpha: NetParams,
    pub beta: NetParams,
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    pub stop: StopReason,
}

/// Trains a fresh network pair on `ds` for at most `cfg.epochs` epochs.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut metrics = Vec::new();
    let stop = trainer.run(ds, cfg.epochs, |m, _| {
        metrics.push(*m);
        Ok(())
    })?;
    let (alpha, beta, state) = trainer.into_parts();
    Ok(TrainOutcome {
        alpha,
        beta,
        state,
        metrics,
        stop,
    })
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    if r.headers().map_err(csv_err)?.iter().ne(METRICS_HEADER) {
        return Err(Error::MalformedHeader("not a metrics CSV".into()));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "mean_ee_mbit_per_j",
    "mean_entropy_nats",
    "mean_penalty",
    "kappa",
    "s_watts",
];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedHeader(format!("{other:?}")),
    }
}

/// Deterministic powers of one test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub p_w: Vec<f64>,
    pub ee_mbit_per_j: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean_ee_mbit_per_j: f64,
    /// Mean of per-sample `EE_net / EE_oracle` when oracle results were
    /// supplied.
    pub mean_ratio: Option<f64>,
    pub samples: Vec<SampleEval>,
}

impl EvalSummary {
    /// Oracle rows completed with the network's powers and EE.
    pub fn comparison(&self, oracle: &[ComparisonRow]) -> Vec<ComparisonRow> {
        oracle
            .iter()
            .zip(&self.samples)
            .map(|(o, s)| ComparisonRow {
                ee_net: Some(s.ee_mbit_per_j),
                p_net: Some(s.p_w.clone()),
                ..o.clone()
            })
            .collect()
    }
}

/// Transmits `clamp(alpha(G), 0, 1) * s` on every sample of `ds`.
pub fn evaluate(
    alpha: &NetParams,
    ds: &Dataset,
    s_w: f64,
    model: &PowerModel,
    bandwidth_hz: f64,
    oracle: Option<&[ComparisonRow]>,
) -> Result<EvalSummary> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(rows) = oracle {
        if rows.len() != ds.len() || rows.iter().enumerate().any(|(k, r)| r.sample_index != k) {
            return Err(Error::DimensionMismatch(format!(
                "{} oracle rows for {} samples, or indices out of order",
                rows.len(),
                ds.len()
            )));
        }
    }
    let n = ds.users();
    let mut samples = Vec::with_capacity(ds.len());
    for chunk in ds.samples().chunks(256) {
        let gs: Vec<&ChannelMatrix> = chunk.iter().collect();
        let a = net_forward_batch(&gs, alpha, Head::Alpha, ELL_MIN)?;
        for (g, a) in gs.iter().zip(a.data().chunks_exact(n)) {
            let p_w: Vec<f64> = a.iter().map(|a| a.clamp(0.0, 1.0) * s_w).collect();
            let ee_mbit_per_j = report_ee(g, &p_w, model, bandwidth_hz)?;
            samples.push(SampleEval { p_w, ee_mbit_per_j });
        }
    }
    let m = samples.len() as f64;
    let mean_ee_mbit_per_j = samples.iter().map(|s| s.ee_mbit_per_j).sum::<f64>() / m;
    let mean_ratio = oracle.map(|rows| {
        rows.iter()
            .zip(&samples)
            .map(|(o, s)| if o.ee_oracle > 0.0 { s.ee_mbit_per_j / o.ee_oracle } else { 1.0 })
            .sum::<f64>()
            / m
    });
    Ok(EvalSummary {
        mean_ee_mbit_per_j,
        mean_ratio,
        samples,
    })
}
