//! The box method applied directly to the Rastrigin function, next to
//! plain gradient descent from the same starting point.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::KappaState;
use crate::chanmodel::sample_rng;
use crate::error::{Error, Result};

/// `A n + sum_i (x_i^2 - A cos(2 pi x_i))`.
pub fn rastrigin(x: &[f64], amplitude: f64) -> f64 {
    amplitude * x.len() as f64 + x.iter().map(|v| v * v - amplitude * (2.0 * PI * v).cos()).sum::<f64>()
}

pub fn rastrigin_grad(x: &[f64], amplitude: f64) -> Vec<f64> {
    x.iter()
        .map(|v| 2.0 * v + 2.0 * PI * amplitude * (2.0 * PI * v).sin())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RastriginConfig {
    pub n: usize,
    pub amplitude: f64,
    pub iterations: usize,
    /// Step size shared by both methods.
    pub learning_rate: f64,
    /// Monte-Carlo draws per box step.
    pub samples: usize,
    pub kappa_step: f64,
    pub kappa_window: usize,
    pub ell_min: f64,
    /// Initial box width; the box is centred on the start point.
    pub init_width: f64,
    /// Start points are drawn uniformly from `[init_low, init_high]^n`.
    pub init_low: f64,
    pub init_high: f64,
    pub seed: u64,
}

impl Default for RastriginConfig {
    fn default() -> Self {
        Self {
            n: 10,
            amplitude: 10.0,
            iterations: 50_000,
            learning_rate: 2e-3,
            samples: 32,
            kappa_step: 0.02,
            kappa_window: 50,
            ell_min: 1e-6,
            init_width: 10.0,
            init_low: 2.5,
            init_high: 3.5,
            seed: 0,
        }
    }
}

impl RastriginConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.samples == 0 || self.kappa_window == 0 {
            return Err(Error::InvalidConfig("n, samples and kappa window must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.init_width > self.ell_min) || !(self.ell_min > 0.0) {
            return Err(Error::InvalidConfig("need lr > 0 and init_width > ell_min > 0".into()));
        }
        if !(self.init_low <= self.init_high) {
            return Err(Error::InvalidConfig("init_low must not exceed init_high".into()));
        }
        Ok(())
    }
}

/// Objective value after every iteration of both methods.
#[derive(Clone, Debug, PartialEq)]
pub struct RastriginTrace {
    pub start: Vec<f64>,
    /// `f` at the box midpoint.
    pub box_f: Vec<f64>,
    pub gd_f: Vec<f64>,
    pub box_point: Vec<f64>,
    pub gd_point: Vec<f64>,
}

/// Plain gradient descent from `x0`. Returns the trace and the end point.
pub fn rastrigin_gd(x0: &[f64], cfg: &RastriginConfig) -> (Vec<f64>, Vec<f64>) {
    let mut x = x0.to_vec();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let g = rastrigin_grad(&x, cfg.amplitude);
        x.iter_mut().zip(&g).for_each(|(x, g)| *x -= cfg.learning_rate * g);
        trace.push(rastrigin(&x, cfg.amplitude));
    }
    (trace, x)
}

/// Descent on `E f(a + (b - a) ⊙ u) + kappa sum ln(b - a)` over the bounds
/// of a box centred on `x0`, with `kappa` scheduled from the entropy
/// history. Steps are taken in `(a, b)` so the entropy term pulls both
/// ends inward alike. Returns the midpoint trace and the final midpoint.
pub fn rastrigin_box<R: Rng + ?Sized>(x0: &[f64], cfg: &RastriginConfig, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x0.len();
    let mut a: Vec<f64> = x0.iter().map(|x| x - cfg.init_width / 2.0).collect();
    let mut b: Vec<f64> = x0.iter().map(|x| x + cfg.init_width / 2.0).collect();
    let mut kappa = KappaState::new(cfg.kappa_window, cfg.kappa_step)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
    let mut u = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mid = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| (a + b) / 2.0).collect::<Vec<f64>>();
    for _ in 0..cfg.iterations {
        ga.iter_mut().chain(gb.iter_mut()).for_each(|g| *g = 0.0);
        for _ in 0..cfg.samples {
            u.iter_mut().for_each(|u| *u = rng.gen());
            for i in 0..n {
                p[i] = a[i] + (b[i] - a[i]) * u[i];
            }
            for (i, d) in rastrigin_grad(&p, cfg.amplitude).into_iter().enumerate() {
                ga[i] += (1.0 - u[i]) * d;
                gb[i] += u[i] * d;
            }
        }
        let k = kappa.kappa();
        let (m, lr) = (cfg.samples as f64, cfg.learning_rate);
        for i in 0..n {
            let ell = b[i] - a[i];
            let (na, nb) = (a[i] - lr * (ga[i] / m - k / ell), b[i] - lr * (gb[i] / m + k / ell));
            // keep the width at least ell_min around the midpoint
            if nb - na < cfg.ell_min {
                let c = (na + nb) / 2.0;
                (a[i], b[i]) = (c - cfg.ell_min / 2.0, c + cfg.ell_min / 2.0);
            } else {
                (a[i], b[i]) = (na, nb);
            }
        }
        kappa.update(a.iter().zip(&b).map(|(a, b)| (b - a).ln()).sum());
        trace.push(rastrigin(&mid(&a, &b), cfg.amplitude));
    }
    Ok((trace, mid(&a, &b)))
}

/// Start point drawn uniformly from `[init_low, init_high]^n` with
/// `cfg.seed`.
pub fn rastrigin_start(cfg: &RastriginConfig) -> Vec<f64> {
    let mut rng = sample_rng(cfg.seed, 0);
    (0..cfg.n)
        .map(|_| {
            if cfg.init_low == cfg.init_high {
                cfg.init_low
            } else {
                rng.gen_range(cfg.init_low..cfg.init_high)
            }
        })
        .collect()
}

/// Box draws for [`rastrigin_box`] in [`rastrigin_demo`].
pub fn rastrigin_box_rng(cfg: &RastriginConfig) -> impl Rng {
    sample_rng(cfg.seed, 1)
}

/// Runs both methods from one start point drawn from `cfg.seed`.
pub fn rastrigin_demo(cfg: &RastriginConfig) -> Result<RastriginTrace> {
    cfg.validate()?;
    let start = rastrigin_start(cfg);
    let (gd_f, gd_point) = rastrigin_gd(&start, cfg);
    let (box_f, box_point) = rastrigin_box(&start, cfg, &mut rastrigin_box_rng(cfg))?;
    Ok(RastriginTrace {
        start,
        box_f,
        gd_f,
        box_point,
        gd_point,
    })
}
