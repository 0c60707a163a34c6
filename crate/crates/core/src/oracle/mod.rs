//! Reference optima for small instances: an exhaustive grid with local
//! refinement, and multistart projected gradient ascent.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chanmodel::{sample_rng, ChannelMatrix, Dataset};
use crate::error::{Error, Result};
use crate::objective::{sum_ee, sum_ee_grad, PowerModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Grid,
    Multistart,
}

impl std::str::FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Self::Grid),
            "multistart" => Ok(Self::Multistart),
            other => Err(Error::InvalidConfig(format!("unknown oracle mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Grid points per dimension, including both ends.
    pub grid_points: usize,
    /// Number of ascent starts in multistart mode.
    pub starts: usize,
    /// Ascent stops when no coordinate moves more than `step_tol * p_max`.
    pub step_tol: f64,
    pub max_iters: usize,
    /// Largest user count accepted by the exhaustive grid.
    pub max_grid_users: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid_points: 41,
            starts: 64,
            step_tol: 1e-10,
            max_iters: 2000,
            max_grid_users: 4,
        }
    }
}

impl OracleConfig {
    /// Default resolution for `users`: 41 points up to three users, 21 for
    /// four.
    pub fn for_users(users: usize) -> Self {
        Self {
            grid_points: if users <= 3 { 41 } else { 21 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 2 || self.starts == 0 || self.max_iters == 0 || !(self.step_tol > 0.0) {
            return Err(Error::InvalidConfig(
                "oracle needs grid_points >= 2, starts >= 1, max_iters >= 1 and a positive tolerance".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    /// Best power vector found, W, inside `[0, p_max]^I`.
    pub p: Vec<f64>,
    /// `sum_ee` at `p`, nats/J.
    pub objective: f64,
    pub mode: OracleMode,
    /// Objective evaluations spent.
    pub evaluations: usize,
}

/// Strictly better, or equal and lexicographically smaller.
fn better(value: f64, p: &[f64], best_value: f64, best_p: &[f64]) -> bool {
    value > best_value || (value == best_value && p.iter().partial_cmp(best_p.iter()) == Some(std::cmp::Ordering::Less))
}

/// Projected gradient ascent on `[0, p_max]^I` with a backtracking step.
/// Returns the endpoint, its value and the evaluation count.
pub fn ascend(
    g: &ChannelMatrix,
    model: &PowerModel,
    p_max: f64,
    start: &[f64],
    cfg: &OracleConfig,
) -> Result<(Vec<f64>, f64, usize)> {
    let mut p: Vec<f64> = start.iter().map(|v| v.clamp(0.0, p_max)).collect();
    let (mut value, mut grad) = sum_ee_grad(g, &p, model)?;
    let mut evals = 1;
    let norm = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut step = p_max / norm(&grad).max(f64::MIN_POSITIVE);
    let mut q = vec![0.0; p.len()];
    for _ in 0..cfg.max_iters {
        let mut moved = false;
        // give up once a trial step cannot move any coordinate measurably
        while step * norm(&grad) > 1e-15 * p_max {
            for k in 0..p.len() {
                q[k] = (p[k] + step * grad[k]).clamp(0.0, p_max);
            }
            let gain: f64 = grad.iter().zip(&q).zip(&p).map(|((d, q), p)| d * (q - p)).sum();
            if gain <= 0.0 {
                break;
            }
            let vq = sum_ee(g, &q, model)?;
            evals += 1;
            if vq >= value + 1e-4 * gain {
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        let shift = q.iter().zip(&p).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        p.copy_from_slice(&q);
        let (v, gr) = sum_ee_grad(g, &p, model)?;
        value = v;
        grad = gr;
        evals += 1;
        step *= 2.0;
        if shift <= cfg.step_tol * p_max {
            break;
        }
    }
    Ok((p, value, evals))
}

/// Best point of the grid `{0, p_max/(k-1), ..., p_max}^I` without
/// refinement: `(p, value, evaluations)`. Ties go to the lexicographically
/// smallest point.
pub fn evaluate_grid(g: &ChannelMatrix, p_max: f64, k: usize, model: &PowerModel) -> Result<(Vec<f64>, f64, usize)> {
    if k < 2 {
        return Err(Error::InvalidConfig("grid needs at least 2 points per dimension".into()));
    }
    let n = g.users();
    let levels: Vec<f64> = (0..k).map(|i| (p_max * (i as f64 / (k - 1) as f64)).min(p_max)).collect();
    let mut idx = vec![0usize; n];
    let mut p = vec![0.0; n];
    let mut best_p = p.clone();
    let mut best = f64::NEG_INFINITY;
    let mut evaluations = 0;
    // odometer with the last coordinate fastest visits points in
    // lexicographic order
    'grid: loop {
        for (v, &i) in p.iter_mut().zip(&idx) {
            *v = levels[i];
        }
        let v = sum_ee(g, &p, model)?;
        evaluations += 1;
        if v > best {
            best = v;
            best_p.copy_from_slice(&p);
        }
        let mut d = n;
        loop {
            if d == 0 {
                break 'grid;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < k {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((best_p, best, evaluations))
}

/// Exhaustive grid search followed by local ascent from the best grid
/// point.
pub fn grid_search(g: &ChannelMatrix, p_max: f64, model: &PowerModel, cfg: &OracleConfig) -> Result<OracleResult> {
    cfg.validate()?;
    let n = g.users();
    if n > cfg.max_grid_users {
        return Err(Error::TooLargeForGrid {
            users: n,
            limit: cfg.max_grid_users,
        });
    }
    let (mut best_p, mut best, mut evaluations) = evaluate_grid(g, p_max, cfg.grid_points, model)?;
    let (rp, rv, re) = ascend(g, model, p_max, &best_p, cfg)?;
    evaluations += re;
    if better(rv, &rp, best, &best_p) {
        best = rv;
        best_p = rp;
    }
    Ok(OracleResult {
        p: best_p,
        objective: best,
        mode: OracleMode::Grid,
        evaluations,
    })
}

/// Projected gradient ascent from the corner `p_max · 1`, then `0`, then
/// uniform random points, `starts` in total; the best endpoint wins.
pub fn multistart<R: Rng + ?Sized>(
    g: &ChannelMatrix,
    p_max: f64,
    model: &PowerModel,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Result<OracleResult> {
    cfg.validate()?;
    let n = g.users();
    let mut best_p = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut evaluations = 0;
    for s in 0..cfg.starts {
        let start: Vec<f64> = match s {
            0 => vec![p_max; n],
            1 => vec![0.0; n],
            _ => (0..n).map(|_| rng.gen_range(0.0..=p_max)).collect(),
        };
        let (p, v, e) = ascend(g, model, p_max, &start, cfg)?;
        evaluations += e;
        if best_p.is_empty() || better(v, &p, best, &best_p) {
            best = v;
            best_p = p;
        }
    }
    Ok(OracleResult {
        p: best_p,
        objective: best,
        mode: OracleMode::Multistart,
        evaluations,
    })
}

/// Runs the oracle on every sample; sample `k` of a multistart run draws
/// its starts from stream `(seed, k)`.
pub fn solve_dataset(
    ds: &Dataset,
    p_max: f64,
    model: &PowerModel,
    cfg: &OracleConfig,
    mode: OracleMode,
    seed: u64,
) -> Result<Vec<OracleResult>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if mode == OracleMode::Grid && ds.users() > cfg.max_grid_users {
        return Err(Error::TooLargeForGrid {
            users: ds.users(),
            limit: cfg.max_grid_users,
        });
    }
    ds.samples()
        .iter()
        .enumerate()
        .map(|(k, g)| match mode {
            OracleMode::Grid => grid_search(g, p_max, model, cfg),
            OracleMode::Multistart => multistart(g, p_max, model, cfg, &mut sample_rng(seed, k as u64)),
        })
        .collect()
}

/// One line of the comparison CSV. EE values are in Mbit/J.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub sample_index: usize,
    pub ee_oracle: f64,
    pub ee_net: Option<f64>,
    pub p_oracle: Vec<f64>,
    pub p_net: Option<Vec<f64>>,
}

impl ComparisonRow {
    pub fn ratio(&self) -> Option<f64> {
        self.ee_net.map(|n| if self.ee_oracle > 0.0 { n / self.ee_oracle } else { 1.0 })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `sample_index,ee_oracle,ee_net,ratio,p_oracle_0..,p_net_0..`.
/// Network columns are left empty when absent.
pub fn write_comparison_csv(path: impl AsRef<Path>, users: usize, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["sample_index".to_string(), "ee_oracle".into(), "ee_net".into(), "ratio".into()];
    header.extend((0..users).map(|i| format!("p_oracle_{i}")));
    header.extend((0..users).map(|i| format!("p_net_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.p_oracle.len() != users || r.p_net.as_ref().is_some_and(|p| p.len() != users) {
            return Err(Error::DimensionMismatch(format!("row {} does not have {users} powers", r.sample_index)));
        }
        let mut rec = vec![r.sample_index.to_string(), r.ee_oracle.to_string(), opt(r.ee_net), opt(r.ratio())];
        rec.extend(r.p_oracle.iter().map(|v| v.to_string()));
        match &r.p_net {
            Some(p) => rec.extend(p.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), users)),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedHeader(format!("{other:?}")),
    }
}

fn parse_cell(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::MalformedHeader(format!("bad {what} value `{s}`")))
}

pub fn read_comparison_csv(path: impl AsRef<Path>) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.len() < 4 || (header.len() - 4) % 2 != 0 || &header[0] != "sample_index" || &header[1] != "ee_oracle" {
        return Err(Error::MalformedHeader("not an oracle comparison CSV".into()));
    }
    let users = (header.len() - 4) / 2;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let sample_index = rec[0]
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("bad sample index `{}`", &rec[0])))?;
        let ee_oracle = parse_cell(&rec[1], "ee_oracle")?
            .ok_or_else(|| Error::MalformedHeader("missing ee_oracle".into()))?;
        let ee_net = parse_cell(&rec[2], "ee_net")?;
        let cells = |from: usize| -> Result<Vec<Option<f64>>> {
            (from..from + users).map(|c| parse_cell(&rec[c], "power")).collect()
        };
        let p_oracle = cells(4)?
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::MalformedHeader("missing oracle power".into()))?;
        let p_net = cells(4 + users)?.into_iter().collect::<Option<Vec<_>>>();
        rows.push(ComparisonRow {
            sample_index,
            ee_oracle,
            ee_net,
            p_oracle,
            p_net,
        });
    }
    Ok(rows)
}
