//! Central finite-difference verification of analytic gradients.

/// One evaluation of the function under test.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    /// Identifies the smooth piece the point lies in (see
    /// [`Tape::branch_signature`](super::Tape::branch_signature)). Use a
    /// constant for functions without kinks.
    pub signature: u64,
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Step is `rel_step * max(1, |x_k|)`.
    pub rel_step: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error. The harness
    /// also raises the floor to the roundoff resolution of the difference
    /// quotient, `eps * |f| / (h * tol)`, so that coordinates whose
    /// gradient is below what central differences can resolve are compared
    /// in absolute terms.
    pub abs_floor: f64,
    /// Restrict the check to these coordinates; `None` checks all.
    pub coords: Option<Vec<usize>>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-6,
            tol: 1e-5,
            abs_floor: 1e-8,
            coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinate that produced `max_rel_err`.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±step crosses a kink; not checkable.
    pub skipped: Vec<usize>,
    pub passed: bool,
}

/// Relative error with the denominator floored at `floor`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` at `point`.
pub fn fd_check<F>(mut f: F, point: &[f64], analytic: &[f64], opts: &FdOptions) -> FdReport
where
    F: FnMut(&[f64]) -> Probe,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match point");
    let base = f(point).signature;
    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..point.len()).collect(),
    };
    let mut x = point.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
        passed: true,
    };
    for k in coords {
        let h = opts.rel_step * point[k].abs().max(1.0);
        x[k] = point[k] + h;
        let up = f(&x);
        x[k] = point[k] - h;
        let down = f(&x);
        x[k] = point[k];
        if up.signature != base || down.signature != base {
            report.skipped.push(k);
            continue;
        }
        let numeric = (up.value - down.value) / (2.0 * h);
        let roundoff = f64::EPSILON * up.value.abs().max(down.value.abs()) / h;
        let err = rel_err(analytic[k], numeric, opts.abs_floor.max(roundoff / opts.tol));
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(k);
        }
    }
    report.passed = report.max_rel_err <= opts.tol;
    report
}
