//! Numerical checks of the step-distance, Loewner-order, descent and
//! quadratic-form inequalities on recorded runs.
//!
//! Every check rebuilds the dense `G` matrices from the trace alone, so it
//! is independent of the optimizer's low-rank path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{rgps, Perturbation};
use crate::linalg::{
    condition_number, loewner_margin, norm, psd_inv_sqrt_dense, psd_sqrt_dense, sq_norm, sub,
    sym_eig, DenseSym,
};
use crate::optimizers::{theory_eta, EpochTrace, Method, RunRecord, RunTrace};
use crate::problems::Problem;
use crate::sampling::{gate_threshold, shuffle_partition, sigma_p};

/// Relative tolerance used by every inequality check.
pub const CHECK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub instances: usize,
    pub violations: usize,
    /// Smallest signed slack seen (positive = satisfied); `None` without instances.
    pub worst_margin: Option<f64>,
    pub not_applicable: bool,
}

impl CheckReport {
    pub fn not_applicable(check: &str) -> Self {
        Self {
            check: check.to_string(),
            instances: 0,
            violations: 0,
            worst_margin: None,
            not_applicable: true,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

struct Tally {
    check: &'static str,
    instances: usize,
    violations: usize,
    worst: f64,
}

impl Tally {
    fn new(check: &'static str) -> Self {
        Self {
            check,
            instances: 0,
            violations: 0,
            worst: f64::INFINITY,
        }
    }

    fn record(&mut self, margin: f64, ok: bool) {
        self.instances += 1;
        if !ok {
            self.violations += 1;
        }
        self.worst = self.worst.min(margin);
    }

    /// `lhs <= rhs` up to `CHECK_TOL` relative to the larger side.
    fn leq(&mut self, lhs: f64, rhs: f64) {
        let ok = lhs - rhs <= CHECK_TOL * lhs.abs().max(rhs.abs());
        self.record(rhs - lhs, ok && lhs.is_finite() && !rhs.is_nan());
    }

    fn finish(self) -> CheckReport {
        if self.instances == 0 {
            return CheckReport::not_applicable(self.check);
        }
        CheckReport {
            check: self.check.to_string(),
            instances: self.instances,
            violations: self.violations,
            worst_margin: Some(self.worst.clamp(-f64::MAX, f64::MAX)),
            not_applicable: false,
        }
    }
}

/// Constants the inequalities are evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub l: f64,
    /// A certified gradient bound; when absent the observed maximum is used.
    pub g: Option<f64>,
    pub c_sigma: f64,
}

impl Constants {
    pub fn g_bound(&self, trace: &RunTrace) -> f64 {
        self.g.unwrap_or_else(|| observed_g(trace))
    }
}

/// Largest recorded mini-batch gradient norm.
pub fn observed_g(trace: &RunTrace) -> f64 {
    trace
        .epochs
        .iter()
        .flat_map(|e| e.grads.columns().map(norm).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn is_preconditioned(trace: &RunTrace) -> bool {
    trace.method != Method::Sgd && trace.perturbation.is_some()
}

fn is_adaptive(trace: &RunTrace) -> bool {
    trace.perturbation == Some(Perturbation::Adaptive)
}

/// Calls `f(epoch, [G_1, .., G_m], G_{m, t-1})` for every recorded epoch with
/// densely accumulated matrices. `G_{m,0}` is the zero matrix.
fn for_each_dense_epoch(
    trace: &RunTrace,
    mut f: impl FnMut(&EpochTrace, &[DenseSym], &DenseSym) -> Result<()>,
) -> Result<()> {
    let pert = trace
        .perturbation
        .ok_or_else(|| Error::InvalidArgument("trace has no preconditioner".into()))?;
    let d = trace.dim;
    let mut past = DenseSym::zeros(d);
    let mut prev_end = DenseSym::zeros(d);
    for e in &trace.epochs {
        let mut outer = if trace.per_epoch_lowrank {
            DenseSym::zeros(d)
        } else {
            past.clone()
        };
        let mut delta = e.delta_before;
        let mut gs = Vec::with_capacity(trace.m);
        for g in e.grads.columns() {
            outer.add_outer_assign(g);
            delta += sq_norm(g);
            let numer = match pert {
                Perturbation::Adaptive => delta,
                Perturbation::Fixed(c) => c,
            };
            gs.push(outer.add_ridge(numer / trace.gamma));
        }
        f(e, &gs, &prev_end)?;
        for g in e.grads.columns() {
            past.add_outer_assign(g);
        }
        prev_end = gs.pop().expect("epoch has m >= 1 columns");
    }
    Ok(())
}

pub fn kappa_trace(trace: &RunTrace) -> Vec<f64> {
    trace
        .epochs
        .iter()
        .map(|e| condition_number(&e.grads).unwrap_or(f64::INFINITY))
        .collect()
}

/// Max of the first half of a sequence and max of the second half.
pub fn half_maxima(values: &[f64]) -> (f64, f64) {
    let mid = values.len() / 2;
    let max = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max(&values[..mid]), max(&values[mid..]))
}

/// Flags epochs whose `kappa(H^T H)` exceeds `threshold` or is rank
/// deficient, plus one growth instance comparing the two halves of the run.
pub fn check_condition_number(trace: &RunTrace, threshold: f64) -> CheckReport {
    const NAME: &str = "condition_number";
    if trace.m < 2 || trace.epochs.is_empty() {
        return CheckReport::not_applicable(NAME);
    }
    let mut tally = Tally::new(NAME);
    let kappas = kappa_trace(trace);
    for &k in &kappas {
        tally.record((threshold - k) / threshold, k <= threshold);
    }
    if kappas.len() >= 2 {
        let (first, last) = half_maxima(&kappas);
        let margin = if last.is_finite() { (2.0 * first - last) / (2.0 * first) } else { -f64::MAX };
        tally.record(margin, last <= 2.0 * first);
    }
    tally.finish()
}

/// `|| (1/m) sum_j grad_{B_j}(x_1) - s_t ||` per epoch.
pub fn rgps_gaps(trace: &RunTrace, p: &Problem) -> Result<Vec<f64>> {
    trace
        .epochs
        .iter()
        .map(|e| {
            let mut reference = vec![0.0; trace.dim];
            for b in &e.partition.batches {
                for (r, v) in reference.iter_mut().zip(p.batch_grad(b, &e.x_start)?) {
                    *r += v / trace.m as f64;
                }
            }
            let s = rgps(&e.grads, trace.m)?;
            Ok(norm(&sub(&reference, &s)))
        })
        .collect()
}

/// Gap between the start-point gradient and the epoch mean of the moving
/// gradients, against `L eta_t (m - 1) / 2 + 1e-9`.
pub fn check_rgps_gap(trace: &RunTrace, p: &Problem, l: f64) -> Result<CheckReport> {
    const NAME: &str = "rgps_gap";
    if !is_preconditioned(trace) {
        return Ok(CheckReport::not_applicable(NAME));
    }
    let mut tally = Tally::new(NAME);
    for (e, gap) in trace.epochs.iter().zip(rgps_gaps(trace, p)?) {
        let bound = l * e.eta * (trace.m - 1) as f64 / 2.0 + 1e-9;
        tally.record(bound - gap, gap <= bound);
    }
    Ok(tally.finish())
}

fn quad_inv_sqrt(m: &DenseSym, v: &[f64]) -> Result<f64> {
    psd_inv_sqrt_dense(m, 0.0)?.quad_form(v)
}

fn lambda_min(m: &DenseSym) -> Result<f64> {
    Ok(sym_eig(m)?.min())
}

/// Right-hand side of the one-epoch descent inequality, less `f(x_1) - f(x_{m+1})`.
pub fn descent_slack(eta: f64, l: f64, g: f64, m: usize, lmin_first: f64, lmin_last: f64) -> f64 {
    let m = m as f64;
    let cubic = (2.0 * eta.powi(3) * l * l * g * g * m.powi(3) / (3.0 * lmin_first.powf(1.5)))
        .min(2.0 * eta.powi(3) * l * l * m.powi(3) / (3.0 * lmin_last.sqrt()));
    let linear = (3.0 * eta * m.powf(1.5) * g.powi(3) / (2f64.sqrt() * lmin_first))
        .min(3.0 * eta * m.powf(1.5) * g / 2f64.sqrt());
    cubic + linear
}

/// `eta/(4m) S^T G_m^{-1/2} S <= f(x_1) - f(x_{m+1}) + slack` per epoch.
/// Not applicable unless every `eta_t <= c_sigma^2 / (16 n L G)`.
pub fn check_sufficient_descent(trace: &RunTrace, p: &Problem, c: &Constants) -> Result<CheckReport> {
    const NAME: &str = "sufficient_descent";
    if !is_adaptive(trace) || trace.epochs.is_empty() {
        return Ok(CheckReport::not_applicable(NAME));
    }
    let g = c.g_bound(trace);
    let eta_max = theory_eta(trace.n, c.l, g, c.c_sigma);
    if trace.epochs.iter().any(|e| e.eta > eta_max) {
        return Ok(CheckReport::not_applicable(NAME));
    }
    let mut tally = Tally::new(NAME);
    for_each_dense_epoch(trace, |e, gs, _| {
        let s = e.grads.column_sum();
        let last = gs.last().expect("m >= 1");
        let lhs = e.eta / (4.0 * trace.m as f64) * quad_inv_sqrt(last, &s)?;
        let drop = p.value(&e.x_start)? - p.value(e.iterates.last().expect("m + 1 iterates"))?;
        let rhs = drop + descent_slack(e.eta, c.l, g, trace.m, lambda_min(&gs[0])?, lambda_min(last)?);
        tally.leq(lhs, rhs);
        Ok(())
    })?;
    Ok(tally.finish())
}

/// The three quadratic forms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadForms {
    /// `S^T G_{m,t}^{-1/2} S`.
    pub full: f64,
    /// `S^T (G_{m,t} - G_{m,t-1})^{-1/2} S`.
    pub increment: f64,
    pub s_norm: f64,
    /// `sqrt(delta increment / (4 G^2 t m d Gamma))`.
    pub beta: f64,
}

fn epoch_quad_forms(trace: &RunTrace, e: &EpochTrace, g_end: &DenseSym, g_bound: f64) -> Result<QuadForms> {
    let s = e.grads.column_sum();
    let s_norm = norm(&s);
    let dd = e.delta_after - e.delta_before;
    let beta = (dd / (4.0 * g_bound * g_bound * (e.t * trace.m * trace.dim) as f64 * trace.gamma)).sqrt();
    if s_norm == 0.0 {
        return Ok(QuadForms {
            full: 0.0,
            increment: 0.0,
            s_norm,
            beta,
        });
    }
    let increment_matrix = e.grads.outer_sum().add_ridge(dd / trace.gamma);
    Ok(QuadForms {
        full: quad_inv_sqrt(g_end, &s)?,
        increment: quad_inv_sqrt(&increment_matrix, &s)?,
        s_norm,
        beta,
    })
}

/// Lower bounds on `S^T G^{-1/2} S` through the epoch increment of `G`, with
/// `c_kappa` taken as the epoch's own condition number.
pub fn check_quadform_lower_bounds(trace: &RunTrace, c: &Constants) -> Result<CheckReport> {
    const NAME: &str = "quadform_lower_bounds";
    if !is_adaptive(trace) || trace.per_epoch_lowrank {
        return Ok(CheckReport::not_applicable(NAME));
    }
    let g = c.g_bound(trace);
    let m = trace.m as f64;
    let mut tally = Tally::new(NAME);
    for_each_dense_epoch(trace, |e, gs, _| {
        let q = epoch_quad_forms(trace, e, gs.last().expect("m >= 1"), g)?;
        tally.leq(q.beta * q.increment, q.full);
        let kappa = condition_number(&e.grads).unwrap_or(f64::INFINITY);
        if trace.gamma >= m && kappa.is_finite() {
            let floor = (m / (2.0 * kappa * kappa)).sqrt() * q.s_norm;
            tally.leq(floor, q.increment);
            tally.leq(q.beta * floor, q.full);
        }
        Ok(())
    })?;
    Ok(tally.finish())
}

/// Within-epoch matrix-root bound on all `(i, j)` pairs and the step and
/// drift bounds against the recorded iterates.
pub fn check_loewner_lemmas(trace: &RunTrace, c: &Constants) -> Result<CheckReport> {
    const NAME: &str = "loewner_lemmas";
    if !is_preconditioned(trace) {
        return Ok(CheckReport::not_applicable(NAME));
    }
    let g = c.g_bound(trace);
    let m = trace.m;
    let mut tally = Tally::new(NAME);
    for_each_dense_epoch(trace, |e, gs, _| {
        if trace.gamma >= 1.0 {
            let roots: Vec<DenseSym> = gs.iter().map(psd_sqrt_dense).collect::<Result<_>>()?;
            let shift = (2.0 * m as f64).sqrt() * g;
            for i in 0..m {
                let upper = roots[i].add_ridge(shift);
                for root_j in &roots[i..] {
                    let margin = loewner_margin(root_j, &upper, CHECK_TOL)?;
                    tally.record(margin, margin >= 0.0);
                }
            }
        }
        let eta2 = e.eta * e.eta;
        let lmin = lambda_min(&gs[0])?;
        for i in 0..m {
            let step = sq_norm(&sub(&e.iterates[i + 1], &e.iterates[i]));
            tally.leq(step, eta2.min(eta2 * g * g / lmin));
        }
        for i in 1..=m {
            let drift = sq_norm(&sub(&e.iterates[i], &e.x_start));
            let k2 = (i * i) as f64;
            tally.leq(drift, (eta2 * g * g * k2 / lmin).min(eta2 * k2));
        }
        Ok(())
    })?;
    Ok(tally.finish())
}

/// Monte-Carlo frequency of `sum_j ||grad_{B_j}(x)||^2 >= c_sigma^2 m^2 / (16 n)`
/// over fresh shuffles against `1 - exp(-m^2 c_sigma^4 / (32 n^2 G^4))`.
pub fn check_gate_probability(
    p: &Problem,
    x: &[f64],
    m: usize,
    trials: usize,
    rng: &mut impl Rng,
    c_sigma: f64,
    g: f64,
) -> Result<CheckReport> {
    if trials < 100 {
        return Err(Error::InvalidArgument(format!("need >= 100 trials, got {trials}")));
    }
    let (freq, bound) = gate_frequency(p, x, m, trials, rng, c_sigma, g)?;
    let mut tally = Tally::new("gate_probability");
    tally.record(freq - bound, freq >= bound);
    Ok(tally.finish())
}

/// `(frequency, bound)` behind [`check_gate_probability`].
pub fn gate_frequency(
    p: &Problem,
    x: &[f64],
    m: usize,
    trials: usize,
    rng: &mut impl Rng,
    c_sigma: f64,
    g: f64,
) -> Result<(f64, f64)> {
    let n = p.n();
    let threshold = gate_threshold(c_sigma, m, n, 16.0);
    let mut hits = 0usize;
    let mut grad = |b: &[usize]| p.batch_grad(b, x);
    for _ in 0..trials {
        let part = shuffle_partition(n, m, rng)?;
        if sigma_p(&part, &mut grad)? >= threshold {
            hits += 1;
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    let bound = if g > 0.0 {
        1.0 - (-(mf * mf) * c_sigma.powi(4) / (32.0 * nf * nf * g.powi(4))).exp()
    } else {
        0.0
    };
    Ok((hits as f64 / trials as f64, bound))
}

/// Worst-case bound on the weighted gradient metric after `t` epochs.
#[allow(clippy::too_many_arguments)]
pub fn theorem_bound(
    n: usize,
    m: usize,
    d: usize,
    gamma: f64,
    eta: f64,
    epochs: usize,
    c: &Constants,
    g: f64,
    c_kappa: f64,
    objective_drop: f64,
) -> f64 {
    let (n, m, d, t) = (n as f64, m as f64, d as f64, epochs as f64);
    let (l, cs) = (c.l, c.c_sigma);
    let root = (d * gamma).sqrt();
    let c0 = 48.0 * g * c_kappa * objective_drop / cs * n.sqrt() / m * root;
    let c1 = 72.0 * 2f64.sqrt() * g * g * c_kappa / cs * (n * m).sqrt() * root;
    let c2 = l * m;
    let c3 = 128.0 * g * l * l * c_kappa / (cs * cs) * n * m * d.sqrt() * gamma
        + 3.0 * 2048.0 * g.powi(3) * c_kappa / cs.powi(4) * n * n / m * d.sqrt() * gamma * gamma;
    let c4 = 9.0 * 256.0 * 2f64.sqrt() * g.powi(4) * c_kappa / cs.powi(3) * n.powf(1.5) * m.powf(-1.5) * root * gamma;
    let c5 = 4.0 * l * g / cs * n.sqrt() * root;
    let st = t.sqrt();
    c0 / (eta * st) + c1 / st + c2 * eta / st + c3 * eta * eta / st + c4 * t.ln() / st + c5 * eta * t.ln() / st
}

/// Realized final weighted metric against [`theorem_bound`]. Informational:
/// the bound is loose by orders of magnitude.
pub fn check_theorem_bound(record: &RunRecord, p: &Problem, c: &Constants) -> Result<CheckReport> {
    const NAME: &str = "theorem_bound";
    let trace = &record.trace;
    let (Some(first), Some(last), Some(row)) = (trace.epochs.first(), trace.epochs.last(), record.final_row()) else {
        return Ok(CheckReport::not_applicable(NAME));
    };
    let g = c.g_bound(trace);
    let eta = first.eta;
    let constant_eta = trace.epochs.iter().all(|e| e.eta == eta);
    let gamma_ok = trace.gamma >= trace.m as f64 && trace.gamma <= trace.n as f64;
    if !is_adaptive(trace) || !constant_eta || !gamma_ok || eta <= 0.0 || c.c_sigma <= 0.0 {
        return Ok(CheckReport::not_applicable(NAME));
    }
    if eta > theory_eta(trace.n, c.l, g, c.c_sigma) {
        return Ok(CheckReport::not_applicable(NAME));
    }
    let c_kappa = kappa_trace(trace).into_iter().fold(1.0, f64::max);
    if !c_kappa.is_finite() {
        return Ok(CheckReport::not_applicable(NAME));
    }
    let drop = p.value(&first.x_start)? - p.value(last.iterates.last().expect("m + 1 iterates"))?;
    let bound = theorem_bound(trace.n, trace.m, trace.dim, trace.gamma, eta, trace.epochs.len(), c, g, c_kappa, drop);
    let mut tally = Tally::new(NAME);
    tally.leq(row.weighted_metric, bound);
    Ok(tally.finish())
}

/// Every trace check, in a fixed order.
pub fn check_all(record: &RunRecord, p: &Problem, c: &Constants, kappa_threshold: f64) -> Result<Vec<CheckReport>> {
    let trace = &record.trace;
    Ok(vec![
        check_condition_number(trace, kappa_threshold),
        check_rgps_gap(trace, p, c.l)?,
        check_sufficient_descent(trace, p, c)?,
        check_quadform_lower_bounds(trace, c)?,
        check_loewner_lemmas(trace, c)?,
    ])
}
