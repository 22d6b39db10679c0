//! SHAdaGrad, AdaGrad with a fixed perturbation, and mini-batch SGD behind a
//! common epoch contract, plus the step-size schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{rgps, GradientHistory, Perturbation};
use crate::linalg::{condition_number, norm, GradMatrix};
use crate::problems::Problem;
use crate::sampling::{
    gate_threshold, rejection_gate, rng_from_seed, shuffle_partition, uniform_batches,
    EpochPartition, SeededRng,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    InvSqrt,
    InvCbrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub eta: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::InvalidArgument(format!("step size must be finite and >= 0, got {eta}")));
        }
        Ok(Self { kind, eta })
    }

    pub fn constant(eta: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            eta,
        }
    }

    /// `eta_t` for epoch `t >= 1`.
    pub fn step_size(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::Index { index: 0, len: 0 });
        }
        let t = t as f64;
        Ok(match self.kind {
            ScheduleKind::Constant => self.eta,
            ScheduleKind::InvSqrt => self.eta / t.sqrt(),
            ScheduleKind::InvCbrt => self.eta / t.cbrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "shadagrad")]
    ShAdaGrad,
    #[serde(rename = "adagrad_f")]
    AdaGradF,
    Sgd,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::ShAdaGrad => "shadagrad",
            Method::AdaGradF => "adagrad_f",
            Method::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Shuffled,
    Uniform,
}

impl Sampling {
    /// `s` or `u`, as used in cell names.
    pub fn suffix(self) -> &'static str {
        match self {
            Sampling::Shuffled => "s",
            Sampling::Uniform => "u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub divisor: f64,
    pub c_sigma: f64,
    pub max_attempts: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            divisor: 8.0,
            c_sigma: 0.0,
            max_attempts: 100,
        }
    }
}

impl GateConfig {
    pub fn threshold(&self, m: usize, n: usize) -> f64 {
        gate_threshold(self.c_sigma, m, n, self.divisor)
    }
}

pub const DEFAULT_FIXED_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    pub schedule: Schedule,
    pub gamma: f64,
    pub sampling: Sampling,
    /// Mini-batches per epoch.
    pub m: usize,
    pub gate: Option<GateConfig>,
    pub fixed_delta: Option<f64>,
    pub per_epoch_lowrank: bool,
    pub history_cap: Option<usize>,
}

impl OptimizerConfig {
    pub fn shadagrad(m: usize, schedule: Schedule, gamma: f64) -> Self {
        Self {
            method: Method::ShAdaGrad,
            schedule,
            gamma,
            sampling: Sampling::Shuffled,
            m,
            gate: Some(GateConfig::default()),
            fixed_delta: None,
            per_epoch_lowrank: false,
            history_cap: None,
        }
    }

    pub fn adagrad_f(m: usize, schedule: Schedule, gamma: f64, delta: f64) -> Self {
        Self {
            method: Method::AdaGradF,
            gate: None,
            fixed_delta: Some(delta),
            ..Self::shadagrad(m, schedule, gamma)
        }
    }

    pub fn sgd(m: usize, schedule: Schedule) -> Self {
        Self {
            method: Method::Sgd,
            gamma: 1.0,
            gate: None,
            ..Self::shadagrad(m, schedule, 1.0)
        }
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_gate(mut self, gate: Option<GateConfig>) -> Self {
        self.gate = gate;
        self
    }

    pub fn with_per_epoch_lowrank(mut self, on: bool) -> Self {
        self.per_epoch_lowrank = on;
        self
    }

    pub fn with_history_cap(mut self, cap: usize) -> Self {
        self.history_cap = Some(cap);
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.m == 0 || !n.is_multiple_of(self.m) {
            return Err(Error::Divisibility { n, m: self.m });
        }
        Schedule::new(self.schedule.kind, self.schedule.eta)?;
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.gate.is_some() && self.method != Method::ShAdaGrad {
            return Err(Error::InvalidArgument(format!(
                "the rejection gate applies to shadagrad only, not {}",
                self.method.label()
            )));
        }
        if let Some(g) = &self.gate {
            if !(g.divisor > 0.0) || !(g.c_sigma >= 0.0) || g.max_attempts == 0 {
                return Err(Error::InvalidArgument(format!("invalid gate settings {g:?}")));
            }
        }
        match (self.method, self.fixed_delta) {
            (Method::AdaGradF, None) => {
                return Err(Error::InvalidArgument("adagrad_f needs fixed_delta".into()))
            }
            (Method::AdaGradF, Some(d)) if !(d >= 0.0) || !d.is_finite() => {
                return Err(Error::InvalidArgument(format!("fixed_delta must be >= 0, got {d}")))
            }
            _ => {}
        }
        Ok(())
    }

    /// Hypotheses of the convergence theory that this configuration breaks.
    pub fn theory_warnings(&self, n: usize, l: f64, g: f64, c_sigma: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.method == Method::Sgd {
            return out;
        }
        let eta_max = theory_eta(n, l, g, c_sigma);
        if self.schedule.eta > eta_max {
            out.push(format!(
                "eta {} exceeds c_sigma^2/(16 n L G) = {eta_max:e}",
                self.schedule.eta
            ));
        }
        if self.gamma < self.m as f64 || self.gamma > n as f64 {
            out.push(format!(
                "gamma {} outside [m, n] = [{}, {n}]",
                self.gamma, self.m
            ));
        }
        out
    }
}

/// `c_sigma^2 / (16 n L G)`: the largest step size the descent analysis admits.
pub fn theory_eta(n: usize, l: f64, g: f64, c_sigma: f64) -> f64 {
    c_sigma * c_sigma / (16.0 * n as f64 * l * g)
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub x: Vec<f64>,
    pub history: Option<GradientHistory>,
    /// Completed epochs.
    pub t: usize,
    pub rng: SeededRng,
    pub grad_evals: u64,
}

impl OptimizerState {
    pub fn new(p: &Problem, cfg: &OptimizerConfig, seed: u64) -> Result<Self> {
        Self::from_point(p.initial_point().to_vec(), p.dim(), cfg, seed)
    }

    pub fn from_point(x: Vec<f64>, dim: usize, cfg: &OptimizerConfig, seed: u64) -> Result<Self> {
        let perturbation = match cfg.method {
            Method::ShAdaGrad => Some(Perturbation::Adaptive),
            Method::AdaGradF => Some(Perturbation::Fixed(cfg.fixed_delta.unwrap_or(DEFAULT_FIXED_DELTA))),
            Method::Sgd => None,
        };
        let history = match perturbation {
            Some(pert) => {
                let mut h = GradientHistory::new(dim, cfg.m, cfg.gamma, pert)?
                    .with_per_epoch_lowrank(cfg.per_epoch_lowrank)?;
                if let Some(cap) = cfg.history_cap {
                    h = h.with_cap(cap);
                }
                Some(h)
            }
            None => None,
        };
        Ok(Self {
            x,
            history,
            t: 0,
            rng: rng_from_seed(seed),
            grad_evals: 0,
        })
    }
}

/// Everything one epoch did, enough to replay it.
#[derive(Debug, Clone)]
pub struct EpochTrace {
    pub t: usize,
    pub x_start: Vec<f64>,
    pub grads: GradMatrix,
    /// `m + 1` points; the first is `x_start`.
    pub iterates: Vec<Vec<f64>>,
    pub eta: f64,
    pub delta_before: f64,
    pub delta_after: f64,
    pub partition: EpochPartition,
    pub gate_attempts: usize,
}

fn draw_partition(n: usize, m: usize, sampling: Sampling, rng: &mut SeededRng) -> Result<EpochPartition> {
    match sampling {
        Sampling::Shuffled => shuffle_partition(n, m, rng),
        Sampling::Uniform => uniform_batches(n, m, rng),
    }
}

fn preconditioned_epoch(
    p: &Problem,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<EpochTrace> {
    let t = state.t + 1;
    let eta = cfg.schedule.step_size(t)?;
    let (n, m) = (p.n(), cfg.m);
    let x_start = state.x.clone();

    let (partition, gate_attempts) = match (&cfg.gate, cfg.method) {
        (Some(gate), Method::ShAdaGrad) => {
            let rng = &mut state.rng;
            let outcome = rejection_gate(
                |b| p.batch_grad(b, &x_start),
                || draw_partition(n, m, cfg.sampling, rng),
                gate.threshold(m, n),
                gate.max_attempts,
            );
            match outcome {
                Ok(o) => {
                    state.grad_evals += (m * o.attempts) as u64;
                    (o.partition, o.attempts)
                }
                Err(e) => {
                    if let Error::GateExhausted { attempts, .. } = e {
                        state.grad_evals += (m * attempts) as u64;
                    }
                    return Err(e);
                }
            }
        }
        _ => (draw_partition(n, m, cfg.sampling, &mut state.rng)?, 0),
    };

    let history = state
        .history
        .as_mut()
        .ok_or_else(|| Error::InvalidArgument("preconditioned method without a history".into()))?;
    let delta_before = history.delta();
    let mut grads = GradMatrix::new(p.dim());
    let mut iterates = Vec::with_capacity(m + 1);
    iterates.push(x_start.clone());
    let mut x = x_start.clone();
    for batch in &partition.batches {
        let g = p.batch_grad(batch, &x)?;
        state.grad_evals += 1;
        history.push(&g)?;
        let dir = history.precondition(&g)?;
        debug_assert!(
            norm(&dir) <= 1.0 + 1e-9,
            "preconditioned direction longer than 1: {}",
            norm(&dir)
        );
        for (xi, di) in x.iter_mut().zip(&dir) {
            *xi -= eta * di;
        }
        grads.push(&g)?;
        iterates.push(x.clone());
    }
    history.seal_epoch()?;
    let delta_after = history.delta();
    state.x = x;
    state.t = t;
    Ok(EpochTrace {
        t,
        x_start,
        grads,
        iterates,
        eta,
        delta_before,
        delta_after,
        partition,
        gate_attempts,
    })
}

fn expect_method(cfg: &OptimizerConfig, method: Method) -> Result<()> {
    if cfg.method != method {
        return Err(Error::InvalidArgument(format!(
            "{} epoch called with a {} config",
            method.label(),
            cfg.method.label()
        )));
    }
    Ok(())
}

/// One epoch of SHAdaGrad: gate, then `m` preconditioned steps.
pub fn shadagrad_epoch(p: &Problem, state: &mut OptimizerState, cfg: &OptimizerConfig) -> Result<EpochTrace> {
    expect_method(cfg, Method::ShAdaGrad)?;
    preconditioned_epoch(p, state, cfg)
}

/// One epoch of full-matrix AdaGrad with a constant ridge.
pub fn adagrad_f_epoch(p: &Problem, state: &mut OptimizerState, cfg: &OptimizerConfig) -> Result<EpochTrace> {
    expect_method(cfg, Method::AdaGradF)?;
    preconditioned_epoch(p, state, cfg)
}

pub fn sgd_epoch(p: &Problem, state: &mut OptimizerState, cfg: &OptimizerConfig) -> Result<EpochTrace> {
    expect_method(cfg, Method::Sgd)?;
    let t = state.t + 1;
    let eta = cfg.schedule.step_size(t)?;
    let partition = draw_partition(p.n(), cfg.m, cfg.sampling, &mut state.rng)?;
    let x_start = state.x.clone();
    let mut x = x_start.clone();
    let mut grads = GradMatrix::new(p.dim());
    let mut iterates = vec![x_start.clone()];
    for batch in &partition.batches {
        let g = p.batch_grad(batch, &x)?;
        state.grad_evals += 1;
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= eta * gi;
        }
        grads.push(&g)?;
        iterates.push(x.clone());
    }
    state.x = x;
    state.t = t;
    Ok(EpochTrace {
        t,
        x_start,
        grads,
        iterates,
        eta,
        delta_before: 0.0,
        delta_after: 0.0,
        partition,
        gate_attempts: 0,
    })
}

pub fn run_epoch(p: &Problem, state: &mut OptimizerState, cfg: &OptimizerConfig) -> Result<EpochTrace> {
    match cfg.method {
        Method::ShAdaGrad => shadagrad_epoch(p, state, cfg),
        Method::AdaGradF => adagrad_f_epoch(p, state, cfg),
        Method::Sgd => sgd_epoch(p, state, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub t: usize,
    pub eta_t: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub rgps_norm: f64,
    pub weighted_metric: f64,
    pub delta: f64,
    pub kappa: f64,
    pub gate_attempts: usize,
    pub grad_evals: u64,
}

/// The run-level context needed to interpret a list of epoch traces.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub dim: usize,
    pub gamma: f64,
    pub perturbation: Option<Perturbation>,
    pub per_epoch_lowrank: bool,
    pub epochs: Vec<EpochTrace>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub trace: RunTrace,
    pub complete: bool,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn total_gate_attempts(&self) -> usize {
        self.rows.iter().map(|r| r.gate_attempts).sum()
    }

    pub fn final_row(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// `sum_t t^{-1/2} v_t / sum_t t^{-1/2}` over `v_1, v_2, ...`.
pub fn weighted_metric(values: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, v) in values.iter().enumerate() {
        let w = ((k + 1) as f64).sqrt().recip();
        num += w * v;
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Runs `epochs` epochs. A failing epoch ends the run early; the rows so far
/// are kept and the record is marked incomplete.
pub fn run(p: &Problem, cfg: &OptimizerConfig, epochs: usize, seed: u64) -> Result<RunRecord> {
    if epochs == 0 {
        return Err(Error::InvalidArgument("need at least one epoch".into()));
    }
    cfg.validate(p.n())?;
    let mut state = OptimizerState::new(p, cfg, seed)?;
    let mut trace = RunTrace {
        method: cfg.method,
        n: p.n(),
        m: cfg.m,
        dim: p.dim(),
        gamma: cfg.gamma,
        perturbation: state.history.as_ref().map(GradientHistory::perturbation),
        per_epoch_lowrank: cfg.per_epoch_lowrank,
        epochs: Vec::with_capacity(epochs),
    };
    let mut rows = Vec::with_capacity(epochs);
    let (mut num, mut den) = (0.0, 0.0);
    let mut failure = None;
    for _ in 0..epochs {
        let e = match run_epoch(p, &mut state, cfg) {
            Ok(e) => e,
            Err(err) => {
                log::warn!("run stopped after {} epochs: {err}", state.t);
                failure = Some(err.to_string());
                break;
            }
        };
        let grad_norm = norm(&p.full_grad(&e.x_start)?);
        let w = (e.t as f64).sqrt().recip();
        num += w * grad_norm;
        den += w;
        let kappa = match condition_number(&e.grads) {
            Ok(k) => k,
            Err(Error::RankDeficient { .. }) => f64::INFINITY,
            Err(err) => return Err(err),
        };
        rows.push(EpochRow {
            t: e.t,
            eta_t: e.eta,
            loss: p.value(&e.x_start)?,
            grad_norm,
            rgps_norm: norm(&rgps(&e.grads, cfg.m)?),
            weighted_metric: num / den,
            delta: e.delta_after,
            kappa,
            gate_attempts: e.gate_attempts,
            grad_evals: state.grad_evals,
        });
        trace.epochs.push(e);
    }
    Ok(RunRecord {
        complete: failure.is_none(),
        rows,
        trace,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{psd_inv_sqrt_dense, sq_norm, DenseSym};
    use crate::problems::make_quartic_sigmoid;

    fn half_x_squared() -> Problem {
        Problem::quadratic(vec![vec![0.0]])
            .unwrap()
            .with_initial_point(vec![2.0])
            .unwrap()
    }

    #[test]
    fn schedules() {
        let s = Schedule::new(ScheduleKind::InvSqrt, 0.1).unwrap();
        assert!((s.step_size(4).unwrap() - 0.05).abs() < 1e-16);
        let s = Schedule::new(ScheduleKind::InvCbrt, 1.0).unwrap();
        assert!((s.step_size(8).unwrap() - 0.5).abs() < 1e-16);
        assert_eq!(Schedule::constant(0.1).step_size(999).unwrap(), 0.1);
        assert!(matches!(Schedule::constant(0.1).step_size(0), Err(Error::Index { .. })));
    }

    #[test]
    fn shadagrad_hand_case() {
        let p = half_x_squared();
        let cfg = OptimizerConfig::shadagrad(1, Schedule::constant(1.0), 1.0);
        let mut st = OptimizerState::new(&p, &cfg, 0).unwrap();
        let e = shadagrad_epoch(&p, &mut st, &cfg).unwrap();
        assert!((st.x[0] - (2.0 - 0.5f64.sqrt())).abs() < 1e-15);
        assert_eq!(e.delta_after, 4.0);
        assert_eq!(e.gate_attempts, 1);
        assert_eq!(st.grad_evals, 2);
    }

    #[test]
    fn adagrad_f_hand_case() {
        let p = half_x_squared();
        let cfg = OptimizerConfig::adagrad_f(1, Schedule::constant(1.0), 1.0, 1.0);
        let mut st = OptimizerState::new(&p, &cfg, 0).unwrap();
        adagrad_f_epoch(&p, &mut st, &cfg).unwrap();
        assert!((st.x[0] - (2.0 - 2.0 / 5f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn sgd_hand_case() {
        let p = Problem::quadratic(vec![vec![0.0]]).unwrap().with_initial_point(vec![1.0]).unwrap();
        let cfg = OptimizerConfig::sgd(1, Schedule::constant(0.5));
        let mut st = OptimizerState::new(&p, &cfg, 0).unwrap();
        sgd_epoch(&p, &mut st, &cfg).unwrap();
        assert_eq!(st.x, vec![0.5]);
    }

    #[test]
    fn zero_step_freezes_iterate_but_not_delta() {
        let p = make_quartic_sigmoid(8, 3, 0);
        for cfg in [
            OptimizerConfig::shadagrad(4, Schedule::constant(0.0), 4.0),
            OptimizerConfig::sgd(4, Schedule::constant(0.0)),
        ] {
            let mut st = OptimizerState::new(&p, &cfg, 1).unwrap();
            let e = run_epoch(&p, &mut st, &cfg).unwrap();
            assert_eq!(st.x, p.initial_point());
            if cfg.method == Method::ShAdaGrad {
                assert!(e.delta_after > 0.0);
                let total: f64 = e.grads.columns().map(sq_norm).sum();
                assert_eq!(e.delta_after, total);
            }
        }
    }

    #[test]
    fn huge_fixed_delta_is_rescaled_sgd() {
        let p = make_quartic_sigmoid(8, 3, 5);
        let delta = 1e12;
        let gamma = 2.0;
        let ada = OptimizerConfig::adagrad_f(4, Schedule::constant(1.0), gamma, delta);
        let sgd = OptimizerConfig::sgd(4, Schedule::constant((gamma / delta).sqrt()));
        let mut a = OptimizerState::new(&p, &ada, 3).unwrap();
        let mut s = OptimizerState::new(&p, &sgd, 3).unwrap();
        let x0 = p.initial_point().to_vec();
        run_epoch(&p, &mut a, &ada).unwrap();
        run_epoch(&p, &mut s, &sgd).unwrap();
        let da: Vec<f64> = a.x.iter().zip(&x0).map(|(u, v)| u - v).collect();
        let ds: Vec<f64> = s.x.iter().zip(&x0).map(|(u, v)| u - v).collect();
        let err: f64 = norm(&da.iter().zip(&ds).map(|(u, v)| u - v).collect::<Vec<_>>());
        assert!(err <= 1e-6 * norm(&ds), "{err:e}");
    }

    /// Replays a preconditioned epoch with dense matrices built from scratch.
    fn dense_reference(p: &Problem, e: &EpochTrace, prior: &[Vec<f64>], delta0: f64, gamma: f64, fixed: Option<f64>) -> Vec<Vec<f64>> {
        let d = p.dim();
        let mut outer = DenseSym::zeros(d);
        for g in prior {
            outer = outer.add(&DenseSym::outer(g)).unwrap();
        }
        let mut delta = delta0;
        let mut x = e.x_start.clone();
        let mut out = vec![x.clone()];
        for b in &e.partition.batches {
            let g = p.batch_grad(b, &x).unwrap();
            outer = outer.add(&DenseSym::outer(&g)).unwrap();
            delta += sq_norm(&g);
            let ridge = fixed.unwrap_or(delta) / gamma;
            let gmat = outer.add_ridge(ridge);
            let dir = psd_inv_sqrt_dense(&gmat, 0.0).unwrap().mul_vec(&g).unwrap();
            x.iter_mut().zip(&dir).for_each(|(xi, di)| *xi -= e.eta * di);
            out.push(x.clone());
        }
        out
    }

    #[test]
    fn trajectories_match_dense_reference() {
        let p = make_quartic_sigmoid(8, 6, 2);
        for cfg in [
            OptimizerConfig::shadagrad(4, Schedule::constant(0.3), 4.0),
            OptimizerConfig::adagrad_f(4, Schedule::constant(0.3), 4.0, 0.01),
        ] {
            let rec = run(&p, &cfg, 3, 7).unwrap();
            let mut prior: Vec<Vec<f64>> = Vec::new();
            for e in &rec.trace.epochs {
                let reference = dense_reference(&p, e, &prior, e.delta_before, 4.0, cfg.fixed_delta);
                for (a, b) in reference.iter().zip(&e.iterates) {
                    let diff: Vec<f64> = a.iter().zip(b).map(|(u, v)| u - v).collect();
                    assert!(norm(&diff) <= 1e-8, "{:?}", cfg.method);
                }
                prior.extend(e.grads.columns().map(<[f64]>::to_vec));
            }
        }
    }

    #[test]
    fn shuffled_sgd_single_batch_is_gradient_descent() {
        let p = make_quartic_sigmoid(5, 3, 1);
        let cfg = OptimizerConfig::sgd(1, Schedule::constant(0.7));
        let rec = run(&p, &cfg, 5, 0).unwrap();
        let mut x = p.initial_point().to_vec();
        for e in &rec.trace.epochs {
            assert_eq!(e.x_start, x);
            let g = p.full_grad(&x).unwrap();
            x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= 0.7 * gi);
        }
    }

    #[test]
    fn accounting_and_determinism() {
        let p = make_quartic_sigmoid(16, 4, 3);
        let mut cfg = OptimizerConfig::shadagrad(4, Schedule::constant(0.1), 4.0);
        cfg.gate = Some(GateConfig {
            c_sigma: 0.5,
            ..GateConfig::default()
        });
        let a = run(&p, &cfg, 6, 11).unwrap();
        let b = run(&p, &cfg, 6, 11).unwrap();
        assert_eq!(a.rows, b.rows);
        let last = a.final_row().unwrap();
        assert_eq!(last.grad_evals, (6 * 4 + 4 * a.total_gate_attempts()) as u64);
        let sgd = run(&p, &OptimizerConfig::sgd(4, Schedule::constant(0.1)), 6, 11).unwrap();
        assert_eq!(sgd.final_row().unwrap().grad_evals, 24);
    }

    #[test]
    fn weighted_metric_of_constant_is_constant() {
        assert!((weighted_metric(&[0.3; 17]) - 0.3).abs() < 1e-15);
        let p = make_quartic_sigmoid(8, 3, 0);
        let rec = run(&p, &OptimizerConfig::sgd(2, Schedule::constant(0.5)), 9, 0).unwrap();
        let norms: Vec<f64> = rec.rows.iter().map(|r| r.grad_norm).collect();
        for (k, r) in rec.rows.iter().enumerate() {
            assert!((weighted_metric(&norms[..=k]) - r.weighted_metric).abs() <= 1e-12);
        }
    }

    #[test]
    fn exhausted_gate_gives_partial_record() {
        let p = make_quartic_sigmoid(8, 3, 0);
        let mut cfg = OptimizerConfig::shadagrad(2, Schedule::constant(0.1), 2.0);
        cfg.gate = Some(GateConfig {
            c_sigma: 1e6,
            max_attempts: 3,
            ..GateConfig::default()
        });
        let rec = run(&p, &cfg, 5, 0).unwrap();
        assert!(!rec.complete);
        assert!(rec.rows.is_empty());
        assert!(rec.failure.unwrap().contains("exhausted"));
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig::sgd(3, Schedule::constant(0.1));
        assert_eq!(bad.validate(8).unwrap_err(), Error::Divisibility { n: 8, m: 3 });
        let gated_sgd = OptimizerConfig::sgd(2, Schedule::constant(0.1)).with_gate(Some(GateConfig::default()));
        assert!(gated_sgd.validate(8).is_err());
        let cfg = OptimizerConfig::shadagrad(2, Schedule::constant(1.0), 16.0);
        let w = cfg.theory_warnings(8, 2.0, 0.65, 0.1);
        assert_eq!(w.len(), 2);
    }
}
