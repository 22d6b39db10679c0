//! Finite-sum objectives `f(x) = (1/n) sum_i f_i(x)` with per-instance
//! gradients, analytic constants where they exist, a finite-difference check
//! and a sampling estimator for `L`, `G` and `c_sigma`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, dot, norm, sq_norm};
use crate::sampling::{rng_from_seed, SeededRng};

/// `max |phi'(z)|` for `phi(z) = z^2 / (1 + z^2)`, attained at `z = 1/sqrt(3)`.
pub const QUARTIC_DPHI_MAX: f64 = 0.649_519_052_838_329; // 9 / (8 sqrt 3)
/// `max |phi''(z)|`, attained at `z = 0`.
pub const QUARTIC_D2PHI_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemName {
    QuarticSigmoid,
    LeastSquares,
    Quadratic,
    ToyMlp,
}

impl ProblemName {
    /// Bound on [`fd_check`] with the default step [`FD_STEP`].
    pub fn fd_tolerance(self) -> f64 {
        match self {
            ProblemName::Quadratic => 1e-8,
            ProblemName::LeastSquares => 1e-6,
            ProblemName::QuarticSigmoid => 1e-5,
            ProblemName::ToyMlp => 1e-4,
        }
    }
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Everything needed to rebuild a problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub name: ProblemName,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Quartic sigmoid only: reuse `distinct` design rows cyclically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distinct: Option<usize>,
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        if self.n == 0 {
            return Err(Error::config("problem.n", "must be >= 1"));
        }
        let need_d = || {
            self.d
                .filter(|&d| d >= 1)
                .ok_or_else(|| Error::config("problem.d", "required and must be >= 1"))
        };
        let mut p = match self.name {
            ProblemName::QuarticSigmoid => {
                if self.distinct == Some(0) {
                    return Err(Error::config("problem.distinct", "must be >= 1"));
                }
                quartic_sigmoid_data(self.n, need_d()?, self.seed, self.distinct)
            }
            ProblemName::LeastSquares => make_least_squares(self.n, need_d()?, self.seed),
            ProblemName::Quadratic => make_quadratic(self.n, need_d()?, self.seed),
            ProblemName::ToyMlp => {
                let d_in = self
                    .d_in
                    .filter(|&v| v >= 1)
                    .ok_or_else(|| Error::config("problem.d_in", "required and must be >= 1"))?;
                let hidden = self
                    .hidden
                    .filter(|&v| v >= 1)
                    .ok_or_else(|| Error::config("problem.hidden", "required and must be >= 1"))?;
                let p = make_toy_mlp(self.n, d_in, hidden, self.seed);
                if let Some(d) = self.d {
                    if d != p.dim() {
                        return Err(Error::config(
                            "problem.d",
                            format!("toy_mlp dimension is {}, got {d}", p.dim()),
                        ));
                    }
                }
                p
            }
        };
        p.spec = Some(self.clone());
        Ok(p)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    d_in: usize,
    hidden: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Kind {
    Quadratic { centers: Vec<Vec<f64>> },
    LeastSquares { a: Vec<Vec<f64>>, b: Vec<f64> },
    QuarticSigmoid { a: Vec<Vec<f64>>, b: Vec<f64> },
    Mlp(Mlp),
}

/// A finite-sum objective. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Problem {
    spec: Option<ProblemSpec>,
    kind: Kind,
    n: usize,
    dim: usize,
    declared_l: Option<f64>,
    declared_g: Option<f64>,
    x0: Vec<f64>,
}

fn std_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut SeededRng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * std_normal(rng))
        .collect::<Vec<f64>>()
}

fn max_sq_norm(rows: &[Vec<f64>]) -> f64 {
    rows.iter().map(|r| sq_norm(r)).fold(0.0, f64::max)
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map(Vec::len).ok_or(Error::EmptyDimension)?;
    if d == 0 {
        return Err(Error::EmptyDimension);
    }
    for r in rows {
        check_len(d, r)?;
    }
    Ok(d)
}

impl Problem {
    /// `f_i(x) = 0.5 ||x - c_i||^2`.
    pub fn quadratic(centers: Vec<Vec<f64>>) -> Result<Self> {
        let dim = check_rows(&centers)?;
        Ok(Self {
            spec: None,
            n: centers.len(),
            dim,
            declared_l: Some(1.0),
            declared_g: None,
            x0: vec![0.0; dim],
            kind: Kind::Quadratic { centers },
        })
    }

    /// `f_i(x) = 0.5 (a_i^T x - b_i)^2`.
    pub fn least_squares(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let dim = check_rows(&a)?;
        check_len(a.len(), &b)?;
        Ok(Self {
            spec: None,
            n: a.len(),
            dim,
            declared_l: Some(max_sq_norm(&a)),
            declared_g: None,
            x0: vec![0.0; dim],
            kind: Kind::LeastSquares { a, b },
        })
    }

    /// `f_i(x) = phi(a_i^T x - b_i)` with `phi(z) = z^2 / (1 + z^2)`.
    pub fn quartic_sigmoid(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let dim = check_rows(&a)?;
        check_len(a.len(), &b)?;
        let amax = max_sq_norm(&a).sqrt();
        Ok(Self {
            spec: None,
            n: a.len(),
            dim,
            declared_l: Some(QUARTIC_D2PHI_MAX * amax * amax),
            declared_g: Some(QUARTIC_DPHI_MAX * amax),
            x0: vec![0.0; dim],
            kind: Kind::QuarticSigmoid { a, b },
        })
    }

    pub fn with_initial_point(mut self, x0: Vec<f64>) -> Result<Self> {
        check_len(self.dim, &x0)?;
        self.x0 = x0;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> Option<&ProblemSpec> {
        self.spec.as_ref()
    }

    pub fn initial_point(&self) -> &[f64] {
        &self.x0
    }

    /// Analytic component smoothness constant, when one is known.
    pub fn declared_l(&self) -> Option<f64> {
        self.declared_l
    }

    /// Analytic bound on every component gradient norm, when one is known.
    pub fn declared_g(&self) -> Option<f64> {
        self.declared_g
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_len(self.dim, x)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::Index {
                index: i,
                len: self.n,
            });
        }
        Ok(())
    }

    fn value_unchecked(&self, i: usize, x: &[f64]) -> f64 {
        match &self.kind {
            Kind::Quadratic { centers } => {
                0.5 * x.iter().zip(&centers[i]).map(|(a, c)| (a - c).powi(2)).sum::<f64>()
            }
            Kind::LeastSquares { a, b } => 0.5 * (dot(&a[i], x) - b[i]).powi(2),
            Kind::QuarticSigmoid { a, b } => {
                let z = dot(&a[i], x) - b[i];
                z * z / (1.0 + z * z)
            }
            Kind::Mlp(mlp) => mlp.loss(i, x),
        }
    }

    /// `out += scale * grad f_i(x)`.
    fn add_grad_unchecked(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        match &self.kind {
            Kind::Quadratic { centers } => {
                for ((o, xv), c) in out.iter_mut().zip(x).zip(&centers[i]) {
                    *o += scale * (xv - c);
                }
            }
            Kind::LeastSquares { a, b } => {
                let r = dot(&a[i], x) - b[i];
                for (o, av) in out.iter_mut().zip(&a[i]) {
                    *o += scale * r * av;
                }
            }
            Kind::QuarticSigmoid { a, b } => {
                let z = dot(&a[i], x) - b[i];
                let q = 1.0 + z * z;
                let dphi = 2.0 * z / (q * q);
                for (o, av) in out.iter_mut().zip(&a[i]) {
                    *o += scale * dphi * av;
                }
            }
            Kind::Mlp(mlp) => mlp.add_grad(i, x, scale, out),
        }
    }

    pub fn component_value(&self, i: usize, x: &[f64]) -> Result<f64> {
        self.check_index(i)?;
        self.check_point(x)?;
        Ok(self.value_unchecked(i, x))
    }

    pub fn component_grad(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_index(i)?;
        self.check_point(x)?;
        let mut out = vec![0.0; self.dim];
        self.add_grad_unchecked(i, x, 1.0, &mut out);
        Ok(out)
    }

    /// Mean of the component gradients over `batch`. Summation runs in
    /// index order, so the result does not depend on how the batch is listed.
    pub fn batch_grad(&self, batch: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for &i in batch {
            self.check_index(i)?;
        }
        let mut sorted = batch.to_vec();
        sorted.sort_unstable();
        let mut out = vec![0.0; self.dim];
        let scale = 1.0 / batch.len() as f64;
        for &i in &sorted {
            self.add_grad_unchecked(i, x, scale, &mut out);
        }
        Ok(out)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok((0..self.n).map(|i| self.value_unchecked(i, x)).sum::<f64>() / self.n as f64)
    }

    pub fn full_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.n).collect();
        self.batch_grad(&all, x)
    }
}

// Smallest coordinate scale relative to the largest.
const QS_ANISOTROPY: f64 = 0.2;
const QS_TRUTH_SCALE: f64 = 0.2;
const QS_NOISE: f64 = 0.2;

/// Anisotropic design rows scaled into the unit ball, with noisy targets.
fn quartic_sigmoid_data(n: usize, d: usize, seed: u64, distinct: Option<usize>) -> Problem {
    let mut rng = rng_from_seed(seed);
    let k = distinct.unwrap_or(n).min(n);
    let scales: Vec<f64> = (0..d)
        .map(|j| if d == 1 { 1.0 } else { QS_ANISOTROPY.powf(j as f64 / (d - 1) as f64) })
        .collect();
    let truth = gaussian_vec(&mut rng, d, 1.0);
    let mut base = Vec::with_capacity(k);
    for _ in 0..k {
        let raw = gaussian_vec(&mut rng, d, 1.0);
        let mut row: Vec<f64> = raw.iter().zip(&scales).map(|(r, s)| r * s).collect();
        let nrm = norm(&row);
        if nrm > 1.0 {
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let noise: f64 = StandardNormal.sample(&mut rng);
        base.push((row, noise));
    }
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let (row, noise) = &base[i % k];
        b.push(QS_TRUTH_SCALE * dot(row, &truth) + QS_NOISE * noise);
        a.push(row.clone());
    }
    Problem::quartic_sigmoid(a, b).expect("generated rows are consistent")
}

pub fn make_quartic_sigmoid(n: usize, d: usize, seed: u64) -> Problem {
    ProblemSpec {
        name: ProblemName::QuarticSigmoid,
        n,
        d: Some(d),
        seed,
        d_in: None,
        hidden: None,
        distinct: None,
    }
    .build()
    .expect("valid quartic sigmoid spec")
}

pub fn make_least_squares(n: usize, d: usize, seed: u64) -> Problem {
    let mut rng = rng_from_seed(seed);
    let truth = gaussian_vec(&mut rng, d, 1.0);
    let scale = (d as f64).sqrt().recip();
    let a: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d, scale)).collect();
    let b = a
        .iter()
        .map(|row| dot(row, &truth) + 0.1 * std_normal(&mut rng))
        .collect::<Vec<f64>>();
    let mut p = Problem::least_squares(a, b).expect("generated rows are consistent");
    p.spec = Some(ProblemSpec {
        name: ProblemName::LeastSquares,
        n,
        d: Some(d),
        seed,
        d_in: None,
        hidden: None,
        distinct: None,
    });
    p
}

pub fn make_quadratic(n: usize, d: usize, seed: u64) -> Problem {
    let mut rng = rng_from_seed(seed);
    let centers = (0..n).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let mut p = Problem::quadratic(centers).expect("generated rows are consistent");
    p.spec = Some(ProblemSpec {
        name: ProblemName::Quadratic,
        n,
        d: Some(d),
        seed,
        d_in: None,
        hidden: None,
        distinct: None,
    });
    p
}

/// Parameter dimension of the toy network.
pub fn mlp_dim(d_in: usize, hidden: usize) -> usize {
    hidden * (d_in + 1) + hidden + 1
}

/// Two-class data labelled by a random teacher network with 10% label noise,
/// fitted by a one-hidden-layer tanh network under the logistic loss.
///
/// Parameters are laid out as `W1` (row-major, `hidden x d_in`), `b1`, `w2`,
/// `b2`.
pub fn make_toy_mlp(n: usize, d_in: usize, hidden: usize, seed: u64) -> Problem {
    let mut rng = rng_from_seed(seed);
    let dim = mlp_dim(d_in, hidden);
    let teacher = gaussian_vec(&mut rng, dim, 1.0);
    let mut mlp = Mlp {
        d_in,
        hidden,
        inputs: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let u = gaussian_vec(&mut rng, d_in, 1.0);
        let clean = mlp.forward(&teacher, &u).0 > 0.0;
        let flip = rng.gen_bool(0.1);
        mlp.labels.push(if clean != flip { 1.0 } else { 0.0 });
        mlp.inputs.push(u);
    }
    let x0 = gaussian_vec(&mut rng, dim, 0.5);
    Problem {
        spec: Some(ProblemSpec {
            name: ProblemName::ToyMlp,
            n,
            d: None,
            seed,
            d_in: Some(d_in),
            hidden: Some(hidden),
            distinct: None,
        }),
        kind: Kind::Mlp(mlp),
        n,
        dim,
        declared_l: None,
        declared_g: None,
        x0,
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    /// Returns the logit and the hidden activations.
    fn forward(&self, w: &[f64], u: &[f64]) -> (f64, Vec<f64>) {
        let (h, di) = (self.hidden, self.d_in);
        let b1 = h * di;
        let w2 = b1 + h;
        let b2 = w2 + h;
        let act: Vec<f64> = (0..h)
            .map(|k| (dot(&w[k * di..(k + 1) * di], u) + w[b1 + k]).tanh())
            .collect();
        (dot(&w[w2..w2 + h], &act) + w[b2], act)
    }

    fn loss(&self, i: usize, w: &[f64]) -> f64 {
        let (z, _) = self.forward(w, &self.inputs[i]);
        softplus(z) - self.labels[i] * z
    }

    fn add_grad(&self, i: usize, w: &[f64], scale: f64, out: &mut [f64]) {
        let (h, di) = (self.hidden, self.d_in);
        let b1 = h * di;
        let w2 = b1 + h;
        let b2 = w2 + h;
        let u = &self.inputs[i];
        let (z, act) = self.forward(w, u);
        let dz = scale * (sigmoid(z) - self.labels[i]);
        out[b2] += dz;
        for k in 0..h {
            out[w2 + k] += dz * act[k];
            let dpre = dz * w[w2 + k] * (1.0 - act[k] * act[k]);
            out[b1 + k] += dpre;
            for (o, uv) in out[k * di..(k + 1) * di].iter_mut().zip(u) {
                *o += dpre * uv;
            }
        }
    }
}

/// Max over coordinates of `|fd_j - g_j| / max(1, |g_j|)` with central
/// differences of the full objective.
pub fn fd_check(p: &Problem, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let g = p.full_grad(x)?;
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for j in 0..p.dim() {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = p.value(&xp)?;
        xp[j] = orig - h;
        let fm = p.value(&xp)?;
        xp[j] = orig;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub l: f64,
    pub g: f64,
    pub c_sigma: f64,
}

/// Samples `samples` probe points around the initial point (the initial
/// point included) and reports the observed extremes.
pub fn estimate_constants(p: &Problem, samples: usize, rng: &mut impl Rng) -> Result<Estimates> {
    if samples < 2 {
        return Err(Error::InsufficientSamples(samples));
    }
    let d = p.dim();
    let mut probes = vec![p.initial_point().to_vec()];
    while probes.len() < samples {
        let x: Vec<f64> = p
            .initial_point()
            .iter()
            .map(|v| v + std_normal(rng))
            .collect::<Vec<f64>>();
        probes.push(x);
    }
    // a close partner per probe picks up local curvature
    let partners: Vec<Vec<f64>> = probes
        .iter()
        .map(|x| {
            x.iter()
                .map(|v| v + 1e-3 * std_normal(rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    let grads_at = |x: &[f64]| -> Result<Vec<Vec<f64>>> {
        (0..p.n()).map(|i| p.component_grad(i, x)).collect()
    };
    let probe_grads: Vec<Vec<Vec<f64>>> =
        probes.iter().map(|x| grads_at(x)).collect::<Result<_>>()?;
    let partner_grads: Vec<Vec<Vec<f64>>> =
        partners.iter().map(|x| grads_at(x)).collect::<Result<_>>()?;

    let mut g_hat: f64 = 0.0;
    let mut var_min = f64::INFINITY;
    for grads in &probe_grads {
        let mut mean = vec![0.0; d];
        for g in grads {
            g_hat = g_hat.max(norm(g));
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v / p.n() as f64;
            }
        }
        let var = grads
            .iter()
            .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / p.n() as f64;
        var_min = var_min.min(var);
    }

    let ratio = |gx: &[Vec<f64>], gy: &[Vec<f64>], dist: f64| -> f64 {
        if dist == 0.0 {
            return 0.0;
        }
        gx.iter()
            .zip(gy)
            .map(|(a, b)| {
                let diff: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
                diff.sqrt() / dist
            })
            .fold(0.0, f64::max)
    };
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut l_hat: f64 = 0.0;
    for k in 0..probes.len() {
        l_hat = l_hat.max(ratio(&probe_grads[k], &partner_grads[k], dist(&probes[k], &partners[k])));
        for l in (k + 1)..probes.len() {
            l_hat = l_hat.max(ratio(&probe_grads[k], &probe_grads[l], dist(&probes[k], &probes[l])));
        }
    }
    Ok(Estimates {
        l: l_hat,
        g: g_hat,
        c_sigma: var_min.max(0.0).sqrt(),
    })
}
