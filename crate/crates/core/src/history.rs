//! Gradient history: per-epoch gradient columns, the perturbation `delta`,
//! the scaling `gamma`, and a cached factorization of
//! `G = sum(g g^T) + (delta / gamma) I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    dense_factorize, gram_factorize, sq_norm, DenseSym, GradMatrix, LowRankPsd,
};

/// How the ridge numerator evolves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `delta` is the running sum of squared gradient norms.
    Adaptive,
    /// `delta` is held constant.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct GradientHistory {
    dim: usize,
    m: usize,
    gamma: f64,
    perturbation: Perturbation,
    per_epoch_lowrank: bool,
    cap: usize,
    epochs: Vec<GradMatrix>,
    epoch_sq: Vec<f64>,
    live: GradMatrix,
    accumulated: f64,
    outer_all: DenseSym,
    outer_live: DenseSym,
    factor: Option<LowRankPsd>,
}

impl GradientHistory {
    pub fn new(dim: usize, m: usize, gamma: f64, perturbation: Perturbation) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyDimension);
        }
        if m == 0 {
            return Err(Error::InvalidArgument("batch count m must be >= 1".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        if let Perturbation::Fixed(d) = perturbation {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::InvalidArgument(format!("fixed delta must be >= 0, got {d}")));
            }
        }
        let mut h = Self {
            dim,
            m,
            gamma,
            perturbation,
            per_epoch_lowrank: false,
            cap: 10 * dim,
            epochs: Vec::new(),
            epoch_sq: Vec::new(),
            live: GradMatrix::new(dim),
            accumulated: 0.0,
            outer_all: DenseSym::zeros(dim),
            outer_live: DenseSym::zeros(dim),
            factor: None,
        };
        h.refresh()?;
        Ok(h)
    }

    /// Maximum number of stored columns before `push` fails.
    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    /// Restrict the low-rank part to the current epoch's columns.
    pub fn with_per_epoch_lowrank(mut self, on: bool) -> Result<Self> {
        self.per_epoch_lowrank = on;
        self.refresh()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn perturbation(&self) -> Perturbation {
        self.perturbation
    }

    pub fn per_epoch_lowrank(&self) -> bool {
        self.per_epoch_lowrank
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// The ridge numerator currently in effect.
    pub fn delta(&self) -> f64 {
        match self.perturbation {
            Perturbation::Adaptive => self.accumulated,
            Perturbation::Fixed(d) => d,
        }
    }

    /// Sum of squared norms of every pushed column, whatever the mode.
    pub fn accumulated_sq_norms(&self) -> f64 {
        self.accumulated
    }

    pub fn ridge(&self) -> f64 {
        self.delta() / self.gamma
    }

    pub fn sealed_epochs(&self) -> &[GradMatrix] {
        &self.epochs
    }

    pub fn live(&self) -> &GradMatrix {
        &self.live
    }

    pub fn total_columns(&self) -> usize {
        self.epochs.len() * self.m + self.live.ncols()
    }

    pub fn factorization(&self) -> Option<&LowRankPsd> {
        self.factor.as_ref()
    }

    pub fn push(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        if self.live.ncols() >= self.m {
            return Err(Error::EpochOverflow { m: self.m });
        }
        if self.total_columns() >= self.cap {
            return Err(Error::HistoryCap { cap: self.cap });
        }
        self.live.push(g)?;
        self.accumulated += sq_norm(g);
        self.outer_all.add_outer_assign(g);
        self.outer_live.add_outer_assign(g);
        self.refresh()
    }

    pub fn seal_epoch(&mut self) -> Result<()> {
        let have = self.live.ncols();
        if have != self.m {
            return Err(Error::SealTooEarly { have, m: self.m });
        }
        let live = std::mem::replace(&mut self.live, GradMatrix::new(self.dim));
        self.epoch_sq.push(live.sq_norm_sum());
        self.epochs.push(live);
        self.outer_live = DenseSym::zeros(self.dim);
        self.refresh()
    }

    /// `G^{-1/2} g` for the current state.
    pub fn precondition(&self, g: &[f64]) -> Result<Vec<f64>> {
        match &self.factor {
            Some(f) => f.apply_inv_sqrt(g),
            None => Err(Error::SingularPreconditioner),
        }
    }

    /// `delta_{m,t} - delta_{m,t-1}` for sealed epoch `t` (1-based).
    pub fn epoch_delta_increment(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.epochs.len() {
            return Err(Error::Index {
                index: t,
                len: self.epochs.len(),
            });
        }
        Ok(self.epoch_sq[t - 1])
    }

    /// Low-rank part `sum(g g^T)` over the columns in effect.
    pub fn outer_sum(&self) -> &DenseSym {
        if self.per_epoch_lowrank {
            &self.outer_live
        } else {
            &self.outer_all
        }
    }

    /// `G` formed densely.
    pub fn dense_g(&self) -> DenseSym {
        self.outer_sum().add_ridge(self.ridge())
    }

    fn active_columns(&self) -> GradMatrix {
        if self.per_epoch_lowrank {
            return self.live.clone();
        }
        let mut all = GradMatrix::new(self.dim);
        for e in &self.epochs {
            for c in e.columns() {
                all.push(c).expect("column length checked on push");
            }
        }
        for c in self.live.columns() {
            all.push(c).expect("column length checked on push");
        }
        all
    }

    fn active_count(&self) -> usize {
        if self.per_epoch_lowrank {
            self.live.ncols()
        } else {
            self.total_columns()
        }
    }

    fn refresh(&mut self) -> Result<()> {
        let ridge = self.ridge();
        if !(ridge > 0.0) {
            self.factor = None;
            return Ok(());
        }
        let factor = if self.active_count() < self.dim {
            gram_factorize(&self.active_columns(), ridge)?
        } else {
            dense_factorize(self.outer_sum(), ridge)?
        };
        #[cfg(debug_assertions)]
        {
            let dense = self.dense_g();
            let err = factor.densify().sub(&dense)?.frobenius_norm();
            debug_assert!(
                err <= 1e-8 * (1.0 + dense.frobenius_norm()),
                "cached factorization drifted from the dense accumulation: {err:e}"
            );
        }
        self.factor = Some(factor);
        Ok(())
    }

    pub fn snapshot(&self) -> HistorySnapshot {
        HistorySnapshot {
            dim: self.dim,
            m: self.m,
            gamma: self.gamma,
            perturbation: self.perturbation,
            per_epoch_lowrank: self.per_epoch_lowrank,
            cap: self.cap,
            delta: self.delta(),
            accumulated: self.accumulated,
            epochs: self.epochs.iter().map(row_major).collect(),
            live_count: self.live.ncols(),
            live: row_major(&self.live),
        }
    }

    pub fn from_snapshot(s: &HistorySnapshot) -> Result<Self> {
        let mut h = Self::new(s.dim, s.m, s.gamma, s.perturbation)?
            .with_cap(s.cap)
            .with_per_epoch_lowrank(s.per_epoch_lowrank)?;
        for (e, flat) in s.epochs.iter().enumerate() {
            for c in from_row_major(s.dim, s.m, flat, &format!("epochs[{e}]"))? {
                h.push(&c)?;
            }
            h.seal_epoch()?;
        }
        for c in from_row_major(s.dim, s.live_count, &s.live, "live")? {
            h.push(&c)?;
        }
        let tol = 1e-9 * (1.0 + s.accumulated.abs());
        if (h.accumulated - s.accumulated).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "snapshot accumulated norm {} disagrees with columns ({})",
                s.accumulated, h.accumulated
            )));
        }
        Ok(h)
    }
}

/// JSON checkpoint form. Every matrix is a flat row-major `dim x cols` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySnapshot {
    pub dim: usize,
    pub m: usize,
    pub gamma: f64,
    pub perturbation: Perturbation,
    pub per_epoch_lowrank: bool,
    pub cap: usize,
    pub delta: f64,
    pub accumulated: f64,
    pub epochs: Vec<Vec<f64>>,
    pub live_count: usize,
    pub live: Vec<f64>,
}

fn row_major(a: &GradMatrix) -> Vec<f64> {
    let k = a.ncols();
    let mut out = vec![0.0; a.dim() * k];
    for (j, c) in a.columns().enumerate() {
        for (r, v) in c.iter().enumerate() {
            out[r * k + j] = *v;
        }
    }
    out
}

fn from_row_major(dim: usize, k: usize, flat: &[f64], what: &str) -> Result<Vec<Vec<f64>>> {
    if flat.len() != dim * k {
        return Err(Error::InvalidArgument(format!(
            "snapshot {what}: expected {} entries, got {}",
            dim * k,
            flat.len()
        )));
    }
    Ok((0..k)
        .map(|j| (0..dim).map(|r| flat[r * k + j]).collect())
        .collect())
}

/// The epoch mean of the mini-batch gradient columns.
pub fn rgps(epoch_grads: &GradMatrix, m: usize) -> Result<Vec<f64>> {
    if epoch_grads.ncols() != m || m == 0 {
        return Err(Error::Shape {
            expected: m,
            got: epoch_grads.ncols(),
        });
    }
    Ok(epoch_grads
        .column_sum()
        .into_iter()
        .map(|v| v / m as f64)
        .collect())
}
