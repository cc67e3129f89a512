//! Two interchangeable solvers over the time-dependent rate process.
//!
//! The exact-event sampler ([`kmc`]) and the deterministic master-equation
//! integrator ([`ode`]) both consume the rate tables built by the optics
//! module; the [`runner`] drives either one through a scheduled protocol,
//! handling spectral-diffusion events and photon detection.

pub mod kmc;
pub mod ode;
pub mod runner;
mod trace;

pub use trace::{EventKind, EventPayload, Trace, TraceEvent};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levels::{ChargeState, LevelId, TransitionKind};
use crate::optics::RateTable;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("matrix is not a generator: {0}")]
    NotGenerator(String),
    #[error("invalid probability vector: {0}")]
    BadProbability(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("integrator exceeded {0} steps")]
    StepLimit(usize),
    #[error("steady-state solve hit a singular system")]
    Singular,
}

/// Square generator matrix over all levels of both charge states.
///
/// Stored row-major with `g[i*n + j]` the rate from level `j` into level `i`
/// for `i != j`; diagonals hold minus the column exit sums, so every column
/// sums to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    pub n: usize,
    pub level_ids: Vec<LevelId>,
    pub g: Vec<f64>,
}

impl RateMatrix {
    pub fn entry(&self, into: usize, from: usize) -> f64 {
        self.g[into * self.n + from]
    }

    /// out = G p
    pub fn apply(&self, p: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.g[i * n..(i + 1) * n];
            out[i] = row.iter().zip(p).map(|(a, b)| a * b).sum();
        }
    }

    /// Verify the generator property: non-negative off-diagonals, finite
    /// entries, columns summing to zero within `tol` relative to the column
    /// magnitude.
    pub fn check_generator(&self, tol: f64) -> Result<(), EngineError> {
        if self.g.len() != self.n * self.n {
            return Err(EngineError::DimensionMismatch {
                expected: self.n * self.n,
                got: self.g.len(),
            });
        }
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.entry(i, j);
                if !v.is_finite() {
                    return Err(EngineError::NotGenerator(format!(
                        "non-finite entry at ({i}, {j})"
                    )));
                }
                if i != j && v < 0.0 {
                    return Err(EngineError::NotGenerator(format!(
                        "negative off-diagonal {v} at ({i}, {j})"
                    )));
                }
            }
        }
        for j in 0..self.n {
            let col: f64 = (0..self.n).map(|i| self.entry(i, j)).sum();
            let scale: f64 = (0..self.n).map(|i| self.entry(i, j).abs()).sum();
            if col.abs() > tol * scale.max(1.0) {
                return Err(EngineError::NotGenerator(format!(
                    "column {j} sums to {col}"
                )));
            }
        }
        Ok(())
    }

    /// Stationary distribution via a direct null-space solve: replace the
    /// normalization row and eliminate with partial pivoting.
    pub fn steady_state(&self) -> Result<Vec<f64>, EngineError> {
        self.check_generator(1e-9)?;
        let n = self.n;
        let mut a = self.g.clone();
        let mut b = vec![0.0; n];
        // Replace the last equation with sum(p) = 1.
        for j in 0..n {
            a[(n - 1) * n + j] = 1.0;
        }
        b[n - 1] = 1.0;

        for col in 0..n {
            let mut pivot = col;
            for row in col + 1..n {
                if a[row * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = row;
                }
            }
            if a[pivot * n + col].abs() < 1e-300 {
                return Err(EngineError::Singular);
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                b.swap(col, pivot);
            }
            let inv = 1.0 / a[col * n + col];
            for row in col + 1..n {
                let factor = a[row * n + col] * inv;
                if factor == 0.0 {
                    continue;
                }
                for j in col..n {
                    a[row * n + j] -= factor * a[col * n + j];
                }
                b[row] -= factor * b[col];
            }
        }
        let mut p = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for j in row + 1..n {
                acc -= a[row * n + j] * p[j];
            }
            p[row] = acc / a[row * n + row];
        }
        // Clip tiny negative round-off and renormalize.
        for v in &mut p {
            if *v < 0.0 && *v > -1e-12 {
                *v = 0.0;
            }
        }
        let sum: f64 = p.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(EngineError::Singular);
        }
        for v in &mut p {
            *v /= sum;
        }
        Ok(p)
    }
}

/// Photon detection: band-pass plus collection efficiency per charge state,
/// and an optional dark-count floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    /// Fraction of negative-state emission that lands in the detection band
    /// and is collected.
    pub efficiency_nvm: f64,
    /// Fraction of neutral-state emission collected; only the sideband tail
    /// of the neutral emission falls in band, so this is the smaller one.
    pub efficiency_nv0: f64,
    /// Detector dark counts (Hz).
    pub dark_count_rate: f64,
}

impl Default for DetectionModel {
    fn default() -> Self {
        DetectionModel {
            efficiency_nvm: 0.1,
            efficiency_nv0: 0.05,
            dark_count_rate: 0.0,
        }
    }
}

impl DetectionModel {
    pub fn efficiency(&self, charge: ChargeState) -> f64 {
        match charge {
            ChargeState::Negative => self.efficiency_nvm,
            ChargeState::Neutral => self.efficiency_nv0,
        }
    }

    pub fn check(&self) -> Result<(), EngineError> {
        for (name, v) in [
            ("efficiency_nvm", self.efficiency_nvm),
            ("efficiency_nv0", self.efficiency_nv0),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EngineError::BadProbability(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        if !self.dark_count_rate.is_finite() || self.dark_count_rate < 0.0 {
            return Err(EngineError::BadProbability(format!(
                "dark_count_rate must be non-negative, got {}",
                self.dark_count_rate
            )));
        }
        Ok(())
    }
}

/// Expected detected count rate for a given occupancy vector (Hz).
pub fn expected_count_rate(
    occupancy: &[f64],
    table: &RateTable,
    detection: &DetectionModel,
) -> f64 {
    let mut rate = detection.dark_count_rate;
    for e in &table.edges {
        if e.kind == TransitionKind::SpontaneousEmission {
            rate += e.rate * occupancy[e.from] * detection.efficiency(table.charges[e.from]);
        }
    }
    rate
}

/// Per-level weights w such that the expected detected rate is w . p,
/// excluding dark counts.
pub fn detection_weights(table: &RateTable, detection: &DetectionModel) -> Vec<f64> {
    let mut w = vec![0.0; table.n_levels()];
    for e in &table.edges {
        if e.kind == TransitionKind::SpontaneousEmission {
            w[e.from] += e.rate * detection.efficiency(table.charges[e.from]);
        }
    }
    w
}
