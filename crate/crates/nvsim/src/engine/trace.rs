//! Time-binned detection record plus the ordered event log of one run.

use serde::{Deserialize, Serialize};

use crate::levels::{ChargeState, LaserTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Ionization,
    Recombination,
    GreenPulse,
    SweepStart,
    SpectralJump,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Ionization => "ionization",
            EventKind::Recombination => "recombination",
            EventKind::GreenPulse => "green_pulse",
            EventKind::SweepStart => "sweep_start",
            EventKind::SpectralJump => "spectral_jump",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventPayload {
    None,
    /// Which laser drove a recombination.
    Driver(LaserTarget),
    /// Sweep identity: recording channel and running sweep index.
    Sweep { channel: usize, index: usize },
    /// A line moved: which charge state's line and by how much (Hz).
    Jump { line: ChargeState, delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: EventKind,
    pub payload: EventPayload,
}

/// Time-binned detected photon counts plus the event log for one run.
///
/// Counts are stored as f64 so the deterministic solver can fill the same
/// structure with expected values; the stochastic solver writes integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Bin width (s), strictly positive.
    pub bin_width: f64,
    pub counts: Vec<f64>,
    /// Per-bin level occupancies, filled by the deterministic solver.
    pub occupancy: Option<Vec<Vec<f64>>>,
    /// Ordered log of charge and diffusion events.
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(bin_width: f64, total_duration: f64) -> Self {
        assert!(bin_width > 0.0, "bin width must be positive");
        let n_bins = if total_duration <= 0.0 {
            0
        } else {
            (total_duration / bin_width).ceil() as usize
        };
        Trace {
            bin_width,
            counts: vec![0.0; n_bins],
            occupancy: None,
            events: Vec::new(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.bin_width * self.counts.len() as f64
    }

    /// Record one detected photon at absolute time `t`.
    pub fn record_photon(&mut self, t: f64) {
        if self.counts.is_empty() {
            return;
        }
        let idx = ((t / self.bin_width) as usize).min(self.counts.len() - 1);
        self.counts[idx] += 1.0;
    }

    /// Add expected counts to the bins overlapping [t0, t1) at a constant
    /// rate (counts per second).
    pub fn add_expected(&mut self, t0: f64, t1: f64, rate: f64) {
        if self.counts.is_empty() || t1 <= t0 || rate == 0.0 {
            return;
        }
        let first = ((t0 / self.bin_width) as usize).min(self.counts.len() - 1);
        let last = ((t1 / self.bin_width) as usize).min(self.counts.len() - 1);
        for bin in first..=last {
            let lo = (bin as f64 * self.bin_width).max(t0);
            let hi = ((bin + 1) as f64 * self.bin_width).min(t1);
            if hi > lo {
                self.counts[bin] += rate * (hi - lo);
            }
        }
    }

    pub fn push_event(&mut self, time: f64, kind: EventKind, payload: EventPayload) {
        debug_assert!(
            self.events.last().map_or(true, |e| e.time <= time),
            "event times must be non-decreasing"
        );
        self.events.push(TraceEvent {
            time,
            kind,
            payload,
        });
    }

    pub fn count_events(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photons_land_in_bins() {
        let mut trace = Trace::new(1e-3, 10e-3);
        trace.record_photon(0.5e-3);
        trace.record_photon(0.9e-3);
        trace.record_photon(9.99e-3);
        trace.record_photon(10.5e-3); // clamped into the last bin
        assert_eq!(trace.counts[0], 2.0);
        assert_eq!(trace.counts[9], 2.0);
    }

    #[test]
    fn expected_counts_split_across_bins() {
        let mut trace = Trace::new(1e-3, 3e-3);
        trace.add_expected(0.5e-3, 2.5e-3, 1000.0);
        assert!((trace.counts[0] - 0.5).abs() < 1e-12);
        assert!((trace.counts[1] - 1.0).abs() < 1e-12);
        assert!((trace.counts[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_duration_trace_is_empty() {
        let trace = Trace::new(1e-3, 0.0);
        assert!(trace.counts.is_empty());
        assert_eq!(trace.duration(), 0.0);
    }
}
