//! Exact-event sampling of the jump process (direct method).
//!
//! Rates are constant within a protocol window, so each step draws an
//! exponential waiting time from the total exit rate of the current level
//! and picks the transition proportionally to its rate. Charge-conversion
//! transitions hand control back to the caller, which applies spectral
//! jumps and rebuilds the rate table before resuming.

use rand::Rng;

use crate::engine::{DetectionModel, Trace};
use crate::levels::{ChargeState, TransitionKind};
use crate::optics::RateTable;

/// Why a window advance returned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Advance {
    /// Clock reached the end of the window.
    WindowEnd,
    /// A charge-conversion transition fired (already applied to the level);
    /// the caller must react before continuing.
    ChargeEvent {
        kind: TransitionKind,
        driver: Option<crate::levels::LaserTarget>,
        time: f64,
    },
}

/// Advance the sampler until the window ends or a charge conversion fires.
///
/// `level` and `t` are updated in place. Every spontaneous-emission event is
/// reported through `on_photon` with probability equal to the detection
/// efficiency of the emitting charge state. A level with zero total exit
/// rate absorbs the remaining window time.
pub fn advance_window(
    table: &RateTable,
    level: &mut usize,
    t: &mut f64,
    t_end: f64,
    detection: &DetectionModel,
    rng: &mut impl Rng,
    on_photon: &mut impl FnMut(f64, ChargeState),
) -> Advance {
    loop {
        let total: f64 = table.total_exit_rate(*level);
        if total <= 0.0 {
            *t = t_end;
            return Advance::WindowEnd;
        }
        // Exponential waiting time; guard against a zero uniform draw.
        let u: f64 = rng.random::<f64>();
        let u = if u <= 0.0 { f64::MIN_POSITIVE } else { u };
        let tau = -u.ln() / total;
        if *t + tau >= t_end {
            *t = t_end;
            return Advance::WindowEnd;
        }
        *t += tau;

        // Pick the firing edge proportionally to its rate.
        let mut pick = rng.random::<f64>() * total;
        let exits = &table.exits[*level];
        let mut chosen = *exits.last().expect("nonzero total implies exits");
        for &edge_idx in exits {
            let rate = table.edges[edge_idx].rate;
            if pick < rate {
                chosen = edge_idx;
                break;
            }
            pick -= rate;
        }
        let edge = &table.edges[chosen];

        if edge.kind == TransitionKind::SpontaneousEmission {
            let charge = table.charges[edge.from];
            if rng.random::<f64>() < detection.efficiency(charge) {
                on_photon(*t, charge);
            }
        }
        *level = edge.to;

        if matches!(
            edge.kind,
            TransitionKind::Ionization | TransitionKind::Recombination
        ) {
            return Advance::ChargeEvent {
                kind: edge.kind,
                driver: edge.driver,
                time: *t,
            };
        }
    }
}

/// Result of sampling one piecewise-constant segment.
#[derive(Debug, Clone)]
pub struct SegmentResult {
    pub trace: Trace,
    /// Fraction of time spent in each level.
    pub occupancy: Vec<f64>,
    /// Number of transitions fired.
    pub n_transitions: u64,
    pub final_level: usize,
}

/// Sample a single piecewise-constant segment of duration `duration`,
/// binning detected photons into `bin_width` bins. Charge-conversion edges
/// are treated like any other transition here (no table rebuild), which is
/// exact when the spectral jump scales are zero or irrelevant.
pub fn run_segment(
    table: &RateTable,
    initial_level: usize,
    duration: f64,
    bin_width: f64,
    detection: &DetectionModel,
    rng: &mut impl Rng,
) -> SegmentResult {
    let mut trace = Trace::new(bin_width, duration);
    let mut occupancy = vec![0.0; table.n_levels()];
    let mut level = initial_level;
    let mut t = 0.0;
    let mut n_transitions = 0u64;

    while t < duration {
        let total: f64 = table.total_exit_rate(level);
        if total <= 0.0 {
            occupancy[level] += duration - t;
            break;
        }
        let u: f64 = rng.random::<f64>();
        let u = if u <= 0.0 { f64::MIN_POSITIVE } else { u };
        let tau = -u.ln() / total;
        let step_end = (t + tau).min(duration);
        occupancy[level] += step_end - t;
        if t + tau >= duration {
            break;
        }
        t += tau;

        let mut pick = rng.random::<f64>() * total;
        let exits = &table.exits[level];
        let mut chosen = *exits.last().expect("nonzero total implies exits");
        for &edge_idx in exits {
            let rate = table.edges[edge_idx].rate;
            if pick < rate {
                chosen = edge_idx;
                break;
            }
            pick -= rate;
        }
        let edge = &table.edges[chosen];
        if edge.kind == TransitionKind::SpontaneousEmission {
            let charge = table.charges[edge.from];
            if rng.random::<f64>() < detection.efficiency(charge) {
                trace.record_photon(t);
            }
        }
        level = edge.to;
        n_transitions += 1;
    }

    for v in &mut occupancy {
        *v /= duration.max(f64::MIN_POSITIVE);
    }
    SegmentResult {
        trace,
        occupancy,
        n_transitions,
        final_level: level,
    }
}
