//! Turns traces and sweep records into derived quantities: switching-event
//! counts, power-law exponents with uncertainty, accumulated excitation
//! spectra with per-sweep line centres, the repump stability ratio, and the
//! banded recovery scan.
//!
//! Everything here is a deterministic function of its inputs; the only
//! routine that runs the engine is [`repump_band_scan`], which drives one
//! short simulation per band.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{effective_linewidth, LinewidthError};
use crate::engine::runner::{simulate_protocol, RunOptions, SimContext, SimError, SweepRecord};
use crate::engine::Trace;
use crate::levels::{LaserTarget, LevelRole, TransitionKind};
use crate::protocol::{ProtocolStep, SweepStep};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("power-law fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("power-law fit needs positive values; point {index} is ({power}, {events})")]
    NonPositivePoint {
        index: usize,
        power: f64,
        events: f64,
    },
    #[error("sweep {0} does not share the accumulation frequency grid")]
    MismatchedGrids(usize),
    #[error("need at least {needed} valid line centres, got {got}")]
    TooFewCenters { needed: usize, got: usize },
    #[error("band {index} is degenerate (start {start} >= stop {stop})")]
    DegenerateBand { index: usize, start: f64, stop: f64 },
    #[error("bands {0} and {1} overlap")]
    OverlappingBands(usize, usize),
    #[error(transparent)]
    Linewidth(#[from] LinewidthError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

// ---------------------------------------------------------------------------
// Switching events
// ---------------------------------------------------------------------------

/// Count bright-to-dark transitions in a binned counts array.
///
/// A switching event is a bin above `on_threshold` followed by at least
/// `off_run_length` consecutive bins at or below it; after an event another
/// above-threshold bin must occur before the next event can be counted, so
/// a long dark stretch is never double counted.
pub fn count_switching_events_in(
    counts: &[f64],
    on_threshold: f64,
    off_run_length: usize,
) -> usize {
    debug_assert!(on_threshold > 0.0, "threshold must be positive");
    let off_run_length = off_run_length.max(1);
    let mut events = 0;
    let mut armed = false;
    let mut dark_run = 0usize;
    for &c in counts {
        if c > on_threshold {
            armed = true;
            dark_run = 0;
        } else if armed {
            dark_run += 1;
            if dark_run >= off_run_length {
                events += 1;
                armed = false;
                dark_run = 0;
            }
        }
    }
    events
}

/// [`count_switching_events_in`] applied to a trace's bins.
pub fn count_switching_events(trace: &Trace, on_threshold: f64, off_run_length: usize) -> usize {
    count_switching_events_in(&trace.counts, on_threshold, off_run_length)
}

// ---------------------------------------------------------------------------
// Power-law fit
// ---------------------------------------------------------------------------

/// Result of a log-log least-squares power-law fit, y = amplitude * x^exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub exponent: f64,
    pub amplitude: f64,
    /// 1-sigma uncertainty of the exponent from the residual covariance.
    pub stderr_exponent: f64,
    pub r_squared: f64,
}

/// Least squares on log-log coordinates.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<FitResult, AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    for (index, &(power, events)) in points.iter().enumerate() {
        if !(power > 0.0 && events > 0.0 && power.is_finite() && events.is_finite()) {
            return Err(AnalysisError::NonPositivePoint {
                index,
                power,
                events,
            });
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let syy: f64 = ys.iter().map(|y| (y - y_mean) * (y - y_mean)).sum();

    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let dof = (points.len() as f64 - 2.0).max(1.0);
    let stderr = (ssr / dof / sxx).sqrt();
    let r_squared = if syy > 0.0 {
        (1.0 - ssr / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(FitResult {
        exponent: slope,
        amplitude: intercept.exp(),
        stderr_exponent: stderr,
        r_squared,
    })
}

// ---------------------------------------------------------------------------
// Spectra: accumulation and per-sweep line centres
// ---------------------------------------------------------------------------

/// Accumulated excitation spectrum on a common frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Frequency offsets (Hz), strictly increasing.
    pub offsets: Vec<f64>,
    pub counts: Vec<f64>,
    pub n_sweeps: usize,
}

impl Spectrum {
    pub fn peak(&self) -> Option<(f64, f64)> {
        self.counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite counts"))
            .map(|(i, &c)| (self.offsets[i], c))
    }
}

/// Full width at half maximum of an accumulated spectrum, by linear
/// interpolation of the half-max crossings around the tallest bin. None when
/// the spectrum is empty, flat, or does not fall below half maximum inside
/// the recorded grid.
pub fn spectrum_fwhm(spectrum: &Spectrum) -> Option<f64> {
    let counts = &spectrum.counts;
    let offsets = &spectrum.offsets;
    if counts.len() < 3 {
        return None;
    }
    let (max_idx, &max_val) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite counts"))?;
    if max_val <= 0.0 {
        return None;
    }
    let half = max_val / 2.0;
    let mut left = None;
    for i in (0..max_idx).rev() {
        if counts[i] < half {
            let frac = (half - counts[i]) / (counts[i + 1] - counts[i]);
            left = Some(offsets[i] + frac * (offsets[i + 1] - offsets[i]));
            break;
        }
    }
    let mut right = None;
    for i in max_idx..counts.len() - 1 {
        if counts[i + 1] < half {
            let frac = (counts[i] - half) / (counts[i] - counts[i + 1]);
            right = Some(offsets[i] + frac * (offsets[i + 1] - offsets[i]));
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) if r > l => Some(r - l),
        _ => None,
    }
}

/// Line-centre estimate for one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCenter {
    pub sweep_index: usize,
    pub center: f64,
    pub amplitude: f64,
    pub fwhm: f64,
    /// False when the sweep had too little signal to locate a line.
    pub valid: bool,
    /// True when the least-squares fit failed and a weighted centroid was
    /// reported instead.
    pub centroid_fallback: bool,
}

/// Accumulated spectrum plus the retained per-sweep centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PleAccumulation {
    pub spectrum: Spectrum,
    pub centers: Vec<SweepCenter>,
}

impl PleAccumulation {
    pub fn valid_centers(&self) -> Vec<f64> {
        self.centers
            .iter()
            .filter(|c| c.valid)
            .map(|c| c.center)
            .collect()
    }
}

/// Unit-peak Lorentzian evaluated at `x`.
fn lorentz_unit(x: f64, center: f64, fwhm: f64) -> f64 {
    let h = fwhm / 2.0;
    h * h / ((x - center) * (x - center) + h * h)
}

/// Levenberg-Marquardt fit of `a * L(x; c, w)` to one sweep segment.
/// Returns None when the iteration fails to produce a finite improvement.
fn fit_lorentzian(xs: &[f64], ys: &[f64], a0: f64, c0: f64, w0: f64) -> Option<(f64, f64, f64)> {
    let mut a = a0.max(1e-12);
    let mut c = c0;
    let mut w = w0.abs().max(1e-6);
    let mut lambda = 1e-3;

    let chi2 = |a: f64, c: f64, w: f64| -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let r = a * lorentz_unit(x, c, w) - y;
                r * r
            })
            .sum()
    };
    let mut best = chi2(a, c, w);

    for _ in 0..60 {
        // Normal equations J^T J and J^T r for the 3 parameters.
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        let h = w / 2.0;
        for (&x, &y) in xs.iter().zip(ys) {
            let d = x - c;
            let denom = d * d + h * h;
            let unit = h * h / denom;
            let r = a * unit - y;
            let da = unit;
            let dc = a * h * h * 2.0 * d / (denom * denom);
            let dw = a * h * d * d / (denom * denom);
            let grad = [da, dc, dw];
            for i in 0..3 {
                jtr[i] += grad[i] * r;
                for j in 0..3 {
                    jtj[i][j] += grad[i] * grad[j];
                }
            }
        }
        // Damped 3x3 solve.
        let mut m = jtj;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += lambda * jtj[i][i].max(1e-30);
        }
        let delta = solve3(m, [-jtr[0], -jtr[1], -jtr[2]])?;
        let (na, nc, nw) = (a + delta[0], c + delta[1], (w + delta[2]).abs().max(1e-6));
        let trial = chi2(na, nc, nw);
        if trial.is_finite() && trial < best {
            let improved = best - trial;
            a = na;
            c = nc;
            w = nw;
            best = trial;
            lambda = (lambda * 0.3).max(1e-12);
            if improved < 1e-12 * best.max(1e-300) {
                break;
            }
        } else {
            lambda *= 4.0;
            if lambda > 1e9 {
                break;
            }
        }
    }
    if a.is_finite() && c.is_finite() && w.is_finite() && a > 0.0 {
        Some((a, c, w))
    } else {
        None
    }
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if !d.is_finite() || d.abs() < 1e-300 {
        return None;
    }
    let mut out = [0.0; 3];
    for k in 0..3 {
        let mut mk = m;
        for row in 0..3 {
            mk[row][k] = b[row];
        }
        out[k] = det(&mk) / d;
    }
    Some(out)
}

/// Width of an accumulated line by least squares over the whole grid,
/// robust against the bin-level clumpiness of a spectrum assembled from few
/// sweeps. Falls back to the half-max width when the fit fails.
pub fn fitted_line_fwhm(spectrum: &Spectrum) -> Option<f64> {
    if spectrum.offsets.len() < 5 {
        return spectrum_fwhm(spectrum);
    }
    let (c0, a0) = spectrum.peak()?;
    if a0 <= 0.0 {
        return None;
    }
    let w0 = spectrum_fwhm(spectrum)
        .unwrap_or((spectrum.offsets[1] - spectrum.offsets[0]).abs() * 4.0);
    match fit_lorentzian(&spectrum.offsets, &spectrum.counts, a0, c0, w0) {
        Some((_, _, w)) if w.is_finite() && w > 0.0 => Some(w),
        _ => spectrum_fwhm(spectrum),
    }
}

/// Estimate the line centre of one sweep: Lorentzian least squares around
/// the tallest peak, weighted centroid as the flagged fallback.
pub fn sweep_line_center(
    offsets: &[f64],
    counts: &[f64],
    min_peak_counts: f64,
    init_fwhm: f64,
    sweep_index: usize,
) -> SweepCenter {
    let invalid = SweepCenter {
        sweep_index,
        center: f64::NAN,
        amplitude: 0.0,
        fwhm: 0.0,
        valid: false,
        centroid_fallback: false,
    };
    if offsets.len() < 3 {
        return invalid;
    }
    let (peak_idx, &peak) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite counts"))
        .expect("non-empty");
    if peak < min_peak_counts {
        return invalid;
    }
    // Fit window around the peak: wide enough for the wings, narrow enough
    // to exclude neighbouring lines.
    let step = (offsets[1] - offsets[0]).abs().max(1e-9);
    let half_window = (5.0 * init_fwhm).max(6.0 * step);
    let lo = offsets[peak_idx] - half_window;
    let hi = offsets[peak_idx] + half_window;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&x, &y) in offsets.iter().zip(counts) {
        if x >= lo && x <= hi {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.len() < 3 {
        return invalid;
    }
    match fit_lorentzian(&xs, &ys, peak, offsets[peak_idx], init_fwhm.max(step)) {
        Some((a, c, w)) if c >= lo && c <= hi => SweepCenter {
            sweep_index,
            center: c,
            amplitude: a,
            fwhm: w,
            valid: true,
            centroid_fallback: false,
        },
        _ => {
            let total: f64 = ys.iter().sum();
            if total <= 0.0 {
                return invalid;
            }
            let centroid = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / total;
            SweepCenter {
                sweep_index,
                center: centroid,
                amplitude: peak,
                fwhm: 0.0,
                valid: true,
                centroid_fallback: true,
            }
        }
    }
}

/// Accumulate recorded sweeps sharing one frequency grid into a spectrum,
/// retaining a per-sweep line-centre estimate for each.
pub fn accumulate_ple(
    records: &[SweepRecord],
    min_peak_counts: f64,
    init_fwhm: f64,
) -> Result<PleAccumulation, AnalysisError> {
    let first = match records.first() {
        Some(r) => r,
        None => {
            return Ok(PleAccumulation {
                spectrum: Spectrum {
                    offsets: Vec::new(),
                    counts: Vec::new(),
                    n_sweeps: 0,
                },
                centers: Vec::new(),
            })
        }
    };
    let grid = &first.offsets;
    let mut counts = vec![0.0; grid.len()];
    let mut centers = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if rec.offsets != *grid {
            return Err(AnalysisError::MismatchedGrids(i));
        }
        for (acc, c) in counts.iter_mut().zip(&rec.counts) {
            *acc += c;
        }
        centers.push(sweep_line_center(
            &rec.offsets,
            &rec.counts,
            min_peak_counts,
            init_fwhm,
            rec.sweep_index,
        ));
    }
    Ok(PleAccumulation {
        spectrum: Spectrum {
            offsets: grid.clone(),
            counts,
            n_sweeps: records.len(),
        },
        centers,
    })
}

// ---------------------------------------------------------------------------
// Stability ratio
// ---------------------------------------------------------------------------

/// Outcome of comparing the two repump methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityComparison {
    /// Effective linewidth of the repump-pulse method's centres (Hz).
    pub linewidth_green: f64,
    /// Effective linewidth of the resonant method's centres (Hz).
    pub linewidth_yellow: f64,
    /// Resolution kernels the two widths were measured with (Hz).
    pub kernel_green: f64,
    pub kernel_yellow: f64,
    pub green_multimodal: bool,
    pub yellow_multimodal: bool,
    /// linewidth_green / linewidth_yellow.
    pub ratio: f64,
}

const MIN_CENTERS: usize = 20;

/// Robust scale of a centre set: median absolute deviation rescaled to the
/// Gaussian sigma.
fn robust_sigma(centers: &[f64]) -> f64 {
    let mut sorted = centers.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite centres"));
    let median = sorted[sorted.len() / 2];
    let mut dev: Vec<f64> = sorted.iter().map(|c| (c - median).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).expect("finite centres"));
    dev[dev.len() / 2] * 1.4826
}

/// Density-style bandwidth for a finite centre sample, floored at the
/// homogeneous width. Twice the usual density-estimation bandwidth: wide
/// enough that the occupation profile of a single spectral-walk trajectory
/// merges into one lobe instead of a knife-edge forest of clusters.
fn resolution_kernel(centers: &[f64], homogeneous_fwhm: f64) -> f64 {
    let n = centers.len() as f64;
    let bandwidth = 2.12 * robust_sigma(centers) * n.powf(-0.2);
    bandwidth.max(homogeneous_fwhm)
}

/// Ratio of accumulated effective linewidths between the two repump methods.
///
/// A finite scan samples the line-position distribution sparsely: at the
/// bare homogeneous width the summed profile of a wide-wandering line is a
/// forest of disjoint spikes and its half-max width measures whichever two
/// sweeps happened to coincide. Each side is therefore measured with a
/// resolution kernel proportional to its own centre spread (floored at the
/// homogeneous width). The kernel scales with the spread, so the ratio is
/// scale-equivariant: doubling one method's jump scale doubles the ratio.
pub fn stability_ratio(
    green_centers: &[f64],
    yellow_centers: &[f64],
    homogeneous_fwhm: f64,
) -> Result<StabilityComparison, AnalysisError> {
    for centers in [green_centers, yellow_centers] {
        if centers.len() < MIN_CENTERS {
            return Err(AnalysisError::TooFewCenters {
                needed: MIN_CENTERS,
                got: centers.len(),
            });
        }
    }
    let kernel_green = resolution_kernel(green_centers, homogeneous_fwhm);
    let kernel_yellow = resolution_kernel(yellow_centers, homogeneous_fwhm);
    let green = effective_linewidth(green_centers, kernel_green)?;
    let yellow = effective_linewidth(yellow_centers, kernel_yellow)?;
    Ok(StabilityComparison {
        linewidth_green: green.fwhm,
        linewidth_yellow: yellow.fwhm,
        kernel_green,
        kernel_yellow,
        green_multimodal: green.multimodal,
        yellow_multimodal: yellow.multimodal,
        ratio: green.fwhm / yellow.fwhm,
    })
}

// ---------------------------------------------------------------------------
// Banded recovery scan
// ---------------------------------------------------------------------------

/// Result of probing one yellow sweep band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub start: f64,
    pub stop: f64,
    /// Post-first-cycle brightness of the red sweeps relative to the
    /// fresh-state reference.
    pub brightness_ratio: f64,
    pub recovered: bool,
}

/// Options for [`repump_band_scan`].
#[derive(Debug, Clone)]
pub struct BandScanOptions {
    /// Cycles per band.
    pub repetitions: u32,
    /// Brightness ratio at or above which a band counts as recovering.
    pub recovery_threshold: f64,
    pub yellow_power: f64,
    pub red_power: f64,
    pub dwell: f64,
    pub seed: u64,
}

impl Default for BandScanOptions {
    fn default() -> Self {
        BandScanOptions {
            repetitions: 20,
            recovery_threshold: 0.5,
            yellow_power: 1e-7,
            // Hot enough that essentially every cycle converts the charge
            // state, so an unrecovered defect stays dark for the rest of
            // the scan.
            red_power: 3e-5,
            dwell: 1e-3,
            seed: 1,
        }
    }
}

/// Red sweep span covering every negative-state optical line, with margin.
fn red_sweep_span(ctx: &SimContext) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in &ctx.graph.transitions {
        if t.kind != TransitionKind::OpticalExcitation {
            continue;
        }
        let Some(level) = ctx.graph.level(&t.to) else {
            continue;
        };
        if level.charge != crate::levels::ChargeState::Negative
            || level.role != LevelRole::OpticalExcited
        {
            continue;
        }
        if let Some(center) = ctx.graph.line_center_offset(t) {
            lo = lo.min(center);
            hi = hi.max(center);
        }
    }
    if !lo.is_finite() {
        (-5e9, 5e9)
    } else {
        (lo - 1e9, hi + 1e9)
    }
}

/// Expected counts of one red sweep starting from a fresh negative state
/// with the conversion channel active: the calibrated brightness a recovered
/// defect shows before it converts again. Deterministic.
fn recovered_brightness_reference(
    ctx: &SimContext,
    red: &SweepStep,
) -> Result<f64, AnalysisError> {
    let protocol = crate::protocol::Protocol {
        steps: vec![ProtocolStep::Sweep(red.clone())],
    };
    let windows = crate::protocol::schedule(&protocol);
    let reference_ctx = SimContext {
        jump_model: crate::diffusion::JumpModel::all_zero(),
        ..ctx.clone()
    };
    let run_options = RunOptions {
        solver: crate::engine::runner::Solver::Ode,
        bin_width: red.duration().max(1e-3),
        ..RunOptions::default()
    };
    let output = simulate_protocol(&reference_ctx, &windows, 0, &run_options)?;
    Ok(output
        .sweeps
        .first()
        .map_or(0.0, |rec| rec.counts.iter().sum()))
}

/// For each yellow band, run interleaved red/yellow sweep cycles and report
/// whether the red-sweep fluorescence keeps recovering.
///
/// The red sweeps are hot enough to convert the charge state essentially
/// every cycle, so sustained fluorescence requires the band's yellow sweep
/// to keep restoring it. A band "recovers" when the red sweeps after the
/// first cycle average at least `recovery_threshold` of the calibrated
/// recovered brightness.
pub fn repump_band_scan(
    bands: &[(f64, f64)],
    ctx: &SimContext,
    options: &BandScanOptions,
) -> Result<Vec<BandResult>, AnalysisError> {
    for (i, &(start, stop)) in bands.iter().enumerate() {
        if !(start < stop) {
            return Err(AnalysisError::DegenerateBand {
                index: i,
                start,
                stop,
            });
        }
        for (j, &(s2, e2)) in bands.iter().enumerate().skip(i + 1) {
            if start < e2 && s2 < stop {
                return Err(AnalysisError::OverlappingBands(i, j));
            }
        }
    }

    // Step fine enough that a wandering line never falls between samples.
    let (red_lo, red_hi) = red_sweep_span(ctx);
    let red_step = ctx.params.nvm_homogeneous_fwhm.max(1e6);
    let red_points = (((red_hi - red_lo) / red_step).ceil() as u32).clamp(50, 8000);

    let mut reference = None;
    let mut results = Vec::with_capacity(bands.len());
    for &(start, stop) in bands {
        // Enough yellow points that the neutral line cannot fall between
        // two sweep samples.
        let yellow_step = ctx.params.nv0_homogeneous_fwhm / 2.0;
        let yellow_points = (((stop - start) / yellow_step).ceil() as u32).clamp(50, 20_000);

        let red = SweepStep {
            laser: LaserTarget::RedNvm,
            start_offset: red_lo,
            stop_offset: red_hi,
            n_points: red_points,
            dwell: options.dwell,
            power: options.red_power,
            others: Vec::new(),
            mw_on: true,
            record: true,
        };
        let yellow = SweepStep {
            laser: LaserTarget::YellowNv0,
            start_offset: start,
            stop_offset: stop,
            n_points: yellow_points,
            dwell: options.dwell,
            power: options.yellow_power,
            others: Vec::new(),
            mw_on: true,
            record: false,
        };
        if reference.is_none() {
            reference = Some(recovered_brightness_reference(ctx, &red)?);
        }
        let reference = reference.expect("just set");

        let protocol = crate::protocol::Protocol {
            steps: vec![ProtocolStep::Repeat {
                count: options.repetitions,
                body: vec![ProtocolStep::Sweep(red), ProtocolStep::Sweep(yellow)],
            }],
        };
        let windows = crate::protocol::schedule(&protocol);
        let run_options = RunOptions {
            bin_width: options.dwell,
            ..RunOptions::default()
        };
        let output = simulate_protocol(ctx, &windows, options.seed, &run_options)?;

        // Judge the sweeps that depend on the band's repumping, i.e. all
        // red sweeps after the fresh-state first cycle.
        let totals: Vec<f64> = output
            .sweeps
            .iter()
            .skip(1)
            .map(|rec| rec.counts.iter().sum::<f64>())
            .collect();
        let ratio = if reference > 0.0 && !totals.is_empty() {
            totals.iter().sum::<f64>() / totals.len() as f64 / reference
        } else {
            0.0
        };
        results.push(BandResult {
            start,
            stop,
            brightness_ratio: ratio,
            recovered: ratio >= options.recovery_threshold,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switching_events_constant_bright_trace() {
        let counts = vec![100.0; 500];
        assert_eq!(count_switching_events_in(&counts, 30.0, 5), 0);
    }

    #[test]
    fn switching_events_synthetic_square_wave() {
        let mut counts = Vec::new();
        for _ in 0..2 {
            counts.extend(std::iter::repeat(100.0).take(50));
            counts.extend(std::iter::repeat(2.0).take(50));
        }
        assert_eq!(count_switching_events_in(&counts, 30.0, 5), 2);
    }

    #[test]
    fn switching_events_hysteresis_prevents_double_counting() {
        let mut counts = vec![100.0; 10];
        counts.extend(vec![0.0; 200]); // one long dark stretch
        assert_eq!(count_switching_events_in(&counts, 30.0, 5), 1);
        // Short dips below the run length do not count.
        let counts = vec![100.0, 0.0, 0.0, 100.0, 0.0, 100.0];
        assert_eq!(count_switching_events_in(&counts, 30.0, 5), 0);
    }

    #[test]
    fn switching_events_empty_trace() {
        assert_eq!(count_switching_events_in(&[], 30.0, 5), 0);
    }

    #[test]
    fn switching_events_threshold_relative_scaling() {
        let counts: Vec<f64> = (0..400)
            .map(|i| if (i / 37) % 2 == 0 { 80.0 } else { 1.0 })
            .collect();
        let base = count_switching_events_in(&counts, 24.0, 5);
        let scaled: Vec<f64> = counts.iter().map(|c| c * 1000.0).collect();
        assert_eq!(
            count_switching_events_in(&scaled, 24.0 * 1000.0, 5),
            base
        );
    }

    #[test]
    fn power_law_fit_exact_quadratic() {
        let points: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&p| (p, 3.0 * p * p))
            .collect();
        let fit = fit_power_law(&points).unwrap();
        assert!((fit.exponent - 2.0).abs() < 1e-9, "{}", fit.exponent);
        assert!((fit.amplitude - 3.0).abs() < 1e-9);
        assert!(fit.stderr_exponent < 1e-9);
        assert!(fit.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn power_law_fit_exact_linear() {
        let points: Vec<(f64, f64)> = [0.5, 1.5, 2.5, 5.0]
            .iter()
            .map(|&p| (p, 7.0 * p))
            .collect();
        let fit = fit_power_law(&points).unwrap();
        assert!((fit.exponent - 1.0).abs() < 1e-9);
    }

    #[test]
    fn power_law_fit_rejects_bad_input() {
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (2.0, 4.0)]),
            Err(AnalysisError::TooFewPoints(2))
        ));
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (2.0, 4.0), (3.0, 0.0)]),
            Err(AnalysisError::NonPositivePoint { .. })
        ));
    }

    #[test]
    fn power_law_scale_invariance() {
        let base: Vec<(f64, f64)> = [1.0f64, 3.0, 9.0, 27.0]
            .iter()
            .map(|&p| (p, 2.0 * p.powf(1.7) * (1.0 + 0.01 * p.sin())))
            .collect();
        let fit = fit_power_law(&base).unwrap();
        let scaled_x: Vec<(f64, f64)> = base.iter().map(|&(p, e)| (p * 13.0, e)).collect();
        let scaled_y: Vec<(f64, f64)> = base.iter().map(|&(p, e)| (p, e * 0.003)).collect();
        assert!((fit_power_law(&scaled_x).unwrap().exponent - fit.exponent).abs() < 1e-12);
        assert!((fit_power_law(&scaled_y).unwrap().exponent - fit.exponent).abs() < 1e-12);
    }

    fn record(offsets: &[f64], counts: &[f64], sweep_index: usize) -> SweepRecord {
        SweepRecord {
            channel: 0,
            sweep_index,
            offsets: offsets.to_vec(),
            counts: counts.to_vec(),
        }
    }

    #[test]
    fn accumulate_single_and_repeated_sweeps() {
        let offsets: Vec<f64> = (0..50).map(|i| i as f64 * 1e7).collect();
        let counts: Vec<f64> = offsets
            .iter()
            .map(|&x| 100.0 * lorentz_unit(x, 2.5e8, 4e7))
            .collect();
        let one = accumulate_ple(&[record(&offsets, &counts, 0)], 5.0, 4e7).unwrap();
        assert_eq!(one.spectrum.counts, counts);
        assert_eq!(one.spectrum.n_sweeps, 1);

        let many: Vec<SweepRecord> = (0..7).map(|i| record(&offsets, &counts, i)).collect();
        let acc = accumulate_ple(&many, 5.0, 4e7).unwrap();
        for (a, b) in acc.spectrum.counts.iter().zip(&counts) {
            assert!((a - 7.0 * b).abs() < 1e-9);
        }
        assert_eq!(acc.centers.len(), 7);
        for c in &acc.centers {
            assert!(c.valid);
            assert!((c.center - 2.5e8).abs() < 2e6, "center {}", c.center);
        }
    }

    #[test]
    fn accumulate_is_permutation_invariant() {
        let offsets: Vec<f64> = (0..40).map(|i| i as f64 * 1e7).collect();
        let recs: Vec<SweepRecord> = (0..5)
            .map(|i| {
                let counts: Vec<f64> = offsets
                    .iter()
                    .map(|&x| 50.0 * lorentz_unit(x, 1e8 + i as f64 * 2e7, 4e7))
                    .collect();
                record(&offsets, &counts, i)
            })
            .collect();
        let forward = accumulate_ple(&recs, 5.0, 4e7).unwrap();
        let mut reversed = recs.clone();
        reversed.reverse();
        let backward = accumulate_ple(&reversed, 5.0, 4e7).unwrap();
        // Equal up to summation-order rounding.
        for (a, b) in forward
            .spectrum
            .counts
            .iter()
            .zip(&backward.spectrum.counts)
        {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn accumulate_rejects_mismatched_grids() {
        let a = record(&[0.0, 1.0, 2.0], &[1.0, 2.0, 1.0], 0);
        let b = record(&[0.0, 1.5, 2.0], &[1.0, 2.0, 1.0], 1);
        assert!(matches!(
            accumulate_ple(&[a, b], 0.5, 1.0),
            Err(AnalysisError::MismatchedGrids(1))
        ));
    }

    #[test]
    fn accumulated_width_matches_convolution_oracle() {
        // Sweeps with Gaussian-jittered centres: the accumulated line must
        // match a numeric Gaussian (x) Lorentzian convolution width.
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let sigma = 1.2e8;
        let hom = 3e7;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, sigma).unwrap();
        let offsets: Vec<f64> = (-150..=150).map(|i| i as f64 * 1e7).collect();
        let recs: Vec<SweepRecord> = (0..3000)
            .map(|i| {
                let c = normal.sample(&mut rng);
                let counts: Vec<f64> = offsets
                    .iter()
                    .map(|&x| 40.0 * lorentz_unit(x, c, hom))
                    .collect();
                record(&offsets, &counts, i)
            })
            .collect();
        let acc = accumulate_ple(&recs, 1.0, hom).unwrap();

        // Numeric convolution oracle for the expected profile.
        let profile = |x: f64| -> f64 {
            let n = 4001;
            let span = 10.0 * sigma;
            let dx = span / (n as f64 - 1.0);
            let mut acc = 0.0;
            for i in 0..n {
                let u = -span / 2.0 + i as f64 * dx;
                let gauss = (-(u * u) / (2.0 * sigma * sigma)).exp();
                acc += gauss * lorentz_unit(x, u, hom) * dx;
            }
            acc
        };
        let peak = profile(0.0);
        let mut half_x = 0.0;
        for i in 0..4000 {
            let x = i as f64 * 1e6;
            if profile(x) < peak / 2.0 {
                half_x = x;
                break;
            }
        }
        let oracle_fwhm = 2.0 * half_x;

        // Measure the accumulated FWHM on the spectrum.
        let measured = spectrum_fwhm(&acc.spectrum).unwrap();
        assert!(
            (measured - oracle_fwhm).abs() / oracle_fwhm < 0.10,
            "measured {measured:.3e} vs oracle {oracle_fwhm:.3e}"
        );
    }

    #[test]
    fn stability_ratio_identical_inputs_is_one() {
        let centers: Vec<f64> = (0..30).map(|i| (i as f64 - 15.0) * 1e7).collect();
        let cmp = stability_ratio(&centers, &centers, 1e7).unwrap();
        assert!((cmp.ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stability_ratio_scales_with_scatter() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let narrow = Normal::new(0.0, 2e8).unwrap();
        let narrow_centers: Vec<f64> = (0..4000).map(|_| narrow.sample(&mut rng)).collect();
        let wide_centers: Vec<f64> = narrow_centers.iter().map(|c| 4.0 * c).collect();
        let cmp = stability_ratio(&wide_centers, &narrow_centers, 1e6).unwrap();
        assert!((cmp.ratio - 4.0).abs() < 0.4, "ratio {}", cmp.ratio);
    }

    #[test]
    fn stability_ratio_needs_enough_centers() {
        let few: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let many: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert!(matches!(
            stability_ratio(&few, &many, 1e6),
            Err(AnalysisError::TooFewCenters { .. })
        ));
    }

    #[test]
    fn band_scan_rejects_degenerate_and_overlapping_bands() {
        let ctx = SimContext {
            graph: crate::levels::build_default_graph(Default::default()),
            params: Default::default(),
            detection: Default::default(),
            jump_model: crate::diffusion::JumpModel::all_zero(),
        };
        let err = repump_band_scan(&[(1e9, 1e9)], &ctx, &BandScanOptions::default()).unwrap_err();
        assert!(matches!(err, AnalysisError::DegenerateBand { .. }));
        let err = repump_band_scan(&[(0.0, 2e9), (1e9, 3e9)], &ctx, &BandScanOptions::default())
            .unwrap_err();
        assert!(matches!(err, AnalysisError::OverlappingBands(0, 1)));
    }
}
