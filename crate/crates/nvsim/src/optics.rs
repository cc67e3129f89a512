//! Laser fields, rate laws and the instantaneous rate table.
//!
//! This module turns the static level graph plus the currently active laser
//! fields into numbers: excitation rates through Lorentzian lines, the
//! power-linear charge-conversion steps, and the photon-energy threshold
//! checks on the conversion energetics.
//!
//! Two-photon ionization is modelled sequentially: the resonant excitation
//! step is linear in power, and the detachment step out of the excited level
//! is linear in power again, so the unsaturated conversion rate scales as
//! power squared. Saturation of the excitation step bends that law down at
//! high power; nothing is fitted to force the exponent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::SpectralState;
use crate::engine::RateMatrix;
use crate::levels::{
    ChargeState, LaserTarget, LevelGraph, LevelId, LevelRole, PowerCoefficient, RateConstant,
    RateLaw, TransitionKind, TransitionTemplate,
};

/// One excitation source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserField {
    pub id: String,
    pub target: LaserTarget,
    /// Offset from the nominal reference line of the target (Hz).
    /// Meaningless for the broadband green laser and kept at zero there.
    pub frequency_offset: f64,
    /// Optical power at the emitter (W).
    pub power: f64,
    /// Laser linewidth FWHM (Hz); zero for an ideal single-mode source.
    pub linewidth: f64,
}

impl LaserField {
    pub fn new(target: LaserTarget, frequency_offset: f64, power: f64) -> Self {
        LaserField {
            id: target.as_str().to_string(),
            target,
            frequency_offset,
            power,
            linewidth: 0.0,
        }
    }
}

/// Free rate constants of the model.
///
/// Every value here is a calibration default, not a measured number; the
/// config file documents the provenance of each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    /// Radiative decay rate of the negative-state excited levels (Hz).
    pub spontaneous_nvm: f64,
    /// Radiative decay rate of the neutral-state excited level (Hz).
    pub spontaneous_nv0: f64,
    /// Shelving rate from the spin-mixing excited level (Hz).
    pub isc_nvm: f64,
    /// Singlet shelf decay rate (Hz).
    pub singlet_decay: f64,
    /// Shelving rate from the neutral excited level (Hz).
    pub isc_nv0: f64,
    /// Quartet shelf decay rate (Hz).
    pub quartet_decay: f64,
    /// Ground-sublevel mixing rate while the microwave drive is on (Hz).
    pub mw_mixing_rate: f64,
    /// On-resonance excitation rate per laser target at its reference power (Hz).
    pub peak_excitation_red: f64,
    pub peak_excitation_yellow: f64,
    pub peak_excitation_green: f64,
    /// Reference powers the peak rates are quoted at (W).
    pub reference_power_red: f64,
    pub reference_power_yellow: f64,
    pub reference_power_green: f64,
    /// One-photon detachment step out of an excited negative state (Hz/W of red power).
    pub ionization_coeff: f64,
    /// Resonant recombination step out of the excited neutral state (Hz/W of yellow power).
    pub recombination_coeff: f64,
    /// Off-resonant recovery step out of the excited neutral state (Hz/W of green power).
    pub green_recovery_rate: f64,
    /// Homogeneous linewidth FWHM of negative-state optical lines (Hz).
    pub nvm_homogeneous_fwhm: f64,
    /// Homogeneous linewidth FWHM of the neutral-state optical line (Hz).
    pub nv0_homogeneous_fwhm: f64,
    /// Gaussian laser linewidth FWHM (Hz); zero for single-mode sources.
    pub laser_linewidth: f64,
    /// When false, excited levels with a shelving exit do not ionize.
    pub ionize_from_all_excited: bool,
}

impl Default for RateParams {
    fn default() -> Self {
        let spontaneous_nvm = 8.333e7; // 12 ns excited lifetime
        RateParams {
            spontaneous_nvm,
            spontaneous_nv0: 5.0e7, // 20 ns
            isc_nvm: 3.0e7,
            singlet_decay: 4.5e6, // ~220 ns shelf
            isc_nv0: 5.0e6,
            quartet_decay: 1.0e6,
            mw_mixing_rate: 3.0e4,
            peak_excitation_red: 3.0e6,
            peak_excitation_yellow: 5.0e6,
            peak_excitation_green: 5.0e7,
            reference_power_red: 1.0e-5,    // 10 uW sweep power
            reference_power_yellow: 1.0e-7, // 100 nW sweep power
            reference_power_green: 1.0e-3,  // 1 mW repump pulse
            ionization_coeff: 1.0e9,
            // Sized so a 100 nW sweep across the neutral line recovers the
            // negative state with >99% probability while the recombination
            // hazard stays concentrated at the line core rather than in the
            // Lorentzian tails of a long sweep.
            recombination_coeff: 1.1e12,
            green_recovery_rate: 1.0e9,
            // Lifetime limit 1/(2 pi tau).
            nvm_homogeneous_fwhm: spontaneous_nvm / std::f64::consts::TAU,
            nv0_homogeneous_fwhm: 1.5e7,
            laser_linewidth: 0.0,
            ionize_from_all_excited: true,
        }
    }
}

impl RateParams {
    pub fn constant(&self, c: RateConstant) -> f64 {
        match c {
            RateConstant::SpontaneousNvm => self.spontaneous_nvm,
            RateConstant::SpontaneousNv0 => self.spontaneous_nv0,
            RateConstant::IscNvm => self.isc_nvm,
            RateConstant::SingletDecay => self.singlet_decay,
            RateConstant::IscNv0 => self.isc_nv0,
            RateConstant::QuartetDecay => self.quartet_decay,
            RateConstant::MicrowaveMixing => self.mw_mixing_rate,
        }
    }

    pub fn peak_excitation(&self, target: LaserTarget) -> f64 {
        match target {
            LaserTarget::RedNvm => self.peak_excitation_red,
            LaserTarget::YellowNv0 => self.peak_excitation_yellow,
            LaserTarget::GreenOffResonant => self.peak_excitation_green,
        }
    }

    pub fn reference_power(&self, target: LaserTarget) -> f64 {
        match target {
            LaserTarget::RedNvm => self.reference_power_red,
            LaserTarget::YellowNv0 => self.reference_power_yellow,
            LaserTarget::GreenOffResonant => self.reference_power_green,
        }
    }

    pub fn power_coefficient(&self, c: PowerCoefficient) -> f64 {
        match c {
            PowerCoefficient::Ionization => self.ionization_coeff,
            PowerCoefficient::Recombination => self.recombination_coeff,
            PowerCoefficient::GreenRecovery => self.green_recovery_rate,
        }
    }

    pub fn homogeneous_fwhm(&self, charge: ChargeState) -> f64 {
        match charge {
            ChargeState::Negative => self.nvm_homogeneous_fwhm,
            ChargeState::Neutral => self.nv0_homogeneous_fwhm,
        }
    }

    /// All rates non-negative and finite?
    pub fn check(&self) -> Result<(), OpticsError> {
        let fields = [
            ("spontaneous_nvm", self.spontaneous_nvm),
            ("spontaneous_nv0", self.spontaneous_nv0),
            ("isc_nvm", self.isc_nvm),
            ("singlet_decay", self.singlet_decay),
            ("isc_nv0", self.isc_nv0),
            ("quartet_decay", self.quartet_decay),
            ("mw_mixing_rate", self.mw_mixing_rate),
            ("peak_excitation_red", self.peak_excitation_red),
            ("peak_excitation_yellow", self.peak_excitation_yellow),
            ("peak_excitation_green", self.peak_excitation_green),
            ("ionization_coeff", self.ionization_coeff),
            ("recombination_coeff", self.recombination_coeff),
            ("green_recovery_rate", self.green_recovery_rate),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(OpticsError::BadParameter {
                    name,
                    value: v,
                });
            }
        }
        for (name, v) in [
            ("reference_power_red", self.reference_power_red),
            ("reference_power_yellow", self.reference_power_yellow),
            ("reference_power_green", self.reference_power_green),
            ("nvm_homogeneous_fwhm", self.nvm_homogeneous_fwhm),
            ("nv0_homogeneous_fwhm", self.nv0_homogeneous_fwhm),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(OpticsError::BadParameter { name, value: v });
            }
        }
        if !self.laser_linewidth.is_finite() || self.laser_linewidth < 0.0 {
            return Err(OpticsError::BadParameter {
                name: "laser_linewidth",
                value: self.laser_linewidth,
            });
        }
        Ok(())
    }
}

/// Energy constants of the charge-conversion model (eV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergeticsConstants {
    /// Minimum total energy for the two-photon conversion out of the
    /// negative state.
    pub two_photon_ionization_threshold: f64,
    /// Minimum excess energy above the conduction band edge carried away in
    /// the detachment step.
    pub auger_excess_min: f64,
    /// Zero-phonon photon energy of the negative state.
    pub nvm_zpl_energy: f64,
    /// Zero-phonon photon energy of the neutral state.
    pub nv0_zpl_energy: f64,
    /// Calculated band gap.
    pub band_gap_calc: f64,
    /// Experimentally observed band gap.
    pub band_gap_exp: f64,
}

impl Default for EnergeticsConstants {
    fn default() -> Self {
        EnergeticsConstants {
            two_photon_ionization_threshold: 3.5,
            auger_excess_min: 1.4,
            nvm_zpl_energy: 1.945,
            nv0_zpl_energy: 2.156,
            band_gap_calc: 5.38,
            band_gap_exp: 5.48,
        }
    }
}

impl EnergeticsConstants {
    /// The defining invariant: two resonant photons must clear the threshold.
    pub fn is_consistent(&self) -> bool {
        2.0 * self.nvm_zpl_energy >= self.two_photon_ionization_threshold
    }
}

/// True iff two photons of the given energy clear the conversion threshold.
/// Boundary inclusive.
pub fn ionization_energetically_allowed(photon_energy_ev: f64, consts: &EnergeticsConstants) -> bool {
    photon_energy_ev > 0.0 && 2.0 * photon_energy_ev >= consts.two_photon_ionization_threshold
}

#[derive(Debug, Error)]
pub enum OpticsError {
    #[error("non-finite input: {name} = {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("invalid parameter: {name} = {value}")]
    BadParameter { name: &'static str, value: f64 },
    #[error("linewidth must be positive, got {0}")]
    NonPositiveLinewidth(f64),
    #[error("negative peak rate {0}")]
    NegativePeakRate(f64),
    #[error("laser `{laser}` does not drive a {charge} optical transition")]
    MismatchedTarget { laser: String, charge: ChargeState },
    #[error("transition {from} -> {to} is not an optical excitation")]
    NotOptical { from: LevelId, to: LevelId },
    #[error("invalid level graph: {0}")]
    InvalidGraph(String),
    #[error("laser `{id}` has invalid power {power}")]
    BadLaserPower { id: String, power: f64 },
}

/// Lorentzian line profile normalized to `peak_rate` on resonance.
///
/// rate = peak * (fwhm/2)^2 / (detuning^2 + (fwhm/2)^2)
pub fn lorentzian_excitation_rate(
    detuning: f64,
    fwhm: f64,
    peak_rate: f64,
) -> Result<f64, OpticsError> {
    if !detuning.is_finite() {
        return Err(OpticsError::NonFinite {
            name: "detuning",
            value: detuning,
        });
    }
    if !fwhm.is_finite() || fwhm <= 0.0 {
        return Err(OpticsError::NonPositiveLinewidth(fwhm));
    }
    if !peak_rate.is_finite() {
        return Err(OpticsError::NonFinite {
            name: "peak_rate",
            value: peak_rate,
        });
    }
    if peak_rate < 0.0 {
        return Err(OpticsError::NegativePeakRate(peak_rate));
    }
    let half = fwhm / 2.0;
    Ok(peak_rate * half * half / (detuning * detuning + half * half))
}

/// Lorentzian line convolved with a Gaussian laser lineshape, evaluated with
/// the pseudo-Voigt approximation (area-preserving, percent-level accuracy
/// over the full mixing range). Falls back to the pure Lorentzian when the
/// laser linewidth is zero.
pub fn convolved_excitation_rate(
    detuning: f64,
    lorentz_fwhm: f64,
    gauss_fwhm: f64,
    peak_rate: f64,
) -> Result<f64, OpticsError> {
    if gauss_fwhm <= 0.0 {
        return lorentzian_excitation_rate(detuning, lorentz_fwhm, peak_rate);
    }
    if !detuning.is_finite() || !gauss_fwhm.is_finite() {
        return Err(OpticsError::NonFinite {
            name: "detuning/gauss_fwhm",
            value: detuning,
        });
    }
    if lorentz_fwhm <= 0.0 || !lorentz_fwhm.is_finite() {
        return Err(OpticsError::NonPositiveLinewidth(lorentz_fwhm));
    }
    if peak_rate < 0.0 || !peak_rate.is_finite() {
        return Err(OpticsError::NegativePeakRate(peak_rate));
    }

    let gl = lorentz_fwhm;
    let gg = gauss_fwhm;
    // Total area of the Lorentzian with peak R: R * pi * fwhm / 2.
    let area = peak_rate * std::f64::consts::PI * gl / 2.0;
    // Combined width (Olivero & Longbothum) and mixing parameter.
    let f = 0.5346 * gl + (0.2166 * gl * gl + gg * gg).sqrt();
    let r = gl / f;
    let eta = 1.36603 * r - 0.47719 * r * r + 0.11116 * r * r * r;
    let half = f / 2.0;
    let lorentz_unit = (1.0 / (std::f64::consts::PI * half)) * half * half
        / (detuning * detuning + half * half);
    let sigma = f / (8.0 * std::f64::consts::LN_2).sqrt();
    let gauss_unit = (-(detuning * detuning) / (2.0 * sigma * sigma)).exp()
        / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(area * (eta * lorentz_unit + (1.0 - eta) * gauss_unit))
}

/// Instantaneous excitation rate of one optical transition under one laser.
///
/// The detuning is the laser offset minus the transition's current line
/// centre (static line-centre offset plus the spectral-diffusion offset of
/// that charge state); only the difference enters, so shifting the laser and
/// the line together leaves the rate unchanged. The rate scales linearly
/// with power relative to the target's reference power.
pub fn excitation_rate(
    laser: &LaserField,
    graph: &LevelGraph,
    transition: &TransitionTemplate,
    spectral: &SpectralState,
    params: &RateParams,
) -> Result<f64, OpticsError> {
    if transition.kind != TransitionKind::OpticalExcitation {
        return Err(OpticsError::NotOptical {
            from: transition.from.clone(),
            to: transition.to.clone(),
        });
    }
    let from = graph
        .level(&transition.from)
        .ok_or_else(|| OpticsError::InvalidGraph(format!("unknown level {}", transition.from)))?;
    let charge = from.charge;
    if laser.target.resonant_charge() != Some(charge) {
        return Err(OpticsError::MismatchedTarget {
            laser: laser.id.clone(),
            charge,
        });
    }
    if !laser.power.is_finite() || laser.power < 0.0 {
        return Err(OpticsError::BadLaserPower {
            id: laser.id.clone(),
            power: laser.power,
        });
    }
    if laser.power == 0.0 {
        return Ok(0.0);
    }
    let line_center = graph
        .line_center_offset(transition)
        .ok_or_else(|| OpticsError::InvalidGraph("missing transition endpoint".into()))?;
    let detuning = laser.frequency_offset - (line_center + spectral.zpl_offset(charge));
    let peak = params.peak_excitation(laser.target) * laser.power
        / params.reference_power(laser.target);
    convolved_excitation_rate(
        detuning,
        params.homogeneous_fwhm(charge),
        laser.linewidth,
        peak,
    )
}

/// One-photon detachment rate out of an already-excited negative state (Hz).
pub fn ionization_rate_from_excited(power_red: f64, params: &RateParams) -> f64 {
    debug_assert!(power_red >= 0.0);
    params.ionization_coeff * power_red
}

/// Resonant recombination rate out of the excited neutral state (Hz).
/// Nonzero only while the yellow laser delivers power.
pub fn recombination_rate_from_excited(power_yellow: f64, params: &RateParams) -> f64 {
    debug_assert!(power_yellow >= 0.0);
    params.recombination_coeff * power_yellow
}

/// Off-resonant recovery rate acting on the neutral state (Hz). Defined only
/// on the neutral side of the graph; a defect already in the negative state
/// never sees this channel.
pub fn green_repump_rate(power_green: f64, params: &RateParams) -> f64 {
    debug_assert!(power_green >= 0.0);
    params.green_recovery_rate * power_green
}

/// One transition with its rate resolved against the current laser fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedEdge {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
    pub kind: TransitionKind,
    /// The laser driving this edge, when it is laser-driven.
    pub driver: Option<LaserTarget>,
}

/// All level-resolved rates for one piecewise-constant protocol window.
#[derive(Debug, Clone)]
pub struct RateTable {
    pub level_ids: Vec<LevelId>,
    pub charges: Vec<ChargeState>,
    pub radiative: Vec<bool>,
    pub edges: Vec<ResolvedEdge>,
    /// Edge indices grouped by source level.
    pub exits: Vec<Vec<usize>>,
}

impl RateTable {
    pub fn n_levels(&self) -> usize {
        self.level_ids.len()
    }

    pub fn total_exit_rate(&self, level: usize) -> f64 {
        self.exits[level].iter().map(|&e| self.edges[e].rate).sum()
    }

    /// Generator matrix over all levels: off-diagonal entry (i, j) is the
    /// rate j -> i, diagonals are minus the column exit sums.
    pub fn to_generator(&self) -> RateMatrix {
        let n = self.n_levels();
        let mut g = vec![0.0; n * n];
        for e in &self.edges {
            g[e.to * n + e.from] += e.rate;
            g[e.from * n + e.from] -= e.rate;
        }
        RateMatrix {
            n,
            level_ids: self.level_ids.clone(),
            g,
        }
    }
}

fn total_power(lasers: &[LaserField], target: LaserTarget) -> f64 {
    lasers
        .iter()
        .filter(|l| l.target == target)
        .map(|l| l.power)
        .sum()
}

/// Resolve every transition template into a concrete rate for one window.
pub fn build_rate_table(
    graph: &LevelGraph,
    lasers: &[LaserField],
    spectral: &SpectralState,
    mw_on: bool,
    params: &RateParams,
) -> Result<RateTable, OpticsError> {
    let violations = crate::levels::validate_graph(graph);
    if let Some(v) = violations.first() {
        return Err(OpticsError::InvalidGraph(v.to_string()));
    }
    params.check()?;
    build_rate_table_unchecked(graph, lasers, spectral, mw_on, params)
}

/// Rate-table construction without re-validating the graph and parameters;
/// for hot loops that validated once up front.
pub(crate) fn build_rate_table_unchecked(
    graph: &LevelGraph,
    lasers: &[LaserField],
    spectral: &SpectralState,
    mw_on: bool,
    params: &RateParams,
) -> Result<RateTable, OpticsError> {
    for l in lasers {
        if !l.power.is_finite() || l.power < 0.0 {
            return Err(OpticsError::BadLaserPower {
                id: l.id.clone(),
                power: l.power,
            });
        }
    }

    let level_ids: Vec<LevelId> = graph.levels.iter().map(|l| l.id.clone()).collect();
    let charges: Vec<ChargeState> = graph.levels.iter().map(|l| l.charge).collect();
    let index_of = |id: &LevelId| graph.level_index(id).expect("validated graph");

    // A non-cycling excited level is one with a shelving exit; the optional
    // ionization restriction keys off that structure.
    let has_isc_exit: Vec<bool> = graph
        .levels
        .iter()
        .map(|l| {
            graph
                .transitions
                .iter()
                .any(|t| t.from == l.id && t.kind == TransitionKind::Isc)
                && l.role == LevelRole::OpticalExcited
        })
        .collect();

    let mut edges = Vec::with_capacity(graph.transitions.len());
    for t in &graph.transitions {
        let from = index_of(&t.from);
        let to = index_of(&t.to);
        let mut driver = None;
        let rate = match &t.rate_law {
            RateLaw::Constant(c) => {
                if *c == RateConstant::MicrowaveMixing && !mw_on {
                    0.0
                } else {
                    params.constant(*c)
                }
            }
            RateLaw::LaserLine { laser } => {
                driver = Some(*laser);
                let mut rate = 0.0;
                for field in lasers.iter().filter(|l| l.target == *laser) {
                    rate += excitation_rate(field, graph, t, spectral, params)?;
                }
                rate
            }
            RateLaw::Broadband { laser } => {
                driver = Some(*laser);
                params.peak_excitation(*laser) * total_power(lasers, *laser)
                    / params.reference_power(*laser)
            }
            RateLaw::PowerLinear {
                coeff,
                laser,
                branching,
            } => {
                driver = Some(*laser);
                if *coeff == PowerCoefficient::Ionization
                    && !params.ionize_from_all_excited
                    && has_isc_exit[from]
                {
                    0.0
                } else {
                    params.power_coefficient(*coeff) * total_power(lasers, *laser) * branching
                }
            }
        };
        edges.push(ResolvedEdge {
            from,
            to,
            rate,
            kind: t.kind,
            driver,
        });
    }

    let mut exits = vec![Vec::new(); level_ids.len()];
    for (i, e) in edges.iter().enumerate() {
        exits[e.from].push(i);
    }
    let radiative = graph
        .levels
        .iter()
        .enumerate()
        .map(|(i, _)| {
            edges
                .iter()
                .any(|e| e.from == i && e.kind == TransitionKind::SpontaneousEmission)
        })
        .collect();

    Ok(RateTable {
        level_ids,
        charges,
        radiative,
        edges,
        exits,
    })
}

/// Build the generator matrix directly; convenience wrapper over
/// [`build_rate_table`].
pub fn build_rate_matrix(
    graph: &LevelGraph,
    lasers: &[LaserField],
    spectral: &SpectralState,
    mw_on: bool,
    params: &RateParams,
) -> Result<RateMatrix, OpticsError> {
    Ok(build_rate_table(graph, lasers, spectral, mw_on, params)?.to_generator())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levels::{build_default_graph, ids, StrainSplitting};

    fn graph() -> LevelGraph {
        build_default_graph(StrainSplitting::default())
    }

    fn ex_transition(g: &LevelGraph) -> TransitionTemplate {
        g.transitions
            .iter()
            .find(|t| t.to == LevelId::new(ids::NVM_EX))
            .unwrap()
            .clone()
    }

    #[test]
    fn lorentzian_on_resonance_and_half_width() {
        let r = lorentzian_excitation_rate(0.0, 1e7, 2e6).unwrap();
        assert_eq!(r, 2e6);
        let r = lorentzian_excitation_rate(5e6, 1e7, 2e6).unwrap();
        assert!((r - 1e6).abs() < 1e-6 * 1e6);
    }

    #[test]
    fn lorentzian_three_linewidths_out() {
        // Independent scalar evaluation of the closed form at detuning 3*fwhm:
        // (1/2)^2 / (3^2 + (1/2)^2) = 0.25 / 9.25 = 1/37.
        let expected = 0.25 / 9.25;
        let r = lorentzian_excitation_rate(3.0e7, 1e7, 1.0).unwrap();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 1.0 / 37.0).abs() < 1e-12);
    }

    #[test]
    fn lorentzian_rejects_bad_inputs() {
        assert!(lorentzian_excitation_rate(f64::NAN, 1e7, 1.0).is_err());
        assert!(lorentzian_excitation_rate(0.0, 0.0, 1.0).is_err());
        assert!(lorentzian_excitation_rate(0.0, 1e7, -1.0).is_err());
        assert!(lorentzian_excitation_rate(0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn lorentzian_monotone_in_detuning() {
        let mut last = f64::INFINITY;
        for k in 0..50 {
            let r = lorentzian_excitation_rate(k as f64 * 1e6, 1e7, 1e6).unwrap();
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn convolved_matches_numeric_convolution() {
        // Oracle: direct quadrature of the Lorentzian against a unit-area
        // Gaussian, compared to the pseudo-Voigt form at several detunings.
        let gl = 2e7;
        let gg = 3e7;
        let peak = 1e6;
        let sigma = gg / (8.0 * std::f64::consts::LN_2).sqrt(); // fwhm -> sigma
        let numeric = |detuning: f64| {
            let n = 20001;
            let span = 12.0 * gg.max(gl);
            let dx = span / (n as f64 - 1.0);
            let mut acc = 0.0;
            for i in 0..n {
                let x = -span / 2.0 + i as f64 * dx;
                let lorentz =
                    peak * (gl / 2.0) * (gl / 2.0) / ((detuning - x).powi(2) + (gl / 2.0).powi(2));
                let gauss = (-(x * x) / (2.0 * sigma * sigma)).exp()
                    / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                acc += lorentz * gauss * dx;
            }
            acc
        };
        for detuning in [0.0, 1e7, 3e7, 8e7] {
            let approx = convolved_excitation_rate(detuning, gl, gg, peak).unwrap();
            let exact = numeric(detuning);
            let rel = (approx - exact).abs() / exact;
            assert!(rel < 0.03, "detuning {detuning}: {approx} vs {exact}");
        }
    }

    #[test]
    fn excitation_rate_on_and_off_resonance() {
        let g = graph();
        let t = ex_transition(&g);
        let params = RateParams::default();
        let spectral = SpectralState::default();

        // Exactly on the (unshifted) line centre.
        let laser = LaserField::new(LaserTarget::RedNvm, 3.5e9, 2.0e-5);
        let r = excitation_rate(&laser, &g, &t, &spectral, &params).unwrap();
        let expected = params.peak_excitation_red * 2.0e-5 / params.reference_power_red;
        assert!((r - expected).abs() < 1e-9 * expected);

        // Ten linewidths out: below 1 % of peak (Lorentzian tail 1/401).
        let laser = LaserField::new(
            LaserTarget::RedNvm,
            3.5e9 + 10.0 * params.nvm_homogeneous_fwhm,
            2.0e-5,
        );
        let r = excitation_rate(&laser, &g, &t, &spectral, &params).unwrap();
        assert!(r < 0.01 * expected);

        // Zero power: zero rate.
        let laser = LaserField::new(LaserTarget::RedNvm, 3.5e9, 0.0);
        assert_eq!(
            excitation_rate(&laser, &g, &t, &spectral, &params).unwrap(),
            0.0
        );
    }

    #[test]
    fn excitation_rate_shift_invariance() {
        let g = graph();
        let t = ex_transition(&g);
        let params = RateParams::default();
        for shift in [0.0, 1.7e8, -2.3e9] {
            let mut spectral = SpectralState::default();
            spectral.nvm_zpl_offset = shift;
            let laser = LaserField::new(LaserTarget::RedNvm, 3.5e9 + 0.4e8 + shift, 1e-5);
            let r = excitation_rate(&laser, &g, &t, &spectral, &params).unwrap();
            let base_laser = LaserField::new(LaserTarget::RedNvm, 3.5e9 + 0.4e8, 1e-5);
            let base =
                excitation_rate(&base_laser, &g, &t, &SpectralState::default(), &params).unwrap();
            assert!((r - base).abs() <= 1e-9 * base);
        }
    }

    #[test]
    fn excitation_rate_rejects_mismatched_laser() {
        let g = graph();
        let t = ex_transition(&g);
        let laser = LaserField::new(LaserTarget::YellowNv0, 0.0, 1e-7);
        let err = excitation_rate(
            &laser,
            &g,
            &t,
            &SpectralState::default(),
            &RateParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, OpticsError::MismatchedTarget { .. }));
    }

    #[test]
    fn power_linear_steps() {
        let params = RateParams::default();
        assert_eq!(ionization_rate_from_excited(0.0, &params), 0.0);
        let r1 = ionization_rate_from_excited(1e-5, &params);
        let r2 = ionization_rate_from_excited(2e-5, &params);
        assert!((r2 - 2.0 * r1).abs() < 1e-12 * r2);

        assert_eq!(recombination_rate_from_excited(0.0, &params), 0.0);
        assert_eq!(green_repump_rate(0.0, &params), 0.0);
        assert!(green_repump_rate(1e-3, &params) > 0.0);
    }

    #[test]
    fn green_channel_only_touches_neutral_side() {
        let g = graph();
        for t in &g.transitions {
            let driven_by_green = matches!(
                t.rate_law,
                RateLaw::Broadband {
                    laser: LaserTarget::GreenOffResonant
                } | RateLaw::PowerLinear {
                    laser: LaserTarget::GreenOffResonant,
                    ..
                }
            );
            if driven_by_green {
                let from = g.level(&t.from).unwrap();
                assert_eq!(from.charge, ChargeState::Neutral);
            }
        }
    }

    #[test]
    fn energetics_threshold() {
        let consts = EnergeticsConstants::default();
        assert!(consts.is_consistent());
        assert!(ionization_energetically_allowed(1.945, &consts));
        let margin = 2.0 * consts.nvm_zpl_energy - consts.two_photon_ionization_threshold;
        assert!((margin - 0.39).abs() < 1e-12);
        assert!(!ionization_energetically_allowed(1.70, &consts));
        // Boundary is inclusive.
        assert!(ionization_energetically_allowed(1.75, &consts));
    }

    #[test]
    fn energetics_monotone() {
        let consts = EnergeticsConstants::default();
        let mut prev = false;
        for k in 0..400 {
            let e = 0.01 + k as f64 * 0.01;
            let allowed = ionization_energetically_allowed(e, &consts);
            assert!(!prev || allowed, "monotonicity broken at {e}");
            prev = allowed;
        }
    }

    #[test]
    fn rate_table_dark_defect_only_decays() {
        let g = graph();
        let table = build_rate_table(
            &g,
            &[],
            &SpectralState::default(),
            false,
            &RateParams::default(),
        )
        .unwrap();
        for e in &table.edges {
            if e.rate > 0.0 {
                assert!(
                    matches!(
                        e.kind,
                        TransitionKind::SpontaneousEmission | TransitionKind::Isc
                    ),
                    "unexpected active edge {e:?}"
                );
            }
        }
    }

    #[test]
    fn generator_columns_sum_to_zero() {
        let g = graph();
        let lasers = vec![
            LaserField::new(LaserTarget::RedNvm, 3.5e9, 1e-5),
            LaserField::new(LaserTarget::YellowNv0, 0.0, 1e-7),
            LaserField::new(LaserTarget::GreenOffResonant, 0.0, 1e-3),
        ];
        let m = build_rate_matrix(
            &g,
            &lasers,
            &SpectralState::default(),
            true,
            &RateParams::default(),
        )
        .unwrap();
        for j in 0..m.n {
            let col: f64 = (0..m.n).map(|i| m.g[i * m.n + j]).sum();
            let scale: f64 = (0..m.n).map(|i| m.g[i * m.n + j].abs()).sum();
            assert!(col.abs() <= 1e-12 * scale.max(1.0), "column {j} sums to {col}");
        }
        for i in 0..m.n {
            for j in 0..m.n {
                if i != j {
                    assert!(m.g[i * m.n + j] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn mw_toggle_changes_only_mixing_entries() {
        let g = graph();
        let spectral = SpectralState::default();
        let params = RateParams::default();
        let off = build_rate_matrix(&g, &[], &spectral, false, &params).unwrap();
        let on = build_rate_matrix(&g, &[], &spectral, true, &params).unwrap();
        let i0 = g.level_index(&LevelId::new(ids::NVM_G0)).unwrap();
        let i1 = g.level_index(&LevelId::new(ids::NVM_G1)).unwrap();
        let n = off.n;
        let mut changed = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if off.g[i * n + j] != on.g[i * n + j] {
                    changed.push((i, j));
                }
            }
        }
        changed.sort_unstable();
        let mut expected = vec![(i0, i0), (i0, i1), (i1, i0), (i1, i1)];
        expected.sort_unstable();
        assert_eq!(changed, expected);
    }

    #[test]
    fn rate_table_rejects_invalid_graph() {
        let mut g = graph();
        g.levels[1].energy_offset = -1.0;
        let err = build_rate_table(
            &g,
            &[],
            &SpectralState::default(),
            false,
            &RateParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, OpticsError::InvalidGraph(_)));
    }

    #[test]
    fn ionization_restriction_flag() {
        let g = graph();
        let mut params = RateParams::default();
        params.ionize_from_all_excited = false;
        let lasers = vec![LaserField::new(LaserTarget::RedNvm, 3.5e9, 1e-5)];
        let table =
            build_rate_table(&g, &lasers, &SpectralState::default(), true, &params).unwrap();
        let emix = g.level_index(&LevelId::new(ids::NVM_EMIX)).unwrap();
        let ex = g.level_index(&LevelId::new(ids::NVM_EX)).unwrap();
        for e in &table.edges {
            if e.kind == TransitionKind::Ionization {
                if e.from == emix {
                    assert_eq!(e.rate, 0.0);
                }
                if e.from == ex {
                    assert!(e.rate > 0.0);
                }
            }
        }
    }
}
