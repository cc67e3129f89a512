//! Static electronic structure of the defect in both charge states.
//!
//! The level graph is the shared vocabulary of the whole simulator: levels
//! carry a charge state, a role and an energy offset; transitions carry a
//! kind and a symbolic rate law that the optics module turns into numbers.
//! The graph is immutable after construction and safe to share across
//! simulation workers.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::units::wavelength_to_frequency;

/// Nominal zero-phonon-line wavelength of the negative charge state (m).
pub const NVM_ZPL_WAVELENGTH_M: f64 = 637e-9;
/// Nominal zero-phonon-line wavelength of the neutral charge state (m).
pub const NV0_ZPL_WAVELENGTH_M: f64 = 575.015e-9;
/// Ground-state spin splitting of the negative charge state (Hz).
pub const GROUND_SPLITTING_HZ: f64 = 2.87e9;

/// Nominal optical reference frequency for a charge state (Hz).
///
/// All laser and line-centre offsets are expressed relative to this, so the
/// simulation never has to subtract two ~5e14 Hz numbers supplied by a user.
pub fn nominal_zpl_frequency(charge: ChargeState) -> f64 {
    match charge {
        ChargeState::Negative => wavelength_to_frequency(NVM_ZPL_WAVELENGTH_M),
        ChargeState::Neutral => wavelength_to_frequency(NV0_ZPL_WAVELENGTH_M),
    }
}

/// The two charge states the defect can occupy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChargeState {
    Negative,
    Neutral,
}

impl ChargeState {
    pub fn as_str(self) -> &'static str {
        match self {
            ChargeState::Negative => "negative",
            ChargeState::Neutral => "neutral",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "negative" => Some(ChargeState::Negative),
            "neutral" => Some(ChargeState::Neutral),
            _ => None,
        }
    }
}

impl fmt::Display for ChargeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a level does in the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelRole {
    Ground,
    OpticalExcited,
    Shelving,
}

impl LevelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            LevelRole::Ground => "ground",
            LevelRole::OpticalExcited => "optical_excited",
            LevelRole::Shelving => "shelving",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "ground" => Some(LevelRole::Ground),
            "optical_excited" => Some(LevelRole::OpticalExcited),
            "shelving" => Some(LevelRole::Shelving),
            _ => None,
        }
    }
}

/// Classification of a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionKind {
    OpticalExcitation,
    SpontaneousEmission,
    /// Non-radiative crossing into or out of a shelving level.
    Isc,
    MicrowaveMixing,
    /// Charge conversion out of the negative state (from an optical excited
    /// level into the neutral ground level).
    Ionization,
    /// Charge conversion back to the negative state (from the neutral
    /// optical excited level into a negative ground sublevel).
    Recombination,
}

impl TransitionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransitionKind::OpticalExcitation => "optical",
            TransitionKind::SpontaneousEmission => "emission",
            TransitionKind::Isc => "isc",
            TransitionKind::MicrowaveMixing => "microwave",
            TransitionKind::Ionization => "ionization",
            TransitionKind::Recombination => "recombination",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "optical" => Some(TransitionKind::OpticalExcitation),
            "emission" => Some(TransitionKind::SpontaneousEmission),
            "isc" => Some(TransitionKind::Isc),
            "microwave" => Some(TransitionKind::MicrowaveMixing),
            "ionization" => Some(TransitionKind::Ionization),
            "recombination" => Some(TransitionKind::Recombination),
            _ => None,
        }
    }
}

/// Which laser a power- or lineshape-dependent rate law listens to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LaserTarget {
    /// Red laser tuned near the negative-state zero-phonon line.
    RedNvm,
    /// Yellow laser tuned near the neutral-state zero-phonon line.
    YellowNv0,
    /// Off-resonant green laser, treated as broadband.
    GreenOffResonant,
}

impl LaserTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            LaserTarget::RedNvm => "red",
            LaserTarget::YellowNv0 => "yellow",
            LaserTarget::GreenOffResonant => "green",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "red" => Some(LaserTarget::RedNvm),
            "yellow" => Some(LaserTarget::YellowNv0),
            "green" => Some(LaserTarget::GreenOffResonant),
            _ => None,
        }
    }

    /// The charge state whose optical transitions this laser drives
    /// resonantly. Green is broadband and has no resonant target.
    pub fn resonant_charge(self) -> Option<ChargeState> {
        match self {
            LaserTarget::RedNvm => Some(ChargeState::Negative),
            LaserTarget::YellowNv0 => Some(ChargeState::Neutral),
            LaserTarget::GreenOffResonant => None,
        }
    }
}

/// Named rate constants resolved by the optics module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RateConstant {
    /// Radiative decay of the negative-state optical excited levels.
    SpontaneousNvm,
    /// Radiative decay of the neutral-state optical excited level.
    SpontaneousNv0,
    /// Crossing from the spin-mixing excited level into the singlet shelf.
    IscNvm,
    /// Singlet shelf decay back to the negative ground.
    SingletDecay,
    /// Crossing from the neutral excited level into the quartet shelf.
    IscNv0,
    /// Quartet shelf decay back to the neutral ground.
    QuartetDecay,
    /// Ground-sublevel mixing rate while the microwave drive is on.
    MicrowaveMixing,
}

impl RateConstant {
    pub fn as_str(self) -> &'static str {
        match self {
            RateConstant::SpontaneousNvm => "spontaneous_nvm",
            RateConstant::SpontaneousNv0 => "spontaneous_nv0",
            RateConstant::IscNvm => "isc_nvm",
            RateConstant::SingletDecay => "singlet_decay",
            RateConstant::IscNv0 => "isc_nv0",
            RateConstant::QuartetDecay => "quartet_decay",
            RateConstant::MicrowaveMixing => "microwave_mixing",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "spontaneous_nvm" => Some(RateConstant::SpontaneousNvm),
            "spontaneous_nv0" => Some(RateConstant::SpontaneousNv0),
            "isc_nvm" => Some(RateConstant::IscNvm),
            "singlet_decay" => Some(RateConstant::SingletDecay),
            "isc_nv0" => Some(RateConstant::IscNv0),
            "quartet_decay" => Some(RateConstant::QuartetDecay),
            "microwave_mixing" => Some(RateConstant::MicrowaveMixing),
            _ => None,
        }
    }
}

/// Power-linear coefficients resolved by the optics module (Hz per W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PowerCoefficient {
    /// One-photon ionization step out of an already-excited negative state.
    Ionization,
    /// Resonant recombination step out of the excited neutral state.
    Recombination,
    /// Off-resonant recovery step out of the excited neutral state.
    GreenRecovery,
}

impl PowerCoefficient {
    pub fn as_str(self) -> &'static str {
        match self {
            PowerCoefficient::Ionization => "ionization",
            PowerCoefficient::Recombination => "recombination",
            PowerCoefficient::GreenRecovery => "green_recovery",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "ionization" => Some(PowerCoefficient::Ionization),
            "recombination" => Some(PowerCoefficient::Recombination),
            "green_recovery" => Some(PowerCoefficient::GreenRecovery),
            _ => None,
        }
    }
}

/// Symbolic rate law attached to a transition template.
///
/// The optics module evaluates these against the active laser fields, the
/// current spectral offsets and the rate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RateLaw {
    /// Fixed rate, independent of lasers.
    Constant(RateConstant),
    /// Lorentzian line driven by a resonant laser.
    LaserLine { laser: LaserTarget },
    /// Broadband drive: linear in laser power, no detuning dependence.
    Broadband { laser: LaserTarget },
    /// Linear in the power of `laser`, scaled by a named coefficient and a
    /// branching fraction (used to split one physical channel over several
    /// destination levels).
    PowerLinear {
        coeff: PowerCoefficient,
        laser: LaserTarget,
        branching: f64,
    },
}

/// Opaque level identifier, unique within a graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LevelId(pub String);

impl LevelId {
    pub fn new(id: &str) -> Self {
        LevelId(id.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LevelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One electronic level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub id: LevelId,
    pub charge: ChargeState,
    /// Symbolic name as drawn on a level diagram (`g0`, `Ex`, `e'`...).
    pub label: String,
    /// Frequency above this charge state's lowest ground level (Hz).
    pub energy_offset: f64,
    pub role: LevelRole,
}

/// One allowed transition with its symbolic rate law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTemplate {
    pub from: LevelId,
    pub to: LevelId,
    pub kind: TransitionKind,
    pub rate_law: RateLaw,
}

/// The full two-charge-state level graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelGraph {
    pub levels: Vec<Level>,
    pub transitions: Vec<TransitionTemplate>,
}

/// Strain-dependent placement of the two cycling excited lines, supplied by
/// configuration as signed line offsets from the nominal reference (Hz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrainSplitting {
    pub ex_line_offset: f64,
    pub ey_line_offset: f64,
}

impl Default for StrainSplitting {
    fn default() -> Self {
        // Moderately strained emitter: cycling branches well separated from
        // each other and from the spin-mixing line.
        StrainSplitting {
            ex_line_offset: 3.5e9,
            ey_line_offset: -3.5e9,
        }
    }
}

/// Well-known level ids used by the default graph.
pub mod ids {
    pub const NVM_G0: &str = "nm_g0";
    pub const NVM_G1: &str = "nm_g1";
    pub const NVM_EX: &str = "nm_ex";
    pub const NVM_EY: &str = "nm_ey";
    pub const NVM_EMIX: &str = "nm_emix";
    pub const NVM_SINGLET: &str = "nm_s";
    pub const NV0_G: &str = "n0_g";
    pub const NV0_E: &str = "n0_e";
    pub const NV0_Q: &str = "n0_q";
}

/// Build the canonical nine-level graph with all transition templates wired.
///
/// Negative state: two ground sublevels split by 2.87 GHz, two cycling
/// excited levels (`Ex`, `Ey`), one aggregate spin-mixing excited level and
/// one metastable singlet. Neutral state: one ground doublet, one optical
/// excited level, one quartet shelf. Rate constants stay symbolic.
pub fn build_default_graph(strain: StrainSplitting) -> LevelGraph {
    let nvm_zpl = nominal_zpl_frequency(ChargeState::Negative);
    let nv0_zpl = nominal_zpl_frequency(ChargeState::Neutral);

    let level = |id: &str, charge, label: &str, energy_offset, role| Level {
        id: LevelId::new(id),
        charge,
        label: label.to_string(),
        energy_offset,
        role,
    };

    let levels = vec![
        level(ids::NVM_G0, ChargeState::Negative, "g0", 0.0, LevelRole::Ground),
        level(
            ids::NVM_G1,
            ChargeState::Negative,
            "g±1",
            GROUND_SPLITTING_HZ,
            LevelRole::Ground,
        ),
        level(
            ids::NVM_EX,
            ChargeState::Negative,
            "Ex",
            nvm_zpl + strain.ex_line_offset,
            LevelRole::OpticalExcited,
        ),
        level(
            ids::NVM_EY,
            ChargeState::Negative,
            "Ey",
            nvm_zpl + strain.ey_line_offset,
            LevelRole::OpticalExcited,
        ),
        // The four spin-mixing excited sublevels act through one common
        // shelving pathway, so they are aggregated into a single level whose
        // line sits one ground splitting below the reference.
        level(
            ids::NVM_EMIX,
            ChargeState::Negative,
            "E_mix",
            nvm_zpl,
            LevelRole::OpticalExcited,
        ),
        // Inert placement: the shelf's absolute energy never enters a rate.
        level(
            ids::NVM_SINGLET,
            ChargeState::Negative,
            "S",
            2.0e14,
            LevelRole::Shelving,
        ),
        level(ids::NV0_G, ChargeState::Neutral, "g0'", 0.0, LevelRole::Ground),
        level(
            ids::NV0_E,
            ChargeState::Neutral,
            "e'",
            nv0_zpl,
            LevelRole::OpticalExcited,
        ),
        level(
            ids::NV0_Q,
            ChargeState::Neutral,
            "q'",
            2.5e14,
            LevelRole::Shelving,
        ),
    ];

    let edge = |from: &str, to: &str, kind, rate_law| TransitionTemplate {
        from: LevelId::new(from),
        to: LevelId::new(to),
        kind,
        rate_law,
    };

    use PowerCoefficient as Pc;
    use RateConstant as Rc;
    use TransitionKind as Tk;

    let transitions = vec![
        // Negative state: cycling branches and the spin-mixing branch.
        edge(ids::NVM_G0, ids::NVM_EX, Tk::OpticalExcitation, RateLaw::LaserLine { laser: LaserTarget::RedNvm }),
        edge(ids::NVM_G0, ids::NVM_EY, Tk::OpticalExcitation, RateLaw::LaserLine { laser: LaserTarget::RedNvm }),
        edge(ids::NVM_G1, ids::NVM_EMIX, Tk::OpticalExcitation, RateLaw::LaserLine { laser: LaserTarget::RedNvm }),
        edge(ids::NVM_EX, ids::NVM_G0, Tk::SpontaneousEmission, RateLaw::Constant(Rc::SpontaneousNvm)),
        edge(ids::NVM_EY, ids::NVM_G0, Tk::SpontaneousEmission, RateLaw::Constant(Rc::SpontaneousNvm)),
        edge(ids::NVM_EMIX, ids::NVM_G1, Tk::SpontaneousEmission, RateLaw::Constant(Rc::SpontaneousNvm)),
        edge(ids::NVM_EMIX, ids::NVM_SINGLET, Tk::Isc, RateLaw::Constant(Rc::IscNvm)),
        edge(ids::NVM_SINGLET, ids::NVM_G0, Tk::Isc, RateLaw::Constant(Rc::SingletDecay)),
        edge(ids::NVM_G0, ids::NVM_G1, Tk::MicrowaveMixing, RateLaw::Constant(Rc::MicrowaveMixing)),
        edge(ids::NVM_G1, ids::NVM_G0, Tk::MicrowaveMixing, RateLaw::Constant(Rc::MicrowaveMixing)),
        // Two-photon ionization, sequential form: the excitation step is the
        // optical edge above, the one-photon detachment step is this
        // power-linear edge out of each excited level.
        edge(ids::NVM_EX, ids::NV0_G, Tk::Ionization, RateLaw::PowerLinear { coeff: Pc::Ionization, laser: LaserTarget::RedNvm, branching: 1.0 }),
        edge(ids::NVM_EY, ids::NV0_G, Tk::Ionization, RateLaw::PowerLinear { coeff: Pc::Ionization, laser: LaserTarget::RedNvm, branching: 1.0 }),
        edge(ids::NVM_EMIX, ids::NV0_G, Tk::Ionization, RateLaw::PowerLinear { coeff: Pc::Ionization, laser: LaserTarget::RedNvm, branching: 1.0 }),
        // Neutral state: resonant yellow drive plus broadband green drive.
        edge(ids::NV0_G, ids::NV0_E, Tk::OpticalExcitation, RateLaw::LaserLine { laser: LaserTarget::YellowNv0 }),
        edge(ids::NV0_G, ids::NV0_E, Tk::OpticalExcitation, RateLaw::Broadband { laser: LaserTarget::GreenOffResonant }),
        edge(ids::NV0_E, ids::NV0_G, Tk::SpontaneousEmission, RateLaw::Constant(Rc::SpontaneousNv0)),
        edge(ids::NV0_E, ids::NV0_Q, Tk::Isc, RateLaw::Constant(Rc::IscNv0)),
        edge(ids::NV0_Q, ids::NV0_G, Tk::Isc, RateLaw::Constant(Rc::QuartetDecay)),
        // Recombination lands in a ground sublevel chosen evenly between the
        // two spin projections; the split is encoded as branching fractions.
        edge(ids::NV0_E, ids::NVM_G0, Tk::Recombination, RateLaw::PowerLinear { coeff: Pc::Recombination, laser: LaserTarget::YellowNv0, branching: 0.5 }),
        edge(ids::NV0_E, ids::NVM_G1, Tk::Recombination, RateLaw::PowerLinear { coeff: Pc::Recombination, laser: LaserTarget::YellowNv0, branching: 0.5 }),
        edge(ids::NV0_E, ids::NVM_G0, Tk::Recombination, RateLaw::PowerLinear { coeff: Pc::GreenRecovery, laser: LaserTarget::GreenOffResonant, branching: 0.5 }),
        edge(ids::NV0_E, ids::NVM_G1, Tk::Recombination, RateLaw::PowerLinear { coeff: Pc::GreenRecovery, laser: LaserTarget::GreenOffResonant, branching: 0.5 }),
    ];

    LevelGraph { levels, transitions }
}

impl LevelGraph {
    pub fn level(&self, id: &LevelId) -> Option<&Level> {
        self.levels.iter().find(|l| &l.id == id)
    }

    pub fn level_index(&self, id: &LevelId) -> Option<usize> {
        self.levels.iter().position(|l| &l.id == id)
    }

    /// Lowest ground level of a charge state (energy offset 0).
    pub fn ground_of(&self, charge: ChargeState) -> Option<&Level> {
        self.levels
            .iter()
            .find(|l| l.charge == charge && l.role == LevelRole::Ground && l.energy_offset == 0.0)
    }

    /// Line-centre offset of an optical transition relative to the nominal
    /// reference frequency of its charge state (Hz).
    pub fn line_center_offset(&self, t: &TransitionTemplate) -> Option<f64> {
        let from = self.level(&t.from)?;
        let to = self.level(&t.to)?;
        Some(to.energy_offset - from.energy_offset - nominal_zpl_frequency(from.charge))
    }
}

/// A single invariant violation found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Human-readable name of the offending level or edge.
    pub element: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element, self.message)
    }
}

fn edge_name(t: &TransitionTemplate) -> String {
    format!("edge {} -> {} ({})", t.from, t.to, t.kind.as_str())
}

/// Check every structural invariant of a level graph.
///
/// Violations are data, not errors: an empty list means the graph is valid.
pub fn validate_graph(g: &LevelGraph) -> Vec<Violation> {
    let mut violations = Vec::new();

    let mut seen = HashSet::new();
    for level in &g.levels {
        if !seen.insert(level.id.clone()) {
            violations.push(Violation {
                element: format!("level {}", level.id),
                message: "duplicate level id".to_string(),
            });
        }
        if !level.energy_offset.is_finite() || level.energy_offset < 0.0 {
            violations.push(Violation {
                element: format!("level {}", level.id),
                message: format!(
                    "energy offset must be finite and non-negative, got {}",
                    level.energy_offset
                ),
            });
        }
    }

    // Exactly one zero-offset ground level per charge state.
    for charge in [ChargeState::Negative, ChargeState::Neutral] {
        let zero_grounds: Vec<_> = g
            .levels
            .iter()
            .filter(|l| {
                l.charge == charge && l.role == LevelRole::Ground && l.energy_offset == 0.0
            })
            .collect();
        if zero_grounds.len() != 1 {
            violations.push(Violation {
                element: format!("charge state {charge}"),
                message: format!(
                    "expected exactly one ground level at offset 0, found {}",
                    zero_grounds.len()
                ),
            });
        }
    }

    let by_id: HashMap<&LevelId, &Level> = g.levels.iter().map(|l| (&l.id, l)).collect();

    for t in &g.transitions {
        let (from, to) = match (by_id.get(&t.from), by_id.get(&t.to)) {
            (Some(f), Some(to)) => (*f, *to),
            _ => {
                violations.push(Violation {
                    element: edge_name(t),
                    message: "endpoint references unknown level".to_string(),
                });
                continue;
            }
        };

        let cross_charge = from.charge != to.charge;
        match t.kind {
            TransitionKind::Ionization => {
                if !(from.charge == ChargeState::Negative
                    && from.role == LevelRole::OpticalExcited
                    && to.charge == ChargeState::Neutral
                    && to.role == LevelRole::Ground)
                {
                    violations.push(Violation {
                        element: edge_name(t),
                        message:
                            "ionization must go from a negative optical excited level to the neutral ground"
                                .to_string(),
                    });
                }
            }
            TransitionKind::Recombination => {
                if !(from.charge == ChargeState::Neutral
                    && from.role == LevelRole::OpticalExcited
                    && to.charge == ChargeState::Negative
                    && to.role == LevelRole::Ground)
                {
                    violations.push(Violation {
                        element: edge_name(t),
                        message:
                            "recombination must go from the neutral optical excited level to a negative ground sublevel"
                                .to_string(),
                    });
                }
            }
            _ => {
                if cross_charge {
                    violations.push(Violation {
                        element: edge_name(t),
                        message: "only ionization and recombination may cross charge states"
                            .to_string(),
                    });
                }
            }
        }
    }

    // Within each charge state the levels must form one connected component
    // under the non-charge-crossing edges.
    for charge in [ChargeState::Negative, ChargeState::Neutral] {
        let members: Vec<&LevelId> = g
            .levels
            .iter()
            .filter(|l| l.charge == charge)
            .map(|l| &l.id)
            .collect();
        if members.len() <= 1 {
            continue;
        }
        let mut adjacency: HashMap<&LevelId, Vec<&LevelId>> = HashMap::new();
        for t in &g.transitions {
            if matches!(
                t.kind,
                TransitionKind::Ionization | TransitionKind::Recombination
            ) {
                continue;
            }
            if let (Some(f), Some(to)) = (by_id.get(&t.from), by_id.get(&t.to)) {
                if f.charge == charge && to.charge == charge {
                    adjacency.entry(&t.from).or_default().push(&t.to);
                    adjacency.entry(&t.to).or_default().push(&t.from);
                }
            }
        }
        let mut reached = HashSet::new();
        let mut queue = VecDeque::new();
        reached.insert(members[0]);
        queue.push_back(members[0]);
        while let Some(id) = queue.pop_front() {
            for next in adjacency.get(id).into_iter().flatten() {
                if reached.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        for id in members {
            if !reached.contains(id) {
                violations.push(Violation {
                    element: format!("level {id}"),
                    message: format!("not connected to the rest of the {charge} charge state"),
                });
            }
        }
    }

    violations
}

// ---------------------------------------------------------------------------
// Plain-text serialization
// ---------------------------------------------------------------------------

/// Error produced when parsing a level-graph text file.
#[derive(Debug, thiserror::Error)]
#[error("level graph line {line}: {message}")]
pub struct GraphParseError {
    pub line: usize,
    pub message: String,
}

fn rate_law_to_text(law: &RateLaw) -> String {
    match law {
        RateLaw::Constant(c) => format!("constant:{}", c.as_str()),
        RateLaw::LaserLine { laser } => format!("line:{}", laser.as_str()),
        RateLaw::Broadband { laser } => format!("broadband:{}", laser.as_str()),
        RateLaw::PowerLinear {
            coeff,
            laser,
            branching,
        } => format!("power:{}:{}:{}", coeff.as_str(), laser.as_str(), branching),
    }
}

fn rate_law_from_text(text: &str) -> Option<RateLaw> {
    let mut parts = text.split(':');
    match parts.next()? {
        "constant" => Some(RateLaw::Constant(RateConstant::parse(parts.next()?)?)),
        "line" => Some(RateLaw::LaserLine {
            laser: LaserTarget::parse(parts.next()?)?,
        }),
        "broadband" => Some(RateLaw::Broadband {
            laser: LaserTarget::parse(parts.next()?)?,
        }),
        "power" => {
            let coeff = PowerCoefficient::parse(parts.next()?)?;
            let laser = LaserTarget::parse(parts.next()?)?;
            let branching: f64 = parts.next()?.parse().ok()?;
            if !branching.is_finite() {
                return None;
            }
            Some(RateLaw::PowerLinear {
                coeff,
                laser,
                branching,
            })
        }
        _ => None,
    }
}

impl LevelGraph {
    /// Serialize to the documented line-oriented text format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# level graph v1\n");
        for l in &self.levels {
            out.push_str(&format!(
                "level {} charge={} role={} offset={} label={}\n",
                l.id,
                l.charge.as_str(),
                l.role.as_str(),
                l.energy_offset,
                l.label,
            ));
        }
        for t in &self.transitions {
            out.push_str(&format!(
                "edge {} -> {} kind={} rate={}\n",
                t.from,
                t.to,
                t.kind.as_str(),
                rate_law_to_text(&t.rate_law),
            ));
        }
        out
    }

    /// Parse the line-oriented text format. Structural validation is the
    /// caller's job via [`validate_graph`].
    pub fn from_text(text: &str) -> Result<Self, GraphParseError> {
        let mut levels = Vec::new();
        let mut transitions = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| GraphParseError {
                line: line_no,
                message,
            };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens[0] {
                "level" => {
                    if tokens.len() != 6 {
                        return Err(err("level takes: id charge= role= offset= label=".into()));
                    }
                    let id = LevelId::new(tokens[1]);
                    let mut charge = None;
                    let mut role = None;
                    let mut offset = None;
                    let mut label = None;
                    for tok in &tokens[2..] {
                        let (key, value) = tok
                            .split_once('=')
                            .ok_or_else(|| err(format!("expected key=value, got `{tok}`")))?;
                        match key {
                            "charge" => {
                                charge = Some(ChargeState::parse(value).ok_or_else(|| {
                                    err(format!("unknown charge state `{value}`"))
                                })?)
                            }
                            "role" => {
                                role = Some(
                                    LevelRole::parse(value)
                                        .ok_or_else(|| err(format!("unknown role `{value}`")))?,
                                )
                            }
                            "offset" => {
                                let v: f64 = value
                                    .parse()
                                    .map_err(|_| err(format!("bad offset `{value}`")))?;
                                offset = Some(v);
                            }
                            "label" => label = Some(value.to_string()),
                            _ => return Err(err(format!("unknown key `{key}`"))),
                        }
                    }
                    levels.push(Level {
                        id,
                        charge: charge.ok_or_else(|| err("missing charge=".into()))?,
                        label: label.ok_or_else(|| err("missing label=".into()))?,
                        energy_offset: offset.ok_or_else(|| err("missing offset=".into()))?,
                        role: role.ok_or_else(|| err("missing role=".into()))?,
                    });
                }
                "edge" => {
                    if tokens.len() != 6 || tokens[2] != "->" {
                        return Err(err("edge takes: from -> to kind= rate=".into()));
                    }
                    let from = LevelId::new(tokens[1]);
                    let to = LevelId::new(tokens[3]);
                    let mut kind = None;
                    let mut rate_law = None;
                    for tok in &tokens[4..] {
                        let (key, value) = tok
                            .split_once('=')
                            .ok_or_else(|| err(format!("expected key=value, got `{tok}`")))?;
                        match key {
                            "kind" => {
                                kind = Some(
                                    TransitionKind::parse(value)
                                        .ok_or_else(|| err(format!("unknown kind `{value}`")))?,
                                )
                            }
                            "rate" => {
                                rate_law = Some(rate_law_from_text(value).ok_or_else(|| {
                                    err(format!("unknown rate law `{value}`"))
                                })?)
                            }
                            _ => return Err(err(format!("unknown key `{key}`"))),
                        }
                    }
                    transitions.push(TransitionTemplate {
                        from,
                        to,
                        kind: kind.ok_or_else(|| err("missing kind=".into()))?,
                        rate_law: rate_law.ok_or_else(|| err("missing rate=".into()))?,
                    });
                }
                other => {
                    return Err(err(format!("unknown directive `{other}`")));
                }
            }
        }
        Ok(LevelGraph {
            levels,
            transitions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_graph_shape() {
        let g = build_default_graph(StrainSplitting::default());
        let nvm = g
            .levels
            .iter()
            .filter(|l| l.charge == ChargeState::Negative)
            .count();
        let nv0 = g
            .levels
            .iter()
            .filter(|l| l.charge == ChargeState::Neutral)
            .count();
        assert_eq!(nvm, 6);
        assert_eq!(nv0, 3);

        let g1 = g.level(&LevelId::new(ids::NVM_G1)).unwrap();
        assert_eq!(g1.energy_offset, 2.87e9);
    }

    #[test]
    fn default_graph_cross_edges_are_charge_conversions_only() {
        let g = build_default_graph(StrainSplitting::default());
        for t in &g.transitions {
            let from = g.level(&t.from).unwrap();
            let to = g.level(&t.to).unwrap();
            if from.charge != to.charge {
                assert!(
                    matches!(
                        t.kind,
                        TransitionKind::Ionization | TransitionKind::Recombination
                    ),
                    "unexpected cross-charge edge {t:?}"
                );
            }
        }
    }

    #[test]
    fn default_graph_validates() {
        let g = build_default_graph(StrainSplitting::default());
        assert_eq!(validate_graph(&g), Vec::new());
    }

    #[test]
    fn text_round_trip_identity() {
        let g = build_default_graph(StrainSplitting::default());
        let text = g.to_text();
        let parsed = LevelGraph::from_text(&text).unwrap();
        assert_eq!(parsed, g);
    }

    #[test]
    fn ionization_from_ground_is_a_violation() {
        let mut g = build_default_graph(StrainSplitting::default());
        g.transitions.push(TransitionTemplate {
            from: LevelId::new(ids::NVM_G0),
            to: LevelId::new(ids::NV0_G),
            kind: TransitionKind::Ionization,
            rate_law: RateLaw::PowerLinear {
                coeff: PowerCoefficient::Ionization,
                laser: LaserTarget::RedNvm,
                branching: 1.0,
            },
        });
        let violations = validate_graph(&g);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].element.contains("nm_g0"), "{violations:?}");
    }

    #[test]
    fn two_zero_offset_grounds_is_a_violation() {
        let mut g = build_default_graph(StrainSplitting::default());
        for l in &mut g.levels {
            if l.id.as_str() == ids::NVM_G1 {
                l.energy_offset = 0.0;
            }
        }
        let violations = validate_graph(&g);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].element.contains("negative"));
    }

    #[test]
    fn disconnected_level_is_a_violation() {
        let mut g = build_default_graph(StrainSplitting::default());
        g.levels.push(Level {
            id: LevelId::new("nm_orphan"),
            charge: ChargeState::Negative,
            label: "orphan".into(),
            energy_offset: 1e12,
            role: LevelRole::Shelving,
        });
        let violations = validate_graph(&g);
        assert!(violations
            .iter()
            .any(|v| v.element.contains("nm_orphan") && v.message.contains("not connected")));
    }

    #[test]
    fn line_center_offsets() {
        let g = build_default_graph(StrainSplitting::default());
        let ex_edge = g
            .transitions
            .iter()
            .find(|t| t.to == LevelId::new(ids::NVM_EX))
            .unwrap();
        let off = g.line_center_offset(ex_edge).unwrap();
        assert!((off - 3.5e9).abs() < 1.0, "Ex line at {off}");

        let emix_edge = g
            .transitions
            .iter()
            .find(|t| t.to == LevelId::new(ids::NVM_EMIX))
            .unwrap();
        let off = g.line_center_offset(emix_edge).unwrap();
        assert!((off + 2.87e9).abs() < 1.0, "E_mix line at {off}");
    }

    #[test]
    fn parse_error_carries_line_number() {
        let err = LevelGraph::from_text("level a charge=negative role=ground offset=0 label=a\nbogus x\n")
            .unwrap_err();
        assert_eq!(err.line, 2);
    }
}
