//! Desk-scale simulator of the charge-state and optical dynamics of a single
//! diamond colour centre under resonant and off-resonant excitation at
//! cryogenic temperature.
//!
//! The crate models photoionization out of the negative charge state, its
//! resonant and off-resonant recovery, and the spectral diffusion of both
//! zero-phonon lines, together with the analysis pipeline that turns
//! simulated traces into switching-event counts, power-law exponents,
//! accumulated excitation spectra and the repump stability ratio.
//!
//! Module map:
//! - [`levels`]: the static two-charge-state level graph.
//! - [`optics`]: laser fields, rate laws, energetics thresholds, rate tables.
//! - [`diffusion`]: spectral jump process and effective-linewidth metric.
//! - [`engine`]: exact-event sampler, master-equation integrator, runner.
//! - [`protocol`]: the experiment-sequence language and scheduler.
//! - [`analysis`]: estimators over traces and sweep records.
//! - [`config`]: the run configuration format and its lints.
//! - [`scenario`]: end-to-end named scenarios and their summaries.
//! - [`output`]: versioned CSV/JSON writers with provenance headers.

pub mod analysis;
pub mod config;
pub mod diffusion;
pub mod engine;
pub mod levels;
pub mod optics;
pub mod output;
pub mod protocol;
pub mod scenario;
pub mod units;
