//! Unit-suffixed number parsing and canonical formatting.
//!
//! Protocol files and a few config fields express quantities with SI
//! suffixes (`-2.5GHz`, `100nW`, `1ms`). Canonical output always uses the
//! base unit (`Hz`, `W`, `s`) with Rust's shortest round-trip float
//! formatting, so parse(print(x)) == x bit-for-bit.

/// Physical constants used across the crate.
pub mod consts {
    /// Speed of light in vacuum, m/s.
    pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;
    /// Planck constant, eV·s.
    pub const PLANCK_EV_S: f64 = 4.135_667_696e-15;
}

/// Convert a vacuum wavelength in metres to an optical frequency in Hz.
pub fn wavelength_to_frequency(lambda_m: f64) -> f64 {
    consts::SPEED_OF_LIGHT / lambda_m
}

/// Convert a photon energy in eV to a frequency in Hz.
pub fn ev_to_hz(ev: f64) -> f64 {
    ev / consts::PLANCK_EV_S
}

/// Frequency span (Hz) equivalent to a wavelength span centred on `lambda_m`.
///
/// First-order dispersion of nu = c/lambda: d_nu = c * d_lambda / lambda^2.
pub fn wavelength_span_to_frequency_span(lambda_m: f64, dlambda_m: f64) -> f64 {
    consts::SPEED_OF_LIGHT * dlambda_m / (lambda_m * lambda_m)
}

fn parse_with_suffixes(text: &str, suffixes: &[(&str, f64)]) -> Option<f64> {
    let text = text.trim();
    for (suffix, factor) in suffixes {
        if let Some(num) = text.strip_suffix(suffix) {
            let v: f64 = num.trim().parse().ok()?;
            let scaled = v * factor;
            if scaled.is_finite() {
                return Some(scaled);
            }
            return None;
        }
    }
    None
}

/// Parse a frequency like `2.87GHz`, `-450MHz`, `0Hz`. Returns Hz.
pub fn parse_frequency(text: &str) -> Option<f64> {
    parse_with_suffixes(
        text,
        &[("GHz", 1e9), ("MHz", 1e6), ("kHz", 1e3), ("Hz", 1.0)],
    )
}

/// Parse a power like `100nW`, `10uW`, `1mW`. Returns W.
pub fn parse_power(text: &str) -> Option<f64> {
    parse_with_suffixes(
        text,
        &[
            ("pW", 1e-12),
            ("nW", 1e-9),
            ("uW", 1e-6),
            ("mW", 1e-3),
            ("W", 1.0),
        ],
    )
}

/// Parse a duration like `1ms`, `200us`, `0.5s`. Returns seconds.
pub fn parse_duration(text: &str) -> Option<f64> {
    parse_with_suffixes(
        text,
        &[("ns", 1e-9), ("us", 1e-6), ("ms", 1e-3), ("s", 1.0)],
    )
}

/// Canonical frequency formatting: base Hz, shortest round-trip.
pub fn format_frequency(hz: f64) -> String {
    format!("{hz}Hz")
}

/// Canonical power formatting: base W, shortest round-trip.
pub fn format_power(w: f64) -> String {
    format!("{w}W")
}

/// Canonical duration formatting: base seconds, shortest round-trip.
pub fn format_duration(s: f64) -> String {
    format!("{s}s")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_suffixes() {
        assert_eq!(parse_frequency("2.87GHz"), Some(2.87e9));
        assert_eq!(parse_frequency("-450MHz"), Some(-4.5e8));
        assert_eq!(parse_frequency("12kHz"), Some(12e3));
        assert_eq!(parse_frequency("0Hz"), Some(0.0));
        assert_eq!(parse_frequency("5 GHz"), Some(5e9));
        assert_eq!(parse_frequency("5"), None);
        assert_eq!(parse_frequency("fastHz"), None);
    }

    #[test]
    fn power_suffixes() {
        // Expectations written as the same product the parser computes, so
        // the comparison is exact.
        assert_eq!(parse_power("100nW"), Some(100.0 * 1e-9));
        assert_eq!(parse_power("10uW"), Some(10.0 * 1e-6));
        assert_eq!(parse_power("1mW"), Some(1e-3));
        assert_eq!(parse_power("2W"), Some(2.0));
    }

    #[test]
    fn duration_suffixes() {
        assert_eq!(parse_duration("1ms"), Some(1e-3));
        assert_eq!(parse_duration("200us"), Some(200.0 * 1e-6));
        assert_eq!(parse_duration("12ns"), Some(12.0 * 1e-9));
        assert_eq!(parse_duration("0.5s"), Some(0.5));
    }

    #[test]
    fn canonical_round_trip_is_stable() {
        // One normalization pass, then parse(print(x)) is the identity.
        let raw = parse_frequency("1.1GHz").unwrap();
        let printed = format_frequency(raw);
        assert_eq!(parse_frequency(&printed), Some(raw));

        let odd = 1.234_567_890_123e7;
        assert_eq!(parse_frequency(&format_frequency(odd)), Some(odd));
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(parse_frequency("1e400GHz"), None);
        assert_eq!(parse_duration("NaNs"), None);
    }

    #[test]
    fn wavelength_conversions() {
        let nu = wavelength_to_frequency(637e-9);
        assert!((nu - 4.706e14).abs() < 1e12);
        // 2 nm around 575 nm is roughly +-906 GHz in frequency.
        let span = wavelength_span_to_frequency_span(575e-9, 2e-9);
        assert!((span - 1.813e12).abs() < 5e9, "span = {span}");
    }
}
