//! Versioned output files. Every file starts with a comment header carrying
//! the format tag, the config hash and the seed, so any result can be traced
//! back to the exact run that produced it.

use std::io::Write;
use std::path::Path;

use crate::analysis::Spectrum;
use crate::engine::{EventPayload, Trace};

/// Provenance stamped into every output header.
#[derive(Debug, Clone)]
pub struct OutputHeader {
    pub config_hash: String,
    pub seed: u64,
}

impl OutputHeader {
    fn lines(&self, format_tag: &str) -> String {
        format!(
            "# format: {format_tag}\n# config_hash: {}\n# seed: {}\n",
            self.config_hash, self.seed
        )
    }
}

/// Write a trace as CSV: one `time_s,counts` row per bin.
pub fn write_trace_csv(
    path: &Path,
    trace: &Trace,
    header: &OutputHeader,
) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "{}", header.lines("trace-csv/1"))?;
    writeln!(file, "time_s,counts")?;
    for (i, c) in trace.counts.iter().enumerate() {
        writeln!(file, "{},{}", i as f64 * trace.bin_width, c)?;
    }
    Ok(())
}

/// Write the structured event log: `time_s,kind,detail` rows.
pub fn write_events_csv(
    path: &Path,
    trace: &Trace,
    header: &OutputHeader,
) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "{}", header.lines("event-log/1"))?;
    writeln!(file, "time_s,kind,detail")?;
    for e in &trace.events {
        let detail = match &e.payload {
            EventPayload::None => String::new(),
            EventPayload::Driver(laser) => format!("driver={}", laser.as_str()),
            EventPayload::Sweep { channel, index } => {
                format!("channel={channel};sweep={index}")
            }
            EventPayload::Jump { line, delta } => {
                format!("line={};delta_hz={delta}", line.as_str())
            }
        };
        writeln!(file, "{},{},{}", e.time, e.kind.as_str(), detail)?;
    }
    Ok(())
}

/// Write a spectrum in plot-ready two-column form: `offset_hz counts`.
pub fn write_spectrum(
    path: &Path,
    spectrum: &Spectrum,
    header: &OutputHeader,
) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "{}", header.lines("spectrum/1"))?;
    writeln!(file, "# n_sweeps: {}", spectrum.n_sweeps)?;
    for (x, y) in spectrum.offsets.iter().zip(&spectrum.counts) {
        writeln!(file, "{x} {y}")?;
    }
    Ok(())
}

/// Serialize a summary as deterministic, human-readable JSON.
pub fn summary_json<T: serde::Serialize>(summary: &T) -> String {
    serde_json::to_string_pretty(summary).expect("summaries serialize") + "\n"
}

pub fn write_summary<T: serde::Serialize>(path: &Path, summary: &T) -> std::io::Result<()> {
    std::fs::write(path, summary_json(summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EventKind;

    #[test]
    fn files_carry_provenance_headers() {
        let dir = tempfile::tempdir().unwrap();
        let header = OutputHeader {
            config_hash: "abc123".into(),
            seed: 42,
        };
        let mut trace = Trace::new(1e-3, 3e-3);
        trace.record_photon(1.5e-3);
        trace.push_event(2e-3, EventKind::Ionization, EventPayload::None);

        let trace_path = dir.path().join("trace.csv");
        write_trace_csv(&trace_path, &trace, &header).unwrap();
        let text = std::fs::read_to_string(&trace_path).unwrap();
        assert!(text.starts_with("# format: trace-csv/1\n"));
        assert!(text.contains("# config_hash: abc123"));
        assert!(text.contains("# seed: 42"));
        assert!(text.contains("0.001,1"));

        let events_path = dir.path().join("events.csv");
        write_events_csv(&events_path, &trace, &header).unwrap();
        let text = std::fs::read_to_string(&events_path).unwrap();
        assert!(text.contains("0.002,ionization,"));

        let spectrum = Spectrum {
            offsets: vec![-1e9, 0.0, 1e9],
            counts: vec![1.0, 5.0, 2.0],
            n_sweeps: 7,
        };
        let spec_path = dir.path().join("spectrum.txt");
        write_spectrum(&spec_path, &spectrum, &header).unwrap();
        let text = std::fs::read_to_string(&spec_path).unwrap();
        assert!(text.contains("# n_sweeps: 7"));
        assert!(text.contains("0 5"));
    }
}
