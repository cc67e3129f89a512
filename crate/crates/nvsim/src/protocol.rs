//! Experiment-sequence language: parsing, canonical printing, builtin
//! sequences and expansion into piecewise-constant schedule windows.
//!
//! The language is line-oriented:
//!
//! ```text
//! # comment
//! mw on
//! repeat 1000 {
//!   pulse 100us green=1mW
//!   sweep red -5GHz..5GHz points=500 dwell=1ms power=10uW record
//! }
//! ```
//!
//! Directives: `pulse <duration> [laser[@offset]=power ...] [record]`,
//! `sweep <laser> <start>..<stop> points=N dwell=T power=P
//! [laser[@offset]=power ...] [record]`, `mw on|off`, `repeat N { ... }`.
//! Frequencies are offsets from the swept laser's nominal reference line;
//! the broadband green laser takes no offset. Canonical output prints every
//! quantity in its base unit (Hz, W, s) so parse(print(p)) == p.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levels::LaserTarget;
use crate::units;

/// A laser held at fixed settings during a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserSetting {
    pub target: LaserTarget,
    /// Offset from the target's nominal reference line (Hz); always zero
    /// for the broadband green laser.
    pub offset: f64,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseStep {
    pub duration: f64,
    pub lasers: Vec<LaserSetting>,
    pub mw_on: bool,
    pub record: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStep {
    pub laser: LaserTarget,
    pub start_offset: f64,
    pub stop_offset: f64,
    pub n_points: u32,
    pub dwell: f64,
    pub power: f64,
    /// Other lasers held constant during the sweep.
    pub others: Vec<LaserSetting>,
    pub mw_on: bool,
    pub record: bool,
}

impl SweepStep {
    pub fn duration(&self) -> f64 {
        self.n_points as f64 * self.dwell
    }

    pub fn offset_at(&self, point: usize) -> f64 {
        if self.n_points <= 1 {
            return self.start_offset;
        }
        let frac = point as f64 / (self.n_points - 1) as f64;
        self.start_offset + frac * (self.stop_offset - self.start_offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProtocolStep {
    Pulse(PulseStep),
    Sweep(SweepStep),
    Repeat { count: u32, body: Vec<ProtocolStep> },
}

/// A parsed experiment sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Protocol {
    pub steps: Vec<ProtocolStep>,
}

#[derive(Debug, Error, PartialEq)]
#[error("line {line}, column {col}: {message}")]
pub struct ProtocolError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

fn err(line: usize, col: usize, message: impl Into<String>) -> ProtocolError {
    ProtocolError {
        line,
        col,
        message: message.into(),
    }
}

/// Token with its 1-based column.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s + 1, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

fn parse_laser_setting(
    line_no: usize,
    col: usize,
    tok: &str,
) -> Result<LaserSetting, ProtocolError> {
    let (laser_part, power_part) = tok
        .split_once('=')
        .ok_or_else(|| err(line_no, col, format!("expected laser=power, got `{tok}`")))?;
    let (name, offset_part) = match laser_part.split_once('@') {
        Some((n, o)) => (n, Some(o)),
        None => (laser_part, None),
    };
    let target = LaserTarget::parse(name)
        .ok_or_else(|| err(line_no, col, format!("unknown laser `{name}`")))?;
    let offset = match offset_part {
        Some(text) => {
            if target == LaserTarget::GreenOffResonant {
                return Err(err(
                    line_no,
                    col,
                    "green is broadband and takes no frequency offset",
                ));
            }
            units::parse_frequency(text)
                .ok_or_else(|| err(line_no, col, format!("malformed frequency `{text}`")))?
        }
        None => 0.0,
    };
    let power = units::parse_power(power_part)
        .ok_or_else(|| err(line_no, col, format!("malformed power `{power_part}`")))?;
    if power < 0.0 {
        return Err(err(line_no, col, format!("negative power `{power_part}`")));
    }
    Ok(LaserSetting {
        target,
        offset,
        power,
    })
}

/// Parse protocol text into its step tree.
///
/// `mw on` / `mw off` statements set a flag captured by every subsequent
/// step in lexical order (the flag is static per step, not re-evaluated per
/// repeat iteration).
pub fn parse_protocol(text: &str) -> Result<Protocol, ProtocolError> {
    // Stack of (opening line, repeat count, collected body).
    let mut stack: Vec<(usize, u32, Vec<ProtocolStep>)> = Vec::new();
    let mut top: Vec<ProtocolStep> = Vec::new();
    let mut mw_on = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let toks = tokens(stripped);
        if toks.is_empty() {
            continue;
        }
        let (col0, directive) = toks[0];
        match directive {
            "mw" => {
                if toks.len() != 2 {
                    return Err(err(line_no, col0, "mw takes exactly one of on|off"));
                }
                mw_on = match toks[1].1 {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(err(
                            line_no,
                            toks[1].0,
                            format!("expected on|off, got `{other}`"),
                        ))
                    }
                };
            }
            "pulse" => {
                if toks.len() < 2 {
                    return Err(err(line_no, col0, "pulse needs a duration"));
                }
                let duration = units::parse_duration(toks[1].1).ok_or_else(|| {
                    err(
                        line_no,
                        toks[1].0,
                        format!("malformed duration `{}`", toks[1].1),
                    )
                })?;
                if duration <= 0.0 {
                    return Err(err(line_no, toks[1].0, "duration must be positive"));
                }
                let mut lasers = Vec::new();
                let mut record = false;
                for &(col, tok) in &toks[2..] {
                    if tok == "record" {
                        record = true;
                    } else {
                        lasers.push(parse_laser_setting(line_no, col, tok)?);
                    }
                }
                let step = ProtocolStep::Pulse(PulseStep {
                    duration,
                    lasers,
                    mw_on,
                    record,
                });
                stack.last_mut().map_or(&mut top, |f| &mut f.2).push(step);
            }
            "sweep" => {
                if toks.len() < 5 {
                    return Err(err(
                        line_no,
                        col0,
                        "sweep needs: laser start..stop points=N dwell=T power=P",
                    ));
                }
                let laser = LaserTarget::parse(toks[1].1).ok_or_else(|| {
                    err(line_no, toks[1].0, format!("unknown laser `{}`", toks[1].1))
                })?;
                if laser == LaserTarget::GreenOffResonant {
                    return Err(err(line_no, toks[1].0, "green cannot be swept"));
                }
                let range = toks[2].1;
                let (start_text, stop_text) = range.split_once("..").ok_or_else(|| {
                    err(line_no, toks[2].0, format!("expected start..stop, got `{range}`"))
                })?;
                let start_offset = units::parse_frequency(start_text).ok_or_else(|| {
                    err(line_no, toks[2].0, format!("malformed frequency `{start_text}`"))
                })?;
                let stop_offset = units::parse_frequency(stop_text).ok_or_else(|| {
                    err(line_no, toks[2].0, format!("malformed frequency `{stop_text}`"))
                })?;
                let mut n_points = None;
                let mut dwell = None;
                let mut power = None;
                let mut others = Vec::new();
                let mut record = false;
                for &(col, tok) in &toks[3..] {
                    if tok == "record" {
                        record = true;
                    } else if let Some(v) = tok.strip_prefix("points=") {
                        let n: u32 = v.parse().map_err(|_| {
                            err(line_no, col, format!("malformed point count `{v}`"))
                        })?;
                        n_points = Some(n);
                    } else if let Some(v) = tok.strip_prefix("dwell=") {
                        let d = units::parse_duration(v).ok_or_else(|| {
                            err(line_no, col, format!("malformed duration `{v}`"))
                        })?;
                        dwell = Some(d);
                    } else if let Some(v) = tok.strip_prefix("power=") {
                        let p = units::parse_power(v).ok_or_else(|| {
                            err(line_no, col, format!("malformed power `{v}`"))
                        })?;
                        power = Some(p);
                    } else {
                        let setting = parse_laser_setting(line_no, col, tok)?;
                        if setting.target == laser {
                            return Err(err(
                                line_no,
                                col,
                                "the swept laser cannot also be held constant",
                            ));
                        }
                        others.push(setting);
                    }
                }
                let n_points =
                    n_points.ok_or_else(|| err(line_no, col0, "sweep needs points=N"))?;
                if n_points < 2 {
                    return Err(err(line_no, col0, "sweep needs at least 2 points"));
                }
                if n_points > 10_000_000 {
                    return Err(err(line_no, col0, "sweep point count over 1e7"));
                }
                let dwell = dwell.ok_or_else(|| err(line_no, col0, "sweep needs dwell=T"))?;
                if dwell <= 0.0 {
                    return Err(err(line_no, col0, "dwell must be positive"));
                }
                let power = power.ok_or_else(|| err(line_no, col0, "sweep needs power=P"))?;
                if power < 0.0 {
                    return Err(err(line_no, col0, "sweep power must be non-negative"));
                }
                let step = ProtocolStep::Sweep(SweepStep {
                    laser,
                    start_offset,
                    stop_offset,
                    n_points,
                    dwell,
                    power,
                    others,
                    mw_on,
                    record,
                });
                stack.last_mut().map_or(&mut top, |f| &mut f.2).push(step);
            }
            "repeat" => {
                if toks.len() != 3 || toks[2].1 != "{" {
                    return Err(err(line_no, col0, "expected `repeat N {`"));
                }
                let count: u32 = toks[1]
                    .1
                    .parse()
                    .map_err(|_| err(line_no, toks[1].0, format!("malformed count `{}`", toks[1].1)))?;
                if count == 0 {
                    return Err(err(line_no, toks[1].0, "repeat count must be at least 1"));
                }
                stack.push((line_no, count, Vec::new()));
            }
            "}" => {
                if toks.len() != 1 {
                    return Err(err(line_no, col0, "unexpected tokens after `}`"));
                }
                let (_, count, body) = stack
                    .pop()
                    .ok_or_else(|| err(line_no, col0, "`}` without an open repeat block"))?;
                let step = ProtocolStep::Repeat { count, body };
                stack.last_mut().map_or(&mut top, |f| &mut f.2).push(step);
            }
            other => {
                return Err(err(line_no, col0, format!("unknown directive `{other}`")));
            }
        }
    }

    if let Some((open_line, count, _)) = stack.last() {
        let total_lines = text.lines().count().max(1);
        return Err(err(
            total_lines,
            1,
            format!("end of input with `repeat {count} {{` from line {open_line} still open"),
        ));
    }

    Ok(Protocol { steps: top })
}

fn print_laser_setting(out: &mut String, s: &LaserSetting) {
    out.push(' ');
    out.push_str(s.target.as_str());
    if s.target != LaserTarget::GreenOffResonant {
        out.push('@');
        out.push_str(&units::format_frequency(s.offset));
    }
    out.push('=');
    out.push_str(&units::format_power(s.power));
}

fn print_steps(out: &mut String, steps: &[ProtocolStep], mw_state: &mut bool, indent: usize) {
    for step in steps {
        let pad = "  ".repeat(indent);
        match step {
            ProtocolStep::Pulse(p) => {
                if p.mw_on != *mw_state {
                    out.push_str(&format!("{pad}mw {}\n", if p.mw_on { "on" } else { "off" }));
                    *mw_state = p.mw_on;
                }
                out.push_str(&format!("{pad}pulse {}", units::format_duration(p.duration)));
                for l in &p.lasers {
                    print_laser_setting(out, l);
                }
                if p.record {
                    out.push_str(" record");
                }
                out.push('\n');
            }
            ProtocolStep::Sweep(s) => {
                if s.mw_on != *mw_state {
                    out.push_str(&format!("{pad}mw {}\n", if s.mw_on { "on" } else { "off" }));
                    *mw_state = s.mw_on;
                }
                out.push_str(&format!(
                    "{pad}sweep {} {}..{} points={} dwell={} power={}",
                    s.laser.as_str(),
                    units::format_frequency(s.start_offset),
                    units::format_frequency(s.stop_offset),
                    s.n_points,
                    units::format_duration(s.dwell),
                    units::format_power(s.power),
                ));
                for l in &s.others {
                    print_laser_setting(out, l);
                }
                if s.record {
                    out.push_str(" record");
                }
                out.push('\n');
            }
            ProtocolStep::Repeat { count, body } => {
                out.push_str(&format!("{pad}repeat {count} {{\n"));
                print_steps(out, body, mw_state, indent + 1);
                out.push_str(&format!("{pad}}}\n"));
            }
        }
    }
}

/// Canonical text form; `parse_protocol(print_protocol(p)) == p`.
pub fn print_protocol(p: &Protocol) -> String {
    let mut out = String::new();
    let mut mw_state = false;
    print_steps(&mut out, &p.steps, &mut mw_state, 0);
    out
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_protocol(self))
    }
}

// ---------------------------------------------------------------------------
// Scheduling
// ---------------------------------------------------------------------------

/// Identity of a sweep window inside the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Which sweep step in the protocol this belongs to (lexical order).
    pub channel: usize,
    /// Running occurrence count of that step (repeat iterations distinct).
    pub sweep_index: usize,
    pub point_index: usize,
    pub n_points: usize,
    /// Laser offset during this window (Hz).
    pub offset: f64,
}

/// One piecewise-constant window of laser and microwave settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub t_start: f64,
    pub t_end: f64,
    pub lasers: Vec<LaserSetting>,
    pub mw_on: bool,
    pub record: bool,
    pub sweep: Option<SweepPoint>,
    /// True when this window is a repump pulse (any pulse with green on);
    /// the engine fires the pulse-induced spectral jump at its end.
    pub green_pulse: bool,
}

impl Window {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

fn assign_channels(steps: &[ProtocolStep], next: &mut usize, out: &mut Vec<usize>) {
    for step in steps {
        match step {
            ProtocolStep::Sweep(_) => {
                out.push(*next);
                *next += 1;
            }
            ProtocolStep::Repeat { body, .. } => assign_channels(body, next, out),
            ProtocolStep::Pulse(_) => {}
        }
    }
}

struct Expander<'a> {
    windows: Vec<Window>,
    t: f64,
    /// Occurrence counters per sweep channel.
    occurrences: Vec<usize>,
    channel_cursor: usize,
    _phantom: std::marker::PhantomData<&'a ()>,
}

impl Expander<'_> {
    fn expand(&mut self, steps: &[ProtocolStep]) {
        for step in steps {
            match step {
                ProtocolStep::Pulse(p) => {
                    let green_pulse = p
                        .lasers
                        .iter()
                        .any(|l| l.target == LaserTarget::GreenOffResonant && l.power > 0.0);
                    let t_start = self.t;
                    self.t += p.duration;
                    self.windows.push(Window {
                        t_start,
                        t_end: self.t,
                        lasers: p.lasers.clone(),
                        mw_on: p.mw_on,
                        record: p.record,
                        sweep: None,
                        green_pulse,
                    });
                }
                ProtocolStep::Sweep(s) => {
                    let channel = self.channel_cursor;
                    self.channel_cursor += 1;
                    let sweep_index = self.occurrences[channel];
                    self.occurrences[channel] += 1;
                    for point in 0..s.n_points as usize {
                        let offset = s.offset_at(point);
                        let mut lasers = Vec::with_capacity(1 + s.others.len());
                        lasers.push(LaserSetting {
                            target: s.laser,
                            offset,
                            power: s.power,
                        });
                        lasers.extend(s.others.iter().copied());
                        let t_start = self.t;
                        self.t += s.dwell;
                        self.windows.push(Window {
                            t_start,
                            t_end: self.t,
                            lasers,
                            mw_on: s.mw_on,
                            record: s.record,
                            sweep: Some(SweepPoint {
                                channel,
                                sweep_index,
                                point_index: point,
                                n_points: s.n_points as usize,
                                offset,
                            }),
                            green_pulse: false,
                        });
                    }
                }
                ProtocolStep::Repeat { count, body } => {
                    let cursor = self.channel_cursor;
                    for _ in 0..*count {
                        self.channel_cursor = cursor;
                        self.expand(body);
                    }
                    // After all iterations the cursor sits past the body.
                }
            }
        }
    }
}

/// Number of sweep steps (channels) in a protocol.
pub fn count_channels(p: &Protocol) -> usize {
    let mut out = Vec::new();
    let mut next = 0;
    assign_channels(&p.steps, &mut next, &mut out);
    next
}

/// Expand a protocol into non-overlapping, gap-free windows covering its
/// whole duration. Sweeps become `n_points` dwell windows with linearly
/// interpolated offsets, endpoints inclusive.
pub fn schedule(p: &Protocol) -> Vec<Window> {
    let n_channels = count_channels(p);
    let mut expander = Expander {
        windows: Vec::new(),
        t: 0.0,
        occurrences: vec![0; n_channels],
        channel_cursor: 0,
        _phantom: std::marker::PhantomData,
    };
    expander.expand(&p.steps);
    expander.windows
}

impl Protocol {
    /// Total duration: the end of the last scheduled window (0 for an empty
    /// protocol).
    pub fn total_duration(&self) -> f64 {
        schedule(self).last().map_or(0.0, |w| w.t_end)
    }
}

// ---------------------------------------------------------------------------
// Builtin sequences
// ---------------------------------------------------------------------------

const IONIZE_THEN_NV0_PLE: &str = "\
# Charge-conversion pulse, then a neutral-line sweep; repeated and recorded.
mw on
repeat 1000 {
  pulse 200us red@3500000000Hz=0.0001W
  sweep yellow -1500000000Hz..1500000000Hz points=150 dwell=1ms power=100nW record
}
";

const NVM_SWEEP_THEN_NV0_SWEEP: &str = "\
# Negative-line sweep (ionizes somewhere), then a neutral-line sweep that
# restores the charge state; both recorded.
mw on
repeat 1000 {
  sweep red -5GHz..5GHz points=500 dwell=1ms power=10uW record
  sweep yellow -1500000000Hz..1500000000Hz points=150 dwell=1ms power=100nW record
}
";

const GREEN_REPUMP_PLE: &str = "\
# Conventional repump: an off-resonant pulse before every negative-line sweep.
mw on
repeat 1000 {
  pulse 100us green=1mW
  sweep red 1GHz..6GHz points=250 dwell=1ms power=10uW record
}
";

const YELLOW_REPUMP_PLE: &str = "\
# Resonant repump: a neutral-line sweep before every negative-line sweep.
mw on
repeat 1000 {
  sweep yellow -1500000000Hz..1500000000Hz points=150 dwell=1ms power=100nW
  sweep red 1GHz..6GHz points=250 dwell=1ms power=10uW record
}
";

const POWER_SERIES_SWITCHING: &str = "\
# One power point of the switching-rate series: six scans of one thousand
# repumped sweeps each. The driver rebuilds this at each laser power.
mw on
repeat 6 {
  repeat 1000 {
    pulse 100us green=1mW
    sweep red -5GHz..5GHz points=500 dwell=1ms power=10uW
  }
}
";

/// The named sequences shipped with the simulator.
pub fn builtin_protocols() -> BTreeMap<String, Protocol> {
    let mut map = BTreeMap::new();
    for (name, text) in [
        ("IONIZE_THEN_NV0_PLE", IONIZE_THEN_NV0_PLE),
        ("NVM_SWEEP_THEN_NV0_SWEEP", NVM_SWEEP_THEN_NV0_SWEEP),
        ("GREEN_REPUMP_PLE", GREEN_REPUMP_PLE),
        ("YELLOW_REPUMP_PLE", YELLOW_REPUMP_PLE),
        ("POWER_SERIES_SWITCHING", POWER_SERIES_SWITCHING),
    ] {
        let p = parse_protocol(text).expect("builtin protocol must parse");
        map.insert(name.to_string(), p);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_a_valid_empty_protocol() {
        let p = parse_protocol("").unwrap();
        assert!(p.steps.is_empty());
        assert_eq!(p.total_duration(), 0.0);
        let p = parse_protocol("# only a comment\n\n").unwrap();
        assert!(p.steps.is_empty());
    }

    #[test]
    fn conversion_then_sweep_sequence_parses() {
        let p = parse_protocol(
            "mw on\nrepeat 1000 {\n pulse 200us red@3.5GHz=100uW\n sweep yellow -1.5GHz..1.5GHz points=150 dwell=1ms power=100nW record\n}\n",
        )
        .unwrap();
        assert_eq!(p.steps.len(), 1);
        match &p.steps[0] {
            ProtocolStep::Repeat { count, body } => {
                assert_eq!(*count, 1000);
                assert_eq!(body.len(), 2);
                assert!(matches!(body[0], ProtocolStep::Pulse(_)));
                assert!(matches!(body[1], ProtocolStep::Sweep(_)));
            }
            other => panic!("expected repeat, got {other:?}"),
        }
    }

    #[test]
    fn unclosed_repeat_errors_at_eof_naming_the_block() {
        let e = parse_protocol("repeat 3 {\npulse 1ms green=1mW\n").unwrap_err();
        assert!(e.message.contains("repeat 3"), "{e}");
        assert!(e.message.contains("line 1"), "{e}");
    }

    #[test]
    fn diagnostics_carry_positions() {
        let e = parse_protocol("pulse 1ms\nswep red -1GHz..1GHz points=2 dwell=1ms power=1nW\n")
            .unwrap_err();
        assert_eq!(e.line, 2);
        assert_eq!(e.col, 1);

        let e = parse_protocol("pulse haha green=1mW\n").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.col > 1);
        assert!(e.message.contains("duration"));
    }

    #[test]
    fn rejected_inputs() {
        // zero repeat
        assert!(parse_protocol("repeat 0 {\n}\n").is_err());
        // sweep with one point
        assert!(
            parse_protocol("sweep red 0Hz..1GHz points=1 dwell=1ms power=1nW\n").is_err()
        );
        // swept green
        assert!(parse_protocol("sweep green 0Hz..1GHz points=2 dwell=1ms power=1nW\n").is_err());
        // green with an offset
        assert!(parse_protocol("pulse 1ms green@1GHz=1mW\n").is_err());
        // negative duration
        assert!(parse_protocol("pulse -1ms green=1mW\n").is_err());
        // stray close
        assert!(parse_protocol("}\n").is_err());
        // swept laser also held constant
        assert!(parse_protocol(
            "sweep red 0Hz..1GHz points=2 dwell=1ms power=1nW red@0Hz=1nW\n"
        )
        .is_err());
    }

    #[test]
    fn print_parse_round_trip() {
        let text = "mw on\nrepeat 2 {\n pulse 1ms green=1mW\n mw off\n sweep red -1GHz..1GHz points=5 dwell=2ms power=10uW yellow@0Hz=5nW record\n mw on\n}\npulse 3us red@-250MHz=1uW record\n";
        let p = parse_protocol(text).unwrap();
        let canonical = print_protocol(&p);
        let reparsed = parse_protocol(&canonical).unwrap();
        assert_eq!(reparsed, p, "canonical text:\n{canonical}");
        // Canonical form is a fixed point.
        assert_eq!(print_protocol(&reparsed), canonical);
    }

    #[test]
    fn builtins_parse_and_match_their_captions() {
        // `mw on` is parser state, not a step, so each builtin's first step
        // is its repeat block.
        let builtins = builtin_protocols();
        assert_eq!(builtins.len(), 5);

        let green = &builtins["GREEN_REPUMP_PLE"];
        match &green.steps[0] {
            ProtocolStep::Repeat { body, .. } => match &body[0] {
                ProtocolStep::Pulse(p) => {
                    assert_eq!(p.lasers.len(), 1);
                    assert_eq!(p.lasers[0].target, LaserTarget::GreenOffResonant);
                    assert_eq!(p.lasers[0].power, 1e-3);
                    assert!(p.mw_on);
                }
                other => panic!("expected pulse, got {other:?}"),
            },
            other => panic!("expected repeat, got {other:?}"),
        }

        let yellow = &builtins["YELLOW_REPUMP_PLE"];
        match &yellow.steps[0] {
            ProtocolStep::Repeat { body, .. } => match &body[0] {
                ProtocolStep::Sweep(s) => {
                    assert_eq!(s.laser, LaserTarget::YellowNv0);
                    assert_eq!(s.power, 100.0 * 1e-9);
                }
                other => panic!("expected sweep, got {other:?}"),
            },
            other => panic!("expected repeat, got {other:?}"),
        }

        let series = &builtins["POWER_SERIES_SWITCHING"];
        match &series.steps[0] {
            ProtocolStep::Repeat { count, body } => {
                assert_eq!(*count, 6);
                match &body[0] {
                    ProtocolStep::Repeat { count, .. } => assert_eq!(*count, 1000),
                    other => panic!("expected nested repeat, got {other:?}"),
                }
            }
            other => panic!("expected repeat, got {other:?}"),
        }

        let gated = &builtins["IONIZE_THEN_NV0_PLE"];
        match &gated.steps[0] {
            ProtocolStep::Repeat { count, body } => {
                assert_eq!(*count, 1000);
                assert_eq!(body.len(), 2);
            }
            other => panic!("expected repeat, got {other:?}"),
        }
    }

    #[test]
    fn schedule_single_pulse() {
        let p = parse_protocol("pulse 1ms green=1mW\n").unwrap();
        let windows = schedule(&p);
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].t_start, 0.0);
        assert_eq!(windows[0].t_end, 1e-3);
        assert!(windows[0].green_pulse);
    }

    #[test]
    fn schedule_sweep_endpoints_inclusive() {
        let p = parse_protocol("sweep red -2GHz..2GHz points=5 dwell=1ms power=1uW\n").unwrap();
        let windows = schedule(&p);
        assert_eq!(windows.len(), 5);
        let offsets: Vec<f64> = windows
            .iter()
            .map(|w| w.sweep.as_ref().unwrap().offset)
            .collect();
        assert_eq!(offsets, vec![-2e9, -1e9, 0.0, 1e9, 2e9]);
        for (i, w) in windows.iter().enumerate() {
            assert!((w.duration() - 1e-3).abs() < 1e-18);
            assert_eq!(w.sweep.as_ref().unwrap().point_index, i);
        }
    }

    #[test]
    fn schedule_repeat_is_periodic_and_gap_free() {
        let p = parse_protocol(
            "repeat 2 {\n pulse 1ms green=1mW\n pulse 2ms red@0Hz=1uW\n}\n",
        )
        .unwrap();
        let windows = schedule(&p);
        assert_eq!(windows.len(), 4);
        assert_eq!(windows[0].lasers, windows[2].lasers);
        assert_eq!(windows[1].lasers, windows[3].lasers);
        for pair in windows.windows(2) {
            assert_eq!(pair[0].t_end, pair[1].t_start, "gap or overlap");
        }
        assert_eq!(windows[3].t_end, 6e-3);
    }

    #[test]
    fn schedule_total_duration_matches_step_sum() {
        let p = parse_protocol(
            "repeat 3 {\n pulse 1ms green=1mW\n sweep red 0Hz..1GHz points=4 dwell=2ms power=1uW\n}\n",
        )
        .unwrap();
        let total = p.total_duration();
        let windows = schedule(&p);
        assert_eq!(windows.last().unwrap().t_end, total);
        let expected = 3.0 * (1e-3 + 4.0 * 2e-3);
        assert!((total - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn sweep_occurrences_count_across_repeats() {
        let p = parse_protocol(
            "repeat 2 {\n sweep red 0Hz..1GHz points=2 dwell=1ms power=1uW record\n sweep yellow 0Hz..1GHz points=2 dwell=1ms power=1nW record\n}\n",
        )
        .unwrap();
        let windows = schedule(&p);
        let sweeps: Vec<(usize, usize)> = windows
            .iter()
            .filter_map(|w| w.sweep.as_ref())
            .map(|s| (s.channel, s.sweep_index))
            .collect();
        assert_eq!(
            sweeps,
            vec![
                (0, 0),
                (0, 0),
                (1, 0),
                (1, 0),
                (0, 1),
                (0, 1),
                (1, 1),
                (1, 1)
            ]
        );
    }
}
