//! Pulse-sequence description language.
//!
//! A program is a list of segments, each holding laser / microwave / sync
//! events. Times are stored as integer nanoseconds so overlap checks and
//! text round-trips are exact.
//!
//! ```text
//! # comment
//! sequence rabi
//! segment A 7100ns repeat 28169
//!   laser @0ns 5000ns power=8mW
//!   mw @6000ns 100ns amplitude=1 detuning=0Hz phase=0
//! segment B 7100ns repeat 28169
//!   laser @0ns 5000ns power=8mW
//! ```
//!
//! A segment's `duration` is one repetition; the segment occupies
//! `duration * repeat` in total.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of one IPCD readout segment.
pub const SEGMENT_NS: u64 = 200_000_000;

/// Boundary alignment tolerance for [`render_timeline`].
const ALIGN_TOLERANCE_NS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Laser,
    Mw,
    Sync,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Laser, Channel::Mw, Channel::Sync];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Laser => "laser",
            Channel::Mw => "mw",
            Channel::Sync => "sync",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "laser" => Some(Channel::Laser),
            "mw" => Some(Channel::Mw),
            "sync" => Some(Channel::Sync),
            _ => None,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Optional per-event settings. Laser events carry `power_mw`; microwave
/// events may carry `amplitude`, `phase` (rad) and `detuning` (Hz).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseAttributes {
    pub power_mw: Option<f64>,
    pub amplitude: Option<f64>,
    pub phase: Option<f64>,
    pub detuning: Option<f64>,
}

impl PulseAttributes {
    pub fn laser(power_mw: f64) -> Self {
        Self {
            power_mw: Some(power_mw),
            ..Self::default()
        }
    }

    pub fn mw(amplitude: f64, phase: f64, detuning: f64) -> Self {
        Self {
            amplitude: Some(amplitude),
            phase: Some(phase),
            detuning: Some(detuning),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseEvent {
    pub channel: Channel,
    pub t_start_ns: u64,
    pub duration_ns: u64,
    pub attributes: PulseAttributes,
}

impl PulseEvent {
    pub fn laser(t_start_ns: u64, duration_ns: u64, power_mw: f64) -> Self {
        Self {
            channel: Channel::Laser,
            t_start_ns,
            duration_ns,
            attributes: PulseAttributes::laser(power_mw),
        }
    }

    pub fn mw(
        t_start_ns: u64,
        duration_ns: u64,
        amplitude: f64,
        phase: f64,
        detuning: f64,
    ) -> Self {
        Self {
            channel: Channel::Mw,
            t_start_ns,
            duration_ns,
            attributes: PulseAttributes::mw(amplitude, phase, detuning),
        }
    }

    pub fn end_ns(&self) -> u64 {
        self.t_start_ns + self.duration_ns
    }

    pub fn t_start(&self) -> f64 {
        self.t_start_ns as f64 * 1e-9
    }

    pub fn duration(&self) -> f64 {
        self.duration_ns as f64 * 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub duration_ns: u64,
    pub repeat: u64,
    pub events: Vec<PulseEvent>,
}

impl Segment {
    pub fn new(
        label: impl Into<String>,
        duration_ns: u64,
        repeat: u64,
        events: Vec<PulseEvent>,
    ) -> Self {
        Self {
            label: label.into(),
            duration_ns,
            repeat,
            events,
        }
    }

    pub fn total_ns(&self) -> u64 {
        self.duration_ns * self.repeat
    }

    /// Summed event duration on `channel` within one repetition.
    pub fn on_time_ns(&self, channel: Channel) -> u64 {
        self.events
            .iter()
            .filter(|e| e.channel == channel)
            .map(|e| e.duration_ns)
            .sum()
    }

    pub fn events_on(&self, channel: Channel) -> impl Iterator<Item = &PulseEvent> {
        self.events.iter().filter(move |e| e.channel == channel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub name: String,
    pub segments: Vec<Segment>,
}

impl Sequence {
    /// Builds a sequence and rejects it if [`validate_sequence`] reports anything.
    pub fn validated(
        name: impl Into<String>,
        segments: Vec<Segment>,
    ) -> Result<Self, SequenceError> {
        let seq = Self {
            name: name.into(),
            segments,
        };
        let violations = validate_sequence(&seq);
        if violations.is_empty() {
            Ok(seq)
        } else {
            Err(SequenceError::Invalid(violations))
        }
    }

    pub fn segment(&self, label: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    Overlap,
    ExceedsSegment,
    ZeroDuration,
    BadAttributes(String),
    SegmentCount(usize),
    DuplicateLabel,
    ZeroRepeat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub segment: String,
    pub channel: Option<Channel>,
    pub span_ns: (u64, u64),
    /// Indices of the offending events within the segment.
    pub events: Vec<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match &self.kind {
            ViolationKind::Overlap => "overlapping events".to_string(),
            ViolationKind::ExceedsSegment => "event exceeds segment duration".to_string(),
            ViolationKind::ZeroDuration => "zero duration".to_string(),
            ViolationKind::BadAttributes(m) => format!("bad attributes: {m}"),
            ViolationKind::SegmentCount(n) => format!("{n} segments (expected 1, 2 or 4)"),
            ViolationKind::DuplicateLabel => "duplicate segment label".to_string(),
            ViolationKind::ZeroRepeat => "repeat count is zero".to_string(),
        };
        write!(f, "segment `{}`", self.segment)?;
        if let Some(c) = self.channel {
            write!(f, " channel {c}")?;
        }
        write!(f, " [{}ns, {}ns): {what}", self.span_ns.0, self.span_ns.1)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SequenceError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("semantic error at line(s) {lines:?}: {message}")]
    Semantic { lines: Vec<usize>, message: String },
    #[error("invalid sequence: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("generator argument out of range: {0}")]
    Generator(String),
    #[error("event {event} of segment `{segment}` is not aligned to the sampling step")]
    Misaligned { segment: String, event: usize },
}

fn attribute_problem(e: &PulseEvent) -> Option<String> {
    let a = &e.attributes;
    let finite = |v: Option<f64>| v.is_none_or(f64::is_finite);
    if !(finite(a.power_mw) && finite(a.amplitude) && finite(a.phase) && finite(a.detuning)) {
        return Some("non-finite attribute".into());
    }
    match e.channel {
        Channel::Laser => {
            if a.amplitude.is_some() || a.phase.is_some() || a.detuning.is_some() {
                Some("laser events accept only `power`".into())
            } else if a.power_mw.is_none_or(|p| p < 0.0) {
                Some("laser events need a non-negative `power`".into())
            } else {
                None
            }
        }
        Channel::Mw => {
            if a.power_mw.is_some() {
                Some("mw events do not accept `power`".into())
            } else if a.amplitude.is_some_and(|x| x < 0.0) {
                Some("mw amplitude must be >= 0".into())
            } else {
                None
            }
        }
        Channel::Sync => {
            if *a != PulseAttributes::default() {
                Some("sync events take no attributes".into())
            } else {
                None
            }
        }
    }
}

/// Every broken invariant of `seq`; empty iff the sequence is well formed.
pub fn validate_sequence(seq: &Sequence) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = seq.segments.len();
    if ![1, 2, 4].contains(&n) {
        out.push(Violation {
            segment: String::new(),
            channel: None,
            span_ns: (0, 0),
            events: vec![],
            kind: ViolationKind::SegmentCount(n),
        });
    }
    for (si, seg) in seq.segments.iter().enumerate() {
        if seq.segments[..si].iter().any(|s| s.label == seg.label) {
            out.push(Violation {
                segment: seg.label.clone(),
                channel: None,
                span_ns: (0, seg.duration_ns),
                events: vec![],
                kind: ViolationKind::DuplicateLabel,
            });
        }
        if seg.repeat == 0 {
            out.push(Violation {
                segment: seg.label.clone(),
                channel: None,
                span_ns: (0, seg.duration_ns),
                events: vec![],
                kind: ViolationKind::ZeroRepeat,
            });
        }
        for (i, e) in seg.events.iter().enumerate() {
            let span = (e.t_start_ns, e.end_ns());
            let mut push = |kind| {
                out.push(Violation {
                    segment: seg.label.clone(),
                    channel: Some(e.channel),
                    span_ns: span,
                    events: vec![i],
                    kind,
                })
            };
            if e.duration_ns == 0 {
                push(ViolationKind::ZeroDuration);
            }
            if e.end_ns() > seg.duration_ns {
                push(ViolationKind::ExceedsSegment);
            }
            if let Some(m) = attribute_problem(e) {
                push(ViolationKind::BadAttributes(m));
            }
        }
        for ch in Channel::ALL {
            let mut idx: Vec<usize> = seg
                .events
                .iter()
                .enumerate()
                .filter(|(_, e)| e.channel == ch)
                .map(|(i, _)| i)
                .collect();
            idx.sort_by_key(|&i| (seg.events[i].t_start_ns, i));
            for w in idx.windows(2) {
                let (a, b) = (&seg.events[w[0]], &seg.events[w[1]]);
                if b.t_start_ns < a.end_ns() {
                    out.push(Violation {
                        segment: seg.label.clone(),
                        channel: Some(ch),
                        span_ns: (b.t_start_ns, a.end_ns().min(b.end_ns())),
                        events: vec![w[0], w[1]],
                        kind: ViolationKind::Overlap,
                    });
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Parser

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &line[s..i],
                    column: line[..s].chars().count() + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: line[..s].chars().count() + 1,
        });
    }
    out
}

/// Split `"12.5us"` into `(12.5, "us")`.
fn split_number(s: &str) -> Option<(f64, &str)> {
    let end = s
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_digit()
                || c == '.'
                || ((c == '-' || c == '+')
                    && (i == 0 || matches!(s.as_bytes()[i - 1], b'e' | b'E')))
                || ((c == 'e' || c == 'E')
                    && i > 0
                    && s[i + 1..]
                        .starts_with(|d: char| d.is_ascii_digit() || d == '-' || d == '+')))
        })
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    let v: f64 = s[..end].parse().ok()?;
    Some((v, &s[end..]))
}

fn time_to_ns(s: &str) -> Result<u64, String> {
    let (v, unit) = split_number(s).ok_or_else(|| format!("`{s}` is not a time"))?;
    let scale = match unit {
        "ns" => 1.0,
        "us" | "µs" => 1e3,
        "ms" => 1e6,
        "s" => 1e9,
        "" => return Err(format!("time `{s}` needs a unit (ns, us, ms, s)")),
        u => return Err(format!("unknown time unit `{u}`")),
    };
    let ns = v * scale;
    let rounded = ns.round();
    if !(ns >= 0.0) || !ns.is_finite() {
        return Err(format!("time `{s}` must be non-negative"));
    }
    if (ns - rounded).abs() > 1e-6 * rounded.max(1.0) {
        return Err(format!("time `{s}` is not a whole number of nanoseconds"));
    }
    Ok(rounded as u64)
}

fn scaled_value(s: &str, units: &[(&str, f64)], what: &str) -> Result<f64, String> {
    let (v, unit) = split_number(s).ok_or_else(|| format!("`{s}` is not a number"))?;
    units
        .iter()
        .find(|(u, _)| *u == unit)
        .map(|(_, k)| v * k)
        .ok_or_else(|| format!("unknown unit `{unit}` for {what}"))
}

fn set_attribute(attrs: &mut PulseAttributes, key: &str, value: &str) -> Result<(), String> {
    let slot = match key {
        "power" => &mut attrs.power_mw,
        "amplitude" => &mut attrs.amplitude,
        "phase" => &mut attrs.phase,
        "detuning" => &mut attrs.detuning,
        _ => return Err(format!("unknown key `{key}`")),
    };
    if slot.is_some() {
        return Err(format!("key `{key}` given twice"));
    }
    let v = match key {
        "power" => scaled_value(value, &[("mW", 1.0), ("W", 1e3), ("uW", 1e-3)], "power")?,
        "amplitude" => scaled_value(value, &[("", 1.0)], "amplitude")?,
        "phase" => scaled_value(
            value,
            &[("", 1.0), ("rad", 1.0), ("deg", PI / 180.0)],
            "phase",
        )?,
        _ => scaled_value(
            value,
            &[("Hz", 1.0), ("kHz", 1e3), ("MHz", 1e6), ("GHz", 1e9)],
            "detuning",
        )?,
    };
    *slot = Some(v);
    Ok(())
}

/// Parse and validate a sequence program.
pub fn parse_sequence(text: &str) -> Result<Sequence, SequenceError> {
    let syntax = |line: usize, column: usize, message: String| SequenceError::Syntax {
        line,
        column,
        message,
    };
    let mut name: Option<String> = None;
    let mut segments: Vec<Segment> = Vec::new();
    // source line of every event, per segment, for error reporting
    let mut lines: Vec<Vec<usize>> = Vec::new();
    let mut segment_lines: Vec<usize> = Vec::new();

    for (li, raw) in text.lines().enumerate() {
        let lineno = li + 1;
        let code = raw.split('#').next().unwrap_or("");
        let toks = tokenize(code);
        let Some(head) = toks.first() else { continue };
        match head.text {
            "sequence" => {
                if name.is_some() || !segments.is_empty() {
                    return Err(SequenceError::Semantic {
                        lines: vec![lineno],
                        message: "`sequence` header must appear once, before any segment".into(),
                    });
                }
                match toks.as_slice() {
                    [_, n] => name = Some(n.text.to_string()),
                    [_] => {
                        return Err(syntax(
                            lineno,
                            head.column + head.text.len(),
                            "expected a name".into(),
                        ))
                    }
                    [_, _, extra, ..] => {
                        return Err(syntax(lineno, extra.column, "unexpected token".into()))
                    }
                    [] => unreachable!(),
                }
            }
            "segment" => {
                let label = toks
                    .get(1)
                    .ok_or_else(|| syntax(lineno, head.column + 7, "expected a label".into()))?;
                let dur_tok = toks.get(2).ok_or_else(|| {
                    syntax(
                        lineno,
                        label.column + label.text.len(),
                        "expected a duration".into(),
                    )
                })?;
                let duration_ns =
                    time_to_ns(dur_tok.text).map_err(|m| syntax(lineno, dur_tok.column, m))?;
                let repeat = match toks.get(3) {
                    None => 1,
                    Some(t) if t.text == "repeat" => {
                        let n = toks.get(4).ok_or_else(|| {
                            syntax(lineno, t.column + 6, "expected a repeat count".into())
                        })?;
                        if let Some(extra) = toks.get(5) {
                            return Err(syntax(lineno, extra.column, "unexpected token".into()));
                        }
                        n.text.parse::<u64>().map_err(|_| {
                            syntax(lineno, n.column, format!("`{}` is not a count", n.text))
                        })?
                    }
                    Some(t) => {
                        return Err(syntax(
                            lineno,
                            t.column,
                            format!("expected `repeat`, found `{}`", t.text),
                        ))
                    }
                };
                segments.push(Segment::new(label.text, duration_ns, repeat, Vec::new()));
                lines.push(Vec::new());
                segment_lines.push(lineno);
            }
            other => {
                let channel = Channel::parse(other).ok_or_else(|| SequenceError::Semantic {
                    lines: vec![lineno],
                    message: format!("unknown channel or keyword `{other}`"),
                })?;
                let Some(seg) = segments.last_mut() else {
                    return Err(SequenceError::Semantic {
                        lines: vec![lineno],
                        message: "event outside of a segment".into(),
                    });
                };
                let at = toks.get(1).ok_or_else(|| {
                    syntax(
                        lineno,
                        head.column + other.len(),
                        "expected `@<time>`".into(),
                    )
                })?;
                let Some(t) = at.text.strip_prefix('@') else {
                    return Err(syntax(lineno, at.column, "expected `@<time>`".into()));
                };
                let t_start_ns = time_to_ns(t).map_err(|m| syntax(lineno, at.column + 1, m))?;
                let dur = toks.get(2).ok_or_else(|| {
                    syntax(
                        lineno,
                        at.column + at.text.len(),
                        "expected a duration".into(),
                    )
                })?;
                let duration_ns =
                    time_to_ns(dur.text).map_err(|m| syntax(lineno, dur.column, m))?;
                let mut attributes = PulseAttributes::default();
                for kv in &toks[3..] {
                    let (k, v) = kv.text.split_once('=').ok_or_else(|| {
                        syntax(
                            lineno,
                            kv.column,
                            format!("expected key=value, found `{}`", kv.text),
                        )
                    })?;
                    set_attribute(&mut attributes, k, v).map_err(|message| {
                        SequenceError::Semantic {
                            lines: vec![lineno],
                            message,
                        }
                    })?;
                }
                seg.events.push(PulseEvent {
                    channel,
                    t_start_ns,
                    duration_ns,
                    attributes,
                });
                lines
                    .last_mut()
                    .expect("segment pushed with its line list")
                    .push(lineno);
            }
        }
    }

    let seq = Sequence {
        name: name.unwrap_or_else(|| "sequence".into()),
        segments,
    };
    let violations = validate_sequence(&seq);
    if let Some(v) = violations.first() {
        let seg_index = seq.segments.iter().position(|s| s.label == v.segment);
        let mut at: Vec<usize> = match seg_index {
            Some(si) if !v.events.is_empty() => v.events.iter().map(|&e| lines[si][e]).collect(),
            Some(si) => vec![segment_lines[si]],
            None => segment_lines.clone(),
        };
        at.sort_unstable();
        return Err(SequenceError::Semantic {
            lines: at,
            message: v.to_string(),
        });
    }
    Ok(seq)
}

/// Canonical text form: times in ns, one event per line, keys sorted.
pub fn print_sequence(seq: &Sequence) -> String {
    let mut out = String::new();
    writeln!(out, "sequence {}", seq.name).unwrap();
    for seg in &seq.segments {
        writeln!(
            out,
            "segment {} {}ns repeat {}",
            seg.label, seg.duration_ns, seg.repeat
        )
        .unwrap();
        for e in &seg.events {
            write!(
                out,
                "  {} @{}ns {}ns",
                e.channel, e.t_start_ns, e.duration_ns
            )
            .unwrap();
            let a = &e.attributes;
            if let Some(v) = a.amplitude {
                write!(out, " amplitude={v}").unwrap();
            }
            if let Some(v) = a.detuning {
                write!(out, " detuning={v}Hz").unwrap();
            }
            if let Some(v) = a.phase {
                write!(out, " phase={v}").unwrap();
            }
            if let Some(v) = a.power_mw {
                write!(out, " power={v}mW").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Generators

fn to_ns(seconds: f64) -> u64 {
    (seconds * 1e9).round().max(0.0) as u64
}

/// CW ODMR: per frequency, segment `A` with laser and microwave, segment `B`
/// with laser only. With `cw == false` the laser is pulsed (5 µs on, 1 µs
/// off) while the microwave stays on.
pub fn gen_odmr(
    f_points: &[f64],
    cw: bool,
    laser_power_mw: f64,
) -> Result<Vec<(f64, Sequence)>, SequenceError> {
    f_points
        .iter()
        .map(|&f| {
            if !(f > 0.0) {
                return Err(SequenceError::Generator(format!(
                    "microwave frequency must be > 0, got {f}"
                )));
            }
            let (duration, repeat, lasers) = if cw {
                (
                    SEGMENT_NS,
                    1,
                    vec![PulseEvent::laser(0, SEGMENT_NS, laser_power_mw)],
                )
            } else {
                (
                    6_000,
                    SEGMENT_NS / 6_000,
                    vec![PulseEvent::laser(0, 5_000, laser_power_mw)],
                )
            };
            let mut with_mw = lasers.clone();
            with_mw.push(PulseEvent::mw(0, duration, 1.0, 0.0, 0.0));
            let seq = Sequence::validated(
                "odmr",
                vec![
                    Segment::new("A", duration, repeat, with_mw),
                    Segment::new("B", duration, repeat, lasers),
                ],
            )?;
            Ok((f, seq))
        })
        .collect()
}

/// Laser events of width `width_ns` starting at `offset_ns` within a period of
/// `period_ns`, wrapped around the period end.
fn wrapped_laser(offset_ns: u64, width_ns: u64, period_ns: u64, power: f64) -> Vec<PulseEvent> {
    let offset = offset_ns % period_ns;
    if offset + width_ns <= period_ns {
        vec![PulseEvent::laser(offset, width_ns, power)]
    } else {
        let tail = offset + width_ns - period_ns;
        vec![
            PulseEvent::laser(0, tail, power),
            PulseEvent::laser(offset, period_ns - offset, power),
        ]
    }
}

/// Period on the ns grid, divisible into 2 (or 4 for quadrature) equal steps.
fn plsd_period_ns(f_probe: f64, quadrature: bool) -> u64 {
    let steps: u64 = if quadrature { 4 } else { 2 };
    ((1e9 / f_probe / steps as f64).round() as u64) * steps
}

/// Stroboscopic readout with a fixed pulse width. The probe period is
/// rounded to whole nanoseconds divisible by the number of phase steps
/// (2, or 4 with `quadrature`) so every phase offset is exact.
pub fn gen_plsd_with_width(
    f_probe: f64,
    width_ns: u64,
    laser_power_mw: f64,
    quadrature: bool,
) -> Result<Sequence, SequenceError> {
    if !(f_probe > 0.0 && f_probe.is_finite()) {
        return Err(SequenceError::Generator(format!(
            "probe frequency must be > 0, got {f_probe}"
        )));
    }
    let period_ns = plsd_period_ns(f_probe, quadrature);
    let steps: u64 = if quadrature { 4 } else { 2 };
    if period_ns == 0 {
        return Err(SequenceError::Generator(format!(
            "probe frequency {f_probe} Hz is above 1 GHz"
        )));
    }
    if width_ns == 0 || width_ns >= period_ns {
        return Err(SequenceError::Generator(format!(
            "pulse width {width_ns} ns must lie strictly inside the {period_ns} ns period"
        )));
    }
    let pulses = SEGMENT_NS / period_ns;
    if pulses < 1 {
        return Err(SequenceError::Generator(format!(
            "probe frequency {f_probe} Hz gives no complete pulse per 200 ms segment"
        )));
    }
    let labels: &[&str] = if quadrature {
        &["Q0", "Q90", "Q180", "Q270"]
    } else {
        &["A", "B"]
    };
    let segments = labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let offset = period_ns * k as u64 / steps;
            Segment::new(
                *label,
                period_ns,
                pulses,
                wrapped_laser(offset, width_ns, period_ns, laser_power_mw),
            )
        })
        .collect();
    Sequence::validated("plsd", segments)
}

/// Stroboscopic readout with pulses covering `duty` of the probe period.
pub fn gen_plsd(
    f_probe: f64,
    duty: f64,
    laser_power_mw: f64,
    quadrature: bool,
) -> Result<Sequence, SequenceError> {
    if !(duty > 0.0 && duty < 1.0) {
        return Err(SequenceError::Generator(format!(
            "duty must lie in (0, 1), got {duty}"
        )));
    }
    if !(f_probe > 0.0) || (SEGMENT_NS as f64 * 1e-9 * f_probe).floor() < 1.0 {
        return Err(SequenceError::Generator(format!(
            "probe frequency {f_probe} Hz gives no complete pulse per 200 ms segment"
        )));
    }
    // keep at least 1 ns on and off after rounding to the period grid
    let period_ns = plsd_period_ns(f_probe, quadrature);
    let width_ns =
        ((duty * 1e9 / f_probe).round() as u64).clamp(1, period_ns.saturating_sub(1).max(1));
    gen_plsd_with_width(f_probe, width_ns, laser_power_mw, quadrature)
}

/// Laser/microwave timing shared by the pulsed protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulsedTiming {
    pub laser_pulse: f64,
    /// Idle time between adjacent laser and microwave blocks.
    pub gap: f64,
    pub laser_power_mw: f64,
}

impl Default for PulsedTiming {
    fn default() -> Self {
        Self {
            laser_pulse: 5e-6,
            gap: 1e-6,
            laser_power_mw: 8.0,
        }
    }
}

fn pulsed_pair(
    name: &str,
    cycle_ns: u64,
    lasers: Vec<PulseEvent>,
    mw: Vec<PulseEvent>,
) -> Result<Sequence, SequenceError> {
    let repeat = SEGMENT_NS / cycle_ns;
    if repeat == 0 {
        return Err(SequenceError::Generator(format!(
            "cycle of {cycle_ns} ns exceeds the 200 ms segment"
        )));
    }
    let mut a = lasers.clone();
    a.extend(mw);
    a.sort_by_key(|e| (e.t_start_ns, e.channel));
    Sequence::validated(
        name,
        vec![
            Segment::new("A", cycle_ns, repeat, a),
            Segment::new("B", cycle_ns, repeat, lasers),
        ],
    )
}

/// Rabi sweep: each cycle is laser, gap, microwave pulse of width τ, gap.
/// Segment `B` repeats the same cycle without the microwave pulse.
pub fn gen_rabi(
    tau_points: &[f64],
    timing: &PulsedTiming,
    mw_amplitude: f64,
) -> Result<Vec<Sequence>, SequenceError> {
    let laser_ns = to_ns(timing.laser_pulse);
    let gap_ns = to_ns(timing.gap);
    if laser_ns == 0 {
        return Err(SequenceError::Generator(
            "laser pulse must be at least 1 ns".into(),
        ));
    }
    tau_points
        .iter()
        .map(|&tau| {
            if !(tau >= 0.0) {
                return Err(SequenceError::Generator(format!(
                    "pulse width must be >= 0, got {tau}"
                )));
            }
            let tau_ns = to_ns(tau);
            let cycle = laser_ns + 2 * gap_ns + tau_ns;
            let lasers = vec![PulseEvent::laser(0, laser_ns, timing.laser_power_mw)];
            let mw = if tau_ns > 0 {
                vec![PulseEvent::mw(
                    laser_ns + gap_ns,
                    tau_ns,
                    mw_amplitude,
                    0.0,
                    0.0,
                )]
            } else {
                vec![]
            };
            pulsed_pair("rabi", cycle, lasers, mw)
        })
        .collect()
}

/// π-pulse length for a Rabi rate `rabi_rate` (Hz), `1 / (2 Ω)`.
pub fn pi_pulse_duration(rabi_rate: f64) -> f64 {
    0.5 / rabi_rate
}

/// Spin echo per τ: init laser, π/2 (x), τ/2, π (y), τ/2, π/2 (x), readout
/// laser. Pulse lengths follow from `rabi_rate` at unit amplitude.
pub fn gen_cpmg(
    tau_points: &[f64],
    timing: &PulsedTiming,
    rabi_rate: f64,
) -> Result<Vec<Sequence>, SequenceError> {
    if !(rabi_rate > 0.0) {
        return Err(SequenceError::Generator(format!(
            "Rabi rate must be > 0, got {rabi_rate}"
        )));
    }
    let laser_ns = to_ns(timing.laser_pulse);
    let gap_ns = to_ns(timing.gap);
    let pi_ns = to_ns(pi_pulse_duration(rabi_rate));
    let half_pi_ns = to_ns(0.5 * pi_pulse_duration(rabi_rate));
    if laser_ns == 0 || pi_ns == 0 || half_pi_ns == 0 {
        return Err(SequenceError::Generator(
            "laser and microwave pulses must be at least 1 ns".into(),
        ));
    }
    tau_points
        .iter()
        .map(|&tau| {
            if !(tau >= 0.0) {
                return Err(SequenceError::Generator(format!(
                    "free precession time must be >= 0, got {tau}"
                )));
            }
            let half_wait = to_ns(0.5 * tau);
            let t1 = laser_ns + gap_ns;
            let t2 = t1 + half_pi_ns + half_wait;
            let t3 = t2 + pi_ns + half_wait;
            let readout = t3 + half_pi_ns + gap_ns;
            let cycle = readout + laser_ns + gap_ns;
            let power = timing.laser_power_mw;
            let lasers = vec![
                PulseEvent::laser(0, laser_ns, power),
                PulseEvent::laser(readout, laser_ns, power),
            ];
            let mw = vec![
                PulseEvent::mw(t1, half_pi_ns, 1.0, 0.0, 0.0),
                PulseEvent::mw(t2, pi_ns, 1.0, 0.5 * PI, 0.0),
                PulseEvent::mw(t3, half_pi_ns, 1.0, 0.0, 0.0),
            ];
            pulsed_pair("cpmg", cycle, lasers, mw)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Timeline rendering

/// Sampled waveforms of one repetition of a segment. Laser samples hold the
/// power (mW), microwave samples the amplitude, sync samples 0/1.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentWaveforms {
    pub label: String,
    pub repeat: u64,
    pub laser: Vec<f64>,
    pub mw: Vec<f64>,
    pub sync: Vec<f64>,
}

impl SegmentWaveforms {
    pub fn channel(&self, ch: Channel) -> &[f64] {
        match ch {
            Channel::Laser => &self.laser,
            Channel::Mw => &self.mw,
            Channel::Sync => &self.sync,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub dt: f64,
    pub segments: Vec<SegmentWaveforms>,
}

/// Sample every segment at step `dt` (s). All event boundaries must fall on
/// the sampling grid.
pub fn render_timeline(seq: &Sequence, dt: f64) -> Result<Timeline, SequenceError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SequenceError::Generator(format!(
            "sampling step must be > 0, got {dt}"
        )));
    }
    let dt_ns = dt * 1e9;
    let tol = ALIGN_TOLERANCE_NS.min(0.25 * dt_ns);
    let index = |t_ns: u64| -> Option<usize> {
        let k = (t_ns as f64 / dt_ns).round();
        ((t_ns as f64 - k * dt_ns).abs() <= tol).then_some(k as usize)
    };
    let segments = seq
        .segments
        .iter()
        .map(|seg| {
            let n = index(seg.duration_ns).ok_or_else(|| SequenceError::Misaligned {
                segment: seg.label.clone(),
                event: usize::MAX,
            })?;
            let mut w = SegmentWaveforms {
                label: seg.label.clone(),
                repeat: seg.repeat,
                laser: vec![0.0; n],
                mw: vec![0.0; n],
                sync: vec![0.0; n],
            };
            for (i, e) in seg.events.iter().enumerate() {
                let misaligned = || SequenceError::Misaligned {
                    segment: seg.label.clone(),
                    event: i,
                };
                let a = index(e.t_start_ns).ok_or_else(misaligned)?;
                let b = index(e.end_ns()).ok_or_else(misaligned)?.min(n);
                let (target, level) = match e.channel {
                    Channel::Laser => (&mut w.laser, e.attributes.power_mw.unwrap_or(0.0)),
                    Channel::Mw => (&mut w.mw, e.attributes.amplitude.unwrap_or(1.0)),
                    Channel::Sync => (&mut w.sync, 1.0),
                };
                for s in &mut target[a..b] {
                    *s = level;
                }
            }
            Ok(w)
        })
        .collect::<Result<_, SequenceError>>()?;
    Ok(Timeline { dt, segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_program() {
        let seq = parse_sequence("segment A 200ms repeat 1000\n laser @0ns 5us power=8mW").unwrap();
        assert_eq!(seq.segments.len(), 1);
        let seg = &seq.segments[0];
        assert_eq!(seg.repeat, 1000);
        assert_eq!(seg.duration_ns, 200_000_000);
        assert_eq!(seg.events.len(), 1);
        assert_eq!(seg.events[0].duration(), 5e-6);
        assert_eq!(seg.events[0].attributes.power_mw, Some(8.0));
    }

    #[test]
    fn overlap_names_both_lines() {
        let text = "segment A 20us\n  laser @0ns 5us power=8mW\n  mw @1us 1us\n  laser @4us 5us power=8mW\n";
        match parse_sequence(text) {
            Err(SequenceError::Semantic { lines, .. }) => assert_eq!(lines, vec![2, 4]),
            other => panic!("expected semantic error, got {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_sequence("segment A 20us\n  laser 0ns 5us power=8mW\n") {
            Err(SequenceError::Syntax { line, column, .. }) => assert_eq!((line, column), (2, 9)),
            other => panic!("{other:?}"),
        }
        match parse_sequence("segment A 20parsecs\n") {
            Err(SequenceError::Syntax { line, column, .. }) => assert_eq!((line, column), (1, 11)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_sequence("segment A 20us\n  laser @0ns 5us power=8mW colour=green\n"),
            Err(SequenceError::Semantic { .. })
        ));
        assert!(matches!(
            parse_sequence("segment A 20us\n  camera @0ns 5us\n"),
            Err(SequenceError::Semantic { .. })
        ));
        assert!(matches!(
            parse_sequence("laser @0ns 5us power=1mW\n"),
            Err(SequenceError::Semantic { .. })
        ));
        assert!(matches!(
            parse_sequence("segment A 20us\n  laser @0ns 5us power=3Gs\n"),
            Err(SequenceError::Semantic { .. })
        ));
        assert!(matches!(
            parse_sequence("segment A 1.5ns\n"),
            Err(SequenceError::Syntax { .. })
        ));
    }

    #[test]
    fn comments_units_and_header() {
        let text = "# demo\nsequence demo # trailing\nsegment X 1ms repeat 3\n  mw @2us 0.5us amplitude=0.5 phase=90deg detuning=2MHz\n  sync @0ns 10ns\n";
        let seq = parse_sequence(text).unwrap();
        assert_eq!(seq.name, "demo");
        let e = &seq.segments[0].events[0];
        assert_eq!((e.t_start_ns, e.duration_ns), (2000, 500));
        assert!((e.attributes.phase.unwrap() - 0.5 * PI).abs() < 1e-15);
        assert_eq!(e.attributes.detuning, Some(2e6));
    }

    #[test]
    fn validator_cases() {
        for seq in gen_cpmg(&[0.0, 1e-6], &PulsedTiming::default(), 10e6).unwrap() {
            assert!(validate_sequence(&seq).is_empty());
        }
        let overlap = Sequence {
            name: "x".into(),
            segments: vec![Segment::new(
                "A",
                10_000,
                1,
                vec![
                    PulseEvent::laser(0, 5_000, 8.0),
                    PulseEvent::laser(4_000, 1_000, 8.0),
                ],
            )],
        };
        let v = validate_sequence(&overlap);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Overlap);
        assert_eq!(v[0].channel, Some(Channel::Laser));
        assert_eq!(v[0].span_ns, (4_000, 5_000));

        let too_long = Sequence {
            name: "x".into(),
            segments: vec![Segment::new(
                "A",
                10_000,
                1,
                vec![PulseEvent::laser(8_000, 5_000, 8.0)],
            )],
        };
        let v = validate_sequence(&too_long);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::ExceedsSegment);

        let three = Sequence {
            name: "x".into(),
            segments: ["A", "B", "C"]
                .iter()
                .map(|l| Segment::new(*l, 10, 1, vec![]))
                .collect(),
        };
        assert_eq!(
            validate_sequence(&three)[0].kind,
            ViolationKind::SegmentCount(3)
        );
    }

    #[test]
    fn odmr_generator() {
        let seqs = gen_odmr(&[2.87e9], true, 8.0).unwrap();
        assert_eq!(seqs.len(), 1);
        let (f, s) = &seqs[0];
        assert_eq!(*f, 2.87e9);
        assert_eq!(s.segments.len(), 2);
        for seg in &s.segments {
            assert_eq!(seg.total_ns() as f64 * 1e-9, 0.2);
        }
        assert_eq!(s.segments[0].on_time_ns(Channel::Mw), SEGMENT_NS);
        assert_eq!(s.segments[1].on_time_ns(Channel::Mw), 0);
        let fs = [2.86e9, 2.87e9, 2.88e9];
        let many = gen_odmr(&fs, false, 8.0).unwrap();
        assert_eq!(many.iter().map(|(f, _)| *f).collect::<Vec<_>>(), fs);
    }

    #[test]
    fn plsd_generator() {
        let s = gen_plsd(1e3, 0.25, 8.0, false).unwrap();
        let (a, b) = (&s.segments[0], &s.segments[1]);
        assert_eq!(a.repeat, 200);
        assert_eq!(a.events, vec![PulseEvent::laser(0, 250_000, 8.0)]);
        assert_eq!(b.events, vec![PulseEvent::laser(500_000, 250_000, 8.0)]);

        let fast = gen_plsd(10e6, 0.25, 8.0, false).unwrap();
        assert_eq!(fast.segments[0].repeat, 2_000_000);
        assert_eq!(fast.segments[0].events[0].duration_ns, 25);

        let q = gen_plsd(1e3, 0.25, 8.0, true).unwrap();
        let offsets: Vec<u64> = q.segments.iter().map(|s| s.events[0].t_start_ns).collect();
        assert_eq!(offsets, vec![0, 250_000, 500_000, 750_000]);

        assert!(gen_plsd(4.0, 0.25, 8.0, false).is_err());
        assert!(gen_plsd(1e3, 1.0, 8.0, false).is_err());
        // wide pulses wrap around the period end
        let wide = gen_plsd(1e3, 0.75, 8.0, false).unwrap();
        assert_eq!(wide.segments[1].on_time_ns(Channel::Laser), 750_000);
    }

    #[test]
    fn rabi_generator() {
        let t = PulsedTiming::default();
        let s = gen_rabi(&[0.0, 100e-9], &t, 1.0).unwrap();
        for seg in &s[0].segments {
            assert_eq!(seg.on_time_ns(Channel::Mw), 0);
        }
        let (a, b) = (&s[1].segments[0], &s[1].segments[1]);
        let a_lasers: Vec<_> = a.events_on(Channel::Laser).cloned().collect();
        assert_eq!(a_lasers, b.events);
        assert_eq!(a.on_time_ns(Channel::Mw), 100);
        assert_eq!(a.repeat, (0.2 / (5e-6 + 100e-9 + 2e-6)) as u64);
    }

    #[test]
    fn cpmg_generator() {
        let t = PulsedTiming::default();
        let seqs = gen_cpmg(&[0.0, 2e-6], &t, 10e6).unwrap();
        let zero = &seqs[0].segments[0];
        let mw: Vec<_> = zero.events_on(Channel::Mw).collect();
        assert_eq!(mw.len(), 3);
        assert_eq!(mw[0].end_ns(), mw[1].t_start_ns);
        assert_eq!(mw[1].end_ns(), mw[2].t_start_ns);
        let phases: Vec<f64> = mw.iter().map(|e| e.attributes.phase.unwrap()).collect();
        assert_eq!(phases, vec![0.0, 0.5 * PI, 0.0]);
        for s in &seqs {
            assert_eq!(s.segments[0].on_time_ns(Channel::Mw), 25 + 50 + 25);
            assert_eq!(s.segments[1].on_time_ns(Channel::Mw), 0);
        }
    }

    #[test]
    fn timeline_basics() {
        let empty = Sequence {
            name: "e".into(),
            segments: vec![Segment::new("A", 10_000, 1, vec![])],
        };
        let tl = render_timeline(&empty, 1e-6).unwrap();
        assert!(tl.segments[0].laser.iter().all(|&s| s == 0.0));
        assert_eq!(tl.segments[0].laser.len(), 10);

        let one = Sequence {
            name: "p".into(),
            segments: vec![Segment::new(
                "A",
                20_000,
                1,
                vec![PulseEvent::laser(2_000, 5_000, 8.0)],
            )],
        };
        let tl = render_timeline(&one, 1e-6).unwrap();
        assert_eq!(tl.segments[0].laser.iter().filter(|&&s| s > 0.0).count(), 5);

        let odd = Sequence {
            name: "p".into(),
            segments: vec![Segment::new(
                "A",
                20_000,
                1,
                vec![PulseEvent::laser(2_500, 5_000, 8.0)],
            )],
        };
        assert!(matches!(
            render_timeline(&odd, 1e-6),
            Err(SequenceError::Misaligned { event: 0, .. })
        ));
    }

    #[test]
    fn timeline_conserves_on_time() {
        let t = PulsedTiming::default();
        for s in gen_cpmg(&[0.0, 1e-6, 3e-6], &t, 10e6).unwrap() {
            let tl = render_timeline(&s, 1e-9).unwrap();
            for (seg, w) in s.segments.iter().zip(&tl.segments) {
                for ch in Channel::ALL {
                    let sampled = w.channel(ch).iter().filter(|&&v| v > 0.0).count() as f64 * tl.dt;
                    let programmed = seg.on_time_ns(ch) as f64 * 1e-9;
                    assert!((sampled - programmed).abs() <= 0.5 * tl.dt);
                }
            }
        }
    }

    fn round_trip(seq: &Sequence) {
        let text = print_sequence(seq);
        let back = parse_sequence(&text).unwrap();
        assert_eq!(&back, seq, "{text}");
        assert_eq!(print_sequence(&back), text);
    }

    #[test]
    fn printer_round_trips_generators() {
        let t = PulsedTiming::default();
        for s in gen_cpmg(&[0.0, 1.3e-6], &t, 7.3e6).unwrap() {
            round_trip(&s);
        }
        for s in gen_rabi(&[0.0, 37e-9], &t, 0.37).unwrap() {
            round_trip(&s);
        }
        round_trip(&gen_plsd(123_456.0, 0.31, 7.5, true).unwrap());
        round_trip(&gen_odmr(&[2.87e9], false, 8.0).unwrap()[0].1);
    }

    #[test]
    fn canonical_golden() {
        let s = gen_plsd(1e3, 0.25, 8.0, false).unwrap();
        assert_eq!(
            print_sequence(&s),
            "sequence plsd\nsegment A 1000000ns repeat 200\n  laser @0ns 250000ns power=8mW\n\
             segment B 1000000ns repeat 200\n  laser @500000ns 250000ns power=8mW\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn plsd_segment_b_is_half_period_shift(f in 1e5f64..2e7, duty in 0.01f64..0.99) {
            let s = gen_plsd(f, duty, 8.0, false).unwrap();
            let tl = render_timeline(&s, 1e-9).unwrap();
            let (a, b) = (&tl.segments[0].laser, &tl.segments[1].laser);
            let half = a.len() / 2;
            prop_assert_eq!(a.len() % 2, 0);
            for k in 0..a.len() {
                prop_assert_eq!(b[(k + half) % a.len()], a[k]);
            }
        }

        #[test]
        fn generators_validate_and_round_trip(tau in 0.0f64..5e-6, rabi in 1e6f64..4e7, amp in 0.0f64..2.0) {
            let t = PulsedTiming::default();
            for s in gen_cpmg(&[tau], &t, rabi).unwrap().iter().chain(gen_rabi(&[tau], &t, amp).unwrap().iter()) {
                prop_assert!(validate_sequence(s).is_empty());
                let back = parse_sequence(&print_sequence(s)).unwrap();
                prop_assert_eq!(&back, s);
            }
        }
    }
}
