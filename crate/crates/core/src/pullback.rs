//! Pullback records and the newline-delimited JSON feature file format.
//!
//! Each line of a feature file is one frame:
//!
//! ```text
//! {"frame_index":0,"position_mm":0.0,"is_ed":true,"lumen_area_mm2":7.1,
//!  "lumen_radius_profile":[...180 reals...],
//!  "side_branch":{"bin_start":10,"bin_end":20,"area":0.3},
//!  "calcium_arc":[...180 values of 0 or 1...]}
//! ```
//!
//! Unknown keys are rejected. `side_branch` may be `null`. Bin `b` covers the
//! direction `2b` degrees; a branch whose `bin_start > bin_end` wraps through
//! bin 0.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Angular bins per frame (2 degree increments).
pub const N_BINS: usize = 180;

/// Degrees covered by one angular bin.
pub const BIN_DEG: f64 = 360.0 / N_BINS as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ivus,
    Oct,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Ivus => write!(f, "IVUS"),
            Modality::Oct => write!(f, "OCT"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideBranch {
    pub bin_start: usize,
    pub bin_end: usize,
    /// Normalized fraction of the maximum lumen area.
    pub area: f64,
}

impl SideBranch {
    /// Whether `bin` lies in the circular, inclusive range `[bin_start, bin_end]`.
    pub fn covers(&self, bin: usize) -> bool {
        if self.bin_start <= self.bin_end {
            (self.bin_start..=self.bin_end).contains(&bin)
        } else {
            bin >= self.bin_start || bin <= self.bin_end
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFrame {
    pub frame_index: usize,
    pub position_mm: f64,
    pub is_ed: bool,
    pub lumen_area_mm2: f64,
    pub lumen_radius_profile: Vec<f64>,
    pub side_branch: Option<SideBranch>,
    #[serde(serialize_with = "bits_out", deserialize_with = "bits_in")]
    pub calcium_arc: Vec<bool>,
}

impl RawFrame {
    pub fn has_side_branch(&self) -> bool {
        self.side_branch.is_some_and(|sb| sb.area > 0.0)
    }

    pub fn calcium_fraction(&self) -> f64 {
        self.calcium_arc.iter().filter(|&&c| c).count() as f64 / N_BINS as f64
    }
}

fn bits_out<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(bits.iter().map(|&b| u8::from(b)))
}

fn bits_in<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
    let raw = Vec::<u8>::deserialize(d)?;
    raw.into_iter()
        .map(|v| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!(
                "calcium_arc entries must be 0 or 1, got {other}"
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pullback {
    pub modality: Modality,
    pub frames: Vec<RawFrame>,
    pub frame_spacing_mm: f64,
}

impl Pullback {
    /// Builds a pullback, deriving the nominal spacing from the frame positions.
    pub fn new(modality: Modality, frames: Vec<RawFrame>) -> Self {
        let frame_spacing_mm = nominal_spacing(&frames);
        Pullback {
            modality,
            frames,
            frame_spacing_mm,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn ed_count(&self) -> usize {
        self.frames.iter().filter(|f| f.is_ed).count()
    }
}

/// Mean inter-frame distance; 1.0 when positions do not advance.
fn nominal_spacing(frames: &[RawFrame]) -> f64 {
    match (frames.first(), frames.last()) {
        (Some(a), Some(b)) if frames.len() > 1 && b.position_mm > a.position_mm => {
            (b.position_mm - a.position_mm) / (frames.len() - 1) as f64
        }
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TooFewFrames,
    MissingEdFlags,
    NonPositiveSpacing,
    NonMonotoneIndex,
    NonMonotonePosition,
    NonFiniteValue,
    NonPositiveLumenArea,
    RadiusProfileLength,
    NonPositiveRadius,
    CalciumArcLength,
    SideBranchBinOutOfRange,
    NegativeSideBranchArea,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// `None` for pullback-level violations.
    pub frame_index: Option<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.frame_index {
            Some(i) => write!(f, "frame {i}: {:?}: {}", self.kind, self.detail),
            None => write!(f, "{:?}: {}", self.kind, self.detail),
        }
    }
}

fn frame_violations(frame: &RawFrame, out: &mut Vec<Violation>) {
    let at = Some(frame.frame_index);
    let mut push = |kind, detail: String| {
        out.push(Violation {
            frame_index: at,
            kind,
            detail,
        })
    };

    if !frame.position_mm.is_finite() || !frame.lumen_area_mm2.is_finite() {
        push(ViolationKind::NonFiniteValue, "position or lumen area is not finite".into());
    }
    if !(frame.lumen_area_mm2 > 0.0) {
        push(
            ViolationKind::NonPositiveLumenArea,
            format!("lumen_area_mm2 = {}", frame.lumen_area_mm2),
        );
    }
    if frame.lumen_radius_profile.len() != N_BINS {
        push(
            ViolationKind::RadiusProfileLength,
            format!("{} entries, expected {N_BINS}", frame.lumen_radius_profile.len()),
        );
    }
    if let Some(bin) = frame
        .lumen_radius_profile
        .iter()
        .position(|r| !(r.is_finite() && *r > 0.0))
    {
        push(
            ViolationKind::NonPositiveRadius,
            format!("radius at bin {bin} is {}", frame.lumen_radius_profile[bin]),
        );
    }
    if frame.calcium_arc.len() != N_BINS {
        push(
            ViolationKind::CalciumArcLength,
            format!("{} entries, expected {N_BINS}", frame.calcium_arc.len()),
        );
    }
    if let Some(sb) = frame.side_branch {
        if sb.bin_start >= N_BINS || sb.bin_end >= N_BINS {
            push(
                ViolationKind::SideBranchBinOutOfRange,
                format!("bins {}..{}", sb.bin_start, sb.bin_end),
            );
        }
        if !(sb.area >= 0.0 && sb.area.is_finite()) {
            push(ViolationKind::NegativeSideBranchArea, format!("area = {}", sb.area));
        }
    }
}

/// Lists every invariant violation. Pullback-level violations come first,
/// then per-frame violations in frame order, then ordering violations.
pub fn validate(p: &Pullback) -> Vec<Violation> {
    let mut out = Vec::new();
    let global = |kind, detail: String| Violation {
        frame_index: None,
        kind,
        detail,
    };

    if p.frames.len() < 2 {
        out.push(global(
            ViolationKind::TooFewFrames,
            format!("{} frames, need at least 2", p.frames.len()),
        ));
    }
    if p.modality == Modality::Ivus && p.ed_count() < 2 {
        out.push(global(
            ViolationKind::MissingEdFlags,
            format!("{} end-diastolic frames, need at least 2", p.ed_count()),
        ));
    }
    if !(p.frame_spacing_mm > 0.0 && p.frame_spacing_mm.is_finite()) {
        out.push(global(
            ViolationKind::NonPositiveSpacing,
            format!("frame_spacing_mm = {}", p.frame_spacing_mm),
        ));
    }

    for frame in &p.frames {
        frame_violations(frame, &mut out);
    }

    for pair in p.frames.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.frame_index <= a.frame_index {
            out.push(Violation {
                frame_index: Some(b.frame_index),
                kind: ViolationKind::NonMonotoneIndex,
                detail: format!("frame_index {} follows {}", b.frame_index, a.frame_index),
            });
        }
        if b.position_mm < a.position_mm {
            out.push(Violation {
                frame_index: Some(b.frame_index),
                kind: ViolationKind::NonMonotonePosition,
                detail: format!("position {} mm follows {} mm", b.position_mm, a.position_mm),
            });
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum PullbackError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("pullback contains no frames")]
    EmptyPullback,
    #[error("duplicate or non-increasing frame_index {frame_index}")]
    NonMonotoneIndex { frame_index: usize },
    #[error("IVUS pullback has {found} end-diastolic frames, need at least 2")]
    MissingEdFlags { found: usize },
    #[error("invalid pullback: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// Parses a feature file body. Frames are sorted by `frame_index` before validation.
pub fn parse_pullback_str(text: &str, modality: Modality) -> Result<Pullback, PullbackError> {
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let frame: RawFrame =
            serde_json::from_str(line).map_err(|e| PullbackError::MalformedRecord {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if frame.lumen_radius_profile.len() != N_BINS || frame.calcium_arc.len() != N_BINS {
            return Err(PullbackError::MalformedRecord {
                line: lineno + 1,
                reason: format!(
                    "lumen_radius_profile has {} entries and calcium_arc has {}, expected {N_BINS}",
                    frame.lumen_radius_profile.len(),
                    frame.calcium_arc.len()
                ),
            });
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(PullbackError::EmptyPullback);
    }
    frames.sort_by_key(|f| f.frame_index);

    let pullback = Pullback::new(modality, frames);
    let violations = validate(&pullback);
    if let Some(v) = violations
        .iter()
        .find(|v| v.kind == ViolationKind::NonMonotoneIndex)
    {
        return Err(PullbackError::NonMonotoneIndex {
            frame_index: v.frame_index.unwrap_or_default(),
        });
    }
    if violations
        .iter()
        .any(|v| v.kind == ViolationKind::MissingEdFlags)
    {
        return Err(PullbackError::MissingEdFlags {
            found: pullback.ed_count(),
        });
    }
    if !violations.is_empty() {
        return Err(PullbackError::Invalid(violations));
    }
    Ok(pullback)
}

pub fn parse_pullback(path: impl AsRef<Path>, modality: Modality) -> Result<Pullback, PullbackError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PullbackError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pullback_str(&text, modality)
}

/// Writes one JSON object per frame, in frame order.
pub fn write_pullback<W: Write>(p: &Pullback, mut out: W) -> io::Result<()> {
    for frame in &p.frames {
        serde_json::to_writer(&mut out, frame)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn serialize_pullback(p: &Pullback) -> String {
    let mut buf = Vec::new();
    write_pullback(p, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn frame(index: usize, is_ed: bool) -> RawFrame {
        RawFrame {
            frame_index: index,
            position_mm: index as f64 * 0.5,
            is_ed,
            lumen_area_mm2: 6.0,
            lumen_radius_profile: vec![1.4; N_BINS],
            side_branch: None,
            calcium_arc: vec![false; N_BINS],
        }
    }

    fn body(frames: &[RawFrame]) -> String {
        serialize_pullback(&Pullback::new(Modality::Ivus, frames.to_vec()))
    }

    #[test]
    fn parses_minimal_ivus_file() {
        let text = body(&[frame(0, true), frame(1, false), frame(2, true)]);
        let p = parse_pullback_str(&text, Modality::Ivus).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.ed_count(), 2);
        assert!((p.frame_spacing_mm - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(
            parse_pullback_str("", Modality::Oct),
            Err(PullbackError::EmptyPullback)
        ));
        assert!(matches!(
            parse_pullback_str("\n  \n", Modality::Oct),
            Err(PullbackError::EmptyPullback)
        ));
    }

    #[test]
    fn short_calcium_arc_is_malformed() {
        let mut f = frame(1, true);
        f.calcium_arc.pop();
        let text = body(&[frame(0, true), f]);
        match parse_pullback_str(&text, Modality::Ivus) {
            Err(PullbackError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_bits_are_malformed() {
        let text = body(&[frame(0, true)]).replace("\"is_ed\"", "\"colour\":1,\"is_ed\"");
        assert!(matches!(
            parse_pullback_str(&text, Modality::Ivus),
            Err(PullbackError::MalformedRecord { .. })
        ));
        let text = body(&[frame(0, true)]).replacen("\"calcium_arc\":[0", "\"calcium_arc\":[2", 1);
        assert!(matches!(
            parse_pullback_str(&text, Modality::Ivus),
            Err(PullbackError::MalformedRecord { .. })
        ));
    }

    #[test]
    fn frames_are_sorted_by_index() {
        let text = body(&[frame(2, true), frame(0, true), frame(1, false)]);
        let p = parse_pullback_str(&text, Modality::Ivus).unwrap();
        let idx: Vec<_> = p.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn duplicate_index_and_missing_ed_flags() {
        let text = body(&[frame(0, true), frame(1, true), frame(1, false)]);
        assert!(matches!(
            parse_pullback_str(&text, Modality::Ivus),
            Err(PullbackError::NonMonotoneIndex { frame_index: 1 })
        ));
        let text = body(&[frame(0, true), frame(1, false)]);
        assert!(matches!(
            parse_pullback_str(&text, Modality::Ivus),
            Err(PullbackError::MissingEdFlags { found: 1 })
        ));
        // OCT ignores ED flags
        assert!(parse_pullback_str(&text, Modality::Oct).is_ok());
    }

    #[test]
    fn validate_reports_frame_level_violations() {
        let frames: Vec<_> = (0..8).map(|i| frame(i, true)).collect();
        let mut p = Pullback::new(Modality::Ivus, frames);
        assert!(validate(&p).is_empty());

        p.frames[5].lumen_area_mm2 = 0.0;
        let v = validate(&p);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].frame_index, Some(5));
        assert_eq!(v[0].kind, ViolationKind::NonPositiveLumenArea);
    }

    #[test]
    fn validate_flags_duplicates_and_bad_side_branches() {
        let mut frames: Vec<_> = (0..4).map(|i| frame(i, true)).collect();
        frames[2].frame_index = 1;
        frames[3].side_branch = Some(SideBranch {
            bin_start: 200,
            bin_end: 3,
            area: -0.1,
        });
        frames[3].lumen_radius_profile[7] = 0.0;
        let p = Pullback::new(Modality::Ivus, frames);
        let kinds: Vec<_> = validate(&p).into_iter().map(|v| v.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ViolationKind::NonPositiveRadius,
                ViolationKind::SideBranchBinOutOfRange,
                ViolationKind::NegativeSideBranchArea,
                ViolationKind::NonMonotoneIndex,
            ]
        );
    }

    #[test]
    fn side_branch_ranges_wrap() {
        let sb = SideBranch {
            bin_start: 175,
            bin_end: 5,
            area: 0.2,
        };
        let covered: Vec<_> = (0..N_BINS).filter(|&b| sb.covers(b)).collect();
        assert_eq!(covered, vec![0, 1, 2, 3, 4, 5, 175, 176, 177, 178, 179]);
    }
}
